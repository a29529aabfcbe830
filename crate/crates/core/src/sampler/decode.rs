use std::path::Path;

use rand::Rng as _;
use serde::Serialize;

use super::{cfg_scores, mask_counts, mask_schedule, sample_mask, MaskPair, SamplerConfig};
use crate::error::{Error, Result};
use crate::parallel::join;
use crate::rng::Rng;
use crate::structure::{scores_from_maps, LayerMaps};
use crate::tensor::argmax;
use crate::tokens::TokenGrid;
use crate::transformer::{LayerSet, TransformerModel};

/// Added to the confidence of tokens that were already committed before this
/// iteration, so confidence rejection reopens freshly drawn tokens first.
const COMMITTED_BONUS: f64 = 1.0e4;

/// Per-iteration summary, one JSON line in a trace file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub t: usize,
    pub gamma: f64,
    pub structure_masked: usize,
    pub confidence_masked: usize,
    pub masked: usize,
    /// Mean structure distance of `ȳ_t` to the guide, when computed.
    pub mean_structure: Option<f64>,
    /// Mean guided confidence over all positions.
    pub mean_confidence: f64,
}

/// Everything an observer sees at the end of iteration `t`.
pub struct Step<'a> {
    pub record: &'a IterationRecord,
    pub masks: &'a MaskPair,
    /// `ȳ_t`: the input with every masked position drawn.
    pub sampled: &'a [u32],
    /// `y_t`: `ȳ_t` with the positions in `m_t` masked again.
    pub next: &'a [u32],
}

pub fn write_trace(records: &[IterationRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::Input(e.to_string()))?;
        buf.push(b'\n');
    }
    crate::tokens::raster::write_file(path, &buf)
}

struct Setup {
    random_class: usize,
    n: usize,
    vocab: usize,
    mask: u32,
}

fn setup(model: &TransformerModel<f32>, class_label: usize, config: &SamplerConfig, rng: &mut Rng) -> Result<Setup> {
    config.validate()?;
    let classes = model.num_classes();
    if class_label >= classes {
        return Err(Error::input(format!("class {class_label} is out of range [0, {classes})")));
    }
    // r is drawn once per run, uniformly over the other classes
    let random_class = if classes > 1 {
        let r = rng.gen_range(0..classes - 1);
        if r >= class_label {
            r + 1
        } else {
            r
        }
    } else {
        class_label
    };
    Ok(Setup {
        random_class,
        n: model.seq_len(),
        vocab: model.vocab(),
        mask: model.vocab() as u32,
    })
}

/// Conditional logits, plus random-class logits when guidance is active.
fn guided_logits(
    model: &TransformerModel<f32>,
    tokens: &[u32],
    class_label: usize,
    random_class: usize,
    beta: f64,
) -> Result<(Vec<f32>, Option<Vec<f32>>)> {
    let (cond, rand) = if beta != 0.0 {
        let (c, r) = join(
            || model.logits(tokens, class_label),
            || model.logits(tokens, random_class),
        );
        (c?, Some(r?))
    } else {
        (model.logits(tokens, class_label)?, None)
    };
    for l in std::iter::once(&cond).chain(rand.as_ref()) {
        if let Some(i) = l.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite logit at position {} (token slot {})",
                i / model.vocab(),
                i % model.vocab()
            )));
        }
    }
    Ok((cond, rand))
}

/// Draws every masked position from `softmax(logits / temperature)`; committed
/// tokens are copied. Positions are visited in index order.
pub(crate) fn draw_tokens(tokens: &[u32], logits: &[f32], vocab: usize, temperature: f64, rng: &mut Rng) -> Vec<u32> {
    let mask = vocab as u32;
    tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            if t != mask {
                return t;
            }
            let row = &logits[i * vocab..(i + 1) * vocab];
            if temperature == 0.0 {
                return argmax(row) as u32;
            }
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let weights: Vec<f64> = row.iter().map(|&l| ((l as f64 - max) / temperature).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            for (j, w) in weights.iter().enumerate() {
                if u < *w {
                    return j as u32;
                }
                u -= w;
            }
            (vocab - 1) as u32
        })
        .collect()
}

fn confidence(
    prev: &[u32],
    sampled: &[u32],
    cond: &[f32],
    rand: Option<&Vec<f32>>,
    beta: f64,
    mask: u32,
) -> Result<(Vec<f64>, f64)> {
    let scores = match rand {
        Some(r) => cfg_scores(cond, r, sampled, beta)?,
        None => cfg_scores(cond, cond, sampled, 0.0)?,
    };
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let ranked = scores
        .iter()
        .zip(prev)
        .map(|(&s, &p)| if p == mask { -s } else { -(s + COMMITTED_BONUS) })
        .collect();
    Ok((ranked, mean))
}

fn remask(sampled: &[u32], m: &[bool], mask: u32) -> Vec<u32> {
    sampled.iter().zip(m).map(|(&t, &r)| if r { mask } else { t }).collect()
}

/// Fills positions still masked after the last iteration with their argmax
/// token under the class-conditional logits.
fn complete(model: &TransformerModel<f32>, tokens: &mut [u32], class_label: usize) -> Result<()> {
    let mask = model.vocab() as u32;
    if tokens.iter().all(|&t| t != mask) {
        return Ok(());
    }
    let (logits, _) = guided_logits(model, tokens, class_label, class_label, 0.0)?;
    let k = model.vocab();
    for (i, t) in tokens.iter_mut().enumerate() {
        if *t == mask {
            *t = argmax(&logits[i * k..(i + 1) * k]) as u32;
        }
    }
    Ok(())
}

fn output(model: &TransformerModel<f32>, tokens: Vec<u32>, class_label: usize) -> Result<TokenGrid> {
    let c = &model.config;
    TokenGrid::new(c.grid_height, c.grid_width, c.vocab, tokens, class_label)
}

/// Structure-guided sampling toward the layout of `sketch`.
pub fn masksketch_sample(
    model: &TransformerModel<f32>,
    sketch: &TokenGrid,
    class_label: usize,
    config: &SamplerConfig,
    rng: &mut Rng,
) -> Result<TokenGrid> {
    masksketch_sample_observed(model, sketch, class_label, config, rng, &mut |_| {})
}

/// [`masksketch_sample`] with a callback after every iteration.
pub fn masksketch_sample_observed(
    model: &TransformerModel<f32>,
    sketch: &TokenGrid,
    class_label: usize,
    config: &SamplerConfig,
    rng: &mut Rng,
    observer: &mut dyn FnMut(&Step<'_>),
) -> Result<TokenGrid> {
    model.check_grid(sketch)?;
    if sketch.masked_count() > 0 {
        return Err(Error::input("the guide grid must be fully unmasked"));
    }
    let layers = LayerSet::new(config.layers.iter().copied(), model.config.num_layers)?;
    let s = setup(model, class_label, config, rng)?;
    let guide = if config.lambda_s > 0.0 {
        Some(LayerMaps {
            maps: model.attn_map_tokens(&sketch.tokens, class_label, &layers)?,
            layers: layers.clone(),
            seq_len: s.n,
        })
    } else {
        None
    };

    let mut y = vec![s.mask; s.n];
    for t in (0..config.iterations).rev() {
        let gamma = mask_schedule(t, config.iterations, config.gamma_start, config.gamma_end)?;
        let (cond, rand) = guided_logits(model, &y, class_label, s.random_class, config.guidance_scale)?;
        let sampled = draw_tokens(&y, &cond, s.vocab, config.token_temperature, rng);
        let (conf, mean_confidence) = confidence(&y, &sampled, &cond, rand.as_ref(), config.guidance_scale, s.mask)?;
        let (ks, kc) = mask_counts(config.lambda_s, gamma, s.n);

        let (structure, mean_structure) = match (&guide, ks) {
            (Some(guide), ks) if ks > 0 => {
                let cand = LayerMaps {
                    maps: model.attn_map_tokens(&sampled, class_label, &layers)?,
                    layers: layers.clone(),
                    seq_len: s.n,
                };
                let scores = scores_from_maps(guide, &cand)?;
                let mean = scores.mean();
                (sample_mask(&scores.scores, ks, config.gumbel_temperature, rng)?, Some(mean))
            }
            _ => (vec![false; s.n], None),
        };
        let masks = MaskPair {
            structure,
            confidence: sample_mask(&conf, kc, config.gumbel_temperature, rng)?,
        };
        let next = remask(&sampled, &masks.combined(), s.mask);
        let record = IterationRecord {
            t,
            gamma,
            structure_masked: masks.structure_count(),
            confidence_masked: masks.confidence_count(),
            masked: masks.combined_count(),
            mean_structure,
            mean_confidence,
        };
        observer(&Step {
            record: &record,
            masks: &masks,
            sampled: &sampled,
            next: &next,
        });
        y = next;
    }
    complete(model, &mut y, class_label)?;
    output(model, y, class_label)
}

/// Confidence-only parallel decoding (no guide). Consumes randomness in the
/// same order as [`masksketch_sample`] with `lambda_s = 0`.
pub fn maskgit_sample(
    model: &TransformerModel<f32>,
    class_label: usize,
    config: &SamplerConfig,
    rng: &mut Rng,
) -> Result<TokenGrid> {
    let s = setup(model, class_label, config, rng)?;
    let mut y = vec![s.mask; s.n];
    for t in (0..config.iterations).rev() {
        let gamma = mask_schedule(t, config.iterations, config.gamma_start, config.gamma_end)?;
        let (cond, rand) = guided_logits(model, &y, class_label, s.random_class, config.guidance_scale)?;
        let sampled = draw_tokens(&y, &cond, s.vocab, config.token_temperature, rng);
        let (conf, _) = confidence(&y, &sampled, &cond, rand.as_ref(), config.guidance_scale, s.mask)?;
        let k = ((gamma * s.n as f64).floor() as usize).min(s.n);
        let m = sample_mask(&conf, k, config.gumbel_temperature, rng)?;
        y = remask(&sampled, &m, s.mask);
    }
    complete(model, &mut y, class_label)?;
    output(model, y, class_label)
}
