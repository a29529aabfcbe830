//! Multi-trial sampling and selection: each sketch is sampled once per
//! guidance scale, then the candidate maximizing
//! `(1 - Ŝ)^exponent · R̂` is kept, where `Ŝ` is the min-max normalized proxy
//! structure distance to the guide and `R̂` the normalized proxy class score.

mod embedder;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::prelude::*;
use crate::rng::{derive_seed, rng_from_seed};
use crate::sampler::{masksketch_sample_observed, refine, IterationRecord, RefineConfig, SamplerConfig};
use crate::tokens::{decode_tokens, Codebook, Raster, TokenGrid};
use crate::transformer::TransformerModel;

pub use embedder::{train_embedder, EmbedderArch, EmbedderConfig, EmbedderRecord, ProxyEmbedder, CHECKPOINT_KIND};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RejectionConfig {
    /// One trial per entry.
    pub guidance_scales: Vec<f64>,
    /// Exponent on `(1 - Ŝ)` in the selection score.
    pub exponent: f64,
}

impl Default for RejectionConfig {
    fn default() -> Self {
        RejectionConfig {
            guidance_scales: vec![0.0, 0.05, 0.1, 0.25],
            exponent: 2.0,
        }
    }
}

impl RejectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.guidance_scales.is_empty() {
            return Err(Error::config("rejection.guidance_scales is empty"));
        }
        if self.guidance_scales.iter().any(|b| !b.is_finite()) {
            return Err(Error::config("rejection.guidance_scales must be finite"));
        }
        if !(self.exponent >= 0.0 && self.exponent.is_finite()) {
            return Err(Error::config("rejection.exponent must be a finite value >= 0"));
        }
        Ok(())
    }
}

/// Mean absolute difference of feature-block activations.
pub fn proxy_struct_distance(guide: &Raster, candidate: &Raster, embedder: &ProxyEmbedder) -> Result<f64> {
    if guide.width != candidate.width || guide.height != candidate.height {
        return Err(Error::shape(format!(
            "guide is {}x{}, candidate is {}x{}",
            guide.width, guide.height, candidate.width, candidate.height
        )));
    }
    let a = embedder.features(guide)?;
    let b = embedder.features(candidate)?;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.len() as f64)
}

/// Embedder probability of `class_label`.
pub fn proxy_class_score(class_label: usize, candidate: &Raster, embedder: &ProxyEmbedder) -> Result<f64> {
    if class_label >= embedder.num_classes() {
        return Err(Error::input(format!(
            "class {class_label} is out of range [0, {})",
            embedder.num_classes()
        )));
    }
    Ok(embedder.class_probs(candidate)?[class_label])
}

/// Maps values to `[0, 1]` by `(v - min) / (max - min)`; all-equal input maps to 0.5.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub grid: TokenGrid,
    pub guidance_scale: f64,
    pub seed: u64,
    pub trace: Vec<IterationRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
}

impl TrialSet {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }
}

/// Raw and normalized scores of every trial and the selected index.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub structure: Vec<f64>,
    pub class_score: Vec<f64>,
    pub structure_norm: Vec<f64>,
    pub class_norm: Vec<f64>,
    pub score: Vec<f64>,
    pub best: usize,
}

impl Selection {
    /// Combines raw scores; ties go to the lowest trial index.
    pub fn from_raw(structure: Vec<f64>, class_score: Vec<f64>, exponent: f64) -> Result<Self> {
        if structure.is_empty() || structure.len() != class_score.len() {
            return Err(Error::config(format!(
                "selection needs at least one trial ({} structure and {} class scores)",
                structure.len(),
                class_score.len()
            )));
        }
        let structure_norm = min_max_normalize(&structure);
        let class_norm = min_max_normalize(&class_score);
        let score: Vec<f64> = structure_norm
            .iter()
            .zip(&class_norm)
            .map(|(s, r)| (1.0 - s).powf(exponent) * r)
            .collect();
        let mut best = 0;
        for (i, v) in score.iter().enumerate() {
            if *v > score[best] {
                best = i;
            }
        }
        Ok(Selection {
            structure,
            class_score,
            structure_norm,
            class_norm,
            score,
            best,
        })
    }
}

/// Scores every candidate against the guide raster.
pub fn score_trials(
    trials: &TrialSet,
    guide: &Raster,
    class_label: usize,
    embedder: &ProxyEmbedder,
    codebook: &Codebook,
    exponent: f64,
) -> Result<Selection> {
    if trials.is_empty() {
        return Err(Error::config("no trials to select from"));
    }
    let rasters = trials
        .trials
        .iter()
        .map(|t| decode_tokens(&t.grid, codebook))
        .collect::<Result<Vec<_>>>()?;
    let structure = rasters
        .iter()
        .map(|r| proxy_struct_distance(guide, r, embedder))
        .collect::<Result<Vec<_>>>()?;
    let class_score = rasters
        .iter()
        .map(|r| proxy_class_score(class_label, r, embedder))
        .collect::<Result<Vec<_>>>()?;
    Selection::from_raw(structure, class_score, exponent)
}

pub fn select_best(
    trials: &TrialSet,
    guide: &Raster,
    class_label: usize,
    embedder: &ProxyEmbedder,
    codebook: &Codebook,
    exponent: f64,
) -> Result<TokenGrid> {
    let s = score_trials(trials, guide, class_label, embedder, codebook, exponent)?;
    Ok(trials.trials[s.best].grid.clone())
}

/// One guided sample per guidance scale, in parallel. Trial `i` uses seed
/// `derive_seed(seed, i)`, so results do not depend on scheduling.
pub fn run_trials(
    model: &TransformerModel<f32>,
    sketch: &TokenGrid,
    class_label: usize,
    base: &SamplerConfig,
    guidance_scales: &[f64],
    refinement: Option<&RefineConfig>,
    seed: u64,
) -> Result<TrialSet> {
    if guidance_scales.is_empty() {
        return Err(Error::config("at least one guidance scale is required"));
    }
    let trials = guidance_scales
        .par_iter()
        .enumerate()
        .map(|(i, &beta)| {
            let trial_seed = derive_seed(seed, i as u64);
            let mut rng = rng_from_seed(trial_seed);
            let config = SamplerConfig {
                guidance_scale: beta,
                ..base.clone()
            };
            let mut trace = Vec::new();
            let mut grid =
                masksketch_sample_observed(model, sketch, class_label, &config, &mut rng, &mut |s| {
                    trace.push(s.record.clone())
                })?;
            if let Some(r) = refinement {
                grid = refine(model, &grid, class_label, r, &mut rng)?;
            }
            Ok(Trial {
                grid,
                guidance_scale: beta,
                seed: trial_seed,
                trace,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrialSet { trials })
}

/// Per-trial score report.
pub fn selection_csv(trials: &TrialSet, s: &Selection) -> String {
    let mut out = String::from("trial,guidance_scale,seed,structure_distance,class_score,structure_norm,class_norm,score,selected\n");
    for (i, t) in trials.trials.iter().enumerate() {
        out.push_str(&format!(
            "{i},{},{},{:.9},{:.9},{:.9},{:.9},{:.9},{}\n",
            t.guidance_scale,
            t.seed,
            s.structure[i],
            s.class_score[i],
            s.structure_norm[i],
            s.class_norm[i],
            s.score[i],
            (i == s.best) as u8
        ));
    }
    out
}
