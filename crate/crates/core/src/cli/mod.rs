//! Subcommand implementations. Every command writes into one output
//! directory and echoes the resolved configuration there as `config.toml`.

pub mod config;

use std::path::{Path, PathBuf};

use serde::Serialize;

pub use config::{extract_overrides, RunConfig};

use crate::error::{Error, Result};
use crate::parallel::prelude::*;
use crate::rejection::{
    proxy_class_score, proxy_struct_distance, run_trials, score_trials, selection_csv, train_embedder, ProxyEmbedder,
    Selection,
};
use crate::rng::{derive_seed, rng_from_seed, STREAM_DATA, STREAM_EMBEDDER, STREAM_EVAL, STREAM_INIT, STREAM_SAMPLE, STREAM_TRAIN};
use crate::sampler::{masksketch_sample, write_trace, SamplerConfig};
use crate::structure::{export_heatmaps, export_pca, structure_scores_for, LayerMaps};
use crate::tokens::dataset::{load_dataset, tokenize_sample, write_dataset};
use crate::tokens::raster::{montage, save_pgm, save_png, write_file};
use crate::tokens::{decode_tokens, encode_raster, generate_dataset, load_raster, Codebook, Raster, Split, TokenGrid};
use crate::training::{evaluate_accuracy, majority_token, train, AccuracyReport};
use crate::transformer::{LayerSet, TransformerModel};

pub const CONFIG_ECHO: &str = "config.toml";

fn prepare(dir: &Path, config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::at_path(dir, e))?;
    write_file(&dir.join(CONFIG_ECHO), config.to_toml().as_bytes())
}

fn out_dir(config: &RunConfig, out: Option<&Path>, command: &str) -> PathBuf {
    out.map(Path::to_path_buf).unwrap_or_else(|| config.paths.out_dir.join(command))
}

fn save_image(config: &RunConfig, raster: &Raster, dir: &Path, stem: &str) -> Result<()> {
    save_pgm(raster, &dir.join(format!("{stem}.pgm")))?;
    if config.output.png {
        save_png(raster, &dir.join(format!("{stem}.png")))?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Input(e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn load_model(config: &RunConfig) -> Result<TransformerModel<f32>> {
    let model = TransformerModel::<f32>::load(&config.paths.model)?;
    if model.config != config.model {
        return Err(Error::config(format!(
            "{} was trained with a different [model] section",
            config.paths.model.display()
        )));
    }
    Ok(model)
}

fn load_embedder(config: &RunConfig) -> Result<ProxyEmbedder> {
    let e = ProxyEmbedder::load(&config.paths.embedder)?;
    if e.arch.side != config.data.image_side || e.num_classes() != config.data.num_classes {
        return Err(Error::config(format!(
            "{} does not match the [data] section",
            config.paths.embedder.display()
        )));
    }
    Ok(e)
}

/// A guide raster and its token grid.
pub struct Guide {
    pub raster: Raster,
    pub grid: TokenGrid,
}

pub fn load_guide(config: &RunConfig, path: &Path, class_label: usize) -> Result<Guide> {
    let raster = load_raster(path)?;
    let side = config.data.image_side;
    if raster.width != side || raster.height != side {
        return Err(Error::shape(format!(
            "{} is {}x{}, expected {side}x{side}",
            path.display(),
            raster.width,
            raster.height
        )));
    }
    if class_label >= config.data.num_classes {
        return Err(Error::input(format!(
            "class {class_label} is out of range [0, {})",
            config.data.num_classes
        )));
    }
    let grid = encode_raster(&raster, &Codebook::binary4(), class_label)?;
    Ok(Guide { raster, grid })
}

/// Mean pixel L1 distance over all pairs; 0 for fewer than two rasters.
pub fn pairwise_diversity(rasters: &[Raster]) -> Result<f64> {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..rasters.len() {
        for j in i + 1..rasters.len() {
            total += rasters[i].mean_abs_diff(&rasters[j])?;
            pairs += 1;
        }
    }
    Ok(if pairs == 0 { 0.0 } else { total / pairs as f64 })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn cmd_gen_data(config: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| config.paths.data_dir.clone());
    let samples = generate_dataset(&config.data, derive_seed(config.seed, STREAM_DATA))?;
    write_dataset(&dir, &samples, config.data.test_fraction)?;
    prepare(&dir, config)?;
    Ok(dir)
}

fn token_split(config: &RunConfig, split: Split) -> Result<Vec<TokenGrid>> {
    let codebook = Codebook::binary4();
    let samples = load_dataset(&config.paths.data_dir, Some(split))?;
    samples.iter().map(|s| Ok(tokenize_sample(s, &codebook)?.0)).collect()
}

/// Trains the transformer; writes `model.ckpt`, `loss.csv` and `accuracy.json`.
pub fn cmd_train(config: &RunConfig, out: Option<&Path>) -> Result<AccuracyReport> {
    let dir = out_dir(config, out, "train");
    prepare(&dir, config)?;
    let train_set = token_split(config, Split::Train)?;
    let test_set = token_split(config, Split::Test)?;
    let mut model = TransformerModel::<f32>::init(config.model.clone(), &mut rng_from_seed(derive_seed(config.seed, STREAM_INIT)))?;
    let report = train(&mut model, &train_set, &config.train, derive_seed(config.seed, STREAM_TRAIN), |r, _| {
        eprintln!("step {:>6}  loss {:.4}  masked accuracy {:.4}", r.step, r.loss, r.masked_accuracy);
        Ok(())
    })?;
    model.save(&dir.join("model.ckpt"))?;
    write_file(&dir.join("loss.csv"), report.to_csv().as_bytes())?;
    let majority = majority_token(&train_set, config.model.vocab);
    let acc = evaluate_accuracy(&model, &test_set, majority, &config.train, derive_seed(config.seed, STREAM_EVAL))?;
    write_json(&dir.join("accuracy.json"), &acc)?;
    Ok(acc)
}

#[derive(Debug, Clone, Serialize)]
pub struct EmbedderEval {
    pub held_out: usize,
    pub accuracy: f64,
    pub mean_true_class_probability: f64,
}

/// Trains the proxy embedder on filled rasters; writes `embedder.ckpt`,
/// `loss.csv` and `eval.json`.
pub fn cmd_train_embedder(config: &RunConfig, out: Option<&Path>) -> Result<EmbedderEval> {
    let dir = out_dir(config, out, "train-embedder");
    prepare(&dir, config)?;
    let pairs = |split| -> Result<Vec<(Raster, usize)>> {
        Ok(load_dataset(&config.paths.data_dir, Some(split))?
            .into_iter()
            .map(|s| (s.filled, s.class_label))
            .collect())
    };
    let (train_set, test_set) = (pairs(Split::Train)?, pairs(Split::Test)?);
    let (emb, records) = train_embedder(
        &train_set,
        config.data.num_classes,
        &config.embedder,
        derive_seed(config.seed, STREAM_EMBEDDER),
    )?;
    emb.save(&dir.join("embedder.ckpt"))?;
    let mut csv = String::from("step,loss,accuracy\n");
    for r in &records {
        csv.push_str(&format!("{},{:.6},{:.6}\n", r.step, r.loss, r.accuracy));
    }
    write_file(&dir.join("loss.csv"), csv.as_bytes())?;
    let mut correct = 0;
    let mut prob = Vec::with_capacity(test_set.len());
    for (r, c) in &test_set {
        let p = emb.class_probs(r)?;
        correct += (crate::tensor::argmax(&p) == *c) as usize;
        prob.push(p[*c]);
    }
    let eval = EmbedderEval {
        held_out: test_set.len(),
        accuracy: correct as f64 / test_set.len().max(1) as f64,
        mean_true_class_probability: mean(&prob),
    };
    write_json(&dir.join("eval.json"), &eval)?;
    Ok(eval)
}

#[derive(Debug)]
pub struct SampleOutput {
    pub dir: PathBuf,
    pub selection: Selection,
    pub selected: TokenGrid,
}

/// Runs one trial per guidance scale and keeps the best by the selection
/// score. Writes every trial raster, `selected.pgm`, `montage.pgm`,
/// `scores.csv` and, when enabled, traces and attention exports.
pub fn cmd_sample(config: &RunConfig, sketch: &Path, class_label: usize, out: Option<&Path>) -> Result<SampleOutput> {
    let dir = out_dir(config, out, "sample");
    let model = load_model(config)?;
    let embedder = load_embedder(config)?;
    let guide = load_guide(config, sketch, class_label)?;
    prepare(&dir, config)?;
    let codebook = Codebook::binary4();
    let refinement = config.refine.enabled.then_some(&config.refine);
    let trials = run_trials(
        &model,
        &guide.grid,
        class_label,
        &config.sampler,
        &config.rejection.guidance_scales,
        refinement,
        derive_seed(config.seed, STREAM_SAMPLE),
    )?;
    let selection = score_trials(&trials, &guide.raster, class_label, &embedder, &codebook, config.rejection.exponent)?;
    let mut tiles = vec![guide.raster.clone()];
    for (i, t) in trials.trials.iter().enumerate() {
        let r = decode_tokens(&t.grid, &codebook)?;
        save_image(config, &r, &dir, &format!("trial_{i:02}"))?;
        if config.output.trace {
            write_trace(&t.trace, &dir.join(format!("trace_{i:02}.jsonl")))?;
        }
        tiles.push(r);
    }
    let selected = trials.trials[selection.best].grid.clone();
    save_image(config, &tiles[selection.best + 1], &dir, "selected")?;
    save_image(config, &montage(&tiles, tiles.len())?, &dir, "montage")?;
    write_file(&dir.join("scores.csv"), selection_csv(&trials, &selection).as_bytes())?;
    if config.output.attention {
        let layers = LayerSet::new(config.sampler.layers.iter().copied(), model.config.num_layers)?;
        let maps = LayerMaps::compute(&model, &guide.grid, &layers)?;
        export_heatmaps(&maps, &dir.join("attention"))?;
        export_pca(&maps, model.config.grid_height, model.config.grid_width, &dir.join("attention"))?;
    }
    Ok(SampleOutput { dir, selection, selected })
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub layers: Vec<usize>,
    pub mean_structure_distance: f64,
    pub diversity: f64,
}

fn layers_tag(layers: &[usize]) -> String {
    layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("-")
}

/// Samples the sketch under each layer set, `sweep.seeds` times, with the
/// configured sampler otherwise unchanged. Writes one montage row per set.
pub fn cmd_layer_sweep(config: &RunConfig, sketch: &Path, class_label: usize, out: Option<&Path>) -> Result<Vec<SweepRow>> {
    let dir = out_dir(config, out, "layer-sweep");
    let model = load_model(config)?;
    let guide = load_guide(config, sketch, class_label)?;
    prepare(&dir, config)?;
    let codebook = Codebook::binary4();
    let root = derive_seed(config.seed, STREAM_SAMPLE);
    let seeds = config.sweep.seeds;
    let jobs: Vec<(usize, usize)> = (0..config.sweep.layer_sets.len())
        .flat_map(|s| (0..seeds).map(move |j| (s, j)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(s, j)| {
            let layers = &config.sweep.layer_sets[s];
            let sampler = SamplerConfig {
                layers: layers.clone(),
                ..config.sampler.clone()
            };
            let mut rng = rng_from_seed(derive_seed(derive_seed(root, s as u64), j as u64));
            let grid = masksketch_sample(&model, &guide.grid, class_label, &sampler, &mut rng)?;
            let set = LayerSet::new(layers.iter().copied(), model.config.num_layers)?;
            let d = structure_scores_for(&model, &guide.grid, &grid, &set)?.mean();
            Ok((decode_tokens(&grid, &codebook)?, d))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut tiles = Vec::new();
    let mut csv = String::from("layers,seed,structure_distance\n");
    for (s, layers) in config.sweep.layer_sets.iter().enumerate() {
        let chunk = &results[s * seeds..(s + 1) * seeds];
        let tag = layers_tag(layers);
        tiles.push(guide.raster.clone());
        for (j, (r, d)) in chunk.iter().enumerate() {
            save_image(config, r, &dir, &format!("layers_{tag}_seed{j:02}"))?;
            csv.push_str(&format!("{tag},{j},{d:.9}\n"));
            tiles.push(r.clone());
        }
        let rasters: Vec<Raster> = chunk.iter().map(|(r, _)| r.clone()).collect();
        rows.push(SweepRow {
            layers: layers.clone(),
            mean_structure_distance: mean(&chunk.iter().map(|(_, d)| *d).collect::<Vec<_>>()),
            diversity: pairwise_diversity(&rasters)?,
        });
    }
    save_image(config, &montage(&tiles, seeds + 1)?, &dir, "montage")?;
    write_file(&dir.join("samples.csv"), csv.as_bytes())?;
    let mut summary = String::from("layers,mean_structure_distance,diversity\n");
    for r in &rows {
        summary.push_str(&format!("{},{:.9},{:.9}\n", layers_tag(&r.layers), r.mean_structure_distance, r.diversity));
    }
    write_file(&dir.join("summary.csv"), summary.as_bytes())?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct TradeoffRow {
    pub guidance_scale: f64,
    pub mean_class_score: f64,
    pub mean_structure_distance: f64,
}

/// Samples the sketch at every guidance scale (`tradeoff.seeds` each, the
/// same seeds across scales) and records proxy scores per scale.
pub fn cmd_tradeoff(config: &RunConfig, sketch: &Path, class_label: usize, out: Option<&Path>) -> Result<Vec<TradeoffRow>> {
    let dir = out_dir(config, out, "tradeoff");
    let model = load_model(config)?;
    let embedder = load_embedder(config)?;
    let guide = load_guide(config, sketch, class_label)?;
    prepare(&dir, config)?;
    let codebook = Codebook::binary4();
    let root = derive_seed(config.seed, STREAM_SAMPLE);
    let seeds = config.tradeoff.seeds;
    let scales = &config.tradeoff.guidance_scales;
    let jobs: Vec<(usize, usize)> = (0..scales.len()).flat_map(|b| (0..seeds).map(move |j| (b, j))).collect();
    let results = jobs
        .par_iter()
        .map(|&(b, j)| {
            let sampler = SamplerConfig {
                guidance_scale: scales[b],
                ..config.sampler.clone()
            };
            let mut rng = rng_from_seed(derive_seed(root, j as u64));
            let grid = masksketch_sample(&model, &guide.grid, class_label, &sampler, &mut rng)?;
            let r = decode_tokens(&grid, &codebook)?;
            let c = proxy_class_score(class_label, &r, &embedder)?;
            let d = proxy_struct_distance(&guide.raster, &r, &embedder)?;
            Ok((r, c, d))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut csv = String::from("guidance_scale,seed,class_score,structure_distance\n");
    let mut rows = Vec::new();
    let mut tiles = Vec::new();
    for (b, &beta) in scales.iter().enumerate() {
        let chunk = &results[b * seeds..(b + 1) * seeds];
        tiles.push(guide.raster.clone());
        for (j, (r, c, d)) in chunk.iter().enumerate() {
            save_image(config, r, &dir, &format!("beta_{b:02}_seed{j:02}"))?;
            csv.push_str(&format!("{beta},{j},{c:.9},{d:.9}\n"));
            tiles.push(r.clone());
        }
        rows.push(TradeoffRow {
            guidance_scale: beta,
            mean_class_score: mean(&chunk.iter().map(|x| x.1).collect::<Vec<_>>()),
            mean_structure_distance: mean(&chunk.iter().map(|x| x.2).collect::<Vec<_>>()),
        });
    }
    save_image(config, &montage(&tiles, seeds + 1)?, &dir, "montage")?;
    write_file(&dir.join("samples.csv"), csv.as_bytes())?;
    let mut curve = String::from("guidance_scale,mean_class_score,mean_structure_distance\n");
    for r in &rows {
        curve.push_str(&format!("{},{:.9},{:.9}\n", r.guidance_scale, r.mean_class_score, r.mean_structure_distance));
    }
    write_file(&dir.join("curve.csv"), curve.as_bytes())?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub split: String,
    pub sketches: usize,
    pub seeds: usize,
    pub mean_structure_distance: f64,
    pub mean_class_score: f64,
    /// Mean pairwise pixel L1 between the selected outputs of different seeds.
    pub diversity: f64,
}

/// Full selection pipeline over the first `eval.num_sketches` sketches of a
/// split, `eval.seeds` times each.
pub fn cmd_eval(config: &RunConfig, split: Split, out: Option<&Path>) -> Result<EvalReport> {
    let dir = out_dir(config, out, "eval");
    let model = load_model(config)?;
    let embedder = load_embedder(config)?;
    let samples = load_dataset(&config.paths.data_dir, Some(split))?;
    prepare(&dir, config)?;
    let codebook = Codebook::binary4();
    let root = derive_seed(config.seed, STREAM_EVAL);
    let refinement = config.refine.enabled.then_some(&config.refine);
    let chosen: Vec<_> = samples.iter().take(config.eval.num_sketches).collect();
    let mut csv = String::from("sketch,class,seed,structure_distance,class_score\n");
    let (mut dists, mut scores, mut divs) = (Vec::new(), Vec::new(), Vec::new());
    for (k, s) in chosen.iter().enumerate() {
        let grid = encode_raster(&s.sketch, &codebook, s.class_label)?;
        let mut outputs = Vec::new();
        for j in 0..config.eval.seeds {
            let trials = run_trials(
                &model,
                &grid,
                s.class_label,
                &config.sampler,
                &config.rejection.guidance_scales,
                refinement,
                derive_seed(derive_seed(root, k as u64), j as u64),
            )?;
            let sel = score_trials(&trials, &s.sketch, s.class_label, &embedder, &codebook, config.rejection.exponent)?;
            let r = decode_tokens(&trials.trials[sel.best].grid, &codebook)?;
            let d = sel.structure[sel.best];
            let c = sel.class_score[sel.best];
            csv.push_str(&format!("{k},{},{j},{d:.9},{c:.9}\n", s.class_label));
            dists.push(d);
            scores.push(c);
            outputs.push(r);
        }
        divs.push(pairwise_diversity(&outputs)?);
        save_image(config, &montage(&[vec![s.sketch.clone()], outputs].concat(), config.eval.seeds + 1)?, &dir, &format!("sketch_{k:03}"))?;
    }
    let report = EvalReport {
        split: split.as_str().into(),
        sketches: chosen.len(),
        seeds: config.eval.seeds,
        mean_structure_distance: mean(&dists),
        mean_class_score: mean(&scores),
        diversity: mean(&divs),
    };
    write_file(&dir.join("samples.csv"), csv.as_bytes())?;
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}
