//! Run configuration: one TOML document with a section per module.
//!
//! Every key has a default, so an empty file (or no file) is a valid
//! configuration. Unknown sections and keys are rejected. Overrides of the
//! form `section.key=value` are applied to the parsed document before it is
//! checked; dashes in keys are read as underscores, and the value is parsed
//! as a TOML value (falling back to a plain string).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rejection::{EmbedderConfig, RejectionConfig};
use crate::sampler::{RefineConfig, SamplerConfig};
use crate::tokens::{Codebook, DataConfig};
use crate::training::TrainConfig;
use crate::transformer::ArchConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub model: PathBuf,
    pub embedder: PathBuf,
    /// Parent of the default per-command output directories.
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: "runs/data".into(),
            model: "runs/train/model.ckpt".into(),
            embedder: "runs/train-embedder/embedder.ckpt".into(),
            out_dir: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Also write PNG copies of every raster.
    pub png: bool,
    /// Write a JSON-lines decoding trace per trial.
    pub trace: bool,
    /// Export guide attention heatmaps and PCA projections.
    pub attention: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Each entry is one layer set `L`.
    pub layer_sets: Vec<Vec<usize>>,
    /// Samples per layer set.
    pub seeds: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            layer_sets: vec![vec![1], vec![1, 2], vec![6, 7, 8], vec![7, 8]],
            seeds: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TradeoffConfig {
    pub guidance_scales: Vec<f64>,
    /// Samples per guidance scale.
    pub seeds: usize,
}

impl Default for TradeoffConfig {
    fn default() -> Self {
        TradeoffConfig {
            guidance_scales: vec![0.0, 0.25, 0.5],
            seeds: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Number of sketches taken from the start of the split.
    pub num_sketches: usize,
    /// Independent selected samples per sketch, for diversity.
    pub seeds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            num_sketches: 30,
            seeds: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream.
    pub seed: u64,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub model: ArchConfig,
    pub train: TrainConfig,
    pub embedder: EmbedderConfig,
    pub sampler: SamplerConfig,
    pub refine: RefineConfig,
    pub rejection: RejectionConfig,
    pub sweep: SweepConfig,
    pub tradeoff: TradeoffConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    /// Parses a document, applies overrides, and validates.
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::config(format!("config file: {e}")))?;
        for (key, value) in overrides {
            apply_override(&mut doc, key, value)?;
        }
        let config: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::at_path(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.embedder.validate()?;
        self.sampler.validate()?;
        self.refine.validate()?;
        self.rejection.validate()?;
        let codebook = Codebook::binary4();
        if self.data.patch != codebook.patch() {
            return Err(Error::config(format!(
                "data.patch = {} but the codebook uses {}x{} patches",
                self.data.patch,
                codebook.patch(),
                codebook.patch()
            )));
        }
        let grid = self.data.image_side / self.data.patch;
        if self.model.vocab != codebook.len()
            || self.model.grid_height != grid
            || self.model.grid_width != grid
            || self.model.num_classes != self.data.num_classes
        {
            return Err(Error::config(format!(
                "model expects a {}x{} grid over {} tokens and {} classes; data gives {grid}x{grid}, {} tokens, {} classes",
                self.model.grid_height,
                self.model.grid_width,
                self.model.vocab,
                self.model.num_classes,
                codebook.len(),
                self.data.num_classes
            )));
        }
        for &l in self.sampler.layers.iter().chain(self.sweep.layer_sets.iter().flatten()) {
            if l == 0 || l > self.model.num_layers {
                return Err(Error::config(format!(
                    "layer {l} is outside 1..={}",
                    self.model.num_layers
                )));
            }
        }
        if self.sweep.layer_sets.iter().any(|s| s.is_empty()) {
            return Err(Error::config("sweep.layer_sets contains an empty set"));
        }
        if self.tradeoff.guidance_scales.is_empty() {
            return Err(Error::config("tradeoff.guidance_scales is empty"));
        }
        if self.sweep.seeds == 0 || self.tradeoff.seeds == 0 || self.eval.seeds == 0 {
            return Err(Error::config("seed counts must be at least 1"));
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `section.key` (or a top-level `key`) in the document.
pub fn apply_override(doc: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let key = key.replace('-', "_");
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) || parts.len() > 2 {
        return Err(Error::config(format!("malformed override key {key:?}")));
    }
    let value = parse_value(raw);
    if parts.len() == 1 {
        doc.insert(key, value);
        return Ok(());
    }
    let section = doc
        .entry(parts[0].to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match section {
        toml::Value::Table(t) => {
            t.insert(parts[1].to_string(), value);
            Ok(())
        }
        _ => Err(Error::config(format!("{} is not a section", parts[0]))),
    }
}

/// Splits `--section.key=value` / `--section.key value` overrides out of an
/// argument list. Returns the remaining arguments and the overrides in order.
/// A key given twice is an error.
pub fn extract_overrides(args: &[String]) -> std::result::Result<(Vec<String>, Vec<(String, String)>), String> {
    let mut rest = Vec::new();
    let mut overrides: Vec<(String, String)> = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let a = &args[i];
        let body = a.strip_prefix("--").filter(|b| {
            let name = b.split('=').next().unwrap_or("");
            name.contains('.') || name == "seed"
        });
        match body {
            Some(b) => {
                let (k, v) = match b.split_once('=') {
                    Some((k, v)) => (k.to_string(), v.to_string()),
                    None => {
                        i += 1;
                        let v = args.get(i).ok_or_else(|| format!("--{b} needs a value"))?;
                        (b.to_string(), v.clone())
                    }
                };
                let norm = k.replace('-', "_");
                if overrides.iter().any(|(o, _)| o.replace('-', "_") == norm) {
                    return Err(format!("--{k} given more than once"));
                }
                overrides.push((k, v));
            }
            None => rest.push(a.clone()),
        }
        i += 1;
    }
    Ok((rest, overrides))
}
