//! Class-conditional bidirectional transformer with attention-map capture.
//!
//! Each position's input is `tok_emb[token] + pos_emb[i] + cls_emb[class]`;
//! the class embedding is added on every position so the sequence stays `N`
//! long and every attention map is `N x N`. Blocks are pre-norm
//! (LN → MHA → residual, LN → GELU MLP → residual), followed by a final LN and
//! a projection to `K` logits (the MASK index is never predicted).

mod forward;
mod params;

use std::path::Path;

pub use forward::Cache;
pub(crate) use forward::{backward, run, RunSpec};
pub use params::{param_specs, ArchConfig, InitKind, LayerParams, ParamSpec, Params};

use crate::checkpoint::{Container, NamedTensor};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Float;
use crate::tokens::TokenGrid;

pub const CHECKPOINT_KIND: &str = "transformer";

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel<F = f32> {
    pub config: ArchConfig,
    pub params: Params<F>,
}

/// Per-layer, per-head row-stochastic attention matrices for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack<F = f32> {
    pub num_heads: usize,
    pub seq_len: usize,
    /// `layers[l]` holds `heads x N x N` values for layer `l + 1`.
    pub layers: Vec<Vec<F>>,
}

impl<F: Float> AttentionStack<F> {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Raw map of one head; `layer` is 1-based.
    pub fn head(&self, layer: usize, head: usize) -> &[F] {
        let n2 = self.seq_len * self.seq_len;
        &self.layers[layer - 1][head * n2..(head + 1) * n2]
    }

    /// Head-averaged map of a 1-based layer.
    pub fn averaged(&self, layer: usize) -> Vec<F> {
        average_heads(&self.layers[layer - 1], self.num_heads, self.seq_len)
    }
}

fn average_heads<F: Float>(probs: &[F], heads: usize, n: usize) -> Vec<F> {
    let n2 = n * n;
    if heads == 1 {
        return probs[..n2].to_vec();
    }
    let mut out = vec![F::zero(); n2];
    for h in 0..heads {
        for (o, &p) in out.iter_mut().zip(&probs[h * n2..(h + 1) * n2]) {
            *o += p;
        }
    }
    let inv = F::one() / F::of(heads as f64);
    for o in out.iter_mut() {
        *o *= inv;
    }
    out
}

/// A validated, sorted, de-duplicated set of 1-based layer ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LayerSet(Vec<usize>);

impl LayerSet {
    pub fn new(layers: impl IntoIterator<Item = usize>, num_layers: usize) -> Result<Self> {
        let mut v: Vec<usize> = layers.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        if v.is_empty() {
            return Err(Error::config("layer set is empty"));
        }
        if let Some(&bad) = v.iter().find(|&&l| l == 0 || l > num_layers) {
            return Err(Error::config(format!(
                "layer {bad} is outside [1, {num_layers}]"
            )));
        }
        Ok(LayerSet(v))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn max(&self) -> usize {
        *self.0.last().expect("non-empty")
    }
}

impl<F: Float> TransformerModel<F> {
    /// Deterministic scaled-normal initialization.
    pub fn init(config: ArchConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, rng);
        Ok(TransformerModel { config, params })
    }

    pub fn cast<G: Float>(&self) -> TransformerModel<G> {
        TransformerModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn seq_len(&self) -> usize {
        self.config.seq_len()
    }

    pub fn vocab(&self) -> usize {
        self.config.vocab
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub(crate) fn check_input(&self, tokens: &[u32], class_label: usize) -> Result<()> {
        if tokens.len() != self.seq_len() {
            return Err(Error::shape(format!(
                "sequence of {} tokens for a model with N = {}",
                tokens.len(),
                self.seq_len()
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize > self.config.vocab) {
            return Err(Error::input(format!(
                "token {t} is out of range [0, {}]",
                self.config.vocab
            )));
        }
        if class_label >= self.config.num_classes {
            return Err(Error::input(format!(
                "class {class_label} is out of range [0, {})",
                self.config.num_classes
            )));
        }
        Ok(())
    }

    pub(crate) fn check_grid(&self, grid: &TokenGrid) -> Result<()> {
        if grid.vocab != self.config.vocab
            || grid.height != self.config.grid_height
            || grid.width != self.config.grid_width
        {
            return Err(Error::shape(format!(
                "{}x{} grid over {} tokens does not fit a {}x{} model over {}",
                grid.height,
                grid.width,
                grid.vocab,
                self.config.grid_height,
                self.config.grid_width,
                self.config.vocab
            )));
        }
        Ok(())
    }

    /// Full forward pass: `N x K` logits and every layer's attention.
    pub fn forward(&self, grid: &TokenGrid, class_label: usize) -> Result<(Vec<F>, AttentionStack<F>)> {
        self.check_grid(grid)?;
        self.forward_tokens(&grid.tokens, class_label)
    }

    pub fn forward_tokens(&self, tokens: &[u32], class_label: usize) -> Result<(Vec<F>, AttentionStack<F>)> {
        self.check_input(tokens, class_label)?;
        let out = run(
            &self.config,
            &self.params,
            tokens,
            class_label,
            RunSpec {
                upto: self.config.num_layers,
                logits: true,
                keep_cache: false,
            },
        );
        Ok((
            out.logits,
            AttentionStack {
                num_heads: self.config.num_heads,
                seq_len: self.seq_len(),
                layers: out.probs,
            },
        ))
    }

    /// Logits only.
    pub fn logits(&self, tokens: &[u32], class_label: usize) -> Result<Vec<F>> {
        self.check_input(tokens, class_label)?;
        Ok(run(
            &self.config,
            &self.params,
            tokens,
            class_label,
            RunSpec {
                upto: self.config.num_layers,
                logits: true,
                keep_cache: false,
            },
        )
        .logits)
    }

    /// Head-averaged attention for each requested layer (in set order). Only
    /// layers up to the deepest requested one are evaluated.
    pub fn attn_map(&self, grid: &TokenGrid, layers: &LayerSet) -> Result<Vec<Vec<F>>> {
        self.check_grid(grid)?;
        self.attn_map_tokens(&grid.tokens, grid.class_label, layers)
    }

    pub fn attn_map_tokens(&self, tokens: &[u32], class_label: usize, layers: &LayerSet) -> Result<Vec<Vec<F>>> {
        self.check_input(tokens, class_label)?;
        if layers.max() > self.config.num_layers {
            return Err(Error::config(format!(
                "layer {} requested from a {}-layer model",
                layers.max(),
                self.config.num_layers
            )));
        }
        let out = run(
            &self.config,
            &self.params,
            tokens,
            class_label,
            RunSpec {
                upto: layers.max(),
                logits: false,
                keep_cache: false,
            },
        );
        Ok(layers
            .ids()
            .iter()
            .map(|&l| average_heads(&out.probs[l - 1], self.config.num_heads, self.seq_len()))
            .collect())
    }

    /// Forward pass that keeps activations for [`TransformerModel::backward`].
    pub fn forward_train(&self, tokens: &[u32], class_label: usize) -> Result<(Vec<F>, Cache<F>)> {
        self.check_input(tokens, class_label)?;
        let out = run(
            &self.config,
            &self.params,
            tokens,
            class_label,
            RunSpec {
                upto: self.config.num_layers,
                logits: true,
                keep_cache: true,
            },
        );
        Ok((out.logits, out.cache.expect("cache requested")))
    }

    /// Accumulates into `grads` the gradient of `sum(dlogits ⊙ logits)`.
    pub fn backward(&self, cache: &Cache<F>, dlogits: &[F], grads: &mut Params<F>) {
        backward(&self.config, &self.params, cache, dlogits, grads);
    }

    pub fn to_container(&self) -> Container {
        let specs = param_specs(&self.config);
        Container {
            kind: CHECKPOINT_KIND.into(),
            header: serde_json::to_string(&self.config).expect("config serializes"),
            tensors: specs
                .into_iter()
                .zip(self.params.tensors())
                .map(|(s, t)| NamedTensor {
                    name: s.name,
                    dims: s.dims,
                    data: t.iter().map(|v| v.f64() as f32).collect(),
                })
                .collect(),
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let config: ArchConfig =
            serde_json::from_str(&c.header).map_err(|e| Error::Parse(format!("checkpoint header: {e}")))?;
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != c.tensors.len() {
            return Err(Error::Parse(format!(
                "checkpoint has {} tensors, architecture needs {}",
                c.tensors.len(),
                specs.len()
            )));
        }
        let mut tensors = Vec::with_capacity(specs.len());
        for (s, t) in specs.iter().zip(&c.tensors) {
            if s.name != t.name || s.dims != t.dims {
                return Err(Error::Parse(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    t.name, t.dims, s.name, s.dims
                )));
            }
            tensors.push(t.data.iter().map(|&v| F::of(v as f64)).collect());
        }
        let params = Params::from_tensors(&config, tensors)?;
        if !params.all_finite() {
            return Err(Error::Numerical("checkpoint contains non-finite parameters".into()));
        }
        Ok(TransformerModel { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[cfg(test)]
mod tests;
