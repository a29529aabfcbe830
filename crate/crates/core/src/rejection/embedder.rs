//! Proxy image embedder: average-pooled raster → tanh feature block →
//! softmax over shape classes. Trained on filled rasters.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Container, NamedTensor};
use crate::error::{Error, Result};
use crate::parallel::prelude::*;
use crate::rng::{rng_from_seed, Rng};
use crate::tensor::{argmax, log_softmax_f64};
use crate::tokens::Raster;
use crate::training::Adam;

pub const CHECKPOINT_KIND: &str = "embedder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    /// Side of the square average-pooling window.
    pub pool: usize,
    /// Width of the feature block.
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub init_std: f64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            pool: 4,
            hidden: 64,
            steps: 400,
            batch_size: 32,
            learning_rate: 3e-3,
            init_std: 0.05,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pool == 0 || self.hidden == 0 || self.batch_size == 0 {
            return Err(Error::config("embedder.pool, hidden and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.init_std > 0.0) {
            return Err(Error::config("embedder.learning_rate and init_std must be positive"));
        }
        Ok(())
    }
}

/// Architecture recorded in the checkpoint header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderArch {
    pub side: usize,
    pub pool: usize,
    pub hidden: usize,
    pub num_classes: usize,
}

impl EmbedderArch {
    pub fn input_dim(&self) -> usize {
        let s = self.side / self.pool;
        s * s
    }

    fn validate(&self) -> Result<()> {
        if self.pool == 0 || self.side % self.pool != 0 || self.side == 0 {
            return Err(Error::config(format!(
                "pool {} does not divide raster side {}",
                self.pool, self.side
            )));
        }
        if self.hidden == 0 || self.num_classes == 0 {
            return Err(Error::config("embedder needs a hidden width and at least one class"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyEmbedder {
    pub arch: EmbedderArch,
    /// `input_dim x hidden`, row-major.
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    /// `hidden x num_classes`, row-major.
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
}

struct Grads {
    w1: Vec<f32>,
    b1: Vec<f32>,
    w2: Vec<f32>,
    b2: Vec<f32>,
    loss: f64,
    correct: usize,
}

impl Grads {
    fn zeros(e: &ProxyEmbedder) -> Self {
        Grads {
            w1: vec![0.0; e.w1.len()],
            b1: vec![0.0; e.b1.len()],
            w2: vec![0.0; e.w2.len()],
            b2: vec![0.0; e.b2.len()],
            loss: 0.0,
            correct: 0,
        }
    }

    fn add(mut self, o: Grads) -> Grads {
        for (a, b) in [(&mut self.w1, &o.w1), (&mut self.b1, &o.b1), (&mut self.w2, &o.w2), (&mut self.b2, &o.b2)] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.loss += o.loss;
        self.correct += o.correct;
        self
    }
}

impl ProxyEmbedder {
    pub fn init(arch: EmbedderArch, init_std: f64, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let normal = Normal::new(0.0, init_std).map_err(|e| Error::config(e.to_string()))?;
        let p = arch.input_dim();
        let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| normal.sample(rng) as f32).collect() };
        let w1 = draw(p * arch.hidden);
        let w2 = draw(arch.hidden * arch.num_classes);
        Ok(ProxyEmbedder {
            b1: vec![0.0; arch.hidden],
            b2: vec![0.0; arch.num_classes],
            w1,
            w2,
            arch,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    /// Average of each `pool x pool` block, row-major.
    pub fn pooled(&self, raster: &Raster) -> Result<Vec<f32>> {
        let side = self.arch.side;
        if raster.width != side || raster.height != side {
            return Err(Error::shape(format!(
                "{}x{} raster for a {side}x{side} embedder",
                raster.width, raster.height
            )));
        }
        let pool = self.arch.pool;
        let s = side / pool;
        let mut out = vec![0.0f32; s * s];
        for y in 0..side {
            for x in 0..side {
                out[(y / pool) * s + x / pool] += raster.get(x, y);
            }
        }
        let inv = 1.0 / (pool * pool) as f32;
        out.iter_mut().for_each(|v| *v *= inv);
        Ok(out)
    }

    fn hidden_from_pooled(&self, pooled: &[f32]) -> Vec<f32> {
        let h = self.arch.hidden;
        let mut z = self.b1.clone();
        for (i, &x) in pooled.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (zj, w) in z.iter_mut().zip(&self.w1[i * h..(i + 1) * h]) {
                *zj += x * w;
            }
        }
        z.iter_mut().for_each(|v| *v = v.tanh());
        z
    }

    fn logits_from_hidden(&self, hidden: &[f32]) -> Vec<f32> {
        let c = self.arch.num_classes;
        let mut out = self.b2.clone();
        for (j, &a) in hidden.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(&self.w2[j * c..(j + 1) * c]) {
                *o += a * w;
            }
        }
        out
    }

    /// Activations of the feature block (the layer before the class head).
    pub fn features(&self, raster: &Raster) -> Result<Vec<f32>> {
        Ok(self.hidden_from_pooled(&self.pooled(raster)?))
    }

    pub fn class_probs(&self, raster: &Raster) -> Result<Vec<f64>> {
        let logits = self.logits_from_hidden(&self.features(raster)?);
        Ok(log_softmax_f64(&logits).into_iter().map(f64::exp).collect())
    }

    fn example_grads(&self, pooled: &[f32], label: usize) -> Grads {
        let (h, c) = (self.arch.hidden, self.arch.num_classes);
        let a = self.hidden_from_pooled(pooled);
        let logits = self.logits_from_hidden(&a);
        let logp = log_softmax_f64(&logits);
        let mut g = Grads::zeros(self);
        g.loss = -logp[label];
        g.correct = (argmax(&logits) == label) as usize;
        let dlogits: Vec<f32> = logp
            .iter()
            .enumerate()
            .map(|(k, lp)| (lp.exp() - (k == label) as u8 as f64) as f32)
            .collect();
        g.b2.copy_from_slice(&dlogits);
        let mut da = vec![0.0f32; h];
        for j in 0..h {
            let row = &self.w2[j * c..(j + 1) * c];
            for k in 0..c {
                g.w2[j * c + k] = a[j] * dlogits[k];
                da[j] += row[k] * dlogits[k];
            }
        }
        let dz: Vec<f32> = da.iter().zip(&a).map(|(d, v)| d * (1.0 - v * v)).collect();
        g.b1.copy_from_slice(&dz);
        for (i, &x) in pooled.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (gw, d) in g.w1[i * h..(i + 1) * h].iter_mut().zip(&dz) {
                *gw = x * d;
            }
        }
        g
    }

    /// Mean cross-entropy over a batch and its gradient.
    fn batch_grads(&self, batch: &[(Vec<f32>, usize)]) -> Grads {
        let parts: Vec<Grads> = batch.par_iter().map(|(x, y)| self.example_grads(x, *y)).collect();
        let mut total = parts.into_iter().fold(Grads::zeros(self), Grads::add);
        let inv = 1.0 / batch.len() as f32;
        for t in [&mut total.w1, &mut total.b1, &mut total.w2, &mut total.b2] {
            t.iter_mut().for_each(|v| *v *= inv);
        }
        total.loss /= batch.len() as f64;
        total
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn to_container(&self) -> Container {
        let (p, h, c) = (self.arch.input_dim(), self.arch.hidden, self.arch.num_classes);
        let t = |name: &str, dims: Vec<usize>, data: &Vec<f32>| NamedTensor {
            name: name.into(),
            dims,
            data: data.clone(),
        };
        Container {
            kind: CHECKPOINT_KIND.into(),
            header: serde_json::to_string(&self.arch).expect("arch serializes"),
            tensors: vec![
                t("w1", vec![p, h], &self.w1),
                t("b1", vec![h], &self.b1),
                t("w2", vec![h, c], &self.w2),
                t("b2", vec![c], &self.b2),
            ],
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let arch: EmbedderArch =
            serde_json::from_str(&c.header).map_err(|e| Error::Parse(format!("embedder header: {e}")))?;
        arch.validate()?;
        let (p, h, k) = (arch.input_dim(), arch.hidden, arch.num_classes);
        let expect = [("w1", vec![p, h]), ("b1", vec![h]), ("w2", vec![h, k]), ("b2", vec![k])];
        if c.tensors.len() != expect.len() {
            return Err(Error::Parse(format!("embedder checkpoint has {} tensors", c.tensors.len())));
        }
        for ((name, dims), t) in expect.iter().zip(&c.tensors) {
            if t.name != *name || t.dims != *dims || t.data.len() != dims.iter().product::<usize>() {
                return Err(Error::Parse(format!("unexpected embedder tensor {} {:?}", t.name, t.dims)));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("embedder tensor {name} is not finite")));
            }
        }
        Ok(ProxyEmbedder {
            arch,
            w1: c.tensors[0].data.clone(),
            b1: c.tensors[1].data.clone(),
            w2: c.tensors[2].data.clone(),
            b2: c.tensors[3].data.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EmbedderRecord {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Trains a fresh embedder on `(raster, class)` pairs with Adam.
pub fn train_embedder(
    data: &[(Raster, usize)],
    num_classes: usize,
    config: &EmbedderConfig,
    seed: u64,
) -> Result<(ProxyEmbedder, Vec<EmbedderRecord>)> {
    config.validate()?;
    let Some((first, _)) = data.first() else {
        return Err(Error::input("embedder training set is empty"));
    };
    if first.width != first.height {
        return Err(Error::shape("embedder rasters must be square"));
    }
    let arch = EmbedderArch {
        side: first.width,
        pool: config.pool,
        hidden: config.hidden,
        num_classes,
    };
    let mut rng = rng_from_seed(seed);
    let mut emb = ProxyEmbedder::init(arch, config.init_std, &mut rng)?;
    let pooled = data
        .iter()
        .map(|(r, c)| {
            if *c >= num_classes {
                return Err(Error::input(format!("class {c} is out of range [0, {num_classes})")));
            }
            Ok((emb.pooled(r)?, *c))
        })
        .collect::<Result<Vec<_>>>()?;
    let lens: Vec<usize> = emb.tensors_mut().iter().map(|t| t.len()).collect();
    let mut adam = Adam::with_lens(&lens, config.learning_rate, 0.9, 0.999, 1e-8);
    let mut records = Vec::new();
    let (mut loss, mut correct, mut seen) = (0.0, 0usize, 0usize);
    for step in 1..=config.steps {
        let batch: Vec<(Vec<f32>, usize)> = (0..config.batch_size)
            .map(|_| pooled[rng.gen_range(0..pooled.len())].clone())
            .collect();
        let g = emb.batch_grads(&batch);
        if !g.loss.is_finite() {
            return Err(Error::Numerical(format!("embedder loss is {} at step {step}", g.loss)));
        }
        loss += g.loss;
        correct += g.correct;
        seen += batch.len();
        adam.update(emb.tensors_mut(), vec![&g.w1, &g.b1, &g.w2, &g.b2]);
        if step % 50 == 0 || step == config.steps {
            records.push(EmbedderRecord {
                step,
                loss: loss * config.batch_size as f64 / seen as f64,
                accuracy: correct as f64 / seen as f64,
            });
            (loss, correct, seen) = (0.0, 0, 0);
        }
    }
    Ok((emb, records))
}
