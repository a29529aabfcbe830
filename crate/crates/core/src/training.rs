//! Masked token modeling: loss, gradients, the training loop, and
//! finite-difference gradient checking.

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::prelude::*;
use crate::rng::{child_rng, rng_from_seed, Rng};
use crate::tensor::Float;
use crate::tokens::TokenGrid;
use crate::transformer::{Params, TransformerModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Per-batch mask rate is drawn uniformly from `[mask_rate_min, mask_rate_max]`.
    pub mask_rate_min: f64,
    pub mask_rate_max: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Reserved; class-conditional training never drops the label.
    pub class_drop_prob: f64,
    /// Steps between loss-curve records (and checkpoint callbacks).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            steps: 500,
            learning_rate: 2e-3,
            mask_rate_min: 0.1,
            mask_rate_max: 0.95,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            class_drop_prob: 0.0,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be > 0"));
        }
        let ok = |r: f64| r > 0.0 && r < 1.0;
        if !ok(self.mask_rate_min) || !ok(self.mask_rate_max) || self.mask_rate_min > self.mask_rate_max {
            return Err(Error::config("mask rates must satisfy 0 < min <= max < 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam decay constants must be in [0, 1)"));
        }
        if self.class_drop_prob != 0.0 {
            return Err(Error::config("class dropout is not supported (class_drop_prob must be 0)"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every must be positive"));
        }
        Ok(())
    }
}

/// Input sequence with masked positions replaced by MASK, plus the original tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedExample {
    pub input: Vec<u32>,
    pub target: Vec<u32>,
    pub masked: Vec<bool>,
    pub class_label: usize,
}

/// Masks exactly `max(1, floor(rate * N))` positions chosen uniformly.
pub fn mask_example(grid: &TokenGrid, rate: f64, rng: &mut Rng) -> MaskedExample {
    let n = grid.len();
    let k = ((rate * n as f64).floor() as usize).clamp(1, n);
    let mut masked = vec![false; n];
    for i in sample_indices(rng, n, k) {
        masked[i] = true;
    }
    let input = grid
        .tokens
        .iter()
        .zip(&masked)
        .map(|(&t, &m)| if m { grid.mask_token() } else { t })
        .collect();
    MaskedExample {
        input,
        target: grid.tokens.clone(),
        masked,
        class_label: grid.class_label,
    }
}

/// Sum of masked-position cross-entropy, number of correct argmax predictions,
/// and `d(sum CE)/d logits` scaled by `scale`.
fn cross_entropy<F: Float>(logits: &[F], ex: &MaskedExample, vocab: usize, scale: F) -> (f64, usize, Vec<F>) {
    let mut dlogits = vec![F::zero(); logits.len()];
    let mut loss = 0.0;
    let mut correct = 0;
    for (i, row) in logits.chunks_exact(vocab).enumerate() {
        if !ex.masked[i] {
            continue;
        }
        let target = ex.target[i] as usize;
        let logp = crate::tensor::log_softmax_f64(row);
        loss -= logp[target];
        if crate::tensor::argmax(row) == target {
            correct += 1;
        }
        let d = &mut dlogits[i * vocab..(i + 1) * vocab];
        for (j, lp) in logp.iter().enumerate() {
            let p = lp.exp() - if j == target { 1.0 } else { 0.0 };
            d[j] = F::of(p) * scale;
        }
    }
    (loss, correct, dlogits)
}

#[derive(Debug, Clone)]
pub struct StepOutput<F> {
    /// Mean cross-entropy over masked positions of the batch.
    pub loss: f64,
    pub masked: usize,
    pub correct: usize,
    pub grads: Params<F>,
}

/// Loss and gradients on already-masked examples.
pub fn loss_and_grads<F: Float>(model: &TransformerModel<F>, batch: &[MaskedExample]) -> Result<StepOutput<F>> {
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let total: usize = batch.iter().map(|e| e.masked.iter().filter(|&&m| m).count()).sum();
    if total == 0 {
        return Err(Error::input("batch has no masked positions"));
    }
    let scale = F::of(1.0 / total as f64);
    let vocab = model.vocab();
    let per_example: Vec<Result<(f64, usize, Params<F>)>> = batch
        .par_iter()
        .map(|ex| {
            let (logits, cache) = model.forward_train(&ex.input, ex.class_label)?;
            let (loss, correct, dlogits) = cross_entropy(&logits, ex, vocab, scale);
            let mut grads = Params::zeros(&model.config);
            model.backward(&cache, &dlogits, &mut grads);
            Ok((loss, correct, grads))
        })
        .collect();
    // reduce in batch order so results do not depend on scheduling
    let mut grads = Params::zeros(&model.config);
    let mut loss = 0.0;
    let mut correct = 0;
    for r in per_example {
        let (l, c, g) = r?;
        loss += l;
        correct += c;
        grads.add_assign(&g);
    }
    Ok(StepOutput {
        loss: loss / total as f64,
        masked: total,
        correct,
        grads,
    })
}

/// Masks each grid at `mask_rate` and returns the batch loss and gradients.
pub fn masked_lm_step<F: Float>(
    model: &TransformerModel<F>,
    batch: &[TokenGrid],
    mask_rate: f64,
    rng: &mut Rng,
) -> Result<StepOutput<F>> {
    if !(mask_rate > 0.0 && mask_rate < 1.0) {
        return Err(Error::input(format!("mask_rate {mask_rate} is not in (0, 1)")));
    }
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let examples: Vec<MaskedExample> = batch.iter().map(|g| mask_example(g, mask_rate, rng)).collect();
    loss_and_grads(model, &examples)
}

/// Adaptive moment estimation with bias correction, over a fixed list of
/// parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(model: &TransformerModel<f32>, config: &TrainConfig) -> Self {
        let lens: Vec<usize> = model.params.tensors().iter().map(|t| t.len()).collect();
        Self::with_lens(&lens, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    }

    pub fn with_lens(lens: &[usize], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            lr,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step(&mut self, params: &mut Params<f32>, grads: &Params<f32>) {
        self.update(
            params.tensors_mut().into_iter().map(|t| t.as_mut_slice()).collect(),
            grads.tensors().into_iter().map(|t| t.as_slice()).collect(),
        );
    }

    pub fn update(&mut self, params: Vec<&mut [f32]>, grads: Vec<&[f32]>) {
        assert_eq!(params.len(), self.m.len(), "parameter list changed");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = (self.lr * bc2.sqrt() / bc1) as f32;
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= step * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub masked_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub records: Vec<LossRecord>,
}

impl TrainReport {
    /// `step,loss,masked_accuracy` CSV.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,masked_accuracy\n");
        for r in &self.records {
            s.push_str(&format!("{},{:.6},{:.6}\n", r.step, r.loss, r.masked_accuracy));
        }
        s
    }
}

/// Trains in place. Batches are drawn with replacement from `data`; all
/// randomness comes from `seed`. `on_log` runs every `log_every` steps (and
/// after the last step) with the averaged record and the current model.
pub fn train(
    model: &mut TransformerModel<f32>,
    data: &[TokenGrid],
    config: &TrainConfig,
    seed: u64,
    mut on_log: impl FnMut(&LossRecord, &TransformerModel<f32>) -> Result<()>,
) -> Result<TrainReport> {
    config.validate()?;
    if config.steps == 0 {
        return Ok(TrainReport { records: Vec::new() });
    }
    if data.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    for g in data {
        model.check_grid(g)?;
        if g.masked_count() > 0 {
            return Err(Error::input("training grids must be fully unmasked"));
        }
    }
    let mut adam = Adam::new(model, config);
    let mut rng = rng_from_seed(seed);
    let mut records = Vec::new();
    let (mut acc_loss, mut acc_correct, mut acc_masked, mut acc_steps) = (0.0, 0usize, 0usize, 0usize);
    let mut batch = Vec::with_capacity(config.batch_size);
    for step in 1..=config.steps {
        batch.clear();
        for _ in 0..config.batch_size {
            batch.push(data[rng.gen_range(0..data.len())].clone());
        }
        let rate = rng.gen_range(config.mask_rate_min..=config.mask_rate_max);
        let out = masked_lm_step(model, &batch, rate, &mut rng)?;
        if !out.loss.is_finite() || !out.grads.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss or gradient at step {step} (loss = {})",
                out.loss
            )));
        }
        adam.step(&mut model.params, &out.grads);
        acc_loss += out.loss;
        acc_correct += out.correct;
        acc_masked += out.masked;
        acc_steps += 1;
        if step % config.log_every == 0 || step == config.steps {
            let rec = LossRecord {
                step,
                loss: acc_loss / acc_steps as f64,
                masked_accuracy: acc_correct as f64 / acc_masked as f64,
            };
            on_log(&rec, model)?;
            records.push(rec);
            (acc_loss, acc_correct, acc_masked, acc_steps) = (0.0, 0, 0, 0);
        }
    }
    Ok(TrainReport { records })
}

/// Held-out masked-token accuracy next to the majority-token baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AccuracyReport {
    pub accuracy: f64,
    pub majority_token: u32,
    pub majority_accuracy: f64,
    pub masked_positions: usize,
}

/// Most frequent token over `data` (lowest index on ties).
pub fn majority_token(data: &[TokenGrid], vocab: usize) -> u32 {
    let mut counts = vec![0usize; vocab];
    for g in data {
        for &t in &g.tokens {
            if (t as usize) < vocab {
                counts[t as usize] += 1;
            }
        }
    }
    crate::tensor::argmax(&counts) as u32
}

/// Masks every held-out grid at rates drawn like training and scores argmax predictions.
pub fn evaluate_accuracy(
    model: &TransformerModel<f32>,
    held_out: &[TokenGrid],
    majority: u32,
    config: &TrainConfig,
    seed: u64,
) -> Result<AccuracyReport> {
    let examples: Vec<MaskedExample> = held_out
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let mut rng = child_rng(seed, i as u64);
            let rate = rng.gen_range(config.mask_rate_min..=config.mask_rate_max);
            mask_example(g, rate, &mut rng)
        })
        .collect();
    let vocab = model.vocab();
    let per: Vec<Result<(usize, usize, usize)>> = examples
        .par_iter()
        .map(|ex| {
            let logits = model.logits(&ex.input, ex.class_label)?;
            let (mut correct, mut base, mut total) = (0, 0, 0);
            for (i, row) in logits.chunks_exact(vocab).enumerate() {
                if ex.masked[i] {
                    total += 1;
                    correct += usize::from(crate::tensor::argmax(row) as u32 == ex.target[i]);
                    base += usize::from(ex.target[i] == majority);
                }
            }
            Ok((correct, base, total))
        })
        .collect();
    let (mut correct, mut base, mut total) = (0, 0, 0);
    for r in per {
        let (c, b, t) = r?;
        correct += c;
        base += b;
        total += t;
    }
    let denom = total.max(1) as f64;
    Ok(AccuracyReport {
        accuracy: correct as f64 / denom,
        majority_token: majority,
        majority_accuracy: base as f64 / denom,
        masked_positions: total,
    })
}

/// A scalar objective over a flat parameter vector, for finite-difference checks.
pub trait Objective {
    fn num_params(&self) -> usize;
    fn param(&self, i: usize) -> f64;
    fn set_param(&mut self, i: usize, v: f64);
    fn loss(&self) -> f64;
    /// Loss and the full analytic gradient.
    fn loss_and_grad(&self) -> (f64, Vec<f64>);
}

/// Max over `probes` random parameters of `|analytic - numeric| / (|numeric| + 1e-8)`,
/// with central differences of half-width `epsilon`.
pub fn grad_check_objective(obj: &mut dyn Objective, epsilon: f64, probes: usize, rng: &mut Rng) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::input(format!("epsilon must be positive, got {epsilon}")));
    }
    let (_, grad) = obj.loss_and_grad();
    let n = obj.num_params();
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let i = rng.gen_range(0..n);
        let orig = obj.param(i);
        obj.set_param(i, orig + epsilon);
        let up = obj.loss();
        obj.set_param(i, orig - epsilon);
        let down = obj.loss();
        obj.set_param(i, orig);
        let numeric = (up - down) / (2.0 * epsilon);
        worst = worst.max((grad[i] - numeric).abs() / (numeric.abs() + 1e-8));
    }
    Ok(worst)
}

/// Masked-LM loss of an `f64` transformer on fixed masked examples.
pub struct MlmObjective {
    pub model: TransformerModel<f64>,
    pub examples: Vec<MaskedExample>,
}

impl Objective for MlmObjective {
    fn num_params(&self) -> usize {
        self.model.params.num_scalars()
    }

    fn param(&self, i: usize) -> f64 {
        let (t, o) = self.model.params.locate(i).expect("index in range");
        self.model.params.tensors()[t][o]
    }

    fn set_param(&mut self, i: usize, v: f64) {
        let (t, o) = self.model.params.locate(i).expect("index in range");
        self.model.params.tensors_mut()[t][o] = v;
    }

    fn loss(&self) -> f64 {
        loss_and_grads(&self.model, &self.examples).expect("valid examples").loss
    }

    fn loss_and_grad(&self) -> (f64, Vec<f64>) {
        let out = loss_and_grads(&self.model, &self.examples).expect("valid examples");
        let flat = out.grads.tensors().into_iter().flat_map(|t| t.iter().copied()).collect();
        (out.loss, flat)
    }
}

/// Checks transformer gradients on one grid (half its positions masked),
/// probing 50 parameters. Runs in `f64`.
pub fn grad_check(model: &TransformerModel<f32>, sample: &TokenGrid, epsilon: f64) -> Result<f64> {
    grad_check_probes(model, sample, epsilon, 50, 0)
}

pub fn grad_check_probes(
    model: &TransformerModel<f32>,
    sample: &TokenGrid,
    epsilon: f64,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    model.check_grid(sample)?;
    let mut rng = rng_from_seed(seed);
    let example = mask_example(sample, 0.5, &mut rng);
    let mut obj = MlmObjective {
        model: model.cast(),
        examples: vec![example],
    };
    grad_check_objective(&mut obj, epsilon, probes, &mut rng)
}

/// Least squares through a linear map, `0.5 * |W x - y|^2`; its gradient is exact.
pub struct LinearLeastSquares {
    pub w: Vec<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl LinearLeastSquares {
    fn residual(&self) -> Vec<f64> {
        let n = self.x.len();
        self.y
            .iter()
            .enumerate()
            .map(|(r, &y)| (0..n).map(|c| self.w[r * n + c] * self.x[c]).sum::<f64>() - y)
            .collect()
    }
}

impl Objective for LinearLeastSquares {
    fn num_params(&self) -> usize {
        self.w.len()
    }

    fn param(&self, i: usize) -> f64 {
        self.w[i]
    }

    fn set_param(&mut self, i: usize, v: f64) {
        self.w[i] = v;
    }

    fn loss(&self) -> f64 {
        0.5 * self.residual().iter().map(|r| r * r).sum::<f64>()
    }

    fn loss_and_grad(&self) -> (f64, Vec<f64>) {
        let res = self.residual();
        let n = self.x.len();
        let grad = (0..self.w.len()).map(|i| res[i / n] * self.x[i % n]).collect();
        (0.5 * res.iter().map(|r| r * r).sum::<f64>(), grad)
    }
}
