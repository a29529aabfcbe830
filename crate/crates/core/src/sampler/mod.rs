//! Parallel decoding: mask-rate schedule, Gumbel top-k masking, guided
//! confidence scores, the structure-guided sampling loop, its confidence-only
//! baseline, and likelihood-critic refinement.

mod decode;
mod refine;

use rand::distributions::Open01;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::log_softmax_f64;

pub use decode::{maskgit_sample, masksketch_sample, masksketch_sample_observed, write_trace, IterationRecord, Step};
pub use refine::{pseudo_log_likelihood, refine, RefineConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Number of decoding iterations `T`.
    pub iterations: usize,
    /// Share of each iteration's mask budget given to structure rejection.
    pub lambda_s: f64,
    /// Mask rate at the first iteration, `γ(T-1)`.
    pub gamma_start: f64,
    /// Mask rate at the last iteration, `γ(0)`.
    pub gamma_end: f64,
    /// Classifier-free guidance scale `β` for confidence scores.
    pub guidance_scale: f64,
    /// Scale of the Gumbel noise in `sample_mask`; 0 is deterministic top-k.
    pub gumbel_temperature: f64,
    /// Temperature of the categorical token draws; 0 is argmax.
    pub token_temperature: f64,
    /// 1-based attention layers used for structure scores.
    pub layers: Vec<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            iterations: 64,
            lambda_s: 0.9,
            gamma_start: 0.95,
            gamma_end: 0.25,
            guidance_scale: 0.0,
            gumbel_temperature: 0.0,
            token_temperature: 1.0,
            layers: vec![1, 2, 6, 7, 8],
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("sampler.iterations must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.lambda_s) {
            return Err(Error::config(format!("sampler.lambda_s = {} is outside [0, 1]", self.lambda_s)));
        }
        check_endpoints(self.gamma_start, self.gamma_end)?;
        if !self.guidance_scale.is_finite() {
            return Err(Error::config("sampler.guidance_scale must be finite"));
        }
        for (name, v) in [
            ("gumbel_temperature", self.gumbel_temperature),
            ("token_temperature", self.token_temperature),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("sampler.{name} = {v} must be a finite value >= 0")));
            }
        }
        if self.layers.is_empty() {
            return Err(Error::config("sampler.layers is empty"));
        }
        Ok(())
    }
}

fn check_endpoints(gamma_start: f64, gamma_end: f64) -> Result<()> {
    let in_range = |g: f64| g > 0.0 && g <= 1.0;
    if !in_range(gamma_start) || !in_range(gamma_end) || gamma_start <= gamma_end {
        return Err(Error::config(format!(
            "mask schedule needs 1 >= gamma_start > gamma_end > 0, got {gamma_start} and {gamma_end}"
        )));
    }
    Ok(())
}

/// Linear mask rate: `γ(T-1) = gamma_start`, `γ(0) = gamma_end`. With `T = 1`
/// the single iteration uses `gamma_end`.
pub fn mask_schedule(t: usize, iterations: usize, gamma_start: f64, gamma_end: f64) -> Result<f64> {
    check_endpoints(gamma_start, gamma_end)?;
    if iterations == 0 || t >= iterations {
        return Err(Error::config(format!("iteration {t} outside 0..{iterations}")));
    }
    if iterations == 1 {
        return Ok(gamma_end);
    }
    Ok(gamma_end + (gamma_start - gamma_end) * t as f64 / (iterations - 1) as f64)
}

/// `(⌊λ_s γ N⌋, ⌊(1-λ_s) γ N⌋)`.
pub fn mask_counts(lambda_s: f64, gamma: f64, n: usize) -> (usize, usize) {
    let structure = (lambda_s * gamma * n as f64).floor() as usize;
    let confidence = ((1.0 - lambda_s) * gamma * n as f64).floor() as usize;
    (structure.min(n), confidence.min(n))
}

/// Structure and confidence rejection masks of one iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPair {
    pub structure: Vec<bool>,
    pub confidence: Vec<bool>,
}

impl MaskPair {
    /// `m = m^s OR m^c`.
    pub fn combined(&self) -> Vec<bool> {
        self.structure.iter().zip(&self.confidence).map(|(a, b)| *a || *b).collect()
    }

    pub fn structure_count(&self) -> usize {
        self.structure.iter().filter(|&&m| m).count()
    }

    pub fn confidence_count(&self) -> usize {
        self.confidence.iter().filter(|&&m| m).count()
    }

    pub fn combined_count(&self) -> usize {
        self.combined().iter().filter(|&&m| m).count()
    }
}

/// Marks `k` positions: the top-k of `scores + temperature * Gumbel(0, 1)`.
/// Higher scores are more likely to be masked. Temperature 0 (or `k` of 0 or
/// `N`) draws nothing from `rng`; ties go to the lower index.
pub fn sample_mask(scores: &[f64], k: usize, temperature: f64, rng: &mut Rng) -> Result<Vec<bool>> {
    let n = scores.len();
    if k > n {
        return Err(Error::config(format!("cannot mask {k} of {n} positions")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::input("mask scores must be finite"));
    }
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::config(format!("gumbel temperature {temperature} must be >= 0")));
    }
    if k == 0 || k == n {
        return Ok(vec![k == n; n]);
    }
    let keys: Vec<f64> = if temperature > 0.0 {
        scores
            .iter()
            .map(|&s| {
                let u: f64 = rng.sample(Open01);
                s - temperature * (-u.ln()).ln()
            })
            .collect()
    } else {
        scores.to_vec()
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]));
    let mut mask = vec![false; n];
    for &i in &order[..k] {
        mask[i] = true;
    }
    Ok(mask)
}

/// Guided confidence per token:
/// `log p(ȳ_i | x, c) - β (log p(ȳ_i | x, c) - log p(ȳ_i | x, r))`.
/// Logits are row-major `N x K`; `sampled` holds `N` token ids below `K`.
pub fn cfg_scores(logits_cond: &[f32], logits_rand: &[f32], sampled: &[u32], beta: f64) -> Result<Vec<f64>> {
    let n = sampled.len();
    if n == 0 || logits_cond.len() % n != 0 || logits_cond.len() != logits_rand.len() {
        return Err(Error::shape(format!(
            "logits of length {} and {} for {n} tokens",
            logits_cond.len(),
            logits_rand.len()
        )));
    }
    let k = logits_cond.len() / n;
    let mut out = Vec::with_capacity(n);
    for (i, &tok) in sampled.iter().enumerate() {
        let tok = tok as usize;
        if tok >= k {
            return Err(Error::input(format!("sampled token {tok} at {i} is not below {k}")));
        }
        let lc = log_softmax_f64(&logits_cond[i * k..(i + 1) * k])[tok];
        let s = if beta == 0.0 {
            lc
        } else {
            let lr = log_softmax_f64(&logits_rand[i * k..(i + 1) * k])[tok];
            lc - beta * (lc - lr)
        };
        out.push(s);
    }
    Ok(out)
}
