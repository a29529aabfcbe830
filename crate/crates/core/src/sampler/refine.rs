use serde::{Deserialize, Serialize};

use super::decode::draw_tokens;
use super::sample_mask;
use crate::error::{Error, Result};
use crate::parallel::join;
use crate::rng::Rng;
use crate::tensor::log_softmax_f64;
use crate::tokens::TokenGrid;
use crate::transformer::TransformerModel;

/// Post-hoc refinement: repeated confidence-only re-masking of a finished
/// grid, scored by the model's own likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub enabled: bool,
    /// Number of refinement iterations `N_tc`.
    pub steps: usize,
    /// Peak mask ratio `r_tc`, used at the first iteration.
    pub ratio: f64,
    pub token_temperature: f64,
    pub gumbel_temperature: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            enabled: false,
            steps: 32,
            ratio: 0.5,
            token_temperature: 1.0,
            gumbel_temperature: 0.0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::config(format!("refine.ratio = {} is outside (0, 1)", self.ratio)));
        }
        for (name, v) in [
            ("token_temperature", self.token_temperature),
            ("gumbel_temperature", self.gumbel_temperature),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("refine.{name} = {v} must be a finite value >= 0")));
            }
        }
        Ok(())
    }

    /// Mask ratio of iteration `j`: `ratio * cos(π/2 · j / steps)`.
    pub fn ratio_at(&self, j: usize) -> f64 {
        self.ratio * (std::f64::consts::FRAC_PI_2 * j as f64 / self.steps as f64).cos()
    }
}

/// `log p(y_i | rest)` for every position, from two forward passes that each
/// mask one colour of a checkerboard over the grid.
pub fn pseudo_log_likelihood(model: &TransformerModel<f32>, grid: &TokenGrid, class_label: usize) -> Result<Vec<f64>> {
    model.check_grid(grid)?;
    if grid.masked_count() > 0 {
        return Err(Error::input("likelihood needs a fully unmasked grid"));
    }
    let mask = grid.mask_token();
    let k = model.vocab();
    let colour = |i: usize| (i / grid.width + i % grid.width) % 2;
    let masked_on = |c: usize| -> Vec<u32> {
        grid.tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| if colour(i) == c { mask } else { t })
            .collect()
    };
    let (even, odd) = (masked_on(0), masked_on(1));
    let (le, lo) = join(|| model.logits(&even, class_label), || model.logits(&odd, class_label));
    let (le, lo) = (le?, lo?);
    let out: Vec<f64> = (0..grid.len())
        .map(|i| {
            let logits = if colour(i) == 0 { &le } else { &lo };
            log_softmax_f64(&logits[i * k..(i + 1) * k])[grid.tokens[i] as usize]
        })
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite token likelihood".into()));
    }
    Ok(out)
}

/// Re-masks the least likely tokens and redraws them, `steps` times, with a
/// cosine-decaying mask ratio and no structure term.
pub fn refine(
    model: &TransformerModel<f32>,
    tokens: &TokenGrid,
    class_label: usize,
    config: &RefineConfig,
    rng: &mut Rng,
) -> Result<TokenGrid> {
    config.validate()?;
    model.check_grid(tokens)?;
    if tokens.masked_count() > 0 {
        return Err(Error::input("refinement needs a fully unmasked grid"));
    }
    let mut grid = tokens.clone();
    grid.class_label = class_label;
    let n = grid.len();
    let mask = grid.mask_token();
    for j in 0..config.steps {
        let k = ((config.ratio_at(j) * n as f64).floor() as usize).min(n);
        if k == 0 {
            continue;
        }
        let critic = pseudo_log_likelihood(model, &grid, class_label)?;
        let reject: Vec<f64> = critic.iter().map(|c| -c).collect();
        let m = sample_mask(&reject, k, config.gumbel_temperature, rng)?;
        let masked: Vec<u32> = grid
            .tokens
            .iter()
            .zip(&m)
            .map(|(&t, &r)| if r { mask } else { t })
            .collect();
        let logits = model.logits(&masked, class_label)?;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite logits during refinement".into()));
        }
        grid.tokens = draw_tokens(&masked, &logits, model.vocab(), config.token_temperature, rng);
    }
    Ok(grid)
}
