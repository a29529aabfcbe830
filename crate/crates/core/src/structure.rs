//! Structural distance between two token grids, measured through the
//! model's self-attention: for token `i`, the sum over selected layers of the
//! symmetrized KL divergence between row `i` of each grid's attention map.

use std::path::Path;

use crate::error::{Error, Result};
use crate::parallel::prelude::*;
use crate::tokens::raster::{save_pgm, Raster};
use crate::tokens::TokenGrid;
use crate::transformer::{LayerSet, TransformerModel};

/// Additive smoothing applied before every logarithm.
pub const SMOOTHING: f64 = 1e-8;
/// Allowed deviation of a probability vector's sum from one.
pub const SUM_TOLERANCE: f64 = 1e-4;

/// Symmetrized KL, `(KL(u||v) + KL(v||u)) / 2`, of two probability vectors.
/// Inputs are re-normalized; logs use `+1e-8` smoothing.
pub fn jeffreys(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape(format!(
            "distributions of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    for (name, w) in [("u", u), ("v", v)] {
        if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::input(format!("{name} has negative or non-finite entries")));
        }
        let s: f64 = w.iter().sum();
        if (s - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::input(format!("{name} sums to {s}, not 1")));
        }
    }
    Ok(jeffreys_rows(u, v))
}

/// Unchecked divergence of two non-negative rows.
///
/// Computed as `0.5 * sum (u_j - v_j)(ln(u_j + eps) - ln(v_j + eps))`, which is
/// algebraically the averaged two-way KL, has non-negative terms, and is
/// exactly symmetric in floating point.
pub fn jeffreys_rows<T: Copy + Into<f64>>(u: &[T], v: &[T]) -> f64 {
    let su: f64 = u.iter().map(|&x| x.into()).sum();
    let sv: f64 = v.iter().map(|&x| x.into()).sum();
    let mut total = 0.0;
    for (&a, &b) in u.iter().zip(v) {
        let a = a.into() / su;
        let b = b.into() / sv;
        total += (a - b) * ((a + SMOOTHING).ln() - (b + SMOOTHING).ln());
    }
    0.5 * total
}

/// Head-averaged attention maps of one grid for a set of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMaps {
    pub layers: LayerSet,
    pub seq_len: usize,
    /// `maps[j]` is the `N x N` map of layer `layers.ids()[j]`.
    pub maps: Vec<Vec<f32>>,
}

impl LayerMaps {
    pub fn compute(model: &TransformerModel<f32>, grid: &TokenGrid, layers: &LayerSet) -> Result<Self> {
        Ok(LayerMaps {
            layers: layers.clone(),
            seq_len: model.seq_len(),
            maps: model.attn_map(grid, layers)?,
        })
    }

    /// Row `i` of the map of (1-based) `layer`, if present.
    pub fn row(&self, layer: usize, i: usize) -> Option<&[f32]> {
        let j = self.layers.ids().iter().position(|&l| l == layer)?;
        let n = self.seq_len;
        Some(&self.maps[j][i * n..(i + 1) * n])
    }
}

/// `d_S^i = sum over layers of jeffreys(Ax_i, Ay_i)`, summed in layer order.
pub fn token_structure_distance(ax: &LayerMaps, ay: &LayerMaps, i: usize, layers: &LayerSet) -> Result<f64> {
    if ax.seq_len != ay.seq_len {
        return Err(Error::shape("attention maps of different sequence lengths"));
    }
    if i >= ax.seq_len {
        return Err(Error::input(format!("token {i} is out of range")));
    }
    let mut total = 0.0;
    for &l in layers.ids() {
        let (Some(u), Some(v)) = (ax.row(l, i), ay.row(l, i)) else {
            return Err(Error::config(format!("layer {l} is missing from the maps")));
        };
        total += jeffreys_rows(u, v);
    }
    Ok(total)
}

/// Per-token structural distances `s^s`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureScores {
    pub scores: Vec<f64>,
    pub layers: LayerSet,
}

impl StructureScores {
    pub fn mean(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len().max(1) as f64
    }
}

/// Distances for every token between two sets of maps. Parallel over tokens;
/// each token's sum has a fixed order, so results are bit-stable.
pub fn scores_from_maps(ax: &LayerMaps, ay: &LayerMaps) -> Result<StructureScores> {
    if ax.layers != ay.layers {
        return Err(Error::config("guide and candidate maps use different layer sets"));
    }
    let scores = (0..ax.seq_len)
        .into_par_iter()
        .map(|i| token_structure_distance(ax, ay, i, &ax.layers))
        .collect::<Result<Vec<f64>>>()?;
    Ok(StructureScores {
        scores,
        layers: ax.layers.clone(),
    })
}

/// Scores a fully unmasked candidate against cached guide maps, running one
/// forward pass (only up to the deepest selected layer).
pub fn structure_scores(
    model: &TransformerModel<f32>,
    guide: &LayerMaps,
    candidate: &TokenGrid,
) -> Result<StructureScores> {
    if candidate.len() != guide.seq_len {
        return Err(Error::shape(format!(
            "candidate has {} tokens, guide maps cover {}",
            candidate.len(),
            guide.seq_len
        )));
    }
    if candidate.masked_count() > 0 {
        return Err(Error::input("candidate must be fully unmasked"));
    }
    let cand = LayerMaps::compute(model, candidate, &guide.layers)?;
    scores_from_maps(guide, &cand)
}

/// Convenience: guide maps computed on the spot.
pub fn structure_scores_for(
    model: &TransformerModel<f32>,
    guide: &TokenGrid,
    candidate: &TokenGrid,
    layers: &LayerSet,
) -> Result<StructureScores> {
    if !guide.same_shape(candidate) {
        return Err(Error::shape("guide and candidate grids differ in shape"));
    }
    let maps = LayerMaps::compute(model, guide, layers)?;
    structure_scores(model, &maps, candidate)
}

/// Writes each map as an `N x N` PGM scaled by its maximum.
pub fn export_heatmaps(maps: &LayerMaps, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::at_path(dir, e))?;
    let n = maps.seq_len;
    for (&l, m) in maps.layers.ids().iter().zip(&maps.maps) {
        let max = m.iter().cloned().fold(f32::MIN_POSITIVE, f32::max);
        let r = Raster::from_pixels(n, n, m.iter().map(|v| v / max).collect())?;
        save_pgm(&r, &dir.join(format!("attn_layer{l:02}.pgm")))?;
    }
    Ok(())
}

/// Projects the rows of an `n x n` map onto its top principal components.
/// Returns `components` vectors of length `n` (one value per token).
pub fn pca_projection(map: &[f32], n: usize, components: usize) -> Vec<Vec<f64>> {
    let rows: Vec<Vec<f64>> = map.chunks(n).map(|r| r.iter().map(|&v| v as f64).collect()).collect();
    let mean: Vec<f64> = (0..n).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(a, m)| a - m).collect())
        .collect();
    let mut cov = vec![0.0; n * n];
    for r in &centered {
        for a in 0..n {
            if r[a] == 0.0 {
                continue;
            }
            for b in 0..n {
                cov[a * n + b] += r[a] * r[b];
            }
        }
    }
    // power iteration from a fixed start, kept orthogonal to earlier components
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(components);
    let orthonormalize = |w: &mut Vec<f64>, basis: &[Vec<f64>]| -> f64 {
        for e in basis {
            let d: f64 = w.iter().zip(e).map(|(x, y)| x * y).sum();
            w.iter_mut().zip(e).for_each(|(x, y)| *x -= d * y);
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-300 {
            w.iter_mut().for_each(|x| *x /= norm);
        }
        norm
    };
    for c in 0..components {
        let mut v: Vec<f64> = (0..n).map(|j| 1.0 + ((j + c) % 7) as f64 * 0.1).collect();
        orthonormalize(&mut v, &basis);
        for _ in 0..200 {
            let mut w: Vec<f64> = (0..n).map(|a| (0..n).map(|b| cov[a * n + b] * v[b]).sum()).collect();
            if orthonormalize(&mut w, &basis) <= 1e-300 {
                break;
            }
            v = w;
        }
        basis.push(v);
    }
    basis
        .iter()
        .map(|v| centered.iter().map(|r| r.iter().zip(v).map(|(x, y)| x * y).sum()).collect())
        .collect()
}

/// Writes the top-3 projection of each layer's rows as three `H x W` PGMs.
pub fn export_pca(maps: &LayerMaps, grid_height: usize, grid_width: usize, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::at_path(dir, e))?;
    for (&l, m) in maps.layers.ids().iter().zip(&maps.maps) {
        for (c, comp) in pca_projection(m, maps.seq_len, 3).iter().enumerate() {
            let lo = comp.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = comp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = (hi - lo).max(1e-12);
            let px = comp.iter().map(|v| ((v - lo) / span) as f32).collect();
            let r = Raster::from_pixels(grid_width, grid_height, px)?;
            save_pgm(&r, &dir.join(format!("pca_layer{l:02}_c{c}.pgm")))?;
        }
    }
    Ok(())
}
