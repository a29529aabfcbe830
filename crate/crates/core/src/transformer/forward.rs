//! Pre-norm transformer forward pass with an optional activation cache, and
//! the matching hand-derived backward pass.

use crate::tensor::{add_col_sums, add_row_bias, gemm, Float, View, ViewMut};
use crate::transformer::params::{ArchConfig, LayerParams, Params};

const LN_EPS: f64 = 1e-5;

/// Per-layer activations kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct LayerCache<F> {
    ln1_xhat: Vec<F>,
    ln1_rstd: Vec<F>,
    a: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    /// `heads x N x N` softmax rows.
    pub(crate) probs: Vec<F>,
    o: Vec<F>,
    ln2_xhat: Vec<F>,
    ln2_rstd: Vec<F>,
    b: Vec<F>,
    u: Vec<F>,
    g: Vec<F>,
}

#[derive(Debug, Clone, Default)]
pub struct Cache<F> {
    pub(crate) tokens: Vec<u32>,
    pub(crate) class_label: usize,
    pub(crate) layers: Vec<LayerCache<F>>,
    lnf_xhat: Vec<F>,
    lnf_rstd: Vec<F>,
    z: Vec<F>,
}

/// What a forward run should produce.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RunSpec {
    /// Number of layers to evaluate (1-based count).
    pub upto: usize,
    /// Evaluate the output head (requires `upto == num_layers`).
    pub logits: bool,
    /// Keep every activation for backward.
    pub keep_cache: bool,
}

pub(crate) struct RunOut<F> {
    pub logits: Vec<F>,
    /// Attention probabilities of each evaluated layer (`heads x N x N`).
    pub probs: Vec<Vec<F>>,
    pub cache: Option<Cache<F>>,
}

fn layer_norm<F: Float>(x: &[F], g: &[F], b: &[F], out: &mut [F], xhat: &mut [F], rstd: &mut [F]) {
    let d = g.len();
    let eps = F::of(LN_EPS);
    let inv_d = F::one() / F::of(d as f64);
    for (r, ((row, orow), hrow)) in x
        .chunks_exact(d)
        .zip(out.chunks_exact_mut(d))
        .zip(xhat.chunks_exact_mut(d))
        .enumerate()
    {
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            hrow[j] = h;
            orow[j] = h * g[j] + b[j];
        }
    }
}

/// Backward of layer norm; accumulates `dx` into `dx_acc`.
fn layer_norm_back<F: Float>(
    dy: &[F],
    xhat: &[F],
    rstd: &[F],
    g: &[F],
    dg: &mut [F],
    db: &mut [F],
    dx_acc: &mut [F],
) {
    let d = g.len();
    let inv_d = F::one() / F::of(d as f64);
    let mut dxhat = vec![F::zero(); d];
    for r in 0..rstd.len() {
        let dyr = &dy[r * d..(r + 1) * d];
        let hr = &xhat[r * d..(r + 1) * d];
        let mut m1 = F::zero();
        let mut m2 = F::zero();
        for j in 0..d {
            dg[j] += dyr[j] * hr[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * hr[j];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        let out = &mut dx_acc[r * d..(r + 1) * d];
        for j in 0..d {
            out[j] += rstd[r] * (dxhat[j] - m1 - hr[j] * m2);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu<F: Float>(x: F) -> F {
    let c = F::of(GELU_C);
    let k = F::of(0.044715);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<F: Float>(x: F) -> F {
    let c = F::of(GELU_C);
    let k = F::of(0.044715);
    let half = F::of(0.5);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * k * x * x)
}

/// `out[N x dout] = x[N x din] * w[din x dout] + b`.
fn linear<F: Float>(x: &[F], w: &[F], b: &[F], n: usize, din: usize, dout: usize) -> Vec<F> {
    let mut out = vec![F::zero(); n * dout];
    gemm(View::new(x, n, din), View::new(w, din, dout), ViewMut::new(&mut out, n, dout), false);
    add_row_bias(&mut out, b);
    out
}

/// Accumulates `dw += x^T dy`, `db += colsum(dy)`; returns `dx = dy w^T`.
#[allow(clippy::too_many_arguments)]
fn linear_back<F: Float>(
    x: &[F],
    w: &[F],
    dy: &[F],
    dw: &mut [F],
    db: &mut [F],
    n: usize,
    din: usize,
    dout: usize,
) -> Vec<F> {
    gemm(View::new(x, n, din).t(), View::new(dy, n, dout), ViewMut::new(dw, din, dout), true);
    add_col_sums(dy, db);
    let mut dx = vec![F::zero(); n * din];
    gemm(View::new(dy, n, dout), View::new(w, din, dout).t(), ViewMut::new(&mut dx, n, din), false);
    dx
}

pub(crate) fn embed<F: Float>(c: &ArchConfig, p: &Params<F>, tokens: &[u32], class_label: usize) -> Vec<F> {
    let d = c.width;
    let mut x = vec![F::zero(); tokens.len() * d];
    let cls = &p.cls_emb[class_label * d..(class_label + 1) * d];
    for (i, &t) in tokens.iter().enumerate() {
        let te = &p.tok_emb[t as usize * d..(t as usize + 1) * d];
        let pe = &p.pos_emb[i * d..(i + 1) * d];
        let row = &mut x[i * d..(i + 1) * d];
        for j in 0..d {
            row[j] = te[j] + pe[j] + cls[j];
        }
    }
    x
}

fn layer_forward<F: Float>(
    c: &ArchConfig,
    lp: &LayerParams<F>,
    x: &mut Vec<F>,
    keep: bool,
) -> (Vec<F>, Option<LayerCache<F>>) {
    let n = c.seq_len();
    let d = c.width;
    let h = c.num_heads;
    let dh = c.head_dim();
    let f = c.ffn_width();
    let scale = F::of(1.0 / (dh as f64).sqrt());

    let mut a = vec![F::zero(); n * d];
    let mut ln1_xhat = vec![F::zero(); n * d];
    let mut ln1_rstd = vec![F::zero(); n];
    layer_norm(x, &lp.ln1_g, &lp.ln1_b, &mut a, &mut ln1_xhat, &mut ln1_rstd);

    let q = linear(&a, &lp.wq, &lp.bq, n, d, d);
    let k = linear(&a, &lp.wk, &lp.bk, n, d, d);
    let v = linear(&a, &lp.wv, &lp.bv, n, d, d);

    let mut probs = vec![F::zero(); h * n * n];
    let mut o = vec![F::zero(); n * d];
    for head in 0..h {
        let pm = &mut probs[head * n * n..(head + 1) * n * n];
        gemm(
            View::cols_of(&q, n, d, head * dh, dh),
            View::cols_of(&k, n, d, head * dh, dh).t(),
            ViewMut::new(pm, n, n),
            false,
        );
        for row in pm.chunks_exact_mut(n) {
            for s in row.iter_mut() {
                *s *= scale;
            }
            crate::tensor::softmax_in_place(row);
        }
        gemm(
            View::new(pm, n, n),
            View::cols_of(&v, n, d, head * dh, dh),
            ViewMut::cols_of(&mut o, n, d, head * dh, dh),
            false,
        );
    }
    let attn_out = linear(&o, &lp.wo, &lp.bo, n, d, d);
    for (xi, ai) in x.iter_mut().zip(&attn_out) {
        *xi += *ai;
    }

    let mut b = vec![F::zero(); n * d];
    let mut ln2_xhat = vec![F::zero(); n * d];
    let mut ln2_rstd = vec![F::zero(); n];
    layer_norm(x, &lp.ln2_g, &lp.ln2_b, &mut b, &mut ln2_xhat, &mut ln2_rstd);
    let u = linear(&b, &lp.w1, &lp.b1, n, d, f);
    let g: Vec<F> = u.iter().map(|&z| gelu(z)).collect();
    let ffn = linear(&g, &lp.w2, &lp.b2, n, f, d);
    for (xi, fi) in x.iter_mut().zip(&ffn) {
        *xi += *fi;
    }

    if keep {
        let cache = LayerCache {
            ln1_xhat,
            ln1_rstd,
            a,
            q,
            k,
            v,
            probs: Vec::new(),
            o,
            ln2_xhat,
            ln2_rstd,
            b,
            u,
            g,
        };
        (probs, Some(cache))
    } else {
        (probs, None)
    }
}

pub(crate) fn run<F: Float>(
    c: &ArchConfig,
    p: &Params<F>,
    tokens: &[u32],
    class_label: usize,
    spec: RunSpec,
) -> RunOut<F> {
    let n = c.seq_len();
    let d = c.width;
    let mut x = embed(c, p, tokens, class_label);
    let mut all_probs = Vec::with_capacity(spec.upto);
    let mut layer_caches = Vec::new();
    for lp in p.layers.iter().take(spec.upto) {
        let (probs, cache) = layer_forward(c, lp, &mut x, spec.keep_cache);
        if let Some(mut lc) = cache {
            lc.probs = probs.clone();
            layer_caches.push(lc);
        }
        all_probs.push(probs);
    }
    if !spec.logits {
        return RunOut {
            logits: Vec::new(),
            probs: all_probs,
            cache: None,
        };
    }
    let mut z = vec![F::zero(); n * d];
    let mut lnf_xhat = vec![F::zero(); n * d];
    let mut lnf_rstd = vec![F::zero(); n];
    layer_norm(&x, &p.lnf_g, &p.lnf_b, &mut z, &mut lnf_xhat, &mut lnf_rstd);
    let logits = linear(&z, &p.w_out, &p.b_out, n, d, c.vocab);
    let cache = spec.keep_cache.then(|| Cache {
        tokens: tokens.to_vec(),
        class_label,
        layers: layer_caches,
        lnf_xhat,
        lnf_rstd,
        z,
    });
    RunOut {
        logits,
        probs: all_probs,
        cache,
    }
}

/// Accumulates parameter gradients of `sum(dlogits * logits)` into `grads`.
pub(crate) fn backward<F: Float>(
    c: &ArchConfig,
    p: &Params<F>,
    cache: &Cache<F>,
    dlogits: &[F],
    grads: &mut Params<F>,
) {
    let n = c.seq_len();
    let d = c.width;
    let h = c.num_heads;
    let dh = c.head_dim();
    let f = c.ffn_width();
    let scale = F::of(1.0 / (dh as f64).sqrt());

    let dz = linear_back(&cache.z, &p.w_out, dlogits, &mut grads.w_out, &mut grads.b_out, n, d, c.vocab);
    let mut dx = vec![F::zero(); n * d];
    layer_norm_back(
        &dz,
        &cache.lnf_xhat,
        &cache.lnf_rstd,
        &p.lnf_g,
        &mut grads.lnf_g,
        &mut grads.lnf_b,
        &mut dx,
    );

    for (li, lc) in cache.layers.iter().enumerate().rev() {
        let lp = &p.layers[li];
        let lg = &mut grads.layers[li];

        // feed-forward branch: x_out = x_mid + W2 gelu(W1 LN2(x_mid))
        let dg = linear_back(&lc.g, &lp.w2, &dx, &mut lg.w2, &mut lg.b2, n, f, d);
        let du: Vec<F> = dg.iter().zip(&lc.u).map(|(&g, &u)| g * gelu_grad(u)).collect();
        let db = linear_back(&lc.b, &lp.w1, &du, &mut lg.w1, &mut lg.b1, n, d, f);
        layer_norm_back(&db, &lc.ln2_xhat, &lc.ln2_rstd, &lp.ln2_g, &mut lg.ln2_g, &mut lg.ln2_b, &mut dx);

        // attention branch: x_mid = x_in + Wo attn(LN1(x_in))
        let d_o = linear_back(&lc.o, &lp.wo, &dx, &mut lg.wo, &mut lg.bo, n, d, d);
        let mut dq = vec![F::zero(); n * d];
        let mut dk = vec![F::zero(); n * d];
        let mut dv = vec![F::zero(); n * d];
        let mut dp = vec![F::zero(); n * n];
        for head in 0..h {
            let pm = &lc.probs[head * n * n..(head + 1) * n * n];
            gemm(
                View::cols_of(&d_o, n, d, head * dh, dh),
                View::cols_of(&lc.v, n, d, head * dh, dh).t(),
                ViewMut::new(&mut dp, n, n),
                false,
            );
            gemm(
                View::new(pm, n, n).t(),
                View::cols_of(&d_o, n, d, head * dh, dh),
                ViewMut::cols_of(&mut dv, n, d, head * dh, dh),
                false,
            );
            // softmax backward, folded with the score scale
            for (prow, dprow) in pm.chunks_exact(n).zip(dp.chunks_exact_mut(n)) {
                let dot: F = prow.iter().zip(dprow.iter()).map(|(&a, &b)| a * b).sum();
                for (ds, &pv) in dprow.iter_mut().zip(prow) {
                    *ds = pv * (*ds - dot) * scale;
                }
            }
            gemm(
                View::new(&dp, n, n),
                View::cols_of(&lc.k, n, d, head * dh, dh),
                ViewMut::cols_of(&mut dq, n, d, head * dh, dh),
                false,
            );
            gemm(
                View::new(&dp, n, n).t(),
                View::cols_of(&lc.q, n, d, head * dh, dh),
                ViewMut::cols_of(&mut dk, n, d, head * dh, dh),
                false,
            );
        }
        let mut da = linear_back(&lc.a, &lp.wq, &dq, &mut lg.wq, &mut lg.bq, n, d, d);
        for (acc, v) in da
            .iter_mut()
            .zip(linear_back(&lc.a, &lp.wk, &dk, &mut lg.wk, &mut lg.bk, n, d, d))
        {
            *acc += v;
        }
        for (acc, v) in da
            .iter_mut()
            .zip(linear_back(&lc.a, &lp.wv, &dv, &mut lg.wv, &mut lg.bv, n, d, d))
        {
            *acc += v;
        }
        layer_norm_back(&da, &lc.ln1_xhat, &lc.ln1_rstd, &lp.ln1_g, &mut lg.ln1_g, &mut lg.ln1_b, &mut dx);
    }

    // embeddings
    let cls = cache.class_label;
    for (i, &t) in cache.tokens.iter().enumerate() {
        let row = &dx[i * d..(i + 1) * d];
        let t = t as usize;
        for j in 0..d {
            grads.tok_emb[t * d + j] += row[j];
            grads.pos_emb[i * d + j] += row[j];
            grads.cls_emb[cls * d + j] += row[j];
        }
    }
}
