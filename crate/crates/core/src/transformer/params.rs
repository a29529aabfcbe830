use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Float;

/// Architecture of the class-conditional bidirectional transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// Codebook size `K`; the embedding table has `K + 1` rows (last is MASK).
    pub vocab: usize,
    pub num_classes: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub width: usize,
    /// Feed-forward hidden size as a multiple of `width`.
    pub ffn_mult: usize,
    /// Standard deviation of every weight matrix and embedding at init.
    pub init_std: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            vocab: 16,
            num_classes: 5,
            grid_height: 16,
            grid_width: 16,
            num_layers: 8,
            num_heads: 4,
            width: 128,
            ffn_mult: 2,
            init_std: 0.02,
        }
    }
}

impl ArchConfig {
    pub fn seq_len(&self) -> usize {
        self.grid_height * self.grid_width
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.num_heads
    }

    pub fn ffn_width(&self) -> usize {
        self.width * self.ffn_mult
    }

    pub fn mask_token(&self) -> u32 {
        self.vocab as u32
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab < 2 {
            return fail(format!("vocab must be >= 2, got {}", self.vocab));
        }
        if self.num_classes == 0 {
            return fail("num_classes must be positive".into());
        }
        if self.seq_len() == 0 {
            return fail("grid must be non-empty".into());
        }
        if self.num_layers == 0 || self.num_heads == 0 || self.width == 0 || self.ffn_mult == 0 {
            return fail("layers, heads, width and ffn_mult must be positive".into());
        }
        if self.width % self.num_heads != 0 {
            return fail(format!(
                "width {} is not divisible by num_heads {}",
                self.width, self.num_heads
            ));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return fail("init_std must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub ln1_g: Vec<F>,
    pub ln1_b: Vec<F>,
    pub wq: Vec<F>,
    pub bq: Vec<F>,
    pub wk: Vec<F>,
    pub bk: Vec<F>,
    pub wv: Vec<F>,
    pub bv: Vec<F>,
    pub wo: Vec<F>,
    pub bo: Vec<F>,
    pub ln2_g: Vec<F>,
    pub ln2_b: Vec<F>,
    pub w1: Vec<F>,
    pub b1: Vec<F>,
    pub w2: Vec<F>,
    pub b2: Vec<F>,
}

/// Every trainable tensor. Matrices are row-major `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    pub tok_emb: Vec<F>,
    pub pos_emb: Vec<F>,
    pub cls_emb: Vec<F>,
    pub layers: Vec<LayerParams<F>>,
    pub lnf_g: Vec<F>,
    pub lnf_b: Vec<F>,
    pub w_out: Vec<F>,
    pub b_out: Vec<F>,
}

/// How a tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub init: InitKind,
}

/// Names, shapes and init rules of every tensor, in canonical order.
pub fn param_specs(c: &ArchConfig) -> Vec<ParamSpec> {
    use InitKind::*;
    let (d, f) = (c.width, c.ffn_width());
    let spec = |name: String, dims: Vec<usize>, init| ParamSpec { name, dims, init };
    let mut out = vec![
        spec("tok_emb".into(), vec![c.vocab + 1, d], Normal),
        spec("pos_emb".into(), vec![c.seq_len(), d], Normal),
        spec("cls_emb".into(), vec![c.num_classes, d], Normal),
    ];
    for l in 0..c.num_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.extend([
            spec(p("ln1_g"), vec![d], Ones),
            spec(p("ln1_b"), vec![d], Zeros),
            spec(p("wq"), vec![d, d], Normal),
            spec(p("bq"), vec![d], Zeros),
            spec(p("wk"), vec![d, d], Normal),
            spec(p("bk"), vec![d], Zeros),
            spec(p("wv"), vec![d, d], Normal),
            spec(p("bv"), vec![d], Zeros),
            spec(p("wo"), vec![d, d], Normal),
            spec(p("bo"), vec![d], Zeros),
            spec(p("ln2_g"), vec![d], Ones),
            spec(p("ln2_b"), vec![d], Zeros),
            spec(p("w1"), vec![d, f], Normal),
            spec(p("b1"), vec![f], Zeros),
            spec(p("w2"), vec![f, d], Normal),
            spec(p("b2"), vec![d], Zeros),
        ]);
    }
    out.extend([
        spec("lnf_g".into(), vec![d], Ones),
        spec("lnf_b".into(), vec![d], Zeros),
        spec("w_out".into(), vec![d, c.vocab], Normal),
        spec("b_out".into(), vec![c.vocab], Zeros),
    ]);
    out
}

impl<F> LayerParams<F> {
    fn tensors(&self) -> [&Vec<F>; 16] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv,
            &self.wo, &self.bo, &self.ln2_g, &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<F>; 16] {
        let LayerParams {
            ln1_g,
            ln1_b,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln2_g,
            ln2_b,
            w1,
            b1,
            w2,
            b2,
        } = self;
        [
            ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2,
        ]
    }
}

impl<F: Float> Params<F> {
    /// Builds a parameter set from tensors listed in canonical order.
    pub fn from_tensors(c: &ArchConfig, mut tensors: Vec<Vec<F>>) -> Result<Self> {
        let specs = param_specs(c);
        if tensors.len() != specs.len() {
            return Err(Error::shape(format!(
                "expected {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            let want: usize = s.dims.iter().product();
            if t.len() != want {
                return Err(Error::shape(format!(
                    "{} has {} values, expected {want}",
                    s.name,
                    t.len()
                )));
            }
        }
        let tail: Vec<Vec<F>> = tensors.split_off(tensors.len() - 4);
        let mut it = tensors.into_iter();
        let tok_emb = it.next().unwrap();
        let pos_emb = it.next().unwrap();
        let cls_emb = it.next().unwrap();
        let mut layers = Vec::with_capacity(c.num_layers);
        for _ in 0..c.num_layers {
            let mut n = || it.next().unwrap();
            layers.push(LayerParams {
                ln1_g: n(),
                ln1_b: n(),
                wq: n(),
                bq: n(),
                wk: n(),
                bk: n(),
                wv: n(),
                bv: n(),
                wo: n(),
                bo: n(),
                ln2_g: n(),
                ln2_b: n(),
                w1: n(),
                b1: n(),
                w2: n(),
                b2: n(),
            });
        }
        let mut tail = tail.into_iter();
        Ok(Params {
            tok_emb,
            pos_emb,
            cls_emb,
            layers,
            lnf_g: tail.next().unwrap(),
            lnf_b: tail.next().unwrap(),
            w_out: tail.next().unwrap(),
            b_out: tail.next().unwrap(),
        })
    }

    pub fn zeros(c: &ArchConfig) -> Self {
        let tensors = param_specs(c)
            .iter()
            .map(|s| vec![F::zero(); s.dims.iter().product()])
            .collect();
        Params::from_tensors(c, tensors).expect("shapes come from the spec list")
    }

    pub fn init(c: &ArchConfig, rng: &mut Rng) -> Self {
        let normal = Normal::new(0.0, c.init_std).expect("validated std");
        let tensors = param_specs(c)
            .iter()
            .map(|s| {
                let n: usize = s.dims.iter().product();
                match s.init {
                    InitKind::Normal => (0..n).map(|_| F::of(normal.sample(rng))).collect(),
                    InitKind::Zeros => vec![F::zero(); n],
                    InitKind::Ones => vec![F::one(); n],
                }
            })
            .collect();
        Params::from_tensors(c, tensors).expect("shapes come from the spec list")
    }

    /// All tensors in canonical order.
    pub fn tensors(&self) -> Vec<&Vec<F>> {
        let mut out = vec![&self.tok_emb, &self.pos_emb, &self.cls_emb];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out.extend([&self.lnf_g, &self.lnf_b, &self.w_out, &self.b_out]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<F>> {
        let Params {
            tok_emb,
            pos_emb,
            cls_emb,
            layers,
            lnf_g,
            lnf_b,
            w_out,
            b_out,
        } = self;
        let mut out = vec![tok_emb, pos_emb, cls_emb];
        for l in layers.iter_mut() {
            out.extend(l.tensors_mut());
        }
        out.extend([lnf_g, lnf_b, w_out, b_out]);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<G: Float>(&self) -> Params<G> {
        let map = |v: &Vec<F>| v.iter().map(|x| G::of(x.f64())).collect::<Vec<G>>();
        Params {
            tok_emb: map(&self.tok_emb),
            pos_emb: map(&self.pos_emb),
            cls_emb: map(&self.cls_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_g: map(&l.ln1_g),
                    ln1_b: map(&l.ln1_b),
                    wq: map(&l.wq),
                    bq: map(&l.bq),
                    wk: map(&l.wk),
                    bk: map(&l.bk),
                    wv: map(&l.wv),
                    bv: map(&l.bv),
                    wo: map(&l.wo),
                    bo: map(&l.bo),
                    ln2_g: map(&l.ln2_g),
                    ln2_b: map(&l.ln2_b),
                    w1: map(&l.w1),
                    b1: map(&l.b1),
                    w2: map(&l.w2),
                    b2: map(&l.b2),
                })
                .collect(),
            lnf_g: map(&self.lnf_g),
            lnf_b: map(&self.lnf_b),
            w_out: map(&self.w_out),
            b_out: map(&self.b_out),
        }
    }

    /// `self += other`.
    pub fn add_assign(&mut self, other: &Params<F>) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Flat index -> (tensor, offset).
    pub fn locate(&self, mut flat: usize) -> Option<(usize, usize)> {
        for (i, t) in self.tensors().iter().enumerate() {
            if flat < t.len() {
                return Some((i, flat));
            }
            flat -= t.len();
        }
        None
    }
}
