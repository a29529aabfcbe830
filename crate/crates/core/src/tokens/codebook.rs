use crate::error::{Error, Result};
use crate::tokens::raster::Raster;

/// Fixed dictionary of `P x P` patches. Index `K = len()` is reserved for the
/// mask token and never names a patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    patch: usize,
    entries: Vec<Vec<f32>>,
}

impl Codebook {
    pub fn new(patch: usize, entries: Vec<Vec<f32>>) -> Result<Self> {
        if patch == 0 {
            return Err(Error::config("patch side must be positive"));
        }
        if entries.len() < 2 {
            return Err(Error::config("codebook needs at least two entries"));
        }
        let area = patch * patch;
        if entries.iter().any(|e| e.len() != area) {
            return Err(Error::shape(format!("codebook entries must have {area} pixels")));
        }
        if entries[0].iter().any(|&p| p != 0.0) {
            return Err(Error::config("codebook entry 0 must be the all-zeros patch"));
        }
        for (i, a) in entries.iter().enumerate() {
            if a.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::config(format!("entry {i} has pixels outside [0, 1]")));
            }
            if entries[..i].contains(a) {
                return Err(Error::config(format!("entry {i} duplicates an earlier entry")));
            }
        }
        Ok(Codebook { patch, entries })
    }

    /// The default 16-entry binary codebook on 4x4 patches:
    ///
    /// | index  | patch                                   |
    /// |--------|-----------------------------------------|
    /// | 0      | empty                                   |
    /// | 1      | full                                    |
    /// | 2..=5  | half planes: left, right, top, bottom   |
    /// | 6..=9  | one-pixel vertical line at column 0..=3 |
    /// | 10..=13| one-pixel horizontal line at row 0..=3  |
    /// | 14, 15 | main and anti diagonal lines            |
    pub fn binary4() -> Self {
        const P: usize = 4;
        let make = |on: &dyn Fn(usize, usize) -> bool| -> Vec<f32> {
            (0..P * P)
                .map(|i| if on(i % P, i / P) { 1.0 } else { 0.0 })
                .collect()
        };
        let mut entries = vec![make(&|_, _| false), make(&|_, _| true)];
        entries.push(make(&|x, _| x < P / 2));
        entries.push(make(&|x, _| x >= P / 2));
        entries.push(make(&|_, y| y < P / 2));
        entries.push(make(&|_, y| y >= P / 2));
        for c in 0..P {
            entries.push(make(&move |x, _| x == c));
        }
        for r in 0..P {
            entries.push(make(&move |_, y| y == r));
        }
        entries.push(make(&|x, y| x == y));
        entries.push(make(&|x, y| x + y == P - 1));
        Codebook::new(P, entries).expect("built-in codebook is valid")
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    /// Number of real entries `K`.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn mask_token(&self) -> u32 {
        self.entries.len() as u32
    }

    pub fn entry(&self, index: usize) -> &[f32] {
        &self.entries[index]
    }

    /// Nearest entry by squared distance; ties go to the lowest index.
    pub fn nearest(&self, patch: &[f32]) -> usize {
        let mut best = 0;
        let mut best_d = f32::INFINITY;
        for (i, e) in self.entries.iter().enumerate() {
            let d: f32 = e.iter().zip(patch).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }
}

/// `height x width` grid of token indices in `[0, K]`, where `K` marks a masked position.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    pub height: usize,
    pub width: usize,
    pub vocab: usize,
    pub tokens: Vec<u32>,
    pub class_label: usize,
}

impl TokenGrid {
    pub fn new(
        height: usize,
        width: usize,
        vocab: usize,
        tokens: Vec<u32>,
        class_label: usize,
    ) -> Result<Self> {
        if tokens.len() != height * width {
            return Err(Error::shape(format!(
                "{} tokens for a {height}x{width} grid",
                tokens.len()
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize > vocab) {
            return Err(Error::input(format!("token {t} exceeds mask index {vocab}")));
        }
        Ok(TokenGrid {
            height,
            width,
            vocab,
            tokens,
            class_label,
        })
    }

    pub fn fully_masked(height: usize, width: usize, vocab: usize, class_label: usize) -> Self {
        TokenGrid {
            height,
            width,
            vocab,
            tokens: vec![vocab as u32; height * width],
            class_label,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mask_token(&self) -> u32 {
        self.vocab as u32
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.tokens[i] == self.mask_token()
    }

    pub fn masked_count(&self) -> usize {
        let m = self.mask_token();
        self.tokens.iter().filter(|&&t| t == m).count()
    }

    pub fn same_shape(&self, other: &TokenGrid) -> bool {
        self.height == other.height && self.width == other.width && self.vocab == other.vocab
    }
}

/// Quantizes each patch of `image` to its nearest codebook entry.
pub fn encode_raster(image: &Raster, codebook: &Codebook, class_label: usize) -> Result<TokenGrid> {
    let p = codebook.patch();
    if image.width % p != 0 || image.height % p != 0 {
        return Err(Error::shape(format!(
            "{}x{} raster is not divisible by patch side {p}",
            image.width, image.height
        )));
    }
    let (gw, gh) = (image.width / p, image.height / p);
    let mut patch = vec![0.0f32; p * p];
    let mut tokens = Vec::with_capacity(gw * gh);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..p {
                for px in 0..p {
                    patch[py * p + px] = image.get(gx * p + px, gy * p + py);
                }
            }
            tokens.push(codebook.nearest(&patch) as u32);
        }
    }
    TokenGrid::new(gh, gw, codebook.len(), tokens, class_label)
}

/// Tiles codebook patches back into a raster.
pub fn decode_tokens(grid: &TokenGrid, codebook: &Codebook) -> Result<Raster> {
    if grid.vocab != codebook.len() {
        return Err(Error::shape(format!(
            "grid vocabulary {} does not match codebook size {}",
            grid.vocab,
            codebook.len()
        )));
    }
    let p = codebook.patch();
    let mut out = Raster::zeros(grid.width * p, grid.height * p);
    for (i, &t) in grid.tokens.iter().enumerate() {
        if t as usize >= codebook.len() {
            return Err(Error::Decode(format!("position {i} is masked")));
        }
        let (gx, gy) = (i % grid.width, i / grid.width);
        let entry = codebook.entry(t as usize);
        for py in 0..p {
            for px in 0..p {
                out.set(gx * p + px, gy * p + py, entry[py * p + px]);
            }
        }
    }
    Ok(out)
}
