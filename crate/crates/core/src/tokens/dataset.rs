//! Synthetic shape dataset: filled rasters paired with their outlines.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::prelude::*;
use crate::rng::child_rng;
use crate::tokens::codebook::{encode_raster, Codebook, TokenGrid};
use crate::tokens::raster::{load_pgm, save_pgm, write_file, Raster};

pub const SHAPE_NAMES: [&str; 10] = [
    "disk", "square", "triangle", "cross", "ring", "ellipse", "frame", "flower", "crescent",
    "hexagon",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub num_samples: usize,
    pub num_classes: usize,
    pub image_side: usize,
    pub patch: usize,
    /// Fraction of samples assigned to the held-out split.
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            num_samples: 2000,
            num_classes: 5,
            image_side: 64,
            patch: 4,
            test_fraction: 0.1,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=10).contains(&self.num_classes) {
            return Err(Error::config(format!(
                "num_classes must be in [2, 10], got {}",
                self.num_classes
            )));
        }
        if self.patch == 0 || self.image_side == 0 || self.image_side % self.patch != 0 {
            return Err(Error::config(format!(
                "image_side {} must be a positive multiple of patch {}",
                self.image_side, self.patch
            )));
        }
        if self.image_side < 4 * self.patch {
            return Err(Error::config("image_side must span at least 4 patches"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::config("test_fraction must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSample {
    pub filled: Raster,
    pub sketch: Raster,
    pub class_label: usize,
}

/// Generates `num_samples` shapes; sample `i` has class `i % num_classes` and
/// draws its geometry from its own child stream of `seed`.
pub fn generate_dataset(config: &DataConfig, seed: u64) -> Result<Vec<ShapeSample>> {
    config.validate()?;
    Ok((0..config.num_samples)
        .into_par_iter()
        .map(|i| {
            let class = i % config.num_classes;
            generate_sample(class, config.image_side, child_rng(seed, i as u64))
        })
        .collect())
}

/// One sample of the given class. Geometry: center in the middle 20% of the
/// image, radius 30–45% of the side, uniform rotation.
pub fn generate_sample(class_label: usize, side: usize, mut rng: impl rand::Rng) -> ShapeSample {
    let s = side as f64;
    let cx = s * rng.gen_range(0.4..0.6);
    let cy = s * rng.gen_range(0.4..0.6);
    let radius = s * rng.gen_range(0.3..0.45);
    let angle = rng.gen_range(0.0..2.0 * PI);
    let (sin, cos) = angle.sin_cos();
    let mut filled = Raster::zeros(side, side);
    for y in 0..side {
        for x in 0..side {
            let dx = (x as f64 + 0.5 - cx) / radius;
            let dy = (y as f64 + 0.5 - cy) / radius;
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            if inside(class_label, u, v) {
                filled.set(x, y, 1.0);
            }
        }
    }
    let sketch = outline(&filled);
    ShapeSample {
        filled,
        sketch,
        class_label,
    }
}

fn inside(class: usize, u: f64, v: f64) -> bool {
    let rho = (u * u + v * v).sqrt();
    match class {
        0 => rho <= 1.0,
        1 => u.abs().max(v.abs()) <= 0.85,
        2 => (0..3).all(|k| {
            let t = -PI / 2.0 + 2.0 * PI * k as f64 / 3.0;
            u * t.cos() + v * t.sin() <= 0.5
        }),
        3 => (u.abs() <= 0.33 && v.abs() <= 1.0) || (v.abs() <= 0.33 && u.abs() <= 1.0),
        4 => (0.55..=1.0).contains(&rho),
        5 => u * u + (v / 0.55).powi(2) <= 1.0,
        6 => {
            let m = u.abs().max(v.abs());
            m <= 0.9 && m > 0.5
        }
        7 => rho <= 0.65 + 0.35 * (5.0 * v.atan2(u)).cos(),
        8 => rho <= 1.0 && ((u - 0.45).powi(2) + v * v).sqrt() > 0.85,
        _ => (0..3).all(|k| {
            let t = PI * k as f64 / 3.0;
            (u * t.cos() + v * t.sin()).abs() <= 0.87
        }),
    }
}

/// Morphological boundary: filled pixels with a 4-neighbour outside the shape
/// (or on the image border), i.e. `filled XOR erode(filled)`.
pub fn outline(filled: &Raster) -> Raster {
    let (w, h) = (filled.width, filled.height);
    let on = |x: isize, y: isize| {
        x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && filled.get(x as usize, y as usize) >= 0.5
    };
    let mut out = Raster::zeros(w, h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            if on(x, y) && !(on(x - 1, y) && on(x + 1, y) && on(x, y - 1) && on(x, y + 1)) {
                out.set(x as usize, y as usize, 1.0);
            }
        }
    }
    out
}

/// Eroded interior: filled pixels not on the outline.
pub fn interior_count(filled: &Raster) -> usize {
    filled.count_on() - outline(filled).count_on()
}

/// Filled and sketch token grids of one sample.
pub fn tokenize_sample(sample: &ShapeSample, codebook: &Codebook) -> Result<(TokenGrid, TokenGrid)> {
    Ok((
        encode_raster(&sample.filled, codebook, sample.class_label)?,
        encode_raster(&sample.sketch, codebook, sample.class_label)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Parse(format!("unknown split {other:?}"))),
        }
    }
}

/// One manifest line: `<split> <filled path> <sketch path> <class id>`,
/// paths relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub split: Split,
    pub filled: PathBuf,
    pub sketch: PathBuf,
    pub class_label: usize,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

/// The last `ceil(test_fraction * n)` samples form the held-out split.
pub fn split_of(index: usize, total: usize, test_fraction: f64) -> Split {
    let test = (test_fraction * total as f64).ceil() as usize;
    if index + test >= total {
        Split::Test
    } else {
        Split::Train
    }
}

/// Writes rasters plus `manifest.txt` under `dir`.
pub fn write_dataset(dir: &Path, samples: &[ShapeSample], test_fraction: f64) -> Result<Vec<ManifestRecord>> {
    fs::create_dir_all(dir.join("filled")).map_err(|e| Error::at_path(dir, e))?;
    fs::create_dir_all(dir.join("sketch")).map_err(|e| Error::at_path(dir, e))?;
    let mut records = Vec::with_capacity(samples.len());
    let mut text = String::from("# split filled sketch class\n");
    for (i, s) in samples.iter().enumerate() {
        let rec = ManifestRecord {
            split: split_of(i, samples.len(), test_fraction),
            filled: PathBuf::from(format!("filled/{i:05}.pgm")),
            sketch: PathBuf::from(format!("sketch/{i:05}.pgm")),
            class_label: s.class_label,
        };
        save_pgm(&s.filled, &dir.join(&rec.filled))?;
        save_pgm(&s.sketch, &dir.join(&rec.sketch))?;
        text.push_str(&format!(
            "{} {} {} {}\n",
            rec.split.as_str(),
            rec.filled.display(),
            rec.sketch.display(),
            rec.class_label
        ));
        records.push(rec);
    }
    write_file(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(records)
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Parse(format!(
                "manifest line {}: expected 4 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let class_label = fields[3].parse().map_err(|_| {
            Error::Parse(format!("manifest line {}: bad class {:?}", lineno + 1, fields[3]))
        })?;
        out.push(ManifestRecord {
            split: Split::parse(fields[0])?,
            filled: PathBuf::from(fields[1]),
            sketch: PathBuf::from(fields[2]),
            class_label,
        });
    }
    Ok(out)
}

/// Loads every sample of `split` (or all samples when `None`) from a dataset directory.
pub fn load_dataset(dir: &Path, split: Option<Split>) -> Result<Vec<ShapeSample>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::at_path(&path, e))?;
    parse_manifest(&text)?
        .into_iter()
        .filter(|r| split.map_or(true, |s| s == r.split))
        .map(|r| {
            let filled = load_pgm(&dir.join(&r.filled))?;
            let sketch = load_pgm(&dir.join(&r.sketch))?;
            if filled.width != sketch.width || filled.height != sketch.height {
                return Err(Error::shape(format!(
                    "{} and {} differ in size",
                    r.filled.display(),
                    r.sketch.display()
                )));
            }
            Ok(ShapeSample {
                filled,
                sketch,
                class_label: r.class_label,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize) -> DataConfig {
        DataConfig {
            num_samples: n,
            num_classes: 5,
            ..DataConfig::default()
        }
    }

    #[test]
    fn empty_dataset() {
        assert!(generate_dataset(&cfg(0), 1).unwrap().is_empty());
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_dataset(&cfg(100), 7).unwrap();
        let b = generate_dataset(&cfg(100), 7).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&cfg(100), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_configs() {
        let mut c = cfg(1);
        c.num_classes = 1;
        assert!(matches!(generate_dataset(&c, 0), Err(Error::Config(_))));
        c.num_classes = 11;
        assert!(generate_dataset(&c, 0).is_err());
        let mut c = cfg(1);
        c.image_side = 62;
        assert!(matches!(generate_dataset(&c, 0), Err(Error::Config(_))));
    }

    #[test]
    fn sketch_is_thinner_than_interior() {
        let config = DataConfig {
            num_samples: 200,
            num_classes: 10,
            ..DataConfig::default()
        };
        let patch_area = config.patch * config.patch;
        for s in generate_dataset(&config, 3).unwrap() {
            let area = s.filled.count_on();
            if area >= 4 * patch_area {
                // direct pixel counting
                let sketch = s.sketch.count_on();
                let interior = area - sketch;
                assert!(
                    sketch < interior,
                    "class {}: sketch {sketch} interior {interior}",
                    s.class_label
                );
                assert_eq!(interior, interior_count(&s.filled));
            }
        }
    }

    #[test]
    fn sketch_lies_on_filled_boundary() {
        for s in generate_dataset(&cfg(20), 11).unwrap() {
            for (p, q) in s.sketch.pixels.iter().zip(&s.filled.pixels) {
                if *p >= 0.5 {
                    assert!(*q >= 0.5);
                }
            }
            assert!(s.sketch.count_on() > 0);
        }
    }

    #[test]
    fn token_grids_share_shape() {
        let cb = Codebook::binary4();
        for s in generate_dataset(&cfg(10), 5).unwrap() {
            let (f, k) = tokenize_sample(&s, &cb).unwrap();
            assert!(f.same_shape(&k));
            assert_eq!((f.height, f.width), (16, 16));
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_dataset(&cfg(10), 2).unwrap();
        let recs = write_dataset(dir.path(), &samples, 0.2).unwrap();
        assert_eq!(recs.iter().filter(|r| r.split == Split::Test).count(), 2);
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(parse_manifest(&text).unwrap(), recs);
        assert_eq!(load_dataset(dir.path(), None).unwrap(), samples);
        assert_eq!(load_dataset(dir.path(), Some(Split::Test)).unwrap(), samples[8..].to_vec());
        assert!(parse_manifest("train a b").is_err());
        assert!(parse_manifest("valid a b 1").is_err());
    }
}
