//! Grayscale rasters and their on-disk forms (binary PGM, PNG export).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major grayscale image with pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl Raster {
    pub fn zeros(width: usize, height: usize) -> Self {
        Raster {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::shape(format!(
                "{} pixels for a {width}x{height} raster",
                pixels.len()
            )));
        }
        Ok(Raster {
            width,
            height,
            pixels,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.pixels[y * self.width + x] = v;
    }

    /// Number of pixels at or above one half.
    pub fn count_on(&self) -> usize {
        self.pixels.iter().filter(|&&p| p >= 0.5).count()
    }

    /// 8-bit quantization used by every file format.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Raster::from_pixels(
            width,
            height,
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }

    /// Mean absolute pixel difference.
    pub fn mean_abs_diff(&self, other: &Raster) -> Result<f64> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::shape("raster sizes differ"));
        }
        let total: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        Ok(total / self.pixels.len().max(1) as f64)
    }
}

/// Encodes a binary (P5) PGM with maxval 255.
pub fn encode_pgm(raster: &Raster) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", raster.width, raster.height).into_bytes();
    out.extend(raster.to_bytes());
    out
}

/// Parses a binary (P5) PGM with maxval 255. Comments (`#`) in the header are skipped.
pub fn decode_pgm(bytes: &[u8]) -> Result<Raster> {
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() {
        return Err(Error::Parse("PGM header not terminated".into()));
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::Parse(format!("unsupported magic {:?}", fields[0])));
    }
    let num = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Parse(format!("bad PGM {what}: {s:?}")))
    };
    let width = num(&fields[1], "width")?;
    let height = num(&fields[2], "height")?;
    let maxval = num(&fields[3], "maxval")?;
    if maxval != 255 {
        return Err(Error::Parse(format!("unsupported maxval {maxval}")));
    }
    let body = &bytes[pos..];
    if body.len() < width * height {
        return Err(Error::Parse(format!(
            "truncated PGM body: {} of {} bytes",
            body.len(),
            width * height
        )));
    }
    Raster::from_bytes(width, height, &body[..width * height])
}

pub fn save_pgm(raster: &Raster, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(raster)).map_err(|e| Error::at_path(path, e))
}

pub fn load_pgm(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::at_path(path, e))?;
    decode_pgm(&bytes)
}

pub fn save_png(raster: &Raster, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::at_path(path, e))?;
    let mut encoder = png::Encoder::new(
        BufWriter::new(file),
        raster.width as u32,
        raster.height as u32,
    );
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Parse(e.to_string()))?;
    writer
        .write_image_data(&raster.to_bytes())
        .map_err(|e| Error::Parse(e.to_string()))?;
    writer.finish().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(())
}

/// Saves by extension: `.png` writes PNG, anything else PGM.
pub fn save_raster(raster: &Raster, path: &Path) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => save_png(raster, path),
        _ => save_pgm(raster, path),
    }
}

pub fn load_raster(path: &Path) -> Result<Raster> {
    load_pgm(path)
}

/// Tiles rasters of equal size into a grid with a one-pixel separator.
pub fn montage(tiles: &[Raster], columns: usize) -> Result<Raster> {
    let Some(first) = tiles.first() else {
        return Ok(Raster::zeros(0, 0));
    };
    if tiles
        .iter()
        .any(|t| t.width != first.width || t.height != first.height)
    {
        return Err(Error::shape("montage tiles differ in size"));
    }
    let columns = columns.max(1).min(tiles.len());
    let rows = tiles.len().div_ceil(columns);
    let w = columns * (first.width + 1) - 1;
    let h = rows * (first.height + 1) - 1;
    let mut out = Raster::from_pixels(w, h, vec![0.5; w * h])?;
    for (idx, tile) in tiles.iter().enumerate() {
        let ox = (idx % columns) * (first.width + 1);
        let oy = (idx / columns) * (first.height + 1);
        for y in 0..tile.height {
            for x in 0..tile.width {
                out.set(ox + x, oy + y, tile.get(x, y));
            }
        }
    }
    Ok(out)
}

/// Writes raw bytes, creating parent directories.
pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::at_path(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::at_path(path, e))?;
    f.write_all(bytes).map_err(|e| Error::at_path(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_fields() {
        let r = Raster::zeros(5, 3);
        let bytes = encode_pgm(&r);
        assert!(bytes.starts_with(b"P5\n5 3\n255\n"));
        assert_eq!(bytes.len(), 11 + 15);
    }

    #[test]
    fn round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.pgm");
        let bytes: Vec<u8> = (0..=255u8).collect();
        let r = Raster::from_bytes(16, 16, &bytes).unwrap();
        save_raster(&r, &path).unwrap();
        assert_eq!(load_raster(&path).unwrap(), r);
    }

    #[test]
    fn truncated_file_is_parse_error() {
        let r = Raster::zeros(8, 8);
        let bytes = encode_pgm(&r);
        for cut in [0, 3, 8, bytes.len() - 1] {
            assert!(matches!(decode_pgm(&bytes[..cut]), Err(Error::Parse(_))));
        }
    }

    #[test]
    fn comments_and_bad_magic() {
        let ok = b"P5\n# hi\n2 1\n255\n\x00\xff";
        let r = decode_pgm(ok).unwrap();
        assert_eq!(r.pixels, vec![0.0, 1.0]);
        assert!(matches!(decode_pgm(b"P2\n1 1\n255\n0"), Err(Error::Parse(_))));
        assert!(matches!(decode_pgm(b"P5\n1 1\n65535\n00"), Err(Error::Parse(_))));
    }

    #[test]
    fn png_export_writes_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.png");
        save_raster(&Raster::zeros(4, 4), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
    }
}
