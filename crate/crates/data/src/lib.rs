//! IDX-container parsing for the MNIST files, with transparent gzip.
//!
//! The IDX layout is big-endian: a 4-byte magic (2051 for image files,
//! 2049 for label files), one u32 extent per dimension, then the payload
//! bytes. Gzip-compressed files are detected by their 0x1f8b magic and
//! inflated before parsing, since the canonical distribution ships gzipped.

use std::io::Read;
use std::path::{Path, PathBuf};

use cnnic::data::{Dataset, Split};
use cnnic::error::{Error, Result};
use cnnic::rng::SplitMix64;
use cnnic::scalar::Scalar;
use cnnic::tensor::Tensor;
use flate2::read::GzDecoder;

pub const IMAGES_MAGIC: u32 = 2051;
pub const LABELS_MAGIC: u32 = 2049;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    if *pos + 4 > bytes.len() {
        return Err(Error::Data("idx: truncated header".into()));
    }
    let v = u32::from_be_bytes(bytes[*pos..*pos + 4].try_into().unwrap());
    *pos += 4;
    Ok(v)
}

/// Parse an image file into (count, rows, cols, raw 0–255 pixels).
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut pos = 0;
    let magic = read_u32(bytes, &mut pos)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Data(format!(
            "idx: wrong magic {magic} for an image file (expected {IMAGES_MAGIC})"
        )));
    }
    let n = read_u32(bytes, &mut pos)? as usize;
    let rows = read_u32(bytes, &mut pos)? as usize;
    let cols = read_u32(bytes, &mut pos)? as usize;
    let expected = n * rows * cols;
    let payload = &bytes[pos..];
    if payload.len() != expected {
        return Err(Error::Data(format!(
            "idx: header declares {expected} pixel bytes, file holds {}",
            payload.len()
        )));
    }
    Ok((n, rows, cols, payload.to_vec()))
}

/// Parse a label file into bytes 0–9.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut pos = 0;
    let magic = read_u32(bytes, &mut pos)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Data(format!(
            "idx: wrong magic {magic} for a label file (expected {LABELS_MAGIC})"
        )));
    }
    let n = read_u32(bytes, &mut pos)? as usize;
    let payload = &bytes[pos..];
    if payload.len() != n {
        return Err(Error::Data(format!(
            "idx: header declares {n} labels, file holds {}",
            payload.len()
        )));
    }
    if let Some(&bad) = payload.iter().find(|&&y| y > 9) {
        return Err(Error::Data(format!("idx: label {bad} out of range [0,9]")));
    }
    Ok(payload.to_vec())
}

/// Serialize images into IDX bytes (test fixtures and synthetic sets).
pub fn write_idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), n * rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    out.extend_from_slice(pixels);
    out
}

/// Serialize labels into IDX bytes.
pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Inflate when the gzip magic is present, otherwise pass through.
pub fn decompress_if_gzip(bytes: Vec<u8>) -> Result<Vec<u8>> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Data(format!("gzip: {e}")))?;
        return Ok(out);
    }
    Ok(bytes)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    decompress_if_gzip(bytes)
}

/// `<base>` or `<base>.gz`, whichever exists under `dir`.
pub fn resolve(dir: &Path, base: &str) -> Result<PathBuf> {
    let plain = dir.join(base);
    if plain.exists() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{base}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(Error::Data(format!(
        "missing data file {} (also tried .gz)",
        plain.display()
    )))
}

/// Load one split from an image and a label file, normalizing pixels to
/// [0,1] by dividing by 255.
pub fn load_split<T: Scalar>(
    images_path: &Path,
    labels_path: &Path,
    split: Split,
) -> Result<Dataset<T>> {
    let (n, rows, cols, pixels) = parse_idx_images(&read_file(images_path)?)?;
    let labels = parse_idx_labels(&read_file(labels_path)?)?;
    if labels.len() != n {
        return Err(Error::Data(format!(
            "{} images but {} labels",
            n,
            labels.len()
        )));
    }
    if rows != cols {
        return Err(Error::Data(format!(
            "non-square images {rows}x{cols} are not supported"
        )));
    }
    let scale = T::from_f64(1.0 / 255.0);
    let data: Vec<T> = pixels
        .iter()
        .map(|&p| T::from_f64(p as f64) * scale)
        .collect();
    let images = Tensor::new(vec![n, 1, rows, cols], data)?;
    Dataset::new(images, labels, split)
}

/// Ten-class synthetic stand-in for MNIST: each class lights one block of a
/// 2×5 grid on a 28×28 canvas plus seeded noise. Returns raw IDX-style
/// pixel bytes and labels.
pub fn synthetic_images(n: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = SplitMix64::stream(seed, &[0x1d2]);
    let size = 28;
    let (cell_h, cell_w) = (size / 2, size / 5);
    let mut pixels = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = (i % 10) as u8;
        let (row, col) = ((class / 5) as usize, (class % 5) as usize);
        for y in 0..size {
            for x in 0..size {
                let inside = y >= row * cell_h
                    && y < (row + 1) * cell_h
                    && x >= col * cell_w
                    && x < (col + 1) * cell_w;
                let base = if inside { 200.0 } else { 10.0 };
                pixels.push((base + 40.0 * rng.next_f64()) as u8);
            }
        }
        labels.push(class);
    }
    (pixels, labels)
}
