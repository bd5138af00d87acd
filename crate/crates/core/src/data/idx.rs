//! Big-endian IDX files, optionally gzip-compressed.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::{Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;

/// Reads a file, inflating it when it starts with the gzip signature.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::DataUnavailable(format!("{}: {e}", path.display())))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::TruncatedFile(format!("{}: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn header(bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>> {
    let need = 4 + 4 * dims;
    if bytes.len() < 4 {
        return Err(Error::TruncatedFile(format!("{} bytes, no magic number", bytes.len())));
    }
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    let found = word(0);
    if found != magic {
        return Err(Error::BadMagic { expected: magic, found });
    }
    if bytes.len() < need {
        return Err(Error::TruncatedFile(format!("{} bytes, header needs {need}", bytes.len())));
    }
    Ok((1..=dims).map(|i| word(i) as usize).collect())
}

fn body(bytes: &[u8], offset: usize, expected: usize) -> Result<&[u8]> {
    let have = bytes.len() - offset;
    if have < expected {
        return Err(Error::TruncatedFile(format!("{have} data bytes, header declares {expected}")));
    }
    if have > expected {
        return Err(Error::CountMismatch(format!("{have} data bytes, header declares {expected}")));
    }
    Ok(&bytes[offset..])
}

/// `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let d = header(bytes, IDX_IMAGES_MAGIC, 3)?;
    let total = d[0].checked_mul(d[1]).and_then(|v| v.checked_mul(d[2]));
    let total = total.ok_or_else(|| Error::InvalidData(format!("image extents {d:?} overflow")))?;
    Ok((d[0], d[1], d[2], body(bytes, 16, total)?))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let d = header(bytes, IDX_LABELS_MAGIC, 1)?;
    body(bytes, 8, d[0])
}

pub fn encode_idx_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Loads an image/label file pair; pixels are scaled to `[0, 1]`.
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img_bytes = read_maybe_gz(images)?;
    let lbl_bytes = read_maybe_gz(labels)?;
    let (n, h, w, pixels) = parse_idx_images(&img_bytes)?;
    let lbl = parse_idx_labels(&lbl_bytes)?;
    if lbl.len() != n {
        return Err(Error::CountMismatch(format!("{n} images, {} labels", lbl.len())));
    }
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    // `body` has checked the pixel count, and an empty file is an empty dataset
    let tensor = Tensor::from_parts(vec![n, 1, h, w], data);
    Dataset::new(tensor, lbl.iter().map(|&l| l as usize).collect(), 10, SplitTag::Train)
}

fn find(dir: &Path, stem: &str) -> Result<std::path::PathBuf> {
    [stem.to_string(), format!("{stem}.gz")]
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::DataUnavailable(format!("{stem}[.gz] not found in {}", dir.display())))
}

/// The standard training (`train = true`) or test pair from a directory
/// holding the usual file names, compressed or not.
pub fn load_mnist(dir: &Path, train: bool) -> Result<Dataset> {
    let prefix = if train { "train" } else { "t10k" };
    let images = find(dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let labels = find(dir, &format!("{prefix}-labels-idx1-ubyte"))?;
    let mut d = load_mnist_idx(&images, &labels)?;
    d.split = if train { SplitTag::Train } else { SplitTag::Test };
    Ok(d)
}
