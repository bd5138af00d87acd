//! CIFAR-10 binary batches: one label byte followed by 32×32 R, G and B planes.

use std::path::Path;

use super::{read_maybe_gz, Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

pub fn parse_cifar_records(bytes: &[u8]) -> Result<(Vec<f32>, Vec<usize>)> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::TruncatedFile(format!("{} bytes is not a multiple of {CIFAR_RECORD}", bytes.len())));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&p| p as f32 / 255.0));
    }
    Ok((pixels, labels))
}

fn load_files(dir: &Path, names: &[String], split: SplitTag) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in names {
        let path = dir.join(name);
        if !path.is_file() {
            return Err(Error::DataUnavailable(format!("{} not found", path.display())));
        }
        let (p, l) = parse_cifar_records(&read_maybe_gz(&path)?)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let n = labels.len();
    let mut d = Dataset::new(Tensor::new(&[n, 3, 32, 32], pixels)?, labels, 10, split)?;
    d.split = split;
    Ok(d)
}

/// `(train, test)` from `data_batch_1..5.bin` and `test_batch.bin`.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
    Ok((load_files(dir, &train, SplitTag::Train)?, load_files(dir, &["test_batch.bin".to_string()], SplitTag::Test)?))
}
