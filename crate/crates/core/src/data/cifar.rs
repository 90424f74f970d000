//! CIFAR-10 binary batches: fixed 3073-byte records, one label byte followed
//! by 1024 red, 1024 green and 1024 blue bytes, each plane row-major.

use std::path::{Path, PathBuf};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CIFAR10_RECORD_BYTES: usize = 3073;
/// Sample id of record `r` in file `f` is `f * STRIDE + r`.
pub const CIFAR10_RECORD_ID_STRIDE: u64 = 1_000_000;

const CLASSES: usize = 10;
const SIDE: usize = 32;
const PIXELS: usize = 3 * SIDE * SIDE;

const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILES: [&str; 1] = ["test_batch.bin"];

/// Decodes one batch file's bytes into `[0,1]` pixels, labels and ids.
pub fn parse_cifar10(bytes: &[u8], file_index: usize, path: &Path) -> Result<(Vec<f32>, Vec<usize>, Vec<u64>)> {
    let format = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    if !bytes.len().is_multiple_of(CIFAR10_RECORD_BYTES) {
        let whole = bytes.len() / CIFAR10_RECORD_BYTES;
        return Err(format(format!(
            "size {} is not a multiple of {CIFAR10_RECORD_BYTES}; truncated record at byte offset {}",
            bytes.len(),
            whole * CIFAR10_RECORD_BYTES
        )));
    }
    let n = bytes.len() / CIFAR10_RECORD_BYTES;
    if n as u64 > CIFAR10_RECORD_ID_STRIDE {
        return Err(format(format!("{n} records exceed the per-file id range")));
    }
    let mut pixels = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR10_RECORD_BYTES).enumerate() {
        let label = rec[0] as usize;
        if label >= CLASSES {
            return Err(format(format!(
                "label byte {label} > 9 at byte offset {}",
                r * CIFAR10_RECORD_BYTES
            )));
        }
        labels.push(label);
        ids.push(file_index as u64 * CIFAR10_RECORD_ID_STRIDE + r as u64);
        pixels.extend(rec[1..].iter().map(|&b| f32::from(b) / 255.0));
    }
    Ok((pixels, labels, ids))
}

/// Loads the standard batch files of `split` from `dir`, in file order.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let names: &[&str] = match split {
        Split::Train => &TRAIN_FILES,
        Split::Test => &TEST_FILES,
    };
    let paths: Vec<PathBuf> = names.iter().map(|n| dir.join(n)).collect();
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    for (f, path) in paths.iter().enumerate() {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (p, l, i) = parse_cifar10(&bytes, f, path)?;
        pixels.extend(p);
        labels.extend(l);
        ids.extend(i);
    }
    if labels.is_empty() {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            message: "no records".into(),
        });
    }
    let images = Tensor::from_vec(&[labels.len(), 3, SIDE, SIDE], pixels)?;
    Dataset::new(images, labels, ids, CLASSES, split)
}
