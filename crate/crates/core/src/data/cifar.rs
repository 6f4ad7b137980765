//! CIFAR-10 binary batches: records of one label byte and 3072 pixel bytes
//! (1024 red, 1024 green, 1024 blue, row-major 32×32).

use std::path::Path;

use super::{pixels_to_batch, LabeledBatch, Preprocess};
use crate::error::{Error, Result};
use crate::real::Real;

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Returns `(labels, pixels)` with pixels in `[N, 3, 32, 32]` order.
pub fn parse_cifar10(bytes: &[u8], name: &str) -> Result<(Vec<usize>, Vec<u8>)> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format {
            source_name: name.to_string(),
            reason: format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
        });
    }
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    let mut pixels = Vec::with_capacity(bytes.len());
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Format {
                source_name: name.to_string(),
                reason: format!("record {i} has label {}", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

/// Loads `data_batch_*.bin` (or `test_batch.bin` when `test`) from `dir`.
pub fn load_cifar10_bin<T: Real>(dir: &Path, test: bool) -> Result<LabeledBatch<T>> {
    let names: Vec<String> = if test {
        vec!["test_batch.bin".into()]
    } else {
        (1..=5).map(|i| format!("data_batch_{i}.bin")).collect()
    };
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    let mut found = false;
    for name in names {
        let path = dir.join(&name);
        if !path.exists() {
            continue;
        }
        found = true;
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (l, p) = parse_cifar10(&bytes, &path.display().to_string())?;
        labels.extend(l);
        pixels.extend(p);
    }
    if !found {
        return Err(Error::invalid(format!("no CIFAR-10 batch files in {}", dir.display())));
    }
    pixels_to_batch(&pixels, labels, [3, 32, 32], 10, &Preprocess::for_dataset("cifar10")?)
}
