//! MNIST in IDX format: big-endian magic, big-endian `u32` dims, raw `u8` data.

use std::path::Path;

use super::{pixels_to_batch, LabeledBatch, Preprocess};
use crate::error::{Error, Result};
use crate::real::Real;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, name: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            source_name: name.to_string(),
            reason: format!("truncated header at byte {offset}"),
        })
}

fn check_magic(bytes: &[u8], expected: u32, name: &str) -> Result<()> {
    let magic = be_u32(bytes, 0, name)?;
    if magic != expected {
        return Err(Error::Format {
            source_name: name.to_string(),
            reason: format!("magic {magic:#010x}, expected {expected:#010x}"),
        });
    }
    Ok(())
}

/// Returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], name: &str) -> Result<(usize, usize, usize, Vec<u8>)> {
    check_magic(bytes, IDX_IMAGES_MAGIC, name)?;
    let n = be_u32(bytes, 4, name)? as usize;
    let rows = be_u32(bytes, 8, name)? as usize;
    let cols = be_u32(bytes, 12, name)? as usize;
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::Format {
            source_name: name.to_string(),
            reason: format!("{} data bytes, header implies {}", body.len(), n * rows * cols),
        });
    }
    Ok((n, rows, cols, body.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], name: &str) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_LABELS_MAGIC, name)?;
    let n = be_u32(bytes, 4, name)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format {
            source_name: name.to_string(),
            reason: format!("{} labels, header says {n}", body.len()),
        });
    }
    Ok(body.to_vec())
}

/// Loads `train-*` (or `t10k-*` when `test`) image and label files from `dir`.
pub fn load_idx_mnist<T: Real>(dir: &Path, test: bool) -> Result<LabeledBatch<T>> {
    let prefix = if test { "t10k" } else { "train" };
    let img_path = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let lbl_path = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let img_bytes = std::fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
    let lbl_bytes = std::fs::read(&lbl_path).map_err(|e| Error::io(&lbl_path, e))?;
    let (n, rows, cols, pixels) = parse_idx_images(&img_bytes, &img_path.display().to_string())?;
    let labels = parse_idx_labels(&lbl_bytes, &lbl_path.display().to_string())?;
    if labels.len() != n {
        return Err(Error::Format {
            source_name: lbl_path.display().to_string(),
            reason: format!("{} labels for {n} images", labels.len()),
        });
    }
    let labels = labels.into_iter().map(usize::from).collect();
    pixels_to_batch(&pixels, labels, [1, rows, cols], 10, &Preprocess::for_dataset("mnist")?)
}
