//! IDX reader (the MNIST container format).
//!
//! Layout: a big-endian `u32` magic whose low byte is the number of
//! dimensions and whose third byte is the element type (0x08 = unsigned
//! byte), then one big-endian `u32` per dimension, then the raw payload.

use std::path::Path;

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::Matrix;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize) -> Option<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn header(bytes: &[u8], magic: u32, what: &str) -> std::result::Result<(Vec<usize>, usize), String> {
    let found = read_u32_be(bytes, 0)
        .ok_or_else(|| format!("{what}: file too short for the magic number ({} bytes)", bytes.len()))?;
    if found != magic {
        return Err(format!(
            "{what}: bad magic 0x{found:08x}, expected 0x{magic:08x}"
        ));
    }
    let ndims = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(ndims);
    for d in 0..ndims {
        let v = read_u32_be(bytes, 4 + 4 * d).ok_or_else(|| {
            format!("{what}: truncated header, expected {} bytes, got {}", 4 + 4 * ndims, bytes.len())
        })?;
        dims.push(v as usize);
    }
    Ok((dims, 4 + 4 * ndims))
}

fn payload<'a>(bytes: &'a [u8], offset: usize, expected: usize, what: &str) -> std::result::Result<&'a [u8], String> {
    let actual = bytes.len() - offset;
    if actual < expected {
        return Err(format!(
            "{what}: truncated payload, expected {expected} bytes, got {actual}"
        ));
    }
    if actual > expected {
        return Err(format!(
            "{what}: trailing data, expected {expected} payload bytes, got {actual}"
        ));
    }
    Ok(&bytes[offset..])
}

/// Image file bytes to a `(count x rows*cols)` matrix scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> std::result::Result<Matrix, String> {
    let (dims, offset) = header(bytes, IDX_IMAGES_MAGIC, "images")?;
    let (n, pixels) = (dims[0], dims[1] * dims[2]);
    let data = payload(bytes, offset, n * pixels, "images")?;
    let values = data.iter().map(|&b| f64::from(b) / 255.0).collect();
    Matrix::from_vec(n, pixels, values).map_err(|e| e.to_string())
}

pub fn parse_idx_labels(bytes: &[u8]) -> std::result::Result<Vec<usize>, String> {
    let (dims, offset) = header(bytes, IDX_LABELS_MAGIC, "labels")?;
    let data = payload(bytes, offset, dims[0], "labels")?;
    Ok(data.iter().map(|&b| usize::from(b)).collect())
}

/// Loads an image/label file pair. The class count is one past the largest
/// label present.
pub fn load_idx(images: &Path, labels: &Path) -> Result<LabeledDataset> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
    let fail = |p: &Path, reason: String| Error::Load {
        path: p.to_path_buf(),
        reason,
    };

    let features = parse_idx_images(&read(images)?).map_err(|r| fail(images, r))?;
    let ys = parse_idx_labels(&read(labels)?).map_err(|r| fail(labels, r))?;
    if features.rows() != ys.len() {
        return Err(fail(
            labels,
            format!(
                "count mismatch: {} images vs {} labels",
                features.rows(),
                ys.len()
            ),
        ));
    }
    if ys.is_empty() {
        return Err(fail(labels, "no examples".into()));
    }
    let class_count = ys.iter().max().map_or(0, |m| m + 1);
    LabeledDataset::new(features, ys, class_count)
}
