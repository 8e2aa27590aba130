//! IDX binary reader (the MNIST distribution format).
//!
//! Layout: a big-endian `u32` magic (`0x00000803` for rank-3 image tensors,
//! `0x00000801` for rank-1 label vectors), one big-endian `u32` per
//! dimension, then unsigned bytes.

use std::fs;
use std::path::Path;

use super::LabeledDataset;
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

const MNIST_CLASSES: usize = 10;

struct IdxTensor {
    dims: Vec<usize>,
    data: Vec<u8>,
}

fn read_u32(bytes: &[u8], offset: usize) -> Option<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn parse(path: &Path, bytes: Vec<u8>, magic: u32) -> Result<IdxTensor> {
    let found = read_u32(&bytes, 0).ok_or_else(|| Error::Length {
        path: path.to_path_buf(),
        expected: 4,
        actual: bytes.len(),
    })?;
    if found != magic {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("bad magic number {found:#010x}, expected {magic:#010x}"),
        });
    }
    let rank = (magic & 0xff) as usize;
    let header = 4 + 4 * rank;
    let mut dims = Vec::with_capacity(rank);
    for d in 0..rank {
        let size = read_u32(&bytes, 4 + 4 * d).ok_or_else(|| Error::Length {
            path: path.to_path_buf(),
            expected: header,
            actual: bytes.len(),
        })?;
        dims.push(size as usize);
    }
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    let mut data = bytes;
    data.drain(..header);
    data.truncate(expected - header);
    Ok(IdxTensor { dims, data })
}

/// Reads an image file; returns `(count, rows * cols, pixel bytes)`.
pub fn read_idx_images(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let t = parse(path, fs::read(path)?, IDX_IMAGES_MAGIC)?;
    Ok((t.dims[0], t.dims[1] * t.dims[2], t.data))
}

/// Reads a label file.
pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    Ok(parse(path, fs::read(path)?, IDX_LABELS_MAGIC)?.data)
}

/// Loads an image/label file pair, scaling pixels to `[0, 1]`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let (count, dim, pixels) = read_idx_images(images_path.as_ref())?;
    let labels = read_idx_labels(labels_path.as_ref())?;
    if labels.len() != count {
        return Err(Error::Consistency(format!(
            "{count} images but {} labels",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| usize::from(l) >= MNIST_CLASSES) {
        return Err(Error::Consistency(format!("label {bad} outside [0, 10)")));
    }
    let features = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    LabeledDataset::new(
        features,
        dim,
        labels.into_iter().map(usize::from).collect(),
        MNIST_CLASSES,
    )
}
