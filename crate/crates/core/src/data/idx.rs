//! IDX (MNIST-family) files: big-endian magic `0x00000803` for `u8` image
//! tensors of rank 3, `0x00000801` for `u8` label vectors.

use std::io::Write;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, WriteBytesExt};

use super::{DataError, Dataset, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn header(bytes: &[u8], expected: u32, dims: usize) -> Result<Vec<usize>> {
    if bytes.len() < 4 {
        return Err(DataError::Truncated);
    }
    let magic = BigEndian::read_u32(&bytes[0..4]);
    if magic != expected {
        return Err(DataError::BadMagic {
            expected,
            found: magic,
        });
    }
    if bytes.len() < 4 + 4 * dims {
        return Err(DataError::Truncated);
    }
    Ok((0..dims)
        .map(|i| BigEndian::read_u32(&bytes[4 + 4 * i..8 + 4 * i]) as usize)
        .collect())
}

/// Pixels scaled to `[0, 1]`; returns `(rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let dims = header(bytes, IMAGES_MAGIC, 3)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let body = &bytes[16..];
    let len = n * rows * cols;
    if body.len() < len {
        return Err(DataError::Truncated);
    }
    Ok((
        rows,
        cols,
        body[..len].iter().map(|&b| b as f64 / 255.0).collect(),
    ))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let dims = header(bytes, LABELS_MAGIC, 1)?;
    let body = &bytes[8..];
    if body.len() < dims[0] {
        return Err(DataError::Truncated);
    }
    Ok(body[..dims[0]].iter().map(|&b| b as usize).collect())
}

/// Load an image/label file pair. Samples have shape `[1, rows, cols]`; the
/// label space is `0..=max(label)` (at least 10 classes, the MNIST convention).
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (rows, cols, pixels) = parse_idx_images(&std::fs::read(images)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels)?)?;
    let n_images = pixels.len().checked_div(rows * cols).unwrap_or(0);
    if n_images != labels.len() {
        return Err(DataError::CountMismatch {
            images: n_images,
            labels: labels.len(),
        });
    }
    let num_classes = labels.iter().max().map_or(10, |m| (m + 1).max(10));
    Ok(Dataset {
        sample_shape: vec![1, rows, cols],
        inputs: pixels,
        labels,
        num_classes,
    })
}

pub fn write_idx_images<W: Write>(
    w: &mut W,
    rows: usize,
    cols: usize,
    pixels: &[u8],
) -> std::io::Result<()> {
    let n = pixels.len().checked_div(rows * cols).unwrap_or(0);
    w.write_u32::<BigEndian>(IMAGES_MAGIC)?;
    w.write_u32::<BigEndian>(n as u32)?;
    w.write_u32::<BigEndian>(rows as u32)?;
    w.write_u32::<BigEndian>(cols as u32)?;
    w.write_all(pixels)
}

pub fn write_idx_labels<W: Write>(w: &mut W, labels: &[u8]) -> std::io::Result<()> {
    w.write_u32::<BigEndian>(LABELS_MAGIC)?;
    w.write_u32::<BigEndian>(labels.len() as u32)?;
    w.write_all(labels)
}
