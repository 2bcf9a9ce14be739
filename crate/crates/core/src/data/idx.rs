use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{io_err, Error, Result};

const IMAGES_3D: u32 = 0x0000_0803;
/// Extension for multi-channel images: `[count, rows, cols, channels]`.
const IMAGES_4D: u32 = 0x0000_0804;
const LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx("truncated header".into()))
}

/// Parses an IDX image file; returns `(count, rows, cols, channels, pixels)`.
pub fn read_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0)?;
    let rank = match magic {
        IMAGES_3D => 3,
        IMAGES_4D => 4,
        m => return Err(Error::Idx(format!("bad image magic {m:#010x}"))),
    };
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        dims.push(be_u32(bytes, 4 + 4 * i)? as usize);
    }
    let channels = if rank == 4 { dims[3] } else { 1 };
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let start = 4 + 4 * rank;
    let len = n * rows * cols * channels;
    let body = bytes.get(start..start + len).ok_or_else(|| {
        Error::Idx(format!(
            "truncated image data: need {len} bytes, have {}",
            bytes.len() - start
        ))
    })?;
    Ok((n, rows, cols, channels, body.to_vec()))
}

pub fn read_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABELS {
        return Err(Error::Idx(format!("bad label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = bytes.get(8..8 + n).ok_or_else(|| {
        Error::Idx(format!(
            "truncated labels: need {n}, have {}",
            bytes.len().saturating_sub(8)
        ))
    })?;
    Ok(body.iter().map(|&b| b as usize).collect())
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = fs::read(images_path).map_err(io_err(images_path))?;
    let labels = fs::read(labels_path).map_err(io_err(labels_path))?;
    let (n, rows, cols, channels, pixels) = read_idx_images(&images)?;
    let labels = read_idx_labels(&labels)?;
    if labels.len() != n {
        return Err(Error::Idx(format!(
            "count mismatch: {n} images, {} labels",
            labels.len()
        )));
    }
    Dataset::new(rows, cols, channels, pixels, labels)
}

/// Writes `ds` as an image file and a label file.
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let mut img = Vec::with_capacity(20 + ds.pixels.len());
    let multi = ds.channels != 1;
    img.extend_from_slice(&(if multi { IMAGES_4D } else { IMAGES_3D }).to_be_bytes());
    img.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    img.extend_from_slice(&(ds.height as u32).to_be_bytes());
    img.extend_from_slice(&(ds.width as u32).to_be_bytes());
    if multi {
        img.extend_from_slice(&(ds.channels as u32).to_be_bytes());
    }
    img.extend_from_slice(&ds.pixels);

    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&LABELS.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for &l in &ds.labels {
        let b =
            u8::try_from(l).map_err(|_| Error::Idx(format!("label {l} does not fit in a byte")))?;
        lab.push(b);
    }
    fs::write(images_path, img).map_err(io_err(images_path))?;
    fs::write(labels_path, lab).map_err(io_err(labels_path))?;
    Ok(())
}
