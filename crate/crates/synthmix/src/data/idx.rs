//! Reader/writer for the IDX (ubyte) container used by the MNIST family.
//!
//! Layout, all integers big-endian:
//!
//! ```text
//! images: u32 magic = 0x0000_0803, u32 count, u32 rows, u32 cols, count*rows*cols bytes
//! labels: u32 magic = 0x0000_0801, u32 count, count bytes
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array4;

use crate::data::{LabeledImageSet, Provenance};
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Load an image/label file pair into a set with `Real` provenance.
///
/// Raw bytes 0–255 are scaled to `[0,1]` by division by 255; that is the
/// only place in the pipeline where byte pixels exist.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledImageSet> {
    let (images, rows, cols) = read_images(images_path)?;
    let labels = read_labels(labels_path)?;
    let count = images.len() / (rows * cols);
    if labels.len() != count {
        return Err(Error::Consistency(format!(
            "{} has {count} images but {} has {} labels",
            images_path.display(),
            labels_path.display(),
            labels.len()
        )));
    }
    let num_classes = 10;
    let pixels: Vec<f32> = images.iter().map(|&b| b as f32 / 255.0).collect();
    let images = Array4::from_shape_vec((count, rows, cols, 1), pixels)
        .map_err(|e| Error::Format(format!("idx reshape: {e}")))?;
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".to_string());
    LabeledImageSet::with_uniform_provenance(name, images, labels, num_classes, Provenance::Real)
}

/// Write a single-channel set back out as an IDX pair.
///
/// Pixels are quantized with round-to-nearest, so a set that was loaded
/// from IDX round-trips bit-exactly.
pub fn write_idx(set: &LabeledImageSet, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (h, w, c) = set.image_shape();
    if c != 1 {
        return Err(Error::Shape(format!(
            "idx writer expects single-channel images, got {c} channels"
        )));
    }
    let n = set.len();
    let mut img = Vec::with_capacity(16 + n * h * w);
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(h as u32).to_be_bytes());
    img.extend_from_slice(&(w as u32).to_be_bytes());
    for &p in set.images().iter() {
        img.push((p * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend_from_slice(set.labels());

    write_file(images_path, &img)?;
    write_file(labels_path, &lab)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_images(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut off = 0usize;
    let magic = read_be_u32(&data, &mut off, path)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}",
            path.display()
        )));
    }
    let count = read_be_u32(&data, &mut off, path)? as usize;
    let rows = read_be_u32(&data, &mut off, path)? as usize;
    let cols = read_be_u32(&data, &mut off, path)? as usize;
    let want = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Format(format!("{}: header overflow", path.display())))?;
    if data.len() - off != want {
        return Err(Error::Format(format!(
            "{}: {} pixel bytes for {count}x{rows}x{cols} header",
            path.display(),
            data.len() - off
        )));
    }
    Ok((data[off..].to_vec(), rows, cols))
}

fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut off = 0usize;
    let magic = read_be_u32(&data, &mut off, path)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}",
            path.display()
        )));
    }
    let count = read_be_u32(&data, &mut off, path)? as usize;
    if data.len() - off != count {
        return Err(Error::Format(format!(
            "{}: {} label bytes for count {count}",
            path.display(),
            data.len() - off
        )));
    }
    Ok(data[off..].to_vec())
}

fn read_be_u32(data: &[u8], off: &mut usize, path: &Path) -> Result<u32> {
    let end = *off + 4;
    if end > data.len() {
        return Err(Error::Format(format!(
            "{}: truncated header",
            path.display()
        )));
    }
    let v = u32::from_be_bytes(data[*off..end].try_into().unwrap());
    *off = end;
    Ok(v)
}
