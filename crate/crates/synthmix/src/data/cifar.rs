//! Loader for the CIFAR-10 binary batch format.
//!
//! Each batch file is a sequence of 3073-byte records: one label byte
//! followed by 3×1024 pixel bytes in planar RGB order (row-major within
//! each plane). The standard distribution has five train batches and one
//! test batch of 10000 records each.

use std::fs;
use std::path::Path;

use ndarray::Array4;

use crate::data::{LabeledImageSet, Provenance};
use crate::error::{Error, Result};

pub const RECORD_BYTES: usize = 1 + 3 * 1024;
pub const TRAIN_BATCHES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_BATCH: &str = "test_batch.bin";

/// Load the train and test splits from a directory of batch files.
pub fn load_cifar10(dir: &Path) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let mut train_records = Vec::new();
    for name in TRAIN_BATCHES {
        read_batch(&dir.join(name), &mut train_records)?;
    }
    let mut test_records = Vec::new();
    read_batch(&dir.join(TEST_BATCH), &mut test_records)?;
    Ok((
        assemble("cifar10-train", train_records)?,
        assemble("cifar10-test", test_records)?,
    ))
}

fn read_batch(path: &Path, out: &mut Vec<(u8, Vec<u8>)>) -> Result<()> {
    let data = match fs::read(path) {
        Ok(d) => d,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::Format(format!(
                "missing batch file {}",
                path.display()
            )))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    if data.len() % RECORD_BYTES != 0 {
        return Err(Error::Format(format!(
            "{}: {} bytes is not a multiple of the {RECORD_BYTES}-byte record",
            path.display(),
            data.len()
        )));
    }
    for rec in data.chunks_exact(RECORD_BYTES) {
        out.push((rec[0], rec[1..].to_vec()));
    }
    Ok(())
}

/// Convert planar RGB records to `(count, 32, 32, 3)` pixels in `[0,1]`.
fn assemble(name: &str, records: Vec<(u8, Vec<u8>)>) -> Result<LabeledImageSet> {
    let n = records.len();
    let mut pixels = vec![0f32; n * 32 * 32 * 3];
    let mut labels = Vec::with_capacity(n);
    for (i, (label, planes)) in records.into_iter().enumerate() {
        labels.push(label);
        let base = i * 32 * 32 * 3;
        for y in 0..32 {
            for x in 0..32 {
                for c in 0..3 {
                    pixels[base + (y * 32 + x) * 3 + c] =
                        planes[c * 1024 + y * 32 + x] as f32 / 255.0;
                }
            }
        }
    }
    let images = Array4::from_shape_vec((n, 32, 32, 3), pixels)
        .map_err(|e| Error::Format(format!("cifar reshape: {e}")))?;
    LabeledImageSet::with_uniform_provenance(name, images, labels, 10, Provenance::Real)
}
