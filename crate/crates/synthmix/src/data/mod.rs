//! Dataset parsing, ingestion, and deterministic subsampling.

mod cifar;
mod idx;
mod image_dir;
mod set;

pub use cifar::load_cifar10;
pub use idx::{load_idx, write_idx};
pub use image_dir::{load_image_directory, write_image_directory};
pub use set::{subsample_per_class, LabeledImageSet, Provenance};
pub(crate) use set::select_ranks;

#[cfg(test)]
pub(crate) mod testutil {
    use super::{LabeledImageSet, Provenance};
    use ndarray::Array4;

    /// A small deterministic set: `count` images cycling through `classes`
    /// labels. Pixel `[0,0,0]` of image `i` encodes `i` so source order is
    /// observable; remaining pixels form a per-image pattern. All values
    /// are exact multiples of 1/255 so byte round-trips are lossless.
    pub fn tiny_set(count: usize, classes: usize, h: usize, w: usize, c: usize) -> LabeledImageSet {
        let mut pixels = Vec::with_capacity(count * h * w * c);
        for i in 0..count {
            for p in 0..h * w * c {
                let byte = if p == 0 {
                    (i % 256) as u8
                } else {
                    ((i * 31 + p * 7) % 256) as u8
                };
                pixels.push(byte as f32 / 255.0);
            }
        }
        let images = Array4::from_shape_vec((count, h, w, c), pixels).unwrap();
        let labels: Vec<u8> = (0..count).map(|i| (i % classes) as u8).collect();
        LabeledImageSet::with_uniform_provenance("tiny", images, labels, classes, Provenance::Real)
            .unwrap()
    }
}
