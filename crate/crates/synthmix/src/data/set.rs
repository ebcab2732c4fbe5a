use ndarray::{Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use rand::seq::SliceRandom;

/// Whether a sample came from a benchmark dataset or a generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    Real,
    Synthetic,
}

/// An immutable set of labeled images, the currency of the whole pipeline.
///
/// Pixels are `f32` in `[0,1]`, stored as `(count, height, width, channels)`.
/// Each sample carries a class label in `[0, num_classes)` and a
/// [`Provenance`] flag that survives subsampling and mixing, so any
/// downstream set can be audited for its real/synthetic composition.
#[derive(Debug, Clone)]
pub struct LabeledImageSet {
    images: Array4<f32>,
    labels: Vec<u8>,
    num_classes: usize,
    provenance: Vec<Provenance>,
    name: String,
}

impl LabeledImageSet {
    /// Build a set, enforcing every type invariant.
    pub fn new(
        name: impl Into<String>,
        images: Array4<f32>,
        labels: Vec<u8>,
        num_classes: usize,
        provenance: Vec<Provenance>,
    ) -> Result<Self> {
        let name = name.into();
        if num_classes == 0 {
            return Err(Error::Consistency(format!(
                "{name}: num_classes must be positive"
            )));
        }
        let count = images.shape()[0];
        if labels.len() != count || provenance.len() != count {
            return Err(Error::Consistency(format!(
                "{name}: {count} images, {} labels, {} provenance flags",
                labels.len(),
                provenance.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| (l as usize) >= num_classes) {
            return Err(Error::Consistency(format!(
                "{name}: label {l} out of range for {num_classes} classes"
            )));
        }
        if let Some(p) = images.iter().find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0) {
            return Err(Error::Consistency(format!(
                "{name}: pixel value {p} outside [0,1]"
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            provenance,
            name,
        })
    }

    /// Convenience constructor for a uniform provenance flag.
    pub fn with_uniform_provenance(
        name: impl Into<String>,
        images: Array4<f32>,
        labels: Vec<u8>,
        num_classes: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        let n = images.shape()[0];
        Self::new(name, images, labels, num_classes, vec![provenance; n])
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(height, width, channels)` of every image in the set.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn images(&self) -> &Array4<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn image(&self, i: usize) -> ArrayView3<'_, f32> {
        self.images.index_axis(Axis(0), i)
    }

    /// Return a copy with a different name; contents are shared structurally.
    pub fn renamed(&self, name: impl Into<String>) -> Self {
        let mut out = self.clone();
        out.name = name.into();
        out
    }

    /// Gather a training batch as `(N, C, H, W)` plus its labels. Images
    /// are stored channels-last; the network stack wants channels-first.
    pub fn batch_nchw(&self, indices: &[usize]) -> (Array4<f32>, Vec<u8>) {
        let (h, w, c) = self.image_shape();
        let mut out = Array4::<f32>::zeros((indices.len(), c, h, w));
        for (slot, &i) in indices.iter().enumerate() {
            out.index_axis_mut(Axis(0), slot)
                .assign(&self.image(i).permuted_axes([2, 0, 1]));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (out, labels)
    }

    /// Count of samples per class.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.num_classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// Indices of all samples with class `k`, in source order.
    pub fn class_indices(&self, k: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l as usize == k)
            .map(|(i, _)| i)
            .collect()
    }

    /// Gather the samples at `indices` (in the given order) into a new set.
    pub fn select(&self, indices: &[usize], name: impl Into<String>) -> Result<Self> {
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Range(format!(
                    "index {i} out of bounds for set of {}",
                    self.len()
                )));
            }
        }
        let images = self.images.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let provenance = indices.iter().map(|&i| self.provenance[i]).collect();
        Self::new(name, images, labels, self.num_classes, provenance)
    }

    /// Append another set with the same shape and label space.
    pub fn concat(&self, other: &LabeledImageSet, name: impl Into<String>) -> Result<Self> {
        if self.num_classes != other.num_classes {
            return Err(Error::Consistency(format!(
                "cannot concat sets with {} and {} classes",
                self.num_classes, other.num_classes
            )));
        }
        if self.image_shape() != other.image_shape() {
            return Err(Error::Consistency(format!(
                "cannot concat sets with shapes {:?} and {:?}",
                self.image_shape(),
                other.image_shape()
            )));
        }
        let images = ndarray::concatenate(Axis(0), &[self.images.view(), other.images.view()])
            .expect("shapes checked above");
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let mut provenance = self.provenance.clone();
        provenance.extend_from_slice(&other.provenance);
        Self::new(name, images, labels, self.num_classes, provenance)
    }
}

/// Pick `per_class[k]` samples of every class `k`, without replacement.
///
/// The choice is a pure function of `(set contents, per_class, seed)`:
/// within each class the member *ranks* (0-based positions among that
/// class's samples) are shuffled with a seed derived from `(seed, class)`
/// and the first `per_class[k]` ranks are kept. Selected samples appear in
/// their original source order, which keeps the result auditable.
pub fn subsample_per_class(
    set: &LabeledImageSet,
    per_class: &[usize],
    seed: u64,
) -> Result<LabeledImageSet> {
    if per_class.len() != set.num_classes() {
        return Err(Error::Consistency(format!(
            "per_class has {} entries for {} classes",
            per_class.len(),
            set.num_classes()
        )));
    }
    let mut selected = Vec::new();
    for (k, &want) in per_class.iter().enumerate() {
        let members = set.class_indices(k);
        if want > members.len() {
            return Err(Error::Capacity(format!(
                "class {k}: requested {want} of {} available",
                members.len()
            )));
        }
        selected.extend(select_ranks(members.len(), want, seed, k).map(|r| members[r]));
    }
    selected.sort_unstable();
    set.select(&selected, format!("{}[subsample]", set.name()))
}

/// Seeded choice of `want` ranks out of `0..available`, ascending.
///
/// Shared by [`subsample_per_class`] and the mixer so both make the same
/// selection for the same `(seed, class)` stream. The rank set depends only
/// on `(available, want, seed, class)`, never on which concrete samples
/// occupy the ranks.
pub(crate) fn select_ranks(
    available: usize,
    want: usize,
    seed: u64,
    class: usize,
) -> impl Iterator<Item = usize> {
    let mut ranks: Vec<usize> = (0..available).collect();
    let mut rng = stream_rng(seed, "class-sample", class as u64);
    ranks.shuffle(&mut rng);
    ranks.truncate(want);
    ranks.sort_unstable();
    ranks.into_iter()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::testutil::tiny_set;
    use ndarray::Array4;

    #[test]
    fn constructor_rejects_label_out_of_range() {
        let images = Array4::zeros((2, 4, 4, 1));
        let err = LabeledImageSet::new("t", images, vec![0, 7], 3, vec![Provenance::Real; 2]);
        assert!(matches!(err, Err(Error::Consistency(_))));
    }

    #[test]
    fn constructor_rejects_pixel_out_of_range() {
        let mut images = Array4::zeros((1, 2, 2, 1));
        images[[0, 1, 1, 0]] = 1.5;
        let err = LabeledImageSet::new("t", images, vec![0], 2, vec![Provenance::Real]);
        assert!(matches!(err, Err(Error::Consistency(_))));

        let mut images = Array4::zeros((1, 2, 2, 1));
        images[[0, 0, 0, 0]] = f32::NAN;
        let err = LabeledImageSet::new("t", images, vec![0], 2, vec![Provenance::Real]);
        assert!(matches!(err, Err(Error::Consistency(_))));
    }

    #[test]
    fn constructor_rejects_count_mismatch() {
        let images = Array4::zeros((3, 2, 2, 1));
        let err = LabeledImageSet::new("t", images, vec![0, 1], 2, vec![Provenance::Real; 3]);
        assert!(matches!(err, Err(Error::Consistency(_))));
    }

    #[test]
    fn subsample_full_counts_is_identity() {
        let set = tiny_set(12, 3, 4, 4, 1);
        let full = set.label_histogram();
        let out = subsample_per_class(&set, &full, 99).unwrap();
        assert_eq!(out.len(), set.len());
        assert_eq!(out.labels(), set.labels());
        assert_eq!(out.images(), set.images());
    }

    #[test]
    fn subsample_exact_histogram_and_determinism() {
        let set = tiny_set(40, 4, 4, 4, 1);
        let out1 = subsample_per_class(&set, &[3, 5, 0, 7], 7).unwrap();
        let out2 = subsample_per_class(&set, &[3, 5, 0, 7], 7).unwrap();
        assert_eq!(out1.label_histogram(), vec![3, 5, 0, 7]);
        assert_eq!(out1.labels(), out2.labels());
        assert_eq!(out1.images(), out2.images());
        let out3 = subsample_per_class(&set, &[3, 5, 0, 7], 8).unwrap();
        assert!(out1.images() != out3.images(), "different seed, same pick");
    }

    #[test]
    fn subsample_insufficient_class_is_capacity_error() {
        let set = tiny_set(10, 2, 4, 4, 1);
        let err = subsample_per_class(&set, &[5, 11], 0);
        assert!(matches!(err, Err(Error::Capacity(_))));
    }

    #[test]
    fn subsample_preserves_within_class_order() {
        let set = tiny_set(30, 3, 4, 4, 1);
        let out = subsample_per_class(&set, &[4, 4, 4], 3).unwrap();
        // Source order is preserved, so pixel[0] (encodes source index in
        // tiny_set) must be strictly increasing within each class.
        for k in 0..3 {
            let picks = out.class_indices(k);
            let firsts: Vec<f32> = picks.iter().map(|&i| out.image(i)[[0, 0, 0]]).collect();
            assert!(firsts.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
