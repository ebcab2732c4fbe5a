use ndarray::{Array2, ArrayD, Ix2};
use rand::Rng as _;

use super::{ff, Float, Param};
use crate::rng::Rng;

/// Class-label embedding table of shape `(num_classes, dim)`.
///
/// Unlike the [`Layer`](super::Layer) stack this takes discrete labels, so
/// it exposes its own forward/backward pair; the conditional models gather
/// rows here and feed the result into an ordinary [`Net`](super::Net).
pub struct Embedding<F: Float> {
    table: Param<F>,
    num_classes: usize,
    dim: usize,
}

impl<F: Float> Embedding<F> {
    pub fn new(num_classes: usize, dim: usize, name: &str, rng: &mut Rng) -> Self {
        let table = ArrayD::from_shape_fn(vec![num_classes, dim], |_| {
            ff::<F>(rng.gen_range(-0.05..0.05))
        });
        Embedding {
            table: Param::new(format!("{name}.table"), table),
            num_classes,
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Gather one table row per label into `(N, dim)`.
    pub fn forward(&self, labels: &[u8]) -> Array2<F> {
        let t = self.table.value.view().into_dimensionality::<Ix2>().unwrap();
        let mut out = Array2::<F>::zeros((labels.len(), self.dim));
        for (mut row, &label) in out.rows_mut().into_iter().zip(labels) {
            assert!((label as usize) < self.num_classes, "label out of range");
            row.assign(&t.row(label as usize));
        }
        out
    }

    /// Scatter-add `grad` rows back onto the table gradient (overwrites any
    /// previous gradient, like the layer stack does).
    pub fn backward(&mut self, labels: &[u8], grad: &Array2<F>) {
        self.table.grad.fill(F::zero());
        let mut g = self
            .table
            .grad
            .view_mut()
            .into_dimensionality::<Ix2>()
            .unwrap();
        for (row, &label) in grad.rows().into_iter().zip(labels) {
            let mut target = g.row_mut(label as usize);
            target += &row;
        }
    }

    pub fn param(&self) -> &Param<F> {
        &self.table
    }

    pub fn param_mut(&mut self) -> &mut Param<F> {
        &mut self.table
    }
}
