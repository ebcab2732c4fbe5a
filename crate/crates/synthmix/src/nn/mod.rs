//! Minimal CPU neural-network stack: layers with explicit forward/backward,
//! GEMM-backed convolutions, and an Adam optimizer.
//!
//! Everything is generic over [`Float`] so the same layer code trains in
//! `f32` and gradient-checks against central finite differences in `f64`.

mod adam;
mod conv;
mod dense;
mod embed;
mod im2col;
mod loss;
mod pool;
mod simple;
mod tconv;

pub use adam::{Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use conv::Conv2d;
pub use dense::Dense;
pub use embed::Embedding;
pub use loss::{bce_with_logits, softmax, softmax_cross_entropy};
pub use pool::MaxPool2;
pub use simple::{Flatten, LeakyRelu, Relu, Reshape, Sigmoid};
pub use tconv::TConv2d;

use ndarray::ArrayD;

/// Scalar type the stack is generic over (`f32` for training, `f64` for
/// finite-difference tests).
pub trait Float: ndarray::NdFloat + ndarray::LinalgScalar {}
impl Float for f32 {}
impl Float for f64 {}

/// Convert an `f64` constant into the generic scalar.
pub fn ff<F: Float>(v: f64) -> F {
    F::from(v).expect("constant representable in any float")
}

/// A named tensor with its gradient buffer.
#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
}

impl<F: Float> Param<F> {
    pub fn new(name: impl Into<String>, value: ArrayD<F>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }
}

/// One differentiable stage of a network.
///
/// `forward` caches whatever `backward` needs; `backward` consumes the
/// gradient w.r.t. the output, overwrites this layer's parameter gradients,
/// and returns the gradient w.r.t. the input. `infer` is the pure forward
/// path used for evaluation and sampling.
pub trait Layer<F: Float>: Send {
    fn forward(&mut self, x: ArrayD<F>) -> ArrayD<F>;
    fn infer(&self, x: &ArrayD<F>) -> ArrayD<F>;
    fn backward(&mut self, grad_out: ArrayD<F>) -> ArrayD<F>;
    fn params(&self) -> Vec<&Param<F>> {
        vec![]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![]
    }
}

/// A plain sequential chain of layers.
pub struct Net<F: Float> {
    layers: Vec<Box<dyn Layer<F>>>,
}

impl<F: Float> Net<F> {
    pub fn new(layers: Vec<Box<dyn Layer<F>>>) -> Self {
        Self { layers }
    }

    pub fn forward(&mut self, x: ArrayD<F>) -> ArrayD<F> {
        self.layers.iter_mut().fold(x, |x, l| l.forward(x))
    }

    pub fn infer(&self, x: &ArrayD<F>) -> ArrayD<F> {
        let mut cur = self.layers[0].infer(x);
        for l in &self.layers[1..] {
            cur = l.infer(&cur);
        }
        cur
    }

    pub fn backward(&mut self, grad: ArrayD<F>) -> ArrayD<F> {
        self.layers.iter_mut().rev().fold(grad, |g, l| l.backward(g))
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Activations of the layer at `upto` (exclusive end of the prefix),
    /// inference mode.
    pub fn infer_prefix(&self, x: &ArrayD<F>, upto: usize) -> ArrayD<F> {
        let mut cur = self.layers[0].infer(x);
        for l in &self.layers[1..upto] {
            cur = l.infer(&cur);
        }
        cur
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// Force row-major layout without copying when it already holds.
///
/// `ndarray`'s `dot` returns a column-major array when both operands have
/// unit outer stride, and reshape/slice helpers downstream assume row
/// major, so every layer funnels its outputs and gradients through here.
pub(crate) fn into_c<F: Float, D: ndarray::Dimension>(
    a: ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Glorot-uniform initialization over `shape`, seeded by the caller.
pub fn glorot_uniform<F: Float>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut crate::rng::Rng,
) -> ArrayD<F> {
    use rand::Rng as _;
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    ArrayD::from_shape_simple_fn(shape.to_vec(), || {
        ff::<F>(rng.gen_range(-limit..limit))
    })
}

#[cfg(test)]
pub(crate) mod gradcheck {
    use super::*;
    use ndarray::ArrayD;

    /// Compare analytic gradients of `sum(r * layer(x))` against central
    /// finite differences for every input and parameter entry.
    ///
    /// `r` is a fixed random weighting so the probe covers all outputs.
    /// `x` is drawn uniform in (-1, 1) with the given shape.
    pub fn check_layer(
        mut layer: impl Layer<f64>,
        shape: &[usize],
        rng: &mut crate::rng::Rng,
        tol: f64,
    ) {
        use rand::Rng as _;
        let layer = &mut layer;
        let x = ArrayD::from_shape_simple_fn(shape.to_vec(), || rng.gen_range(-1.0..1.0));
        let y = layer.forward(x.clone());
        let r = ArrayD::from_shape_simple_fn(y.raw_dim(), || rng.gen_range(-1.0..1.0));
        let dx = layer.backward(r.clone());

        let loss = |layer: &mut dyn Layer<f64>, x: &ArrayD<f64>| -> f64 {
            (layer.forward(x.clone()) * &r).sum()
        };

        // Input gradient.
        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(layer, &xp) - loss(layer, &xm)) / (2.0 * h);
            let an = dx.as_slice().unwrap()[idx];
            max_rel = max_rel.max(rel_err(an, fd));
        }
        assert!(max_rel < tol, "input grad rel err {max_rel:.3e} >= {tol:e}");

        // Parameter gradients. Re-run forward/backward to refresh grads
        // after the finite-difference probes above.
        layer.forward(x.clone());
        layer.backward(r.clone());
        let analytic: Vec<ArrayD<f64>> = layer
            .params()
            .iter()
            .map(|p| p.grad.as_standard_layout().into_owned())
            .collect();
        for pi in 0..analytic.len() {
            for idx in 0..analytic[pi].len() {
                let orig = analytic_param(layer, pi, idx);
                set_param(layer, pi, idx, orig + h);
                let fp = loss(layer, &x);
                set_param(layer, pi, idx, orig - h);
                let fm = loss(layer, &x);
                set_param(layer, pi, idx, orig);
                let fd = (fp - fm) / (2.0 * h);
                let an = analytic[pi].as_slice().unwrap()[idx];
                let rel = rel_err(an, fd);
                assert!(
                    rel < tol,
                    "param {pi} entry {idx}: rel err {rel:.3e} (an {an:.6e}, fd {fd:.6e})"
                );
            }
        }
    }

    fn analytic_param(layer: &mut dyn Layer<f64>, pi: usize, idx: usize) -> f64 {
        layer.params()[pi].value.as_slice().unwrap()[idx]
    }

    fn set_param(layer: &mut dyn Layer<f64>, pi: usize, idx: usize, v: f64) {
        layer.params_mut()[pi].value.as_slice_mut().unwrap()[idx] = v;
    }

    pub fn rel_err(a: f64, b: f64) -> f64 {
        let denom = a.abs().max(b.abs()).max(1e-6);
        (a - b).abs() / denom
    }
}
