use ndarray::{ArrayD, Ix4};

use super::im2col::{col2im, im2col};
use super::{glorot_uniform, into_c, Float, Layer, Param};
use crate::rng::Rng;

/// Output spatial size of a transposed convolution.
pub fn tconv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size - 1) * stride + kernel - 2 * pad
}

/// Fractionally strided (transposed) 2-d convolution, the upsampling
/// adjoint of [`Conv2d`](super::Conv2d) with the same kernel, stride and
/// padding. Weights are stored as `(C_in, C_out, K, K)`.
///
/// Forward is a GEMM from the input pixels into patch space followed by a
/// [`col2im`] scatter; backward runs the corresponding [`im2col`] on the
/// incoming gradient, so each direction costs one GEMM sized by the
/// *smaller* spatial grid.
pub struct TConv2d<F: Float> {
    w: Param<F>,
    b: Param<F>,
    kernel: usize,
    stride: usize,
    pad: usize,
    x: Option<ArrayD<F>>,
}

impl<F: Float> TConv2d<F> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        name: &str,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let fan_out = c_out * kernel * kernel;
        let w = glorot_uniform::<F>(&[c_in, c_out, kernel, kernel], fan_in, fan_out, rng);
        let b = ArrayD::zeros(vec![c_out]);
        TConv2d {
            w: Param::new(format!("{name}.w"), w),
            b: Param::new(format!("{name}.b"), b),
            kernel,
            stride,
            pad,
            x: None,
        }
    }

    /// Input `(N, C_in, IH, IW)` flattened to `(N*IH*IW, C_in)` in the same
    /// row order [`im2col`] uses for its output grid.
    fn x2d(x4: &ndarray::ArrayView4<'_, F>) -> ndarray::Array2<F> {
        let (n, c_in, ih, iw) = x4.dim();
        x4.permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .into_shape_with_order((n * ih * iw, c_in))
            .unwrap()
            .to_owned()
    }

    fn apply(&self, x: &ArrayD<F>) -> ArrayD<F> {
        let x4 = x.view().into_dimensionality::<Ix4>().expect("tconv input is 4-d");
        let (n, c_in, ih, iw) = x4.dim();
        let (wc_in, c_out, k, _) = self.w.value.view().into_dimensionality::<Ix4>().unwrap().dim();
        assert_eq!(c_in, wc_in, "channel mismatch");
        let oh = tconv_out(ih, k, self.stride, self.pad);
        let ow = tconv_out(iw, k, self.stride, self.pad);

        let x2d = Self::x2d(&x4);
        let w2d = self
            .w
            .value
            .view()
            .into_shape_with_order((c_in, c_out * k * k))
            .unwrap();
        let cols = into_c(x2d.dot(&w2d)); // (N*IH*IW, C_out*K*K)
        let mut y = col2im(&cols, n, c_out, oh, ow, k, self.stride, self.pad);
        for co in 0..c_out {
            let b = self.b.value[[co]];
            y.index_axis_mut(ndarray::Axis(1), co).mapv_inplace(|v| v + b);
        }
        y.into_dyn()
    }
}

impl<F: Float> Layer<F> for TConv2d<F> {
    fn forward(&mut self, x: ArrayD<F>) -> ArrayD<F> {
        let y = self.apply(&x);
        self.x = Some(x);
        y
    }

    fn infer(&self, x: &ArrayD<F>) -> ArrayD<F> {
        self.apply(x)
    }

    fn backward(&mut self, grad_out: ArrayD<F>) -> ArrayD<F> {
        let x = self.x.take().expect("backward before forward");
        let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c_in, ih, iw) = x4.dim();
        let g4 = grad_out.view().into_dimensionality::<Ix4>().unwrap();
        let c_out = g4.dim().1;
        let k = self.kernel;

        let cols_g = im2col(&g4, k, self.stride, self.pad); // (N*IH*IW, C_out*K*K)
        let x2d = Self::x2d(&x4);
        self.w.grad = into_c(x2d.t().dot(&cols_g))
            .into_shape_with_order((c_in, c_out, k, k))
            .unwrap()
            .into_dyn();
        let mut db = ArrayD::<F>::zeros(vec![c_out]);
        for co in 0..c_out {
            db[[co]] = g4.index_axis(ndarray::Axis(1), co).sum();
        }
        self.b.grad = db;

        let w2d = self
            .w
            .value
            .view()
            .into_shape_with_order((c_in, c_out * k * k))
            .unwrap();
        let dx2d = into_c(cols_g.dot(&w2d.t())); // (N*IH*IW, C_in)
        let dx = dx2d
            .into_shape_with_order((n, ih, iw, c_in))
            .unwrap()
            .permuted_axes([0, 3, 1, 2]);
        dx.as_standard_layout().to_owned().into_dyn()
    }

    fn params(&self) -> Vec<&Param<F>> {
        vec![&self.w, &self.b]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.w, &mut self.b]
    }
}
