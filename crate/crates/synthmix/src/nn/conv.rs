use ndarray::{ArrayD, Ix4};

use super::im2col::{col2im, conv_out, im2col};
use super::{glorot_uniform, into_c, Float, Layer, Param};
use crate::rng::Rng;

/// Strided 2-d convolution over `(N, C, H, W)` input.
///
/// Weights are stored as `(C_out, C_in, K, K)` and applied as one GEMM
/// against the lowered patch matrix. Only the input is cached between
/// forward and backward; the patch matrix is recomputed on the backward
/// pass, trading a second lowering for not holding the (much larger)
/// lowered matrix across the step.
pub struct Conv2d<F: Float> {
    w: Param<F>,
    b: Param<F>,
    kernel: usize,
    stride: usize,
    pad: usize,
    x: Option<ArrayD<F>>,
}

impl<F: Float> Conv2d<F> {
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
        let w = glorot_uniform::<F>(&[c_out, c_in, kernel, kernel], fan_in, fan_out, rng);
        let b = ArrayD::zeros(vec![c_out]);
        Conv2d {
            w: Param::new(format!("{name}.w"), w),
            b: Param::new(format!("{name}.b"), b),
            kernel,
            stride,
            pad,
            x: None,
        }
    }

    fn apply(&self, x: &ArrayD<F>) -> ArrayD<F> {
        let x4 = x.view().into_dimensionality::<Ix4>().expect("conv input is 4-d");
        let (n, _, h, w) = x4.dim();
        let (c_out, c_in, k, _) = self.w.value.view().into_dimensionality::<Ix4>().unwrap().dim();
        assert_eq!(x4.dim().1, c_in, "channel mismatch");
        let oh = conv_out(h, k, self.stride, self.pad);
        let ow = conv_out(w, k, self.stride, self.pad);
        let cols = im2col(&x4, k, self.stride, self.pad);
        let w2d = self
            .w
            .value
            .view()
            .into_shape_with_order((c_out, c_in * k * k))
            .unwrap();
        // (N*OH*OW, CKK) x (CKK, C_out)
        let mut y2d = into_c(cols.dot(&w2d.t()));
        let b = self.b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        y2d += &b;
        let y = y2d
            .into_shape_with_order((n, oh, ow, c_out))
            .unwrap()
            .permuted_axes([0, 3, 1, 2]);
        y.as_standard_layout().to_owned().into_dyn()
    }
}

impl<F: Float> Layer<F> for Conv2d<F> {
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
        let (n, c_in, h, w) = x4.dim();
        let g4 = grad_out.view().into_dimensionality::<Ix4>().unwrap();
        let (_, c_out, oh, ow) = g4.dim();
        let k = self.kernel;

        // (N, C_out, OH, OW) -> (N*OH*OW, C_out), matching im2col row order.
        let g2d = g4
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .into_shape_with_order((n * oh * ow, c_out))
            .unwrap()
            .to_owned();

        let cols = im2col(&x4, k, self.stride, self.pad);
        let dw2d = into_c(g2d.t().dot(&cols)); // (C_out, CKK)
        self.w.grad = dw2d
            .into_shape_with_order((c_out, c_in, k, k))
            .unwrap()
            .into_dyn();
        self.b.grad = g2d.sum_axis(ndarray::Axis(0)).into_dyn();

        let w2d = self
            .w
            .value
            .view()
            .into_shape_with_order((c_out, c_in * k * k))
            .unwrap();
        let dcols = into_c(g2d.dot(&w2d)); // (N*OH*OW, CKK)
        col2im(&dcols, n, c_in, h, w, k, self.stride, self.pad).into_dyn()
    }

    fn params(&self) -> Vec<&Param<F>> {
        vec![&self.w, &self.b]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.w, &mut self.b]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_layer;
    use crate::rng::stream_rng;
    use ndarray::Array4;

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = stream_rng(12, "conv-gc", 0);
        for (s, p) in [(1, 0), (1, 1), (2, 1)] {
            let layer = Conv2d::<f64>::new(2, 3, 3, s, p, "c", &mut rng);
            check_layer(layer, &[2, 2, 5, 5], &mut rng, 1e-4);
        }
    }

    #[test]
    fn matches_direct_convolution() {
        // Independent O(everything) reference implementation.
        let mut rng = stream_rng(12, "conv-ref", 0);
        let mut layer = Conv2d::<f64>::new(3, 4, 3, 2, 1, "c", &mut rng);
        use rand::Rng as _;
        let x = Array4::from_shape_fn((2, 3, 7, 6), |_| rng.gen_range(-1.0..1.0));
        let y = layer
            .forward(x.clone().into_dyn())
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let wv = layer.w.value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let (k, s, p) = (3usize, 2usize, 1usize);
        let (n, c_in, h, w) = x.dim();
        let (c_out, oh, ow) = (4, conv_out(h, k, s, p), conv_out(w, k, s, p));
        assert_eq!(y.dim(), (n, c_out, oh, ow));
        for ni in 0..n {
            for co in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = layer.b.value[[co]];
                        for ci in 0..c_in {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize
                                    {
                                        acc += x[[ni, ci, iy as usize, ix as usize]]
                                            * wv[[co, ci, ky, kx]];
                                    }
                                }
                            }
                        }
                        assert!((y[[ni, co, oy, ox]] - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn infer_matches_forward_without_caching() {
        let mut rng = stream_rng(12, "conv-infer", 0);
        let mut layer = Conv2d::<f64>::new(1, 2, 3, 1, 1, "c", &mut rng);
        use rand::Rng as _;
        let x = Array4::from_shape_fn((1, 1, 5, 5), |_| rng.gen_range(-1.0..1.0)).into_dyn();
        let yi = layer.infer(&x);
        assert!(layer.x.is_none());
        let yf = layer.forward(x);
        assert_eq!(yi, yf);
    }
}
