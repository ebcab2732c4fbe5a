use ndarray::{Array4, ArrayD, Ix4};

use super::{Float, Layer, Param};

/// 2x2 max pooling with stride 2 over `(N, C, H, W)`.
///
/// Odd trailing rows or columns are dropped, matching the usual
/// floor-division output size. The winning index within each window is
/// cached for the backward scatter; ties go to the earliest position in
/// row-major window order.
pub struct MaxPool2 {
    argmax: Option<(Array4<usize>, (usize, usize))>,
}

impl MaxPool2 {
    pub fn new() -> Self {
        MaxPool2 { argmax: None }
    }

    fn pool<F: Float>(x: &ArrayD<F>) -> (Array4<F>, Array4<usize>) {
        let x4 = x.view().into_dimensionality::<Ix4>().expect("pool input is 4-d");
        let (n, c, h, w) = x4.dim();
        let (oh, ow) = (h / 2, w / 2);
        let mut y = Array4::<F>::zeros((n, c, oh, ow));
        let mut arg = Array4::<usize>::zeros((n, c, oh, ow));
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = x4[[ni, ci, 2 * oy, 2 * ox]];
                        let mut best_at = 0usize;
                        for (at, (dy, dx)) in
                            [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate()
                        {
                            let v = x4[[ni, ci, 2 * oy + dy, 2 * ox + dx]];
                            if v > best {
                                best = v;
                                best_at = at;
                            }
                        }
                        y[[ni, ci, oy, ox]] = best;
                        arg[[ni, ci, oy, ox]] = best_at;
                    }
                }
            }
        }
        (y, arg)
    }
}

impl Default for MaxPool2 {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Layer<F> for MaxPool2 {
    fn forward(&mut self, x: ArrayD<F>) -> ArrayD<F> {
        let (h, w) = {
            let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
            (x4.dim().2, x4.dim().3)
        };
        let (y, arg) = Self::pool(&x);
        self.argmax = Some((arg, (h, w)));
        y.into_dyn()
    }

    fn infer(&self, x: &ArrayD<F>) -> ArrayD<F> {
        Self::pool(x).0.into_dyn()
    }

    fn backward(&mut self, grad_out: ArrayD<F>) -> ArrayD<F> {
        let (arg, (h, w)) = self.argmax.take().expect("backward before forward");
        let g4 = grad_out.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, oh, ow) = g4.dim();
        let mut dx = Array4::<F>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let at = arg[[ni, ci, oy, ox]];
                        let (dy, dx_) = (at / 2, at % 2);
                        dx[[ni, ci, 2 * oy + dy, 2 * ox + dx_]] = g4[[ni, ci, oy, ox]];
                    }
                }
            }
        }
        dx.into_dyn()
    }

    fn params(&self) -> Vec<&Param<F>> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        Vec::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_layer;
    use crate::rng::stream_rng;
    use ndarray::arr3;

    #[test]
    fn picks_window_maxima() {
        let x = arr3(&[[
            [1.0, 2.0, 0.0, -1.0],
            [3.0, 4.0, -2.0, 0.5],
            [0.1, 0.2, 9.0, 9.0],
            [0.3, 0.0, 9.0, 9.0],
        ]])
        .insert_axis(ndarray::Axis(0))
        .into_dyn();
        let mut p = MaxPool2::new();
        let y = Layer::<f64>::forward(&mut p, x);
        assert_eq!(y.as_slice().unwrap(), &[4.0, 0.5, 0.3, 9.0]);
        // Tie in the bottom-right window resolves to the first position.
        let g = ndarray::Array::from_shape_vec(vec![1, 1, 2, 2], vec![1.0, 1.0, 1.0, 1.0])
            .unwrap();
        let dx = p.backward(g);
        let dx = dx.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        assert_eq!(dx[[0, 0, 2, 2]], 1.0);
        assert_eq!(dx[[0, 0, 2, 3]], 0.0);
        assert_eq!(dx[[0, 0, 3, 2]], 0.0);
        assert_eq!(dx[[0, 0, 3, 3]], 0.0);
    }

    #[test]
    fn drops_odd_edges() {
        let x = ndarray::ArrayD::<f64>::zeros(vec![1, 2, 5, 7]);
        let p = MaxPool2::new();
        let y = Layer::<f64>::infer(&p, &x);
        assert_eq!(y.shape(), &[1, 2, 2, 3]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        // Max pooling is piecewise linear; finite differences are exact as
        // long as no probe crosses a tie, which random inputs avoid.
        let mut rng = stream_rng(14, "pool-gc", 0);
        check_layer(MaxPool2::new(), &[2, 2, 4, 4], &mut rng, 1e-4);
    }
}
