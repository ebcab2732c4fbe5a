use ndarray::{Array1, Array2, ArrayD, Ix2};

use super::{glorot_uniform, into_c, Float, Layer, Param};
use crate::rng::Rng;

/// Fully connected layer: `y = x w + b` with `x` of shape `(N, in)`.
pub struct Dense<F: Float> {
    w: Param<F>,
    b: Param<F>,
    x: Option<Array2<F>>,
}

impl<F: Float> Dense<F> {
    pub fn new(input: usize, output: usize, name: &str, rng: &mut Rng) -> Self {
        let w = glorot_uniform::<F>(&[input, output], input, output, rng);
        let b = ArrayD::zeros(vec![output]);
        Dense {
            w: Param::new(format!("{name}.w"), w),
            b: Param::new(format!("{name}.b"), b),
            x: None,
        }
    }

    fn apply(&self, x: &Array2<F>) -> Array2<F> {
        let w = self.w.value.view().into_dimensionality::<Ix2>().unwrap();
        let b = self.b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut y = into_c(x.dot(&w));
        y += &b;
        y
    }
}

impl<F: Float> Layer<F> for Dense<F> {
    fn forward(&mut self, x: ArrayD<F>) -> ArrayD<F> {
        let x = x.into_dimensionality::<Ix2>().expect("dense input is 2-d");
        let y = self.apply(&x);
        self.x = Some(x);
        y.into_dyn()
    }

    fn infer(&self, x: &ArrayD<F>) -> ArrayD<F> {
        let x = x.view().into_dimensionality::<Ix2>().expect("dense input is 2-d");
        self.apply(&x.to_owned()).into_dyn()
    }

    fn backward(&mut self, grad_out: ArrayD<F>) -> ArrayD<F> {
        let g = grad_out.into_dimensionality::<Ix2>().unwrap();
        let x = self.x.take().expect("backward before forward");
        let w = self.w.value.view().into_dimensionality::<Ix2>().unwrap();
        self.w.grad = into_c(x.t().dot(&g)).into_dyn();
        let db: Array1<F> = g.sum_axis(ndarray::Axis(0));
        self.b.grad = db.into_dyn();
        into_c(g.dot(&w.t())).into_dyn()
    }

    fn params(&self) -> Vec<&Param<F>> {
        vec![&self.w, &self.b]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.w, &mut self.b]
    }
}
