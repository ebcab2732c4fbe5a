//! Parameter-free layers: activations and shape adapters.

use ndarray::ArrayD;

use super::{ff, Float, Layer, Param};

macro_rules! no_params {
    () => {
        fn params(&self) -> Vec<&Param<F>> {
            Vec::new()
        }
        fn params_mut(&mut self) -> Vec<&mut Param<F>> {
            Vec::new()
        }
    };
}

pub struct Relu<F: Float> {
    x: Option<ArrayD<F>>,
}

impl<F: Float> Relu<F> {
    pub fn new() -> Self {
        Relu { x: None }
    }
}

impl<F: Float> Default for Relu<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Layer<F> for Relu<F> {
    fn forward(&mut self, x: ArrayD<F>) -> ArrayD<F> {
        let y = self.infer(&x);
        self.x = Some(x);
        y
    }

    fn infer(&self, x: &ArrayD<F>) -> ArrayD<F> {
        x.mapv(|v| if v > F::zero() { v } else { F::zero() })
    }

    fn backward(&mut self, grad_out: ArrayD<F>) -> ArrayD<F> {
        let x = self.x.take().expect("backward before forward");
        let mut g = grad_out;
        g.zip_mut_with(&x, |gv, &xv| {
            if xv <= F::zero() {
                *gv = F::zero();
            }
        });
        g
    }

    no_params!();
}

pub struct LeakyRelu<F: Float> {
    slope: F,
    x: Option<ArrayD<F>>,
}

impl<F: Float> LeakyRelu<F> {
    pub fn new(slope: f64) -> Self {
        LeakyRelu { slope: ff(slope), x: None }
    }
}

impl<F: Float> Layer<F> for LeakyRelu<F> {
    fn forward(&mut self, x: ArrayD<F>) -> ArrayD<F> {
        let y = self.infer(&x);
        self.x = Some(x);
        y
    }

    fn infer(&self, x: &ArrayD<F>) -> ArrayD<F> {
        let s = self.slope;
        x.mapv(|v| if v > F::zero() { v } else { s * v })
    }

    fn backward(&mut self, grad_out: ArrayD<F>) -> ArrayD<F> {
        let x = self.x.take().expect("backward before forward");
        let s = self.slope;
        let mut g = grad_out;
        g.zip_mut_with(&x, |gv, &xv| {
            if xv <= F::zero() {
                *gv = *gv * s;
            }
        });
        g
    }

    no_params!();
}

pub struct Sigmoid<F: Float> {
    y: Option<ArrayD<F>>,
}

impl<F: Float> Sigmoid<F> {
    pub fn new() -> Self {
        Sigmoid { y: None }
    }
}

impl<F: Float> Default for Sigmoid<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<F: Float>(v: F) -> F {
    // Evaluate through exp(-|v|) only so neither branch can overflow.
    let one = F::one();
    if v >= F::zero() {
        one / (one + (-v).exp())
    } else {
        let e = v.exp();
        e / (one + e)
    }
}

impl<F: Float> Layer<F> for Sigmoid<F> {
    fn forward(&mut self, x: ArrayD<F>) -> ArrayD<F> {
        let y = self.infer(&x);
        self.y = Some(y.clone());
        y
    }

    fn infer(&self, x: &ArrayD<F>) -> ArrayD<F> {
        x.mapv(sigmoid)
    }

    fn backward(&mut self, grad_out: ArrayD<F>) -> ArrayD<F> {
        let y = self.y.take().expect("backward before forward");
        let mut g = grad_out;
        g.zip_mut_with(&y, |gv, &yv| {
            *gv = *gv * yv * (F::one() - yv);
        });
        g
    }

    no_params!();
}

/// Collapse everything after the batch axis into one dimension.
pub struct Flatten {
    shape: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new() -> Self {
        Flatten { shape: None }
    }
}

impl Default for Flatten {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Layer<F> for Flatten {
    fn forward(&mut self, x: ArrayD<F>) -> ArrayD<F> {
        self.shape = Some(x.shape().to_vec());
        Layer::<F>::infer(self, &x)
    }

    fn infer(&self, x: &ArrayD<F>) -> ArrayD<F> {
        let n = x.shape()[0];
        let rest: usize = x.shape()[1..].iter().product();
        x.to_owned()
            .into_shape_with_order(vec![n, rest])
            .expect("contiguous input")
    }

    fn backward(&mut self, grad_out: ArrayD<F>) -> ArrayD<F> {
        let shape = self.shape.take().expect("backward before forward");
        grad_out.into_shape_with_order(shape).unwrap()
    }

    no_params!();
}

/// Reshape `(N, flat)` to `(N, ..dims)`, the inverse of [`Flatten`].
pub struct Reshape {
    dims: Vec<usize>,
}

impl Reshape {
    /// `dims` excludes the batch axis.
    pub fn new(dims: &[usize]) -> Self {
        Reshape { dims: dims.to_vec() }
    }
}

impl<F: Float> Layer<F> for Reshape {
    fn forward(&mut self, x: ArrayD<F>) -> ArrayD<F> {
        Layer::<F>::infer(self, &x)
    }

    fn infer(&self, x: &ArrayD<F>) -> ArrayD<F> {
        let n = x.shape()[0];
        let mut shape = vec![n];
        shape.extend_from_slice(&self.dims);
        x.to_owned().into_shape_with_order(shape).expect("element count matches")
    }

    fn backward(&mut self, grad_out: ArrayD<F>) -> ArrayD<F> {
        let n = grad_out.shape()[0];
        let rest: usize = grad_out.shape()[1..].iter().product();
        grad_out.into_shape_with_order(vec![n, rest]).unwrap()
    }

    no_params!();
}
