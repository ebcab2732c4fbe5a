use ndarray::ArrayD;

use super::{ff, Float, Param};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with the usual defaults (beta1 0.9, beta2 0.999, eps 1e-8) and
/// bias-corrected moment estimates.
///
/// State is keyed by position, so every `step` call must pass the same
/// parameters in the same order; moments are allocated lazily on the first
/// call.
pub struct Adam<F: Float> {
    lr: F,
    beta1: F,
    beta2: F,
    eps: F,
    t: i32,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Float> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr: ff(lr),
            beta1: ff(ADAM_BETA1),
            beta2: ff(ADAM_BETA2),
            eps: ff(ADAM_EPS),
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param<F>]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "parameter set changed between steps");
        self.t += 1;
        let one = F::one();
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let bc1 = one - b1.powi(self.t);
        let bc2 = one - b2.powi(self.t);
        let scale = self.lr / bc1;
        for (i, p) in params.iter_mut().enumerate() {
            assert_eq!(
                self.m[i].shape(),
                p.value.shape(),
                "parameter {} changed shape",
                p.name
            );
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|pv, &g, mv, vv| {
                    *mv = b1 * *mv + (one - b1) * g;
                    *vv = b2 * *vv + (one - b2) * g * g;
                    let vhat = *vv / bc2;
                    *pv = *pv - scale * *mv / (vhat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::arr1;

    fn param(values: &[f64], grads: &[f64]) -> Param<f64> {
        let mut p = Param::new("p", arr1(values).into_dyn());
        p.grad = arr1(grads).into_dyn();
        p
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut p = param(&[1.0, -2.0, 3.0], &[10.0, -5.0, 0.1]);
        let mut opt = Adam::new(0.0);
        for _ in 0..7 {
            opt.step(&mut [&mut p]);
        }
        assert_eq!(p.value.as_slice().unwrap(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // With zeroed moments, bias correction makes mhat = g and
        // vhat = g*g, so the first update is lr * g / (|g| + eps).
        let mut p = param(&[0.0, 0.0], &[123.0, -0.004]);
        let mut opt = Adam::new(0.01);
        opt.step(&mut [&mut p]);
        assert_relative_eq!(p.value[[0]], -0.01, max_relative = 1e-6);
        assert_relative_eq!(p.value[[1]], 0.01, max_relative = 1e-4);
    }

    #[test]
    fn minimizes_a_quadratic() {
        // d/dp (p - 3)^2 = 2 (p - 3)
        let mut p = param(&[-4.0], &[0.0]);
        let mut opt = Adam::new(0.1);
        for _ in 0..2000 {
            p.grad[[0]] = 2.0 * (p.value[[0]] - 3.0);
            opt.step(&mut [&mut p]);
        }
        assert_relative_eq!(p.value[[0]], 3.0, epsilon = 1e-3);
    }

    #[test]
    #[should_panic(expected = "parameter set changed")]
    fn rejects_changing_parameter_count() {
        let mut a = param(&[0.0], &[1.0]);
        let mut b = param(&[0.0], &[1.0]);
        let mut opt = Adam::new(0.01);
        opt.step(&mut [&mut a]);
        opt.step(&mut [&mut a, &mut b]);
    }
}
