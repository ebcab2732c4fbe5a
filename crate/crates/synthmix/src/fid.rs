//! Frechet distance between feature distributions.
//!
//! Two feature sets are summarized as Gaussians `(mean, cov)` and compared
//! with `|dmu|^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2))`. The matrix square root
//! never materializes `Sa Sb` (which is not symmetric): it goes through the
//! similar symmetric product `Sa^(1/2) Sb Sa^(1/2)`, whose eigenvalues match
//! and stay real, then sums their square roots for the trace term.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Eigenvalues of the symmetrized product more negative than this fraction
/// of the largest one indicate a genuinely broken covariance rather than
/// rounding noise, and turn into [`Error::Numerical`].
pub const EIGENVALUE_REL_TOL: f64 = 1e-3;

/// Ridge added to the covariance diagonal when there are fewer samples
/// than feature dimensions, guarding the square root against the rank
/// deficiency that setup guarantees.
pub const COV_SHRINKAGE: f64 = 1e-6;

/// Gaussian summary of a feature matrix: sample mean and unbiased covariance.
#[derive(Debug, Clone)]
pub struct FeatureStats {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
    pub sample_count: usize,
}

impl FeatureStats {
    /// Fit from `(N, D)` features. Needs `N >= 2` for the unbiased
    /// covariance; the result is explicitly symmetrized.
    pub fn fit(features: ArrayView2<'_, f64>) -> Result<Self> {
        let (n, d) = features.dim();
        if n < 2 {
            return Err(Error::Capacity(format!(
                "need at least 2 feature rows to fit covariance, got {n}"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite feature values".into()));
        }
        let mean = features.mean_axis(Axis(0)).expect("n >= 2");
        let centered = &features - &mean;
        let mut cov = centered.t().dot(&centered) / (n as f64 - 1.0);
        debug_assert_eq!(cov.dim(), (d, d));
        for i in 0..d {
            for j in 0..i {
                let s = 0.5 * (cov[[i, j]] + cov[[j, i]]);
                cov[[i, j]] = s;
                cov[[j, i]] = s;
            }
        }
        if n < d {
            for i in 0..d {
                cov[[i, i]] += COV_SHRINKAGE;
            }
        }
        Ok(FeatureStats { mean, cov, sample_count: n })
    }

    pub fn fit_f32(features: ArrayView2<'_, f32>) -> Result<Self> {
        Self::fit(features.mapv(f64::from).view())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Squared Frechet distance between two Gaussian summaries.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Consistency(format!(
            "feature dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let dmu = &a.mean - &b.mean;
    let mean_term = dmu.dot(&dmu);

    let sa = to_na(&a.cov);
    let sb = to_na(&b.cov);
    let sa_sqrt = psd_sqrt(sa, "first covariance")?;
    let mut inner = &sa_sqrt * sb * sa_sqrt;
    symmetrize(&mut inner);
    let trace_sqrt = sqrt_eigenvalues(inner, "covariance product")?
        .iter()
        .sum::<f64>();

    let trace_a: f64 = (0..a.dim()).map(|i| a.cov[[i, i]]).sum();
    let trace_b: f64 = (0..b.dim()).map(|i| b.cov[[i, i]]).sum();
    let fid = mean_term + trace_a + trace_b - 2.0 * trace_sqrt;
    // Exact value is >= 0; tiny negatives are rounding residue.
    Ok(fid.max(0.0))
}

/// Fit both sides and compare, the usual entry point for `(N, D)` features.
pub fn fid_between(a: ArrayView2<'_, f32>, b: ArrayView2<'_, f32>) -> Result<f64> {
    frechet_distance(&FeatureStats::fit_f32(a)?, &FeatureStats::fit_f32(b)?)
}

/// Frechet distance between two image sets in the feature space of a
/// trained classifier (its penultimate activations).
pub fn fid_between_sets(
    model: &crate::classifier::TrainedClassifier,
    a: &crate::data::LabeledImageSet,
    b: &crate::data::LabeledImageSet,
) -> Result<f64> {
    let fa = model.extract_features(a)?;
    let fb = model.extract_features(b)?;
    fid_between(fa.view(), fb.view())
}

fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_row_iterator(a.nrows(), a.ncols(), a.iter().cloned())
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Eigenvalues of a symmetric matrix with the PSD clamp applied: small
/// negatives (rounding) go to zero, large ones are an error.
fn sqrt_eigenvalues(m: DMatrix<f64>, what: &str) -> Result<DVector<f64>> {
    let eig = m.symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let floor = -EIGENVALUE_REL_TOL * max.max(1e-12);
    let mut out = eig.eigenvalues;
    for v in out.iter_mut() {
        if *v < floor {
            return Err(Error::Numerical(format!(
                "{what} has eigenvalue {v:.6e} below tolerance {floor:.6e}"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(out)
}

/// Symmetric PSD square root via eigendecomposition.
fn psd_sqrt(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let floor = -EIGENVALUE_REL_TOL * max.max(1e-12);
    let mut roots = eig.eigenvalues;
    for v in roots.iter_mut() {
        if *v < floor {
            return Err(Error::Numerical(format!(
                "{what} has eigenvalue {v:.6e} below tolerance {floor:.6e}"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let scaled = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
        eig.eigenvectors[(i, j)] * roots[j]
    });
    Ok(&scaled * eig.eigenvectors.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::arr1;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    fn stats(mean: &[f64], cov: Array2<f64>) -> FeatureStats {
        FeatureStats { mean: arr1(mean), cov, sample_count: 1000 }
    }

    #[test]
    fn identical_distributions_have_zero_distance() {
        let s = stats(&[1.0, -2.0, 0.5], Array2::eye(3) * 2.5);
        let d = frechet_distance(&s, &s).unwrap();
        assert!(d.abs() < 1e-10, "got {d}");
    }

    #[test]
    fn mean_shift_with_shared_covariance_is_squared_norm() {
        let a = stats(&[0.0, 0.0], Array2::eye(2));
        let b = stats(&[1.0, 1.0], Array2::eye(2));
        assert_relative_eq!(frechet_distance(&a, &b).unwrap(), 2.0, max_relative = 1e-10);
    }

    #[test]
    fn scaled_identity_covariances_reduce_to_scalar_formula() {
        // Tr(4I + I - 2 sqrt(4I)) = k (4 + 1 - 4) = k, here k = 5.
        let a = stats(&[0.0; 5], Array2::eye(5) * 4.0);
        let b = stats(&[0.0; 5], Array2::eye(5));
        assert_relative_eq!(frechet_distance(&a, &b).unwrap(), 5.0, max_relative = 1e-10);
    }

    #[test]
    fn commuting_diagonal_covariances_sum_per_axis() {
        // Per axis: (sqrt(1) - sqrt(9))^2 + (sqrt(4) - sqrt(1))^2 = 4 + 1.
        let a = stats(&[0.0; 2], ndarray::arr2(&[[1.0, 0.0], [0.0, 4.0]]));
        let b = stats(&[0.0; 2], ndarray::arr2(&[[9.0, 0.0], [0.0, 1.0]]));
        assert_relative_eq!(frechet_distance(&a, &b).unwrap(), 5.0, max_relative = 1e-10);
    }

    #[test]
    fn dimension_mismatch_is_a_consistency_error() {
        let a = stats(&[0.0; 2], Array2::eye(2));
        let b = stats(&[0.0; 3], Array2::eye(3));
        assert!(matches!(frechet_distance(&a, &b), Err(Error::Consistency(_))));
    }

    #[test]
    fn distance_is_symmetric() {
        let mut rng = crate::rng::stream_rng(21, "fid-sym", 0);
        let (a, b) = (random_spd(6, &mut rng), random_spd(6, &mut rng));
        let ma: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mb: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let sa = stats(&ma, a);
        let sb = stats(&mb, b);
        let ab = frechet_distance(&sa, &sb).unwrap();
        let ba = frechet_distance(&sb, &sa).unwrap();
        assert_relative_eq!(ab, ba, max_relative = 1e-8);
        assert!(ab > 0.0);
    }

    fn random_spd(k: usize, rng: &mut crate::rng::Rng) -> Array2<f64> {
        let g = Array2::from_shape_fn((k, k), |_| rng.gen_range(-1.0..1.0));
        let mut m = g.t().dot(&g);
        for i in 0..k {
            m[[i, i]] += 0.5;
        }
        m
    }

    /// Denman-Beavers iteration, an independent matrix square root.
    fn db_sqrt_trace(m: &DMatrix<f64>) -> f64 {
        let n = m.nrows();
        let mut y = m.clone();
        let mut z = DMatrix::<f64>::identity(n, n);
        for _ in 0..60 {
            let yi = y.clone().try_inverse().expect("invertible");
            let zi = z.clone().try_inverse().expect("invertible");
            let y_next = (&y + &zi) * 0.5;
            let z_next = (&z + &yi) * 0.5;
            y = y_next;
            z = z_next;
        }
        y.trace()
    }

    #[test]
    fn trace_sqrt_matches_denman_beavers() {
        let mut rng = crate::rng::stream_rng(21, "fid-db", 0);
        for _ in 0..3 {
            let a = random_spd(8, &mut rng);
            let b = random_spd(8, &mut rng);
            let product = to_na(&a) * to_na(&b);
            let want = db_sqrt_trace(&product);

            let sa_sqrt = psd_sqrt(to_na(&a), "a").unwrap();
            let mut inner = &sa_sqrt * to_na(&b) * sa_sqrt;
            symmetrize(&mut inner);
            let got: f64 = sqrt_eigenvalues(inner, "ab").unwrap().iter().sum();
            assert_relative_eq!(got, want, max_relative = 1e-8);
        }
    }

    #[test]
    fn monte_carlo_gaussians_recover_mean_distance() {
        let mut rng = crate::rng::stream_rng(21, "fid-mc", 0);
        let (n, d) = (4000, 4);
        let shift = [0.8, -0.3, 0.0, 1.1];
        let want: f64 = shift.iter().map(|v| v * v).sum();
        let a = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
        let b =
            Array2::from_shape_fn((n, d), |(_, j)| rng.sample::<f64, _>(StandardNormal) + shift[j]);
        let fa = FeatureStats::fit(a.view()).unwrap();
        let fb = FeatureStats::fit(b.view()).unwrap();
        let fid = frechet_distance(&fa, &fb).unwrap();
        // Estimator noise at n = 4000 stays well inside this band.
        assert!((fid - want).abs() < 0.15, "fid {fid} vs {want}");
    }

    #[test]
    fn broken_covariance_is_a_numerical_error() {
        let mut cov = Array2::eye(3);
        cov[[0, 0]] = -1.0;
        let bad = stats(&[0.0; 3], cov);
        let good = stats(&[0.0; 3], Array2::eye(3));
        assert!(matches!(
            frechet_distance(&bad, &good),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn fit_rejects_single_row_and_nonfinite() {
        let one = Array2::<f64>::zeros((1, 4));
        assert!(matches!(
            FeatureStats::fit(one.view()),
            Err(Error::Capacity(_))
        ));
        let mut bad = Array2::<f64>::zeros((3, 2));
        bad[[1, 1]] = f64::NAN;
        assert!(matches!(
            FeatureStats::fit(bad.view()),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn unbiased_covariance_on_known_points() {
        // Two points (0, 0) and (2, 2): mean (1, 1), cov [[2, 2], [2, 2]].
        let f = ndarray::arr2(&[[0.0, 0.0], [2.0, 2.0]]);
        let s = FeatureStats::fit(f.view()).unwrap();
        assert_eq!(s.sample_count, 2);
        assert_eq!(s.mean.as_slice().unwrap(), &[1.0, 1.0]);
        for v in s.cov.iter() {
            assert_relative_eq!(*v, 2.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn underdetermined_fit_shrinks_the_diagonal() {
        // 3 samples in 5 dimensions: rank-deficient raw covariance.
        let mut rng = crate::rng::stream_rng(21, "fid-shrink", 0);
        let f = Array2::from_shape_fn((3, 5), |_| rng.sample::<f64, _>(StandardNormal));
        let s = FeatureStats::fit(f.view()).unwrap();
        let centered = &f - &f.mean_axis(Axis(0)).unwrap();
        let raw = centered.t().dot(&centered) / 2.0;
        for i in 0..5 {
            assert_relative_eq!(s.cov[[i, i]], raw[[i, i]] + COV_SHRINKAGE, max_relative = 1e-12);
        }
        // The ridge keeps the square root well posed.
        frechet_distance(&s, &s).unwrap();
    }
}
