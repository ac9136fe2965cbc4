//! Fréchet distance between Gaussian fits of two feature sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

/// Feature vectors of one clip, one row per spatio-temporal position.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    positions: usize,
    dims: usize,
    /// Row-major `[positions, dims]`.
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(positions: usize, dims: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != positions * dims || dims == 0 {
            return Err(Error::Metric(format!("{} values do not form {positions} x {dims} features", values.len())));
        }
        Ok(Self { positions, dims, values })
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, p: usize) -> &[f64] {
        &self.values[p * self.dims..(p + 1) * self.dims]
    }

    /// Keeps only the listed feature dimensions, in the given order.
    pub fn select(&self, dims: &[usize]) -> Self {
        let values = (0..self.positions).flat_map(|p| dims.iter().map(move |&d| self.values[p * self.dims + d])).collect();
        Self { positions: self.positions, dims: dims.len(), values }
    }

    /// Sample mean and unbiased covariance.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let (n, d) = (self.positions, self.dims);
        let mut mean = DVector::zeros(d);
        for p in 0..n {
            mean += DVector::from_column_slice(self.row(p));
        }
        mean /= n as f64;
        let centered = DMatrix::from_fn(n, d, |p, j| self.values[p * d + j] - mean[j]);
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        (mean, cov)
    }
}

/// Square root of a symmetric positive semi-definite matrix; eigenvalues below
/// zero (rounding noise) are clamped.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians `(mu_a, cov_a)` and `(mu_b, cov_b)`.
///
/// `tr sqrt(cov_a cov_b)` is evaluated as `tr sqrt(S cov_b S)` with `S = sqrt(cov_a)`,
/// which has the same eigenvalues and stays symmetric.
pub fn frechet_from_moments(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> Result<f64> {
    let s = psd_sqrt(cov_a);
    let inner = &s * cov_b * &s;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    if eig.eigenvalues.iter().any(|l| !l.is_finite()) {
        let ca = SymmetricEigen::new(cov_a.clone()).eigenvalues;
        let (lo, hi) = (ca.min(), ca.max());
        return Err(Error::Metric(format!("matrix square root failed; first covariance eigenvalues span [{lo:e}, {hi:e}]")));
    }
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let diff = mu_a - mu_b;
    let d = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

pub fn frechet_distance(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    if a.dims != b.dims {
        return Err(Error::Metric(format!("feature dims differ: {} vs {}", a.dims, b.dims)));
    }
    if a.positions < 2 || b.positions < 2 {
        return Err(Error::Metric(format!("need at least 2 positions per set, got {} and {}", a.positions, b.positions)));
    }
    if a.values.iter().chain(&b.values).any(|v| !v.is_finite()) {
        return Err(Error::Metric("features contain non-finite values".into()));
    }
    let (mu_a, cov_a) = a.moments();
    let (mu_b, cov_b) = b.moments();
    frechet_from_moments(&mu_a, &cov_a, &mu_b, &cov_b)
}

/// Mean Fréchet distance over `trials` random `k`-subsets of the feature dims.
pub fn subsampled_fid(a: &FeatureMap, b: &FeatureMap, k: usize, trials: usize, rng: &mut impl Rng) -> Result<f64> {
    if a.dims != b.dims {
        return Err(Error::Metric(format!("feature dims differ: {} vs {}", a.dims, b.dims)));
    }
    if k == 0 || k > a.dims {
        return Err(Error::Metric(format!("cannot pick {k} of {} feature dims", a.dims)));
    }
    if trials == 0 {
        return Err(Error::Metric("trials must be positive".into()));
    }
    let mut total = 0.0;
    for _ in 0..trials {
        let mut dims = sample(rng, a.dims, k).into_vec();
        dims.sort_unstable();
        total += frechet_distance(&a.select(&dims), &b.select(&dims))?;
    }
    Ok(total / trials as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_map(n: usize, d: usize, shift: f64, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // correlated features: mix i.i.d. normals with a fixed lower-triangular matrix
        let mut values = Vec::with_capacity(n * d);
        for _ in 0..n {
            let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            for i in 0..d {
                values.push(shift + (0..=i).map(|j| z[j] / (1.0 + (i - j) as f64)).sum::<f64>());
            }
        }
        FeatureMap::new(n, d, values).unwrap()
    }

    /// Principal square root by the Denman–Beavers iteration.
    fn denman_beavers(m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = m.clone();
        let mut z = DMatrix::identity(m.nrows(), m.ncols());
        for _ in 0..100 {
            let y_inv = y.clone().try_inverse().unwrap();
            let z_inv = z.clone().try_inverse().unwrap();
            let next_y = (&y + z_inv) * 0.5;
            z = (&z + y_inv) * 0.5;
            y = next_y;
        }
        y
    }

    #[test]
    fn self_distance_is_zero() {
        let a = random_map(200, 6, 0.0, 1);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-6);
    }

    #[test]
    fn one_dimensional_closed_form() {
        // two-point sets give exact sample moments: mean m, unbiased std s * sqrt(2) / sqrt(2)
        let set = |m: f64, s: f64| FeatureMap::new(2, 1, vec![m - s / 2f64.sqrt(), m + s / 2f64.sqrt()]).unwrap();
        let (m1, s1, m2, s2) = (0.3, 1.7, -1.2, 0.4);
        let expected = (m1 - m2) * (m1 - m2) + (s1 - s2) * (s1 - s2);
        assert!((frechet_distance(&set(m1, s1), &set(m2, s2)).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn matches_iterative_square_root_oracle() {
        for seed in 0..3 {
            let a = random_map(300, 5, 0.0, seed);
            let b = random_map(250, 5, 0.4, seed + 10);
            let (ma, ca) = a.moments();
            let (mb, cb) = b.moments();
            let root = denman_beavers(&(&ca * &cb));
            let oracle = (&ma - &mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * root.trace();
            let got = frechet_distance(&a, &b).unwrap();
            assert!((got - oracle).abs() / oracle < 1e-5, "{got} vs {oracle}");
        }
    }

    #[test]
    fn subsampling_cases() {
        let a = random_map(100, 8, 0.0, 3);
        let b = random_map(100, 8, 0.2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(subsampled_fid(&a, &b, 8, 1, &mut rng).unwrap(), frechet_distance(&a, &b).unwrap());
        assert!(subsampled_fid(&a, &a, 3, 10, &mut rng).unwrap() < 1e-6);
        assert!(subsampled_fid(&a, &b, 9, 1, &mut rng).is_err());
    }

    #[test]
    fn more_trials_reduce_spread() {
        let a = random_map(120, 12, 0.0, 5);
        let b = random_map(120, 12, 0.3, 6);
        let spread = |trials: usize| {
            let vals: Vec<f64> = (0..20).map(|s| subsampled_fid(&a, &b, 4, trials, &mut ChaCha8Rng::seed_from_u64(s)).unwrap()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64
        };
        assert!(spread(50) < spread(5));
    }

    #[test]
    fn input_errors() {
        let a = random_map(10, 3, 0.0, 0);
        assert!(frechet_distance(&a, &random_map(10, 2, 0.0, 0)).is_err());
        assert!(frechet_distance(&a, &FeatureMap::new(1, 3, vec![0.0; 3]).unwrap()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn symmetric_and_non_negative(seed in 0u64..1000, shift in -1.0f64..1.0) {
            let a = random_map(40, 4, 0.0, seed);
            let b = random_map(30, 4, shift, seed + 1);
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-8 * ab.max(1.0));
            prop_assert!(ab >= 0.0);
        }
    }
}
