//! Maximum-likelihood combination of noisy score estimates.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::oracle::gaussian::check_psd;

/// `n` estimators of a `d`-vector with joint error covariance over `n d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEnsembleSpec {
    pub n: usize,
    pub d: usize,
    pub cov: DMatrix<f64>,
}

impl ScoreEnsembleSpec {
    pub fn new(n: usize, d: usize, cov: DMatrix<f64>) -> Result<Self> {
        if n == 0 || d == 0 || cov.nrows() != n * d {
            return Err(Error::ShapeMismatch(format!(
                "{n} estimators of dimension {d} need a {0}x{0} covariance",
                n * d
            )));
        }
        check_psd(&cov, "estimator error covariance")?;
        Ok(Self { n, d, cov })
    }

    /// Independent estimators with isotropic error variances `vars[i]`.
    pub fn isotropic(d: usize, vars: &[f64]) -> Result<Self> {
        let n = vars.len();
        let diag = DVector::from_fn(n * d, |i, _| vars[i / d]);
        Self::new(n, d, DMatrix::from_diagonal(&diag))
    }

    fn stacked_identity(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n * self.d, self.d, |i, j| if i % self.d == j { 1.0 } else { 0.0 })
    }

    /// `W = (𝕀ᵀ Σ⁻¹ 𝕀)⁻¹ 𝕀ᵀ Σ⁻¹`, a `d × n d` matrix.
    pub fn weights(&self) -> Result<DMatrix<f64>> {
        let ones = self.stacked_identity();
        let chol = self
            .cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Singular("estimator covariance is singular".into()))?;
        let sinv_i = chol.solve(&ones);
        let info = ones.transpose() * &sinv_i;
        let info_inv = info
            .cholesky()
            .ok_or_else(|| Error::Singular("information matrix is singular".into()))?
            .inverse();
        Ok(info_inv * sinv_i.transpose())
    }

    /// Error covariance of the MLE, `(𝕀ᵀ Σ⁻¹ 𝕀)⁻¹`.
    pub fn mle_error_cov(&self) -> Result<DMatrix<f64>> {
        let w = self.weights()?;
        Ok(&w * &self.cov * w.transpose())
    }

    /// Error covariance block of estimator `i`.
    pub fn block(&self, i: usize) -> DMatrix<f64> {
        self.cov.view((i * self.d, i * self.d), (self.d, self.d)).into_owned()
    }
}

pub fn mle_combine(spec: &ScoreEnsembleSpec, estimates: &[DVector<f64>]) -> Result<DVector<f64>> {
    if estimates.len() != spec.n || estimates.iter().any(|e| e.len() != spec.d) {
        return Err(Error::ShapeMismatch(format!(
            "expected {} estimates of dimension {}",
            spec.n, spec.d
        )));
    }
    let stacked = DVector::from_iterator(spec.n * spec.d, estimates.iter().flat_map(|e| e.iter().copied()));
    Ok(spec.weights()? * stacked)
}

/// Monte-Carlo measurement of the partition example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionMse {
    pub individual_mse: f64,
    pub individual_se: f64,
    pub averaged_mse: f64,
    pub averaged_se: f64,
}

/// `n` indicator estimators of a zero target, each firing on its own cell
/// of an equal-mass partition of `[0, 1)`.
pub fn partition_example_mse<R: Rng + ?Sized>(n: usize, draws: usize, rng: &mut R) -> Result<PartitionMse> {
    if n == 0 || draws < 2 {
        return Err(Error::InvalidConfig("partition example needs n >= 1 and >= 2 draws".into()));
    }
    let (mut s1, mut s2) = (0.0f64, 0.0f64);
    let (mut a1, mut a2) = (0.0f64, 0.0f64);
    for _ in 0..draws {
        let x: f64 = rng.random();
        let cell = ((x * n as f64) as usize).min(n - 1);
        // estimator 0 is the one reported; all are exchangeable
        let e0 = if cell == 0 { 1.0 } else { 0.0 };
        s1 += e0 * e0;
        s2 += e0 * e0 * e0 * e0;
        let avg = (0..n).map(|i| if i == cell { 1.0 } else { 0.0 }).sum::<f64>() / n as f64;
        a1 += avg * avg;
        a2 += avg * avg * avg * avg;
    }
    let m = draws as f64;
    let se = |s1: f64, s2: f64| {
        let mean = s1 / m;
        ((s2 / m - mean * mean).max(0.0) / (m - 1.0)).sqrt()
    };
    Ok(PartitionMse {
        individual_mse: s1 / m,
        individual_se: se(s1, s2),
        averaged_mse: a1 / m,
        averaged_se: se(a1, a2),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn precision_weighting_scalar() {
        let spec = ScoreEnsembleSpec::isotropic(1, &[1.0, 4.0]).unwrap();
        let w = spec.weights().unwrap();
        assert!((w[(0, 0)] - 0.8).abs() < 1e-14);
        assert!((w[(0, 1)] - 0.2).abs() < 1e-14);
    }

    #[test]
    fn equal_blocks_average() {
        let spec = ScoreEnsembleSpec::isotropic(2, &[0.5, 0.5, 0.5]).unwrap();
        let est = [
            DVector::from_column_slice(&[1.0, 2.0]),
            DVector::from_column_slice(&[3.0, -2.0]),
            DVector::from_column_slice(&[2.0, 3.0]),
        ];
        let m = mle_combine(&spec, &est).unwrap();
        assert!((m - DVector::from_column_slice(&[2.0, 1.0])).amax() < 1e-14);
    }

    #[test]
    fn single_estimate_unchanged() {
        let spec = ScoreEnsembleSpec::new(1, 2, DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])).unwrap();
        let e = DVector::from_column_slice(&[0.7, -0.1]);
        assert!((mle_combine(&spec, &[e.clone()]).unwrap() - e).amax() < 1e-14);
    }

    #[test]
    fn partition_single_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = partition_example_mse(1, 1000, &mut rng).unwrap();
        assert_eq!(p.individual_mse, 1.0);
        assert_eq!(p.averaged_mse, 1.0);
    }
}
