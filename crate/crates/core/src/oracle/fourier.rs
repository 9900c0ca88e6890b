//! Frequency-domain view of Gaussian conditioning on noisy observations.
//!
//! `F = sqrt(d) Q` where `Q` is the orthogonal real DFT with rows ordered by
//! increasing frequency: the constant row, then a cosine/sine pair for each
//! frequency `1..d/2`, then the alternating (Nyquist) row. Row `r` carries
//! frequency index `i = r + 1`, so power laws `i^{-alpha}` decay with
//! frequency. `||F x||^2 / d = ||x||^2`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::gaussian::{check_psd, psd_solve};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FourierSpec {
    pub d: usize,
    pub c: f64,
    pub alpha: f64,
}

impl FourierSpec {
    pub fn new(d: usize, c: f64, alpha: f64) -> Result<Self> {
        if d == 0 || d % 2 != 0 {
            return Err(Error::InvalidConfig(format!("DFT length must be even, got {d}")));
        }
        if !(c > 0.0) || !(alpha >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "power law needs C > 0 and alpha >= 0, got C={c}, alpha={alpha}"
            )));
        }
        Ok(Self { d, c, alpha })
    }

    /// `C * diag(i^{-alpha})`, `i = 1..d`.
    pub fn spectral_variances(&self) -> Vec<f64> {
        (1..=self.d).map(|i| self.c * (i as f64).powf(-self.alpha)).collect()
    }

    /// The signal-domain covariance `Σx` whose transform is the power law.
    pub fn signal_covariance(&self) -> DMatrix<f64> {
        let q = orthogonal_dft(self.d);
        let lam = DMatrix::from_diagonal(&DVector::from_vec(self.spectral_variances()));
        q.transpose() * lam * q / self.d as f64
    }
}

/// Orthogonal real DFT matrix `Q` (`Q Q^T = I`).
pub fn orthogonal_dft(d: usize) -> DMatrix<f64> {
    assert!(d >= 2 && d % 2 == 0, "DFT length must be even");
    let tau = 2.0 * std::f64::consts::PI;
    let df = d as f64;
    DMatrix::from_fn(d, d, |r, n| {
        let n = n as f64;
        if r == 0 {
            1.0 / df.sqrt()
        } else if r == d - 1 {
            if (n as usize) % 2 == 0 {
                1.0 / df.sqrt()
            } else {
                -1.0 / df.sqrt()
            }
        } else {
            let j = ((r + 1) / 2) as f64;
            let scale = (2.0 / df).sqrt();
            if r % 2 == 1 {
                scale * (tau * j * n / df).cos()
            } else {
                scale * (tau * j * n / df).sin()
            }
        }
    })
}

/// `F_d = sqrt(d) Q`.
pub fn dft_matrix(d: usize) -> DMatrix<f64> {
    orthogonal_dft(d) * (d as f64).sqrt()
}

pub fn dft(x: &DVector<f64>) -> DVector<f64> {
    dft_matrix(x.len()) * x
}

pub fn inverse_dft(xh: &DVector<f64>) -> DVector<f64> {
    let d = xh.len();
    orthogonal_dft(d).transpose() * xh / (d as f64).sqrt()
}

/// Diagonal of `Ŝ(sigma)` for a power-law spectrum: `1 / (1 + d sigma^2 i^alpha / C)`.
pub fn fourier_attenuation(spec: &FourierSpec, sigma: f64) -> Vec<f64> {
    let d = spec.d as f64;
    (1..=spec.d)
        .map(|i| 1.0 / (1.0 + d * sigma * sigma * (i as f64).powf(spec.alpha) / spec.c))
        .collect()
}

/// Fourier-domain conditional of `F_m y | F_d x_sigma` for `x ~ N(0, Σx)`,
/// `y | x ~ N(A x, Σy)`, `x_sigma = x + sigma z`:
/// mean `Â Ŝ F(x_sigma)`, covariance `Σ̂y + d sigma^2 Â Ŝ Â^T`.
pub fn fourier_conditional(
    a: &DMatrix<f64>,
    sigma_x: &DMatrix<f64>,
    sigma_y: &DMatrix<f64>,
    sigma: f64,
    x_sigma: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (m, d) = (a.nrows(), a.ncols());
    if m % 2 != 0 || d % 2 != 0 {
        return Err(Error::InvalidConfig("Fourier conditional needs even dimensions".into()));
    }
    check_psd(sigma_x, "Σx")?;
    let (fd, fm) = (dft_matrix(d), dft_matrix(m));
    let fd_inv = orthogonal_dft(d).transpose() / (d as f64).sqrt();
    let a_hat = &fm * a * fd_inv;
    let sx_hat = &fd * sigma_x * fd.transpose();
    let sy_hat = &fm * sigma_y * fm.transpose();
    let reg = &sx_hat + DMatrix::identity(d, d) * (d as f64 * sigma * sigma);
    let s_hat = psd_solve(&reg, &sx_hat)?.transpose();
    let mean = &a_hat * &s_hat * (&fd * x_sigma);
    let cov = sy_hat + &a_hat * &s_hat * a_hat.transpose() * (d as f64 * sigma * sigma);
    Ok((mean, cov))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::gaussian::lemma_conditional;

    #[test]
    fn orthogonality() {
        for d in [2, 4, 8, 10] {
            let q = orthogonal_dft(d);
            assert!((&q * q.transpose() - DMatrix::identity(d, d)).amax() < 1e-12);
        }
    }

    #[test]
    fn attenuation_hand_value() {
        let spec = FourierSpec::new(8, 1.0, 2.0).unwrap();
        let s = fourier_attenuation(&spec, 0.5);
        assert!((s[1] - 1.0 / 9.0).abs() < 1e-15);
        assert!(fourier_attenuation(&spec, 0.0).iter().all(|&v| v == 1.0));
        let flat = fourier_attenuation(&FourierSpec::new(8, 2.0, 0.0).unwrap(), 0.7);
        assert!(flat.iter().all(|&v| v == flat[0]));
    }

    #[test]
    fn rejects_odd_length() {
        assert!(FourierSpec::new(7, 1.0, 1.0).is_err());
    }

    #[test]
    fn fourier_conditional_is_transformed_lemma() {
        let spec = FourierSpec::new(6, 2.0, 1.5).unwrap();
        let sx = spec.signal_covariance();
        let a = DMatrix::from_fn(4, 6, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.1 - 0.2);
        let sy = DMatrix::identity(4, 4) * 0.3;
        let x = DVector::from_fn(6, |i, _| (i as f64 * 0.7).sin());
        let (mh, ch) = fourier_conditional(&a, &sx, &sy, 0.4, &x).unwrap();
        let (m, c) = lemma_conditional(&a, &sx, &sy, 0.4, &x).unwrap();
        let f4 = dft_matrix(4);
        assert!((&mh - &f4 * m).amax() < 1e-10);
        assert!((&ch - &f4 * c * f4.transpose()).amax() < 1e-10);
    }

    #[test]
    fn spectral_covariance_is_diagonal_in_fourier_basis() {
        let spec = FourierSpec::new(8, 1.0, 2.0).unwrap();
        let f = dft_matrix(8);
        let sh = &f * spec.signal_covariance() * f.transpose();
        let want = DMatrix::from_diagonal(&DVector::from_vec(spec.spectral_variances()));
        assert!((sh - want).amax() < 1e-12);
    }
}
