//! Exact joint-Gaussian sequence laws: posteriors, conditionals and scores.
//!
//! Frames are flattened as `t * D + d`. All computations are in `f64`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Solves `m x = b` for symmetric PSD `m`: Cholesky first, pseudo-inverse
/// when the factorization fails (rank-deficient observation covariances).
pub fn psd_solve(m: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = m.clone().cholesky() {
        return Ok(ch.solve(b));
    }
    let scale = m.diagonal().amax().max(1.0);
    let pinv = m
        .clone()
        .pseudo_inverse(1e-12 * scale)
        .map_err(|e| Error::Singular(e.to_string()))?;
    Ok(pinv * b)
}

pub fn psd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    psd_solve(m, &DMatrix::identity(m.nrows(), m.nrows()))
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Rejects asymmetric or indefinite matrices (tolerance relative to scale).
pub fn check_psd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::NotPsd(format!("{what} is not square")));
    }
    let scale = m.amax().max(1e-300);
    if (m - m.transpose()).amax() > 1e-10 * scale {
        return Err(Error::NotPsd(format!("{what} is not symmetric")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPsd(format!("{what} has non-finite entries")));
    }
    let eig = symmetrize(m.clone()).symmetric_eigenvalues();
    let min = eig.min();
    if min < -1e-9 * scale {
        return Err(Error::NotPsd(format!("{what} has eigenvalue {min}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ar1 {
    pub rho: f64,
}

/// Joint Gaussian law over a `T × D` sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSeqSpec {
    frames: usize,
    dim: usize,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    ar1: Option<Ar1>,
}

/// Gaussian conditional `x_G | x_H` over the flattened generation frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditional {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianSeqSpec {
    pub fn joint(frames: usize, dim: usize, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = frames * dim;
        if frames == 0 || dim == 0 || mean.len() != n || cov.nrows() != n {
            return Err(Error::ShapeMismatch(format!(
                "spec for {frames}x{dim} given mean {} and covariance {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        check_psd(&cov, "sequence covariance")?;
        Ok(Self {
            frames,
            dim,
            mean,
            cov: symmetrize(cov),
            ar1: None,
        })
    }

    /// Stationary AR(1): mean 0, unit marginal variance, `Cov = rho^|t - t'|`
    /// within each feature and independent across features.
    pub fn ar1(rho: f64, dim: usize, frames: usize) -> Result<Self> {
        if !(rho.abs() < 1.0) {
            return Err(Error::InvalidConfig(format!("AR(1) needs |rho| < 1, got {rho}")));
        }
        if frames == 0 || dim == 0 {
            return Err(Error::ShapeMismatch("AR(1) needs T, D >= 1".into()));
        }
        let n = frames * dim;
        let cov = DMatrix::from_fn(n, n, |i, j| {
            let (t, d) = (i / dim, i % dim);
            let (u, e) = (j / dim, j % dim);
            if d == e {
                rho.powi((t as i32 - u as i32).abs())
            } else {
                0.0
            }
        });
        Ok(Self {
            frames,
            dim,
            mean: DVector::zeros(n),
            cov,
            ar1: Some(Ar1 { rho }),
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.frames * self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn ar1_params(&self) -> Option<Ar1> {
        self.ar1
    }

    /// Marginal over the leading `frames` frames.
    pub fn leading(&self, frames: usize) -> Result<Self> {
        if frames == 0 || frames > self.frames {
            return Err(Error::ShapeMismatch(format!(
                "cannot take {frames} of {} frames",
                self.frames
            )));
        }
        let n = frames * self.dim;
        Ok(Self {
            frames,
            dim: self.dim,
            mean: self.mean.rows(0, n).into_owned(),
            cov: self.cov.view((0, 0), (n, n)).into_owned(),
            ar1: self.ar1,
        })
    }

    /// Flattened coordinates of a set of frames.
    pub fn coords(&self, frames: &[usize]) -> Vec<usize> {
        frames
            .iter()
            .flat_map(|&t| (0..self.dim).map(move |d| t * self.dim + d))
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Vec<DVector<f64>>> {
        let l = cholesky_factor(&self.cov)?;
        Ok((0..n)
            .map(|_| {
                let z = DVector::from_fn(self.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
                &self.mean + &l * z
            })
            .collect())
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        gaussian_log_density(x, &self.mean, &self.cov)
    }

    /// Affine posterior map for per-coordinate observations
    /// `y = a ∘ x0 + s ∘ eps`: returns `(K, c)` with `E[x0 | y] = K y + c`,
    /// plus the posterior covariance.
    pub fn posterior_map(&self, a: &[f64], s: &[f64]) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
        let n = self.len();
        if a.len() != n || s.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "posterior needs {n} coefficients, got {} and {}",
                a.len(),
                s.len()
            )));
        }
        let av = DVector::from_column_slice(a);
        // Cov(y) = A Σ A + S^2, Cov(x0, y) = Σ A with A = diag(a)
        let sigma_a = DMatrix::from_fn(n, n, |i, j| self.cov[(i, j)] * a[j]);
        let mut cyy = DMatrix::from_fn(n, n, |i, j| a[i] * sigma_a[(i, j)]);
        for i in 0..n {
            cyy[(i, i)] += s[i] * s[i];
        }
        // K = Σ A Cyy^{-1}  <=>  Cyy K^T = A Σ
        let kt = psd_solve(&cyy, &sigma_a.transpose())?;
        let k = kt.transpose();
        let c = &self.mean - &k * self.mean.component_mul(&av);
        let post = symmetrize(&self.cov - &k * sigma_a.transpose());
        Ok((k, c, post))
    }

    pub fn posterior_mean(&self, y: &[f64], a: &[f64], s: &[f64]) -> Result<DVector<f64>> {
        let (k, c, _) = self.posterior_map(a, s)?;
        Ok(k * DVector::from_column_slice(y) + c)
    }

    /// Exact `x_G | x_H` by the dense Schur complement.
    pub fn conditional(&self, history: &[usize], x_h: &[f64]) -> Result<Conditional> {
        let (hc, gc) = self.split(history)?;
        if x_h.len() != hc.len() {
            return Err(Error::ShapeMismatch(format!(
                "history values: expected {}, got {}",
                hc.len(),
                x_h.len()
            )));
        }
        let sub = |r: &[usize], c: &[usize]| DMatrix::from_fn(r.len(), c.len(), |i, j| self.cov[(r[i], c[j])]);
        let mu = |r: &[usize]| DVector::from_fn(r.len(), |i, _| self.mean[r[i]]);
        let (s_gg, s_gh, s_hh) = (sub(&gc, &gc), sub(&gc, &hc), sub(&hc, &hc));
        if hc.is_empty() {
            return Ok(Conditional { mean: mu(&gc), cov: s_gg });
        }
        let dh = DVector::from_column_slice(x_h) - mu(&hc);
        let w = psd_solve(&s_hh, &s_gh.transpose())?.transpose();
        Ok(Conditional {
            mean: mu(&gc) + &w * dh,
            cov: symmetrize(s_gg - &w * s_gh.transpose()),
        })
    }

    /// Exact `x_G | x_H` from the closed-form tridiagonal AR(1) precision,
    /// an independent route to [`conditional`](Self::conditional).
    pub fn conditional_ar1_precision(&self, history: &[usize], x_h: &[f64]) -> Result<Conditional> {
        let rho = self
            .ar1
            .ok_or_else(|| Error::InvalidConfig("precision route needs an AR(1) spec".into()))?
            .rho;
        let (hc, gc) = self.split(history)?;
        let n = self.len();
        let (t_max, dim) = (self.frames, self.dim);
        let r2 = 1.0 - rho * rho;
        let q = DMatrix::from_fn(n, n, |i, j| {
            let (t, d) = (i / dim, i % dim);
            let (u, e) = (j / dim, j % dim);
            if d != e {
                return 0.0;
            }
            if t == u {
                if t_max == 1 {
                    1.0
                } else if t == 0 || t == t_max - 1 {
                    1.0 / r2
                } else {
                    (1.0 + rho * rho) / r2
                }
            } else if t.abs_diff(u) == 1 {
                -rho / r2
            } else {
                0.0
            }
        });
        let sub = |r: &[usize], c: &[usize]| DMatrix::from_fn(r.len(), c.len(), |i, j| q[(r[i], c[j])]);
        let q_gg = sub(&gc, &gc);
        let cov = psd_inverse(&q_gg)?;
        let mean = if hc.is_empty() {
            DVector::zeros(gc.len())
        } else {
            -(&cov * sub(&gc, &hc) * DVector::from_column_slice(x_h))
        };
        Ok(Conditional { mean, cov: symmetrize(cov) })
    }

    /// `grad log p_k(x_G^k | x_H)` for generation frames noised with a shared
    /// `(alpha, sigma)`: `-(alpha^2 C + sigma^2 I)^{-1} (x - alpha m)`.
    pub fn exact_conditional_score(
        &self,
        history: &[usize],
        x_h: &[f64],
        x_g_noised: &[f64],
        alpha: f64,
        sigma: f64,
    ) -> Result<DVector<f64>> {
        let cond = self.conditional(history, x_h)?;
        score_of_noised(&cond, x_g_noised, alpha, sigma)
    }

    fn split(&self, history: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut seen = vec![false; self.frames];
        for &t in history {
            if t >= self.frames || seen[t] {
                return Err(Error::InvalidTask(format!(
                    "history frame {t} invalid for T = {}",
                    self.frames
                )));
            }
            seen[t] = true;
        }
        let gen: Vec<usize> = (0..self.frames).filter(|&t| !seen[t]).collect();
        Ok((self.coords(history), self.coords(&gen)))
    }
}

/// Score of `alpha x + sigma eps` with `x ~ cond`.
pub fn score_of_noised(cond: &Conditional, x: &[f64], alpha: f64, sigma: f64) -> Result<DVector<f64>> {
    let n = cond.mean.len();
    if x.len() != n {
        return Err(Error::ShapeMismatch(format!("score input: expected {n}, got {}", x.len())));
    }
    let mut m = &cond.cov * (alpha * alpha);
    for i in 0..n {
        m[(i, i)] += sigma * sigma;
    }
    let r = DVector::from_column_slice(x) - &cond.mean * alpha;
    let sol = psd_solve(&m, &DMatrix::from_column_slice(n, 1, r.as_slice()))?;
    Ok(-sol.column(0).into_owned())
}

/// Lower-triangular `L` with `L L^T = m` (PSD; eigen route when singular).
pub fn cholesky_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = m.clone().cholesky() {
        return Ok(ch.l());
    }
    check_psd(m, "covariance")?;
    let eig = symmetrize(m.clone()).symmetric_eigen();
    let sqrt = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt))
}

pub fn gaussian_log_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let n = x.len();
    let ch = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("density of a singular Gaussian".into()))?;
    let r = x - mean;
    let sol = ch.solve(&r);
    let logdet: f64 = ch.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    Ok(-0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + r.dot(&sol)))
}

/// `y | x_sigma` in the additive-noise setting: `x ~ N(0, Σx)`,
/// `y | x ~ N(A x, Σy)`, `x_sigma = x + sigma z`. Returns
/// `(A S x_sigma, Σy + sigma^2 A S A^T)` with `S = Σx (Σx + sigma^2 I)^{-1}`.
pub fn lemma_conditional(
    a: &DMatrix<f64>,
    sigma_x: &DMatrix<f64>,
    sigma_y: &DMatrix<f64>,
    sigma: f64,
    x_sigma: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = sigma_x.nrows();
    if a.ncols() != d || x_sigma.len() != d || sigma_y.nrows() != a.nrows() {
        return Err(Error::ShapeMismatch("lemma operands disagree in shape".into()));
    }
    check_psd(sigma_x, "Σx")?;
    let s = shrinkage(sigma_x, sigma)?;
    let mean = a * &s * x_sigma;
    let cov = sigma_y + a * &s * a.transpose() * (sigma * sigma);
    Ok((mean, symmetrize(cov)))
}

/// `S(sigma) = Σx (Σx + sigma^2 I)^{-1}`.
pub fn shrinkage(sigma_x: &DMatrix<f64>, sigma: f64) -> Result<DMatrix<f64>> {
    let d = sigma_x.nrows();
    if sigma == 0.0 {
        return Ok(DMatrix::identity(d, d));
    }
    let m = sigma_x + DMatrix::identity(d, d) * (sigma * sigma);
    // Σx and m commute, so S = m^{-1} Σx as well; solve is symmetric-safe.
    Ok(psd_solve(&m, sigma_x)?.transpose())
}
