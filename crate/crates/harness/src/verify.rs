//! Oracle self-checks with Monte-Carlo and closed-form references.

use std::io::Write;

use histdiff_core::oracle::fourier::{dft_matrix, fourier_conditional};
use histdiff_core::oracle::gaussian::shrinkage;
use histdiff_core::oracle::{
    elbo, fourier_attenuation, partition_example_mse, ElboReport, FourierSpec, GaussianSeqSpec, PathSpec,
    ReverseVariance, ScoreEnsembleSpec,
};
use histdiff_core::NoiseSchedule;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::HarnessError;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }
}

fn random_pd<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    &a * a.transpose() / n as f64 + DMatrix::identity(n, n) * 0.05
}

/// A random joint Gaussian over `T ∈ 1..=3` frames of `D ∈ 1..=2`.
pub fn random_spec<R: Rng>(rng: &mut R) -> Result<GaussianSeqSpec, HarnessError> {
    let frames = rng.random_range(1..=3);
    let dim = rng.random_range(1..=2);
    let n = frames * dim;
    let mean = DVector::from_fn(n, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));
    Ok(GaussianSeqSpec::joint(frames, dim, mean, random_pd(rng, n))?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElboSuite {
    pub cases: usize,
    pub violations: usize,
    /// Largest `bound - log_likelihood` seen.
    pub worst_gap: f64,
}

/// `specs` random specs × {autoregressive, full-sequence, `random_paths`
/// random monotone} paths, with the exact posterior denoiser.
pub fn elbo_suite(specs: usize, random_paths: usize, levels: usize, seed: u64) -> Result<ElboSuite, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = NoiseSchedule::<f64>::cosine().grid(levels)?;
    let mut out = ElboSuite {
        cases: 0,
        violations: 0,
        worst_gap: f64::NEG_INFINITY,
    };
    for _ in 0..specs {
        let spec = random_spec(&mut rng)?;
        let x0: Vec<f64> = spec.sample(&mut rng, 1)?[0].iter().copied().collect();
        let t = spec.frames();
        let mut paths = vec![PathSpec::autoregressive(t, levels)?, PathSpec::full_sequence(t, levels)?];
        for _ in 0..random_paths {
            paths.push(PathSpec::random_monotone(t, levels, &mut rng)?);
        }
        for path in &paths {
            let r = elbo(&spec, &x0, path, &grid, ReverseVariance::Posterior)?;
            let gap = r.bound - r.log_likelihood;
            out.cases += 1;
            out.worst_gap = out.worst_gap.max(gap);
            if !(gap <= 1e-6) {
                out.violations += 1;
            }
        }
    }
    Ok(out)
}

/// Per-step term table of one ELBO evaluation: `step,term,coefficient`.
pub fn write_elbo_terms<W: Write>(report: &ElboReport, w: W) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["step", "term", "coefficient"])?;
    for (j, t) in report.step_terms.iter().enumerate() {
        let c = report.coefficients.get(j).map(|c| c.to_string()).unwrap_or_default();
        out.write_record([j.to_string(), t.to_string(), c])?;
    }
    out.write_record(["prior".to_string(), report.prior_term.to_string(), String::new()])?;
    out.write_record(["bound".to_string(), report.bound.to_string(), String::new()])?;
    out.write_record(["log_likelihood".to_string(), report.log_likelihood.to_string(), String::new()])?;
    out.flush()?;
    Ok(())
}

/// Largest `|Ŝ_ii - 1/(1 + dσ²iᵅ/C)|` where `Ŝ = F S(σ) F⁻¹` is built from
/// the signal-domain shrinkage, over a few spectra and noise levels.
pub fn attenuation_closed_form_error() -> Result<f64, HarnessError> {
    let mut worst = 0.0f64;
    for (d, c, alpha) in [(8, 1.0, 2.0), (6, 2.5, 0.5), (10, 0.7, 1.3)] {
        let spec = FourierSpec::new(d, c, alpha)?;
        let f = dft_matrix(d);
        let finv = f.clone().try_inverse().ok_or_else(|| HarnessError::Metric("DFT not invertible".into()))?;
        for sigma in [0.0, 0.2, 0.5, 1.7] {
            let s_hat = &f * shrinkage(&spec.signal_covariance(), sigma)? * &finv;
            for (i, v) in fourier_attenuation(&spec, sigma).iter().enumerate() {
                let want = 1.0 / (1.0 + d as f64 * sigma * sigma * ((i + 1) as f64).powf(alpha) / c);
                worst = worst.max((v - want).abs()).max((s_hat[(i, i)] - want).abs());
            }
        }
    }
    Ok(worst)
}

/// True when entries are non-increasing in frequency and in σ.
pub fn attenuation_monotone() -> Result<bool, HarnessError> {
    let sigmas = [0.0, 0.1, 0.3, 0.7, 1.5, 4.0];
    for (c, alpha) in [(1.0, 0.0), (1.0, 1.0), (3.0, 2.5)] {
        let spec = FourierSpec::new(12, c, alpha)?;
        let rows: Vec<Vec<f64>> = sigmas.iter().map(|&s| fourier_attenuation(&spec, s)).collect();
        for (k, r) in rows.iter().enumerate() {
            if r.windows(2).any(|w| w[1] > w[0]) || r.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
                return Ok(false);
            }
            if k > 0 && r.iter().zip(&rows[k - 1]).any(|(a, b)| a > b) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FourierMc {
    /// `|MC − closed form| / SE` per frequency bin.
    pub z: Vec<f64>,
}

/// Monte-Carlo check of the frequency-domain conditional mean: draws
/// `(x, y = A x + e, x_σ = x + σ z)`, regresses `F y` on `F x_σ` and compares
/// the fitted mean at a probe point with `Â Ŝ(σ) F(x_σ)`.
pub fn fourier_monte_carlo(d: usize, draws: usize, seed: u64) -> Result<FourierMc, HarnessError> {
    let spec = FourierSpec::new(d, 2.0, 1.0)?;
    let sx = spec.signal_covariance();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(d, d, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));
    let y_var = 0.1f64;
    let sy = DMatrix::identity(d, d) * y_var;
    let sigma = 0.4;
    let lx = sx
        .clone()
        .cholesky()
        .ok_or_else(|| HarnessError::Metric("signal covariance is not PD".into()))?
        .l();
    let fd = dft_matrix(d);
    let mut xtx = DMatrix::<f64>::zeros(d, d);
    let mut xty = DMatrix::<f64>::zeros(d, d);
    let mut yty = DMatrix::<f64>::zeros(d, d);
    for _ in 0..draws {
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = &lx * z;
        let e = DVector::from_fn(d, |_, _| y_var.sqrt() * rng.sample::<f64, _>(StandardNormal));
        let n = DVector::from_fn(d, |_, _| sigma * rng.sample::<f64, _>(StandardNormal));
        let xh = &fd * (&x + n);
        let yh = &fd * (&a * &x + e);
        xtx += &xh * xh.transpose();
        xty += &xh * yh.transpose();
        yty += &yh * yh.transpose();
    }
    let inv = xtx
        .clone()
        .try_inverse()
        .ok_or_else(|| HarnessError::Metric("design matrix is singular".into()))?;
    let coef = &inv * &xty;
    // residual sums of squares from the sufficient statistics
    let rss = &yty - xty.transpose() * &coef;
    let dof = (draws - d) as f64;
    let probe = DVector::from_fn(d, |i, _| (0.9 * i as f64).cos());
    let (want, _) = fourier_conditional(&a, &sx, &sy, sigma, &probe)?;
    let ph = &fd * &probe;
    let got = coef.transpose() * &ph;
    let lev = (ph.transpose() * &inv * &ph)[0];
    let z = (0..d)
        .map(|i| (got[i] - want[i]).abs() / (rss[(i, i)] / dof * lev).sqrt())
        .collect();
    Ok(FourierMc { z })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionCheck {
    pub n: usize,
    pub individual_mse: f64,
    pub averaged_mse: f64,
    pub individual_z: f64,
    pub averaged_z: f64,
}

/// Distance of the measured MSEs from `1/n` and `1/n²` in standard errors.
/// The averaged estimator is constant (`1/n` on every draw), so its error
/// is compared with a numerical floor instead of a zero standard error.
pub fn partition_check(n: usize, draws: usize, seed: u64) -> Result<PartitionCheck, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = partition_example_mse(n, draws, &mut rng)?;
    let nf = n as f64;
    let z = |got: f64, want: f64, se: f64| {
        let diff = (got - want).abs();
        if diff <= 1e-12 {
            0.0
        } else if se > 0.0 {
            diff / se
        } else {
            f64::INFINITY
        }
    };
    Ok(PartitionCheck {
        n,
        individual_mse: r.individual_mse,
        averaged_mse: r.averaged_mse,
        individual_z: z(r.individual_mse, 1.0 / nf, r.individual_se),
        averaged_z: z(r.averaged_mse, 1.0 / (nf * nf), r.averaged_se),
    })
}

/// Fraction of random PD error covariances for which the MLE combination's
/// error trace exceeds the best single estimator's.
pub fn mle_dominance_failures(draws: usize, seed: u64) -> Result<usize, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fails = 0;
    for _ in 0..draws {
        let n = rng.random_range(1..=4);
        let d = rng.random_range(1..=3);
        let spec = ScoreEnsembleSpec::new(n, d, random_pd(&mut rng, n * d))?;
        let mle = spec.mle_error_cov()?.trace();
        let best = (0..n).map(|i| spec.block(i).trace()).fold(f64::INFINITY, f64::min);
        if mle > best + 1e-10 {
            fails += 1;
        }
    }
    Ok(fails)
}

/// Every oracle check with its default size.
pub fn oracle_verify(seed: u64) -> Result<Vec<Check>, HarnessError> {
    let mut out = Vec::new();
    let e = elbo_suite(100, 20, 4, seed)?;
    out.push(Check::new(
        "elbo-bound",
        e.violations == 0,
        format!("{} cases, worst bound - ln p = {:.3e}", e.cases, e.worst_gap),
    ));
    let err = attenuation_closed_form_error()?;
    out.push(Check::new("attenuation-closed-form", err < 1e-10, format!("max error {err:.2e}")));
    out.push(Check::new("attenuation-monotone", attenuation_monotone()?, String::new()));
    let f = fourier_monte_carlo(8, 1_000_000, seed)?;
    let zmax = f.z.iter().cloned().fold(0.0, f64::max);
    out.push(Check::new("fourier-monte-carlo", zmax < 3.0, format!("max |z| = {zmax:.2} over {} bins", f.z.len())));
    for n in [2, 4, 10] {
        let p = partition_check(n, 1_000_000, seed + n as u64)?;
        out.push(Check::new(
            &format!("partition-n{n}"),
            p.individual_z < 3.0 && p.averaged_z < 3.0,
            format!(
                "individual {:.5} (z {:.2}), averaged {:.6} (z {:.2})",
                p.individual_mse, p.individual_z, p.averaged_mse, p.averaged_z
            ),
        ));
    }
    let fails = mle_dominance_failures(1000, seed)?;
    out.push(Check::new("mle-dominance", fails == 0, format!("{fails} of 1000 draws failed")));
    Ok(out)
}
