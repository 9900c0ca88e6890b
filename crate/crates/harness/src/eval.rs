//! Conditional-distribution error of a sampler + model against a Gaussian oracle.

use histdiff_core::model::Denoiser;
use histdiff_core::oracle::gaussian::cholesky_factor;
use histdiff_core::oracle::GaussianSeqSpec;
use histdiff_core::sampler::sample;
use histdiff_core::{GuidanceScheme, NoiseSchedule, SamplerConfig, Scalar, TaskSpec};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::metrics::{cov_error, energy_distance, mean_cov, mean_error, sample_variance};
use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Histories drawn from the data law per task.
    #[serde(default = "EvalConfig::default_histories")]
    pub num_histories: usize,
    /// Samples drawn per history (model and oracle alike).
    #[serde(default = "EvalConfig::default_samples")]
    pub samples_per_history: usize,
    #[serde(default)]
    pub seed: u64,
}

impl EvalConfig {
    fn default_histories() -> usize {
        8
    }
    fn default_samples() -> usize {
        256
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            num_histories: Self::default_histories(),
            samples_per_history: Self::default_samples(),
            seed: 0,
        }
    }
}

/// History-averaged statistics, each per history before averaging.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ConditionalStats {
    pub mean_error: f64,
    pub cov_error: f64,
    pub energy_distance: f64,
    pub sample_variance: f64,
}

/// Draws from `N(mean, cov)`.
pub fn gaussian_draws<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    cov: &nalgebra::DMatrix<f64>,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>, HarnessError> {
    let l = cholesky_factor(cov)?;
    let d = mean.len();
    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        out.extend((mean + &l * z).iter());
    }
    Ok(out)
}

/// Same seed, same histories and same sampler noise for every scheme, so
/// differences between schemes are not sampling noise.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_conditional<S: Scalar, M: Denoiser<S> + ?Sized>(
    model: &M,
    spec: &GaussianSeqSpec,
    history: &[usize],
    scheme: &GuidanceScheme,
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule<S>,
    cfg: &EvalConfig,
) -> Result<ConditionalStats, HarnessError> {
    if cfg.num_histories == 0 || cfg.samples_per_history < 2 {
        return Err(HarnessError::Config("evaluation needs >= 1 history and >= 2 samples".into()));
    }
    let (t, d) = (spec.frames(), spec.dim());
    let mut hist_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut acc = ConditionalStats::default();
    for h in 0..cfg.num_histories {
        let x = &spec.sample(&mut hist_rng, 1)?[0];
        let x_h: Vec<f64> = history.iter().flat_map(|&f| x.rows(f * d, d).iter().copied().collect::<Vec<_>>()).collect();
        let cond = spec.conditional(history, &x_h)?;
        let g = cond.mean.len();
        let mut oracle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1_000_003 * (h as u64 + 1)));
        let exact = gaussian_draws(&cond.mean, &cond.cov, cfg.samples_per_history, &mut oracle_rng)?;

        let task = TaskSpec::new(t, d, history.to_vec(), x_h.iter().map(|&v| S::of(v)).collect())?;
        let mut model_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(7_919 * (h as u64 + 1)));
        let out = sample(&task, scheme, model, sampler, schedule, cfg.samples_per_history, &mut model_rng)?;
        let got: Vec<f64> = out.data.iter().map(|v| v.f64()).collect();
        if got.iter().any(|v| !v.is_finite()) {
            return Err(HarnessError::Metric("model produced non-finite samples".into()));
        }
        let (m, c) = mean_cov(&got, g);
        acc.mean_error += mean_error(&m, &cond.mean);
        acc.cov_error += cov_error(&c, &cond.cov);
        acc.energy_distance += energy_distance(&got, &exact, g);
        acc.sample_variance += sample_variance(&got, g);
    }
    let n = cfg.num_histories as f64;
    Ok(ConditionalStats {
        mean_error: acc.mean_error / n,
        cov_error: acc.cov_error / n,
        energy_distance: acc.energy_distance / n,
        sample_variance: acc.sample_variance / n,
    })
}
