//! Reverse-process steppers on the level grid `{0, 1/N, ..., 1}`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::{NoiseLevel, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SamplerKind {
    /// Ancestral sampling with the posterior mean and posterior variance.
    Ddpm,
    /// `eta = 0` is deterministic; `eta = 1` matches the DDPM variance.
    Ddim {
        #[serde(default)]
        eta: f64,
    },
}

impl Default for SamplerKind {
    fn default() -> Self {
        SamplerKind::Ddim { eta: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default)]
    pub kind: SamplerKind,
    #[serde(default = "SamplerConfig::default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Model inputs per denoiser call; larger step batches are chunked.
    #[serde(default = "SamplerConfig::default_max_batch")]
    pub max_batch: usize,
}

impl SamplerConfig {
    fn default_steps() -> usize {
        50
    }
    fn default_max_batch() -> usize {
        4096
    }

    pub fn ddim(steps: usize) -> Self {
        Self {
            kind: SamplerKind::Ddim { eta: 0.0 },
            steps,
            seed: 0,
            max_batch: Self::default_max_batch(),
        }
    }

    pub fn ddpm(steps: usize) -> Self {
        Self {
            kind: SamplerKind::Ddpm,
            ..Self::ddim(steps)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.max_batch == 0 {
            return Err(Error::InvalidConfig("sampler steps and max_batch must be positive".into()));
        }
        if let SamplerKind::Ddim { eta } = self.kind {
            if !(eta >= 0.0 && eta.is_finite()) {
                return Err(Error::InvalidConfig(format!("DDIM eta must be >= 0, got {eta}")));
            }
        }
        Ok(())
    }
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self::ddim(Self::default_steps())
    }
}

/// One step `n/N -> (n-1)/N` given the current `x` and an x0-prediction.
pub fn reverse_step<S: Scalar, R: Rng + ?Sized>(
    kind: SamplerKind,
    x: &[S],
    x0_hat: &[S],
    n: usize,
    steps: usize,
    schedule: &NoiseSchedule<S>,
    rng: &mut R,
) -> Result<Vec<S>> {
    if n == 0 || n > steps {
        return Err(Error::InvalidConfig(format!("step index {n} outside 1..={steps}")));
    }
    if x.len() != x0_hat.len() {
        return Err(Error::ShapeMismatch(format!("x has {} entries, x0_hat {}", x.len(), x0_hat.len())));
    }
    if let Some(i) = x.iter().chain(x0_hat).position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("reverse step n={n}/{steps}: entry {}", i % x.len().max(1))));
    }
    let (a_n, s_n) = schedule.alpha_sigma(NoiseLevel::grid(n, steps));
    let (a_p, s_p) = schedule.alpha_sigma(NoiseLevel::grid(n - 1, steps));
    let out: Vec<S> = match kind {
        SamplerKind::Ddim { eta } => {
            // c^2 = eta^2 (s_p^2 / s_n^2) (1 - a_n^2 / a_p^2), capped at s_p^2
            let c = if eta == 0.0 || a_p == S::zero() {
                S::zero()
            } else {
                let r = a_n / a_p;
                let c2 = S::of(eta * eta) * (s_p * s_p / (s_n * s_n)) * (S::one() - r * r);
                c2.min(s_p * s_p).max(S::zero()).sqrt()
            };
            let dir = (s_p * s_p - c * c).max(S::zero()).sqrt();
            x.iter()
                .zip(x0_hat)
                .map(|(&xv, &x0)| {
                    let eps = (xv - a_n * x0) / s_n;
                    let mut v = a_p * x0 + dir * eps;
                    if c > S::zero() {
                        v += c * S::sample_normal(rng);
                    }
                    v
                })
                .collect()
        }
        SamplerKind::Ddpm => {
            // posterior q(x_{n-1} | x_n, x0) with abar = alpha^2
            let (ab_n, ab_p) = (a_n * a_n, a_p * a_p);
            let one = S::one();
            let beta = if ab_p == S::zero() { one } else { one - ab_n / ab_p };
            let c0 = a_p * beta / (one - ab_n);
            let cx = if ab_p == S::zero() { S::zero() } else { (a_n / a_p) * (one - ab_p) / (one - ab_n) };
            let var = ((one - ab_p) * beta / (one - ab_n)).max(S::zero());
            let sd = var.sqrt();
            x.iter()
                .zip(x0_hat)
                .map(|(&xv, &x0)| {
                    let mut v = cx * xv + c0 * x0;
                    if sd > S::zero() {
                        v += sd * S::sample_normal(rng);
                    }
                    v
                })
                .collect()
        }
    };
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("reverse step n={n}/{steps} produced a non-finite value")));
    }
    Ok(out)
}
