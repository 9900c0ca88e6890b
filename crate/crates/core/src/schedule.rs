//! Variance-preserving noise schedules over continuous noise levels.
//!
//! A noise level `k` runs from 0 (clean) to 1 (fully masked). A schedule
//! maps it to the signal and noise coefficients `(alpha_k, sigma_k)` with
//! `alpha_k^2 + sigma_k^2 = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A validated noise level in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct NoiseLevel<S>(S);

impl<S: Scalar> NoiseLevel<S> {
    pub fn new(k: S) -> Result<Self> {
        if !(k >= S::zero() && k <= S::one()) {
            return Err(Error::NoiseLevelOutOfRange(k.f64()));
        }
        Ok(Self(k))
    }

    pub fn clean() -> Self {
        Self(S::zero())
    }

    pub fn masked() -> Self {
        Self(S::one())
    }

    /// Level `n / steps` of a discrete grid.
    pub fn grid(n: usize, steps: usize) -> Self {
        debug_assert!(n <= steps && steps > 0);
        Self(S::of(n as f64) / S::of(steps as f64))
    }

    pub fn get(self) -> S {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleFamily {
    Cosine,
    ShiftedCosine,
}

/// Cosine schedule, optionally with its SNR scaled by `shift^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule<S> {
    family: ScheduleFamily,
    shift: S,
}

impl<S: Scalar> NoiseSchedule<S> {
    pub fn cosine() -> Self {
        Self {
            family: ScheduleFamily::Cosine,
            shift: S::one(),
        }
    }

    pub fn shifted_cosine(shift: S) -> Result<Self> {
        if !(shift > S::zero()) || !shift.is_finite() {
            return Err(Error::InvalidSchedule(format!(
                "shift must be positive, got {shift}"
            )));
        }
        Ok(Self {
            family: ScheduleFamily::ShiftedCosine,
            shift,
        })
    }

    pub fn from_family(family: ScheduleFamily, shift: f64) -> Result<Self> {
        match family {
            ScheduleFamily::Cosine => Ok(Self::cosine()),
            ScheduleFamily::ShiftedCosine => Self::shifted_cosine(S::of(shift)),
        }
    }

    pub fn family(&self) -> ScheduleFamily {
        self.family
    }

    pub fn shift(&self) -> S {
        self.shift
    }

    /// `(alpha_k, sigma_k)`. Endpoints are exact: `(1, 0)` at `k = 0` and
    /// `(0, 1)` at `k = 1`.
    pub fn alpha_sigma(&self, k: NoiseLevel<S>) -> (S, S) {
        self.alpha_sigma_raw(k.get())
    }

    /// Same as [`alpha_sigma`](Self::alpha_sigma) for a level already known to
    /// lie in `[0, 1]`.
    pub fn alpha_sigma_raw(&self, k: S) -> (S, S) {
        if k <= S::zero() {
            return (S::one(), S::zero());
        }
        if k >= S::one() {
            return (S::zero(), S::one());
        }
        let angle = k * S::FRAC_PI_2();
        let (c, s) = (angle.cos(), angle.sin());
        match self.family {
            ScheduleFamily::Cosine => (c, s),
            ScheduleFamily::ShiftedCosine => {
                // SNR = shift^2 * cot^2, renormalized to alpha^2 + sigma^2 = 1
                let sc = self.shift * c;
                let norm = (sc * sc + s * s).sqrt();
                (sc / norm, s / norm)
            }
        }
    }

    /// Signal-to-noise ratio `alpha^2 / sigma^2` (infinite at `k = 0`).
    pub fn snr(&self, k: S) -> S {
        let (a, s) = self.alpha_sigma_raw(k);
        if s == S::zero() {
            S::infinity()
        } else {
            (a * a) / (s * s)
        }
    }

    pub fn log_snr(&self, k: S) -> S {
        let (a, s) = self.alpha_sigma_raw(k);
        if s == S::zero() {
            S::infinity()
        } else if a == S::zero() {
            S::neg_infinity()
        } else {
            S::of(2.0) * (a.ln() - s.ln())
        }
    }

    /// Discrete view with `steps` grid points.
    pub fn grid(&self, steps: usize) -> Result<DiscreteNoiseGrid> {
        DiscreteNoiseGrid::from_schedule(self, steps)
    }
}

impl<S: Scalar> Default for NoiseSchedule<S> {
    fn default() -> Self {
        Self::cosine()
    }
}

/// Discrete-time view of a schedule on the levels `{n / N}`.
///
/// `alpha_bar[n] = alpha(n/N)^2` and `beta[n] = 1 - alpha_bar[n] / alpha_bar[n-1]`
/// (index 0 of `beta` is unused and stored as 0).
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteNoiseGrid {
    steps: usize,
    alpha_bar: Vec<f64>,
    beta: Vec<f64>,
}

impl DiscreteNoiseGrid {
    pub fn from_schedule<S: Scalar>(schedule: &NoiseSchedule<S>, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("grid needs at least one step".into()));
        }
        let alpha_bar: Vec<f64> = (0..=steps)
            .map(|n| {
                let (a, _) = schedule.alpha_sigma(NoiseLevel::grid(n, steps));
                let a = a.f64();
                a * a
            })
            .collect();
        let mut beta = vec![0.0; steps + 1];
        for n in 1..=steps {
            beta[n] = 1.0 - alpha_bar[n] / alpha_bar[n - 1];
        }
        for n in 1..=steps {
            if !(alpha_bar[n] < alpha_bar[n - 1]) {
                return Err(Error::InvalidSchedule(format!(
                    "alpha_bar not strictly decreasing at step {n}"
                )));
            }
        }
        Ok(Self {
            steps,
            alpha_bar,
            beta,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha_bar(&self, n: usize) -> f64 {
        self.alpha_bar[n]
    }

    pub fn beta(&self, n: usize) -> f64 {
        self.beta[n]
    }

    /// Per-step retention `1 - beta_n`.
    pub fn step_alpha(&self, n: usize) -> f64 {
        1.0 - self.beta[n]
    }

    /// Variance of the forward posterior `q(x^{n-1} | x^n, x^0)`.
    pub fn posterior_variance(&self, n: usize) -> f64 {
        self.beta[n] * (1.0 - self.alpha_bar[n - 1]) / (1.0 - self.alpha_bar[n])
    }

    /// Posterior mean coefficients `(c_x, c_0)` of
    /// `q(x^{n-1} | x^n, x^0) = N(c_x x^n + c_0 x^0, posterior_variance)`.
    pub fn posterior_coefficients(&self, n: usize) -> (f64, f64) {
        let a = self.step_alpha(n);
        let ab = self.alpha_bar[n];
        let ab_prev = self.alpha_bar[n - 1];
        let cx = a.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let c0 = ab_prev.sqrt() * self.beta[n] / (1.0 - ab);
        (cx, c0)
    }

    /// Reverse-kernel variance of the discrete-time model: the forward
    /// posterior variance, except at `n = 1` where it is degenerate and
    /// `beta_1` is used instead.
    pub fn reverse_variance(&self, n: usize) -> f64 {
        if n == 1 {
            self.beta[1]
        } else {
            self.posterior_variance(n)
        }
    }

    /// Weight on `||x0_hat - x0||^2` in the x0-prediction form of the
    /// discrete ELBO: `(1 - a_n)^2 alpha_bar_{n-1} / (2 s_n^2 (1 - alpha_bar_n)^2)`
    /// with `s_n^2` the reverse-kernel variance.
    pub fn elbo_weight(&self, n: usize) -> f64 {
        let one_minus_a = self.beta[n];
        let ab = self.alpha_bar[n];
        one_minus_a * one_minus_a * self.alpha_bar[n - 1]
            / (2.0 * self.reverse_variance(n) * (1.0 - ab) * (1.0 - ab))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_construction_rejects_out_of_range() {
        assert!(NoiseLevel::new(-0.01f64).is_err());
        assert!(NoiseLevel::new(1.01f64).is_err());
        assert!(NoiseLevel::new(f64::NAN).is_err());
        assert!(NoiseLevel::new(0.0f64).is_ok());
        assert!(NoiseLevel::new(1.0f64).is_ok());
    }

    #[test]
    fn cosine_endpoints() {
        let s = NoiseSchedule::<f64>::cosine();
        assert_eq!(s.alpha_sigma(NoiseLevel::clean()), (1.0, 0.0));
        assert_eq!(s.alpha_sigma(NoiseLevel::masked()), (0.0, 1.0));
    }

    #[test]
    fn shifted_cosine_at_half_matches_hand_arithmetic() {
        // cosine SNR at k=1/2 is cot^2(pi/4) = 1; scaled by 0.125^2
        let snr = 1.0f64 * 0.125 * 0.125;
        let alpha_want = (snr / (1.0 + snr)).sqrt();
        let sigma_want = (1.0 / (1.0 + snr)).sqrt();
        let s = NoiseSchedule::shifted_cosine(0.125f64).unwrap();
        let (a, sg) = s.alpha_sigma(NoiseLevel::new(0.5).unwrap());
        assert!((a - alpha_want).abs() < 1e-14);
        assert!((sg - sigma_want).abs() < 1e-14);
    }

    #[test]
    fn variance_preserving_and_monotone_on_dense_grid() {
        for sched in [
            NoiseSchedule::<f64>::cosine(),
            NoiseSchedule::shifted_cosine(0.125).unwrap(),
            NoiseSchedule::shifted_cosine(3.0).unwrap(),
        ] {
            let mut prev = f64::INFINITY;
            for i in 0..=1000 {
                let k = i as f64 / 1000.0;
                let (a, s) = sched.alpha_sigma_raw(k);
                assert!((a * a + s * s - 1.0).abs() < 1e-10);
                assert!(a <= prev);
                prev = a;
            }
        }
    }

    #[test]
    fn shift_scales_snr_by_shift_squared() {
        let base = NoiseSchedule::<f64>::cosine();
        let shifted = NoiseSchedule::shifted_cosine(0.125).unwrap();
        for i in 1..1000 {
            let k = i as f64 / 1000.0;
            let ratio = shifted.snr(k) / base.snr(k);
            assert!((ratio / 0.015625 - 1.0).abs() < 1e-12, "k={k} ratio={ratio}");
        }
    }

    #[test]
    fn f32_schedule_is_variance_preserving() {
        let s = NoiseSchedule::<f32>::shifted_cosine(0.125).unwrap();
        for i in 0..=100 {
            let (a, sg) = s.alpha_sigma_raw(i as f32 / 100.0);
            assert!((a * a + sg * sg - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn grid_is_consistent_with_continuous_schedule() {
        let s = NoiseSchedule::<f64>::cosine();
        let g = s.grid(8).unwrap();
        assert_eq!(g.alpha_bar(0), 1.0);
        for n in 1..=8 {
            let (a, _) = s.alpha_sigma_raw(n as f64 / 8.0);
            assert!((g.alpha_bar(n) - a * a).abs() < 1e-15);
            assert!(g.alpha_bar(n) < g.alpha_bar(n - 1));
            let prod: f64 = (1..=n).map(|j| 1.0 - g.beta(j)).product();
            assert!((prod - g.alpha_bar(n)).abs() < 1e-12);
        }
    }
}
