//! Per-noise-level loss weights for the epsilon-space objective.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LossWeighting {
    Uniform,
    /// `min(SNR, gamma) / SNR`
    MinSnr {
        #[serde(default = "default_gamma")]
        gamma: f64,
    },
    /// `sigmoid(bias - log SNR)`
    Sigmoid {
        #[serde(default)]
        bias: f64,
    },
}

fn default_gamma() -> f64 {
    5.0
}

impl Default for LossWeighting {
    fn default() -> Self {
        LossWeighting::Uniform
    }
}

impl LossWeighting {
    pub fn min_snr() -> Self {
        LossWeighting::MinSnr { gamma: default_gamma() }
    }

    pub fn sigmoid() -> Self {
        LossWeighting::Sigmoid { bias: 0.0 }
    }

    pub fn weight<S: Scalar>(&self, schedule: &NoiseSchedule<S>, k: S) -> S {
        match *self {
            LossWeighting::Uniform => S::one(),
            LossWeighting::MinSnr { gamma } => {
                let snr = schedule.snr(k);
                let gamma = S::of(gamma);
                if snr <= gamma {
                    S::one()
                } else {
                    // infinite SNR at the clean endpoint gives weight 0
                    gamma / snr
                }
            }
            LossWeighting::Sigmoid { bias } => {
                let z = S::of(bias) - schedule.log_snr(k);
                if z >= S::zero() {
                    S::one() / (S::one() + (-z).exp())
                } else {
                    let e = z.exp();
                    e / (S::one() + e)
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_is_one() {
        let s = NoiseSchedule::<f64>::cosine();
        for k in [0.0, 0.3, 1.0] {
            assert_eq!(LossWeighting::Uniform.weight(&s, k), 1.0);
        }
    }

    #[test]
    fn min_snr_at_unit_snr() {
        // cosine SNR is 1 at k = 1/2: min(1, 5) / 1 = 1
        let s = NoiseSchedule::<f64>::cosine();
        let w = LossWeighting::min_snr().weight(&s, 0.5);
        assert!((w - 1.0).abs() < 1e-12);
        // SNR = 9 above gamma: 5/9
        let k = (1.0f64 / 3.0).atan() / std::f64::consts::FRAC_PI_2;
        assert!((s.snr(k) - 9.0).abs() < 1e-9);
        assert!((LossWeighting::min_snr().weight(&s, k) - 5.0 / 9.0).abs() < 1e-9);
    }

    #[test]
    fn sigmoid_at_zero_log_snr() {
        let s = NoiseSchedule::<f64>::cosine();
        let w = LossWeighting::sigmoid().weight(&s, 0.5);
        assert!((w - 0.5).abs() < 1e-12);
    }

    #[test]
    fn weights_are_finite_and_nonnegative_on_grid() {
        let schedules = [
            NoiseSchedule::<f64>::cosine(),
            NoiseSchedule::shifted_cosine(0.125).unwrap(),
        ];
        let weightings = [
            LossWeighting::Uniform,
            LossWeighting::min_snr(),
            LossWeighting::sigmoid(),
            LossWeighting::Sigmoid { bias: -3.0 },
        ];
        for s in &schedules {
            for w in &weightings {
                for i in 0..=1000 {
                    let v = w.weight(s, i as f64 / 1000.0);
                    assert!(v.is_finite() && v >= 0.0, "{w:?} at {i}: {v}");
                }
            }
        }
    }
}
