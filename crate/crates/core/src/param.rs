//! Output parameterizations and the forward (noising) process.
//!
//! All four kinds are affine re-bases of one another given the noised input
//! `x_k = alpha x0 + sigma eps`:
//! `v = alpha eps - sigma x0` and `score = -eps / sigma`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::{NoiseLevel, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parameterization {
    Epsilon,
    X0,
    V,
    Score,
}

impl Parameterization {
    pub const ALL: [Parameterization; 4] = [Self::Epsilon, Self::X0, Self::V, Self::Score];

    pub fn name(self) -> &'static str {
        match self {
            Self::Epsilon => "epsilon",
            Self::X0 => "x0",
            Self::V => "v",
            Self::Score => "score",
        }
    }

    /// Coefficient `d eps_hat / d prediction` at fixed `x_k`.
    pub fn epsilon_slope<S: Scalar>(self, alpha: S, sigma: S) -> S {
        match self {
            Self::Epsilon => S::one(),
            Self::X0 => -alpha / sigma,
            Self::V => alpha,
            Self::Score => -sigma,
        }
    }

    /// Coefficient `d x0_hat / d prediction` at fixed `x_k`.
    pub fn x0_slope<S: Scalar>(self, alpha: S, sigma: S) -> S {
        match self {
            Self::Epsilon => -sigma / alpha,
            Self::X0 => S::one(),
            Self::V => -sigma,
            Self::Score => sigma * sigma / alpha,
        }
    }
}

fn singular(from: Parameterization, to: Parameterization, alpha: f64, sigma: f64) -> Error {
    Error::SingularConversion {
        from: from.name(),
        to: to.name(),
        alpha,
        sigma,
    }
}

/// Converts one value between parameterizations with explicit coefficients.
pub fn convert_scalar<S: Scalar>(
    value: S,
    from: Parameterization,
    to: Parameterization,
    x_k: S,
    alpha: S,
    sigma: S,
) -> Result<S> {
    use Parameterization::*;
    if from == to {
        return Ok(value);
    }
    let zero = S::zero();
    let err = || singular(from, to, alpha.f64(), sigma.f64());
    // recover (x0, eps) lazily; each may be singular on its own
    let x0 = |v: S| -> Result<S> {
        match from {
            X0 => Ok(v),
            V => Ok(alpha * x_k - sigma * v),
            Epsilon => {
                if alpha == zero {
                    Err(err())
                } else {
                    Ok((x_k - sigma * v) / alpha)
                }
            }
            Score => {
                if alpha == zero || sigma == zero {
                    Err(err())
                } else {
                    Ok((x_k + sigma * sigma * v) / alpha)
                }
            }
        }
    };
    let eps = |v: S| -> Result<S> {
        match from {
            Epsilon => Ok(v),
            V => Ok(sigma * x_k + alpha * v),
            X0 => {
                if sigma == zero {
                    Err(err())
                } else {
                    Ok((x_k - alpha * v) / sigma)
                }
            }
            Score => {
                if sigma == zero {
                    Err(err())
                } else {
                    Ok(-sigma * v)
                }
            }
        }
    };
    match to {
        X0 => x0(value),
        Epsilon => eps(value),
        V => Ok(alpha * eps(value)? - sigma * x0(value)?),
        Score => {
            if sigma == zero {
                Err(err())
            } else {
                Ok(-eps(value)? / sigma)
            }
        }
    }
}

/// Elementwise conversion of a frame tensor at one noise level.
pub fn convert_param<S: Scalar>(
    value: &[S],
    from: Parameterization,
    to: Parameterization,
    x_k: &[S],
    k: NoiseLevel<S>,
    schedule: &NoiseSchedule<S>,
) -> Result<Vec<S>> {
    if value.len() != x_k.len() {
        return Err(Error::ShapeMismatch(format!(
            "value has {} entries, x_k has {}",
            value.len(),
            x_k.len()
        )));
    }
    let (alpha, sigma) = schedule.alpha_sigma(k);
    value
        .iter()
        .zip(x_k)
        .map(|(&v, &x)| convert_scalar(v, from, to, x, alpha, sigma))
        .collect()
}

/// `alpha_k x0 + sigma_k eps`.
pub fn forward_diffuse<S: Scalar>(
    x0: &[S],
    k: NoiseLevel<S>,
    eps: &[S],
    schedule: &NoiseSchedule<S>,
) -> Result<Vec<S>> {
    if x0.len() != eps.len() {
        return Err(Error::ShapeMismatch(format!(
            "x0 has {} entries, eps has {}",
            x0.len(),
            eps.len()
        )));
    }
    let (alpha, sigma) = schedule.alpha_sigma(k);
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(&x, &e)| alpha * x + sigma * e)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use Parameterization::*;

    #[test]
    fn forward_endpoints() {
        let s = NoiseSchedule::<f64>::cosine();
        let x0 = [0.3, -1.2, 2.0];
        let eps = [1.0, 0.5, -0.25];
        assert_eq!(forward_diffuse(&x0, NoiseLevel::clean(), &eps, &s).unwrap(), x0);
        assert_eq!(forward_diffuse(&x0, NoiseLevel::masked(), &eps, &s).unwrap(), eps);
        let k = NoiseLevel::new(0.5).unwrap();
        let (_, sigma) = s.alpha_sigma(k);
        let z = forward_diffuse(&[0.0; 3], k, &eps, &s).unwrap();
        for (zi, ei) in z.iter().zip(&eps) {
            assert_eq!(*zi, sigma * ei);
        }
        assert!(forward_diffuse(&x0, k, &eps[..2], &s).is_err());
    }

    #[test]
    fn forward_diffuse_moments() {
        let s = NoiseSchedule::<f64>::cosine();
        let k = NoiseLevel::new(0.3).unwrap();
        let (alpha, sigma) = s.alpha_sigma(k);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = [1.5];
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| forward_diffuse(&x0, k, &[f64::sample_normal(&mut rng)], &s).unwrap()[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = sigma / (n as f64).sqrt();
        assert!((mean - alpha * 1.5).abs() < 4.0 * se);
        // std of the sample std is about sigma / sqrt(2n)
        assert!((var.sqrt() - sigma).abs() < 4.0 * sigma / (2.0 * n as f64).sqrt());
    }

    #[test]
    fn epsilon_to_score_at_unit_sigma() {
        let s = NoiseSchedule::<f64>::cosine();
        let out = convert_param(&[0.7, -2.0], Epsilon, Score, &[0.1, 0.2], NoiseLevel::masked(), &s)
            .unwrap();
        assert_eq!(out, vec![-0.7, 2.0]);
    }

    #[test]
    fn x0_to_epsilon_at_clean_level_is_singular() {
        let s = NoiseSchedule::<f64>::cosine();
        let x = [0.4];
        let r = convert_param(&x, X0, Epsilon, &x, NoiseLevel::clean(), &s);
        assert!(matches!(r, Err(Error::SingularConversion { .. })));
    }

    #[test]
    fn epsilon_to_v_identity() {
        let h = 0.5f64.sqrt();
        // x0 = 0, eps = 1 -> x_k = sigma
        let v = convert_scalar(1.0, Epsilon, V, h, h, h).unwrap();
        assert!((v - h).abs() < 1e-15);
    }

    #[test]
    fn round_trip_identity() {
        let s = NoiseSchedule::<f64>::cosine();
        let k = NoiseLevel::new(0.37).unwrap();
        let (a, sg) = s.alpha_sigma(k);
        let (x0, eps) = (0.8, -1.3);
        let x = a * x0 + sg * eps;
        for from in Parameterization::ALL {
            for to in Parameterization::ALL {
                let start = convert_scalar(x0, X0, from, x, a, sg).unwrap();
                let there = convert_scalar(start, from, to, x, a, sg).unwrap();
                let back = convert_scalar(there, to, from, x, a, sg).unwrap();
                assert!((back - start).abs() < 1e-10, "{from:?}->{to:?}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn pairwise_conversions_compose_to_identity(
            x0 in -3.0f64..3.0,
            eps in -3.0f64..3.0,
            k in 0.02f64..0.98,
            from_i in 0usize..4,
            to_i in 0usize..4,
        ) {
            let s = NoiseSchedule::<f64>::cosine();
            let (a, sg) = s.alpha_sigma_raw(k);
            let x = a * x0 + sg * eps;
            let from = Parameterization::ALL[from_i];
            let to = Parameterization::ALL[to_i];
            let start = convert_scalar(x0, X0, from, x, a, sg).unwrap();
            let there = convert_scalar(start, from, to, x, a, sg).unwrap();
            let back = convert_scalar(there, to, from, x, a, sg).unwrap();
            prop_assert!((back - start).abs() <= 1e-9 * (1.0 + start.abs()));
            // and every route agrees with the closed-form targets
            let want = match to {
                X0 => x0,
                Epsilon => eps,
                V => a * eps - sg * x0,
                Score => -eps / sg,
            };
            prop_assert!((there - want).abs() <= 1e-9 * (1.0 + want.abs()));
        }
    }
}
