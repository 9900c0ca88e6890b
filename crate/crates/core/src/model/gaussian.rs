//! Exact posterior-mean denoiser for a Gaussian sequence law.

use std::collections::BTreeMap;

use nalgebra::DVector;

use crate::batch::{DenoiserOutput, NoiseLevelVector, SequenceBatch};
use crate::error::Result;
use crate::model::{check_inputs, Denoiser};
use crate::oracle::GaussianSeqSpec;
use crate::param::Parameterization;
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

/// Returns `E[x0 | x_noised]` (x0-parameterization), each frame observed as
/// `alpha_{k_t} x_t + sigma_{k_t} eps_t`. Shorter windows use the marginal
/// of the leading frames.
#[derive(Debug, Clone)]
pub struct GaussianDenoiser<S> {
    spec: GaussianSeqSpec,
    schedule: NoiseSchedule<S>,
}

impl<S: Scalar> GaussianDenoiser<S> {
    pub fn new(spec: GaussianSeqSpec, schedule: NoiseSchedule<S>) -> Self {
        Self { spec, schedule }
    }

    pub fn spec(&self) -> &GaussianSeqSpec {
        &self.spec
    }

    pub fn schedule(&self) -> &NoiseSchedule<S> {
        &self.schedule
    }
}

impl<S: Scalar> Denoiser<S> for GaussianDenoiser<S> {
    fn parameterization(&self) -> Parameterization {
        Parameterization::X0
    }

    fn frame_dim(&self) -> usize {
        self.spec.dim()
    }

    fn max_frames(&self) -> usize {
        self.spec.frames()
    }

    fn denoise(&self, batch: &SequenceBatch<S>, levels: &[NoiseLevelVector<S>]) -> Result<DenoiserOutput<S>> {
        check_inputs(self, batch, levels)?;
        let spec = if batch.frames == self.spec.frames() {
            self.spec.clone()
        } else {
            self.spec.leading(batch.frames)?
        };
        let d = batch.dim;
        let n = spec.len();
        // sequences sharing a level pattern share one posterior map
        let mut groups: BTreeMap<Vec<u64>, Vec<usize>> = BTreeMap::new();
        for (b, l) in levels.iter().enumerate() {
            groups.entry(l.key()).or_default().push(b);
        }
        let mut out = SequenceBatch::zeros(batch.batch, batch.frames, d);
        for rows in groups.values() {
            let lv = &levels[rows[0]];
            let mut a = vec![0.0; n];
            let mut s = vec![0.0; n];
            for u in 0..n {
                let (al, si) = self.schedule.alpha_sigma(lv.0[u / d]);
                a[u] = al.f64();
                s[u] = si.f64();
            }
            let (k, c, _) = spec.posterior_map(&a, &s)?;
            for &b in rows {
                let y = DVector::from_iterator(n, batch.sequence(b).iter().map(|v| v.f64()));
                let x0 = &k * y + &c;
                for (o, v) in out.sequence_mut(b).iter_mut().zip(x0.iter()) {
                    *o = S::of(*v);
                }
            }
        }
        Ok(DenoiserOutput {
            prediction: out,
            parameterization: Parameterization::X0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::NoiseLevel;

    #[test]
    fn clean_levels_reproduce_input() {
        let m = GaussianDenoiser::new(GaussianSeqSpec::ar1(0.8, 2, 3).unwrap(), NoiseSchedule::<f64>::cosine());
        let data: Vec<f64> = (0..6).map(|i| i as f64 * 0.3 - 0.5).collect();
        let b = SequenceBatch::new(1, 3, 2, data.clone()).unwrap();
        let out = m.denoise(&b, &[NoiseLevelVector::uniform(3, NoiseLevel::clean())]).unwrap();
        for (o, x) in out.prediction.data.iter().zip(&data) {
            assert!((o - x).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_levels_give_prior_mean() {
        let m = GaussianDenoiser::new(GaussianSeqSpec::ar1(0.8, 1, 4).unwrap(), NoiseSchedule::<f64>::cosine());
        let b = SequenceBatch::new(1, 4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = m.denoise(&b, &[NoiseLevelVector::uniform(4, NoiseLevel::masked())]).unwrap();
        assert!(out.prediction.data.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn shorter_window_and_shape_errors() {
        let m = GaussianDenoiser::new(GaussianSeqSpec::ar1(0.9, 1, 4).unwrap(), NoiseSchedule::<f64>::cosine());
        let b = SequenceBatch::new(1, 2, 1, vec![1.0, 5.0]).unwrap();
        let lv = NoiseLevelVector::new(&[0.0, 1.0]).unwrap();
        let out = m.denoise(&b, &[lv.clone()]).unwrap();
        assert!((out.prediction.data[1] - 0.9).abs() < 1e-12);
        let too_long = SequenceBatch::<f64>::zeros(1, 5, 1);
        assert!(m.denoise(&too_long, &[NoiseLevelVector::uniform(5, NoiseLevel::clean())]).is_err());
        assert!(m.denoise(&b, &[]).is_err());
    }
}
