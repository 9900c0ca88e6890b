//! Frame densification by conditioning on consecutive pairs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{GuidanceScheme, TaskSpec};
use crate::model::Denoiser;
use crate::sampler::sample::sample;
use crate::sampler::step::SamplerConfig;
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpolationConfig {
    /// Output spacing: `factor - 1` frames are inserted per pair.
    pub factor: usize,
}

/// Inserts `factor - 1` frames between each consecutive pair of `frames`
/// (`n × D`); returns `((n - 1) · factor + 1) × D` with originals verbatim.
#[allow(clippy::too_many_arguments)]
pub fn interpolate<S: Scalar, M: Denoiser<S> + ?Sized, R: Rng + ?Sized>(
    frames: &[S],
    dim: usize,
    config: &InterpolationConfig,
    model: &M,
    scheme: &GuidanceScheme,
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule<S>,
    rng: &mut R,
) -> Result<Vec<S>> {
    let f = config.factor;
    if f < 2 {
        return Err(Error::InvalidConfig(format!("interpolation factor must be >= 2, got {f}")));
    }
    if dim == 0 || frames.len() % dim != 0 || frames.len() / dim < 2 {
        return Err(Error::ShapeMismatch("interpolation needs at least two whole frames".into()));
    }
    if f + 1 > model.max_frames() {
        return Err(Error::InvalidConfig(format!(
            "window of {} frames exceeds model length {}",
            f + 1,
            model.max_frames()
        )));
    }
    let n = frames.len() / dim;
    let mut out = Vec::with_capacity(((n - 1) * f + 1) * dim);
    out.extend_from_slice(&frames[..dim]);
    for p in 0..n - 1 {
        let (a, b) = (&frames[p * dim..(p + 1) * dim], &frames[(p + 1) * dim..(p + 2) * dim]);
        let task = TaskSpec::new(f + 1, dim, vec![0, f], [a, b].concat())?;
        let x = sample(&task, scheme, model, sampler, schedule, 1, rng)?;
        out.extend_from_slice(&x.data);
        out.extend_from_slice(b);
    }
    Ok(out)
}
