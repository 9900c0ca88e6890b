//! The per-frame noise-prediction loss.

use rand::Rng;

use crate::batch::{NoiseLevelVector, SequenceBatch};
use crate::error::{Error, Result};
use crate::model::{Denoiser, TinyDenoiser};
use crate::param::{convert_scalar, Parameterization};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::training::objective::Objective;
use crate::weighting::LossWeighting;

/// A noised training batch together with its targets.
#[derive(Debug, Clone)]
pub struct LossInputs<S> {
    pub noised: SequenceBatch<S>,
    pub levels: Vec<NoiseLevelVector<S>>,
    /// Target noise, same layout as `noised.data`.
    pub eps: Vec<S>,
    /// Per `(b, t)` loss weight; 0 for frames excluded by the regime.
    pub weights: Vec<S>,
    /// Number of `(b, t, d)` entries entering the mean.
    pub count: usize,
}

/// Draws levels and noise for every sequence and diffuses `x0`.
pub fn prepare_inputs<S: Scalar, R: Rng + ?Sized>(
    x0: &SequenceBatch<S>,
    objective: &Objective,
    weighting: &LossWeighting,
    schedule: &NoiseSchedule<S>,
    grid_steps: usize,
    rng: &mut R,
) -> Result<LossInputs<S>> {
    x0.check_finite()?;
    if grid_steps == 0 {
        return Err(Error::InvalidConfig("level grid needs at least one step".into()));
    }
    let (b, t, d) = (x0.batch, x0.frames, x0.dim);
    let mut noised = x0.clone();
    let mut eps = Vec::with_capacity(x0.data.len());
    let mut levels = Vec::with_capacity(b);
    let mut weights = Vec::with_capacity(b * t);
    let mut count = 0;
    for bi in 0..b {
        let draw = objective.sample_noise_levels::<S, _>(t, grid_steps, rng)?;
        for ti in 0..t {
            let k = draw.levels.0[ti];
            let (alpha, sigma) = schedule.alpha_sigma(k);
            let frame = noised.frame_mut(bi, ti);
            for v in frame.iter_mut() {
                let e = S::sample_normal(rng);
                *v = alpha * *v + sigma * e;
                eps.push(e);
            }
            if draw.in_loss[ti] {
                weights.push(weighting.weight(schedule, k.get()));
                count += d;
            } else {
                weights.push(S::zero());
            }
        }
        levels.push(draw.levels);
    }
    if count == 0 {
        return Err(Error::InvalidConfig("no frame enters the loss".into()));
    }
    Ok(LossInputs {
        noised,
        levels,
        eps,
        weights,
        count,
    })
}

/// Loss value and its gradient with respect to the raw prediction.
pub fn loss_from_prediction<S: Scalar>(
    inputs: &LossInputs<S>,
    prediction: &[S],
    parameterization: Parameterization,
    schedule: &NoiseSchedule<S>,
) -> Result<(S, Vec<S>)> {
    let n = inputs.noised.data.len();
    if prediction.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} entries, batch has {n}",
            prediction.len()
        )));
    }
    let d = inputs.noised.dim;
    let norm = S::one() / S::of(inputs.count as f64);
    let two = S::of(2.0);
    let mut total = S::zero();
    let mut grad = vec![S::zero(); n];
    for (bt, &w) in inputs.weights.iter().enumerate() {
        if w == S::zero() {
            continue;
        }
        let (bi, ti) = (bt / inputs.noised.frames, bt % inputs.noised.frames);
        let k = inputs.levels[bi].0[ti];
        let (alpha, sigma) = schedule.alpha_sigma(k);
        let slope = parameterization.epsilon_slope(alpha, sigma);
        for j in bt * d..(bt + 1) * d {
            let eps_hat = convert_scalar(
                prediction[j],
                parameterization,
                Parameterization::Epsilon,
                inputs.noised.data[j],
                alpha,
                sigma,
            )?;
            let r = eps_hat - inputs.eps[j];
            total += w * r * r;
            grad[j] = two * w * r * slope * norm;
        }
    }
    Ok((total * norm, grad))
}

/// Loss of an arbitrary denoiser (no gradients).
pub fn loss<S: Scalar, M: Denoiser<S> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x0: &SequenceBatch<S>,
    objective: &Objective,
    weighting: &LossWeighting,
    schedule: &NoiseSchedule<S>,
    grid_steps: usize,
    rng: &mut R,
) -> Result<S> {
    let inputs = prepare_inputs(x0, objective, weighting, schedule, grid_steps, rng)?;
    let out = model.denoise(&inputs.noised, &inputs.levels)?;
    Ok(loss_from_prediction(&inputs, &out.prediction.data, out.parameterization, schedule)?.0)
}

/// Loss and parameter gradient of the tiny denoiser at `params`.
pub fn loss_and_grad<S: Scalar>(
    model: &TinyDenoiser<S>,
    params: &[S],
    inputs: &LossInputs<S>,
    schedule: &NoiseSchedule<S>,
) -> Result<(S, Vec<S>)> {
    let (pred, cache) = model.forward(params, &inputs.noised, &inputs.levels)?;
    let (l, d_out) = loss_from_prediction(inputs, &pred, Parameterization::V, schedule)?;
    Ok((l, model.backward(params, &cache, &d_out)))
}
