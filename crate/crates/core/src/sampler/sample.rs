//! Guided sampling: batched branch evaluation, composition, reverse steps.

use rand::Rng;

use crate::batch::{NoiseLevelVector, SequenceBatch};
use crate::error::{Error, Result};
use crate::guidance::{build_model_input, compose_extended, compose_scores, Branch, GuidanceScheme, TaskSpec};
use crate::model::Denoiser;
use crate::param::{convert_scalar, Parameterization};
use crate::sampler::step::{reverse_step, SamplerConfig};
use crate::scalar::Scalar;
use crate::schedule::{NoiseLevel, NoiseSchedule};

/// Checks that `model` can evaluate `task`.
pub fn check_model<S: Scalar, M: Denoiser<S> + ?Sized>(model: &M, task: &TaskSpec<S>) -> Result<()> {
    if task.frames > model.max_frames() || task.dim != model.frame_dim() {
        return Err(Error::ShapeMismatch(format!(
            "task {}×{} does not fit model {}×{}",
            task.frames,
            task.dim,
            model.max_frames(),
            model.frame_dim()
        )));
    }
    if let (Some(actions), Some(vocab)) = (&task.actions, model.action_vocab()) {
        if let Some(&a) = actions.iter().find(|&&a| a > vocab) {
            return Err(Error::ActionOutOfVocabulary { action: a, vocab });
        }
    }
    Ok(())
}

/// Draws `num_samples` realizations of `x_G`; returns a `num_samples × |G| × D` batch.
pub fn sample<S: Scalar, M: Denoiser<S> + ?Sized, R: Rng + ?Sized>(
    task: &TaskSpec<S>,
    scheme: &GuidanceScheme,
    model: &M,
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule<S>,
    num_samples: usize,
    rng: &mut R,
) -> Result<SequenceBatch<S>> {
    task.validate()?;
    sampler.validate()?;
    scheme.validate(task)?;
    check_model(model, task)?;
    let g = task.generated();
    let d = task.dim;
    let gl = g.len() * d;
    if g.is_empty() || num_samples == 0 {
        // nothing to generate: an empty result, no model calls
        return Ok(SequenceBatch {
            batch: num_samples,
            frames: g.len(),
            dim: d,
            data: Vec::new(),
            actions: None,
        });
    }
    let subsequences = scheme.generation_subsequences.clone().unwrap_or_else(|| vec![g.clone()]);
    let weights: Vec<f64> = scheme.terms.iter().map(|t| t.weight).collect();
    let branches: Vec<Branch<'_>> = std::iter::once(Branch::Unconditional)
        .chain(scheme.terms.iter().map(Branch::Term))
        .collect();
    // position of each G_j frame inside x_G
    let sub_pos: Vec<Vec<usize>> = subsequences
        .iter()
        .map(|s| s.iter().map(|t| g.iter().position(|x| x == t).expect("validated")).collect())
        .collect();
    let per_sample = subsequences.len() * branches.len();
    let steps = sampler.steps;

    let mut x: Vec<S> = (0..num_samples * gl).map(|_| S::sample_normal(rng)).collect();
    for n in (1..=steps).rev() {
        let current = NoiseLevel::grid(n, steps);
        let (alpha, sigma) = schedule.alpha_sigma(current);
        let mut inputs = Vec::with_capacity(num_samples * per_sample * task.frames * d);
        let mut levels: Vec<NoiseLevelVector<S>> = Vec::with_capacity(num_samples * per_sample);
        for b in 0..num_samples {
            let xg = &x[b * gl..(b + 1) * gl];
            for sub in &subsequences {
                let subset = scheme.generation_subsequences.as_ref().map(|_| sub.as_slice());
                for br in &branches {
                    let (seq, lv) = build_model_input(task, *br, current, xg, subset, rng, schedule)?;
                    inputs.extend(seq);
                    levels.push(lv);
                }
            }
        }
        let rows = num_samples * per_sample;
        let mut batch = SequenceBatch::new(rows, task.frames, d, inputs)?;
        if let Some(a) = &task.actions {
            batch = batch.with_actions(a.repeat(rows))?;
        }
        let (pred, param) = denoise_chunked(model, &batch, &levels, sampler.max_batch)?;

        let mut x0_hat = Vec::with_capacity(num_samples * gl);
        for b in 0..num_samples {
            let mut inner = Vec::with_capacity(subsequences.len());
            for (j, sub) in subsequences.iter().enumerate() {
                // x0-predictions of every branch on the frames of G_j
                let branch_x0: Vec<Vec<S>> = (0..branches.len())
                    .map(|i| {
                        let row = (b * per_sample + j * branches.len() + i) * task.frames * d;
                        let mut out = Vec::with_capacity(sub.len() * d);
                        for &t in sub {
                            for c in 0..d {
                                let idx = row + t * d + c;
                                out.push(convert_scalar(
                                    pred[idx],
                                    param,
                                    Parameterization::X0,
                                    batch.data[idx],
                                    alpha,
                                    sigma,
                                )?);
                            }
                        }
                        Ok(out)
                    })
                    .collect::<Result<_>>()?;
                let conds: Vec<(&[S], f64)> =
                    branch_x0[1..].iter().zip(&weights).map(|(s, &w)| (s.as_slice(), w)).collect();
                inner.push(compose_scores(&branch_x0[0], &conds)?);
            }
            if subsequences.len() == 1 {
                // G_1 = G in frame order
                let mut out = vec![S::zero(); gl];
                for (p, &gi) in sub_pos[0].iter().enumerate() {
                    out[gi * d..(gi + 1) * d].copy_from_slice(&inner[0][p * d..(p + 1) * d]);
                }
                x0_hat.extend(out);
            } else {
                x0_hat.extend(compose_extended(&g, &subsequences, &inner, d)?);
            }
        }
        x = reverse_step(sampler.kind, &x, &x0_hat, n, steps, schedule, rng)?;
    }
    SequenceBatch::new(num_samples, g.len(), d, x)
}

fn denoise_chunked<S: Scalar, M: Denoiser<S> + ?Sized>(
    model: &M,
    batch: &SequenceBatch<S>,
    levels: &[NoiseLevelVector<S>],
    max_batch: usize,
) -> Result<(Vec<S>, Parameterization)> {
    if batch.batch <= max_batch {
        let out = model.denoise(batch, levels)?;
        return Ok((out.prediction.data, out.parameterization));
    }
    let mut pred = Vec::with_capacity(batch.data.len());
    let mut param = model.parameterization();
    for start in (0..batch.batch).step_by(max_batch) {
        let rows: Vec<usize> = (start..(start + max_batch).min(batch.batch)).collect();
        let out = model.denoise(&batch.select(&rows), &levels[rows[0]..=rows[rows.len() - 1]])?;
        param = out.parameterization;
        pred.extend(out.prediction.data);
    }
    Ok((pred, param))
}

/// Writes generated frames back into a full-length sequence.
pub fn assemble<S: Scalar>(task: &TaskSpec<S>, x_g: &[S]) -> Result<Vec<S>> {
    let g = task.generated();
    let d = task.dim;
    if x_g.len() != g.len() * d {
        return Err(Error::ShapeMismatch(format!("x_G has {} entries, expected {}", x_g.len(), g.len() * d)));
    }
    let mut out = vec![S::zero(); task.frames * d];
    for (i, &t) in task.history.iter().enumerate() {
        out[t * d..(t + 1) * d].copy_from_slice(&task.history_values[i * d..(i + 1) * d]);
    }
    for (i, &t) in g.iter().enumerate() {
        out[t * d..(t + 1) * d].copy_from_slice(&x_g[i * d..(i + 1) * d]);
    }
    Ok(out)
}
