//! The training loop.

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::SequenceBatch;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Denoiser};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::training::loss::{loss_and_grad, prepare_inputs};
use crate::training::objective::Objective;
use crate::training::optim::{clip_global_norm, warmup_lr, AdamW};
use crate::weighting::LossWeighting;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default = "TrainConfig::default_ema")]
    pub ema_decay: f64,
    #[serde(default = "TrainConfig::default_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub weighting: LossWeighting,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Size `N` of the training level grid `{1/N, ..., 1}`.
    #[serde(default = "TrainConfig::default_grid")]
    pub level_grid: usize,
    #[serde(default = "TrainConfig::default_beta1")]
    pub beta1: f64,
    #[serde(default = "TrainConfig::default_beta2")]
    pub beta2: f64,
}

impl TrainConfig {
    fn default_ema() -> f64 {
        0.999
    }
    fn default_clip() -> f64 {
        1.0
    }
    fn default_grid() -> usize {
        1000
    }
    fn default_beta1() -> f64 {
        0.9
    }
    fn default_beta2() -> f64 {
        0.999
    }

    pub fn new(steps: usize, batch_size: usize, learning_rate: f64) -> Self {
        Self {
            steps,
            batch_size,
            learning_rate,
            warmup_steps: 0,
            ema_decay: Self::default_ema(),
            grad_clip: Self::default_clip(),
            weighting: LossWeighting::Uniform,
            seed: 0,
            weight_decay: 0.0,
            level_grid: Self::default_grid(),
            beta1: Self::default_beta1(),
            beta2: Self::default_beta2(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 || self.level_grid == 0 {
            return bad("batch_size and level_grid must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must be in [0, 1), got {}", self.ema_decay));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.weight_decay < 0.0 {
            return bad("optimizer constants out of range".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    /// Bias-corrected exponential moving average of `loss`.
    pub ema_loss: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub checkpoint: Checkpoint<S>,
    pub curve: Vec<CurvePoint>,
}

/// Smoothing factor of `CurvePoint::ema_loss`.
pub const LOSS_SMOOTHING: f64 = 0.98;

/// Trains (or fine-tunes) the tiny denoiser stored in `init` on `dataset`.
///
/// Gradients are taken at the raw weights; the EMA shadow is updated after
/// every step with decay `min(ema_decay, (1 + s) / (10 + s))`.
pub fn train<S: Scalar>(
    init: Checkpoint<S>,
    dataset: &SequenceBatch<S>,
    objective: &Objective,
    schedule: &NoiseSchedule<S>,
    config: &TrainConfig,
) -> Result<TrainOutcome<S>> {
    config.validate()?;
    if dataset.batch == 0 {
        return Err(Error::InvalidConfig("dataset is empty".into()));
    }
    dataset.check_finite()?;
    objective.validate(dataset.frames)?;
    let mut ckpt = init;
    let model = ckpt.raw_model()?;
    if dataset.frames > model.max_frames() || dataset.dim != model.frame_dim() {
        return Err(Error::ShapeMismatch(format!(
            "dataset frames {}×{} do not fit model {}×{}",
            dataset.frames,
            dataset.dim,
            model.max_frames(),
            model.frame_dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::<S>::new(ckpt.params.len(), config.beta1, config.beta2, 1e-8, config.weight_decay);
    let mut curve = Vec::with_capacity(config.steps);
    let mut smooth = 0.0;
    let bs = config.batch_size.min(dataset.batch);

    for step in 0..config.steps {
        let rows = sample_indices(&mut rng, dataset.batch, bs).into_vec();
        let x0 = dataset.select(&rows);
        let inputs = prepare_inputs(&x0, objective, &config.weighting, schedule, config.level_grid, &mut rng)?;
        let (loss, mut grad) = loss_and_grad(&model, &ckpt.params, &inputs, schedule)?;
        let loss = loss.f64();
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step, loss });
        }
        let (grad_norm, clipped_norm) = clip_global_norm(&mut grad, config.grad_clip);
        let lr = warmup_lr(config.learning_rate, config.warmup_steps, step);
        opt.step(&mut ckpt.params, &grad, lr);
        if ckpt.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence { step, loss: f64::NAN });
        }
        let s = step as f64;
        ckpt.ema_update(config.ema_decay.min((1.0 + s) / (10.0 + s)))?;
        ckpt.step += 1;

        smooth = LOSS_SMOOTHING * smooth + (1.0 - LOSS_SMOOTHING) * loss;
        let ema_loss = smooth / (1.0 - LOSS_SMOOTHING.powi(step as i32 + 1));
        curve.push(CurvePoint {
            step,
            loss,
            ema_loss,
            grad_norm,
            clipped_norm,
            lr,
        });
    }
    Ok(TrainOutcome { checkpoint: ckpt, curve })
}
