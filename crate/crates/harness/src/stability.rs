//! Long steered rollouts: do frame norms stay at data scale?

use histdiff_core::guidance::{SchemeConfig, StabilizationMode};
use histdiff_core::model::Denoiser;
use histdiff_core::sampler::{ActionMapping, EscalationPredicate, RolloutConfig, RolloutSession, SteeringInput};
use histdiff_core::{NoiseSchedule, SamplerConfig, Scalar, SequenceBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{data_scale, FORWARD, LEFT, RIGHT};
use crate::report::{MetricReport, MetricRow};
use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityConfig {
    #[serde(default = "StabilityConfig::default_windows")]
    pub windows: usize,
    #[serde(default = "StabilityConfig::default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "StabilityConfig::default_context")]
    pub context_frames: usize,
    #[serde(default = "StabilityConfig::default_fpw")]
    pub frames_per_window: usize,
    #[serde(default = "StabilityConfig::default_scheme")]
    pub scheme: SchemeConfig,
    #[serde(default)]
    pub scheme_escalation: Option<SchemeConfig>,
    /// When a steering input switches to `scheme_escalation`.
    #[serde(default)]
    pub escalation: EscalationPredicate,
    #[serde(default = "StabilityConfig::default_k")]
    pub stabilization_k: f64,
    #[serde(default)]
    pub stabilization_mode: StabilizationMode,
    /// Steering angles are drawn uniformly from `[-max, max]` degrees.
    #[serde(default = "StabilityConfig::default_angle")]
    pub max_steer_deg: f64,
    /// A frame norm above `norm_factor × data scale` counts as divergence.
    #[serde(default = "StabilityConfig::default_factor")]
    pub norm_factor: f64,
    /// Turn size of one action, for mapping steering angles to actions.
    #[serde(default = "StabilityConfig::default_turn")]
    pub turn_step_deg: f64,
}

impl StabilityConfig {
    fn default_windows() -> usize {
        200
    }
    fn default_seeds() -> Vec<u64> {
        (0..10).collect()
    }
    fn default_context() -> usize {
        4
    }
    fn default_fpw() -> usize {
        4
    }
    fn default_scheme() -> SchemeConfig {
        SchemeConfig::Fractional { omega: 4.0, k_h: 0.4 }
    }
    fn default_k() -> f64 {
        0.02
    }
    fn default_angle() -> f64 {
        45.0
    }
    fn default_factor() -> f64 {
        10.0
    }
    fn default_turn() -> f64 {
        15.0
    }

    pub fn rollout_config(&self) -> Result<RolloutConfig, HarnessError> {
        let mut cfg = RolloutConfig::new(self.context_frames, self.frames_per_window, self.scheme.build()?);
        cfg.stabilization_k = self.stabilization_k;
        cfg.stabilization_mode = self.stabilization_mode;
        cfg.scheme_escalation = self.scheme_escalation.as_ref().map(|s| s.build()).transpose()?;
        cfg.escalation = self.escalation;
        cfg.action_mapping = Some(ActionMapping {
            forward: FORWARD,
            left: LEFT,
            right: RIGHT,
            turn_step_deg: self.turn_step_deg,
        });
        Ok(cfg)
    }
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            windows: Self::default_windows(),
            seeds: Self::default_seeds(),
            context_frames: Self::default_context(),
            frames_per_window: Self::default_fpw(),
            scheme: Self::default_scheme(),
            scheme_escalation: None,
            escalation: EscalationPredicate::default(),
            stabilization_k: Self::default_k(),
            stabilization_mode: StabilizationMode::default(),
            max_steer_deg: Self::default_angle(),
            norm_factor: Self::default_factor(),
            turn_step_deg: Self::default_turn(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityRun {
    pub seed: u64,
    pub frames: usize,
    /// Largest frame norm over the rollout, in units of data scale.
    pub max_norm_ratio: f64,
    /// First window containing a frame beyond the bound.
    pub divergence_window: Option<usize>,
    pub escalations: usize,
    pub norms: Vec<f64>,
    /// The whole rollout, `frames × D`.
    pub sequence: Vec<f64>,
}

/// A seeded random steering script; the same seed replays the same inputs.
pub fn scripted_steering(seed: u64, max_deg: f64) -> impl FnMut(usize, &[f64], usize) -> Result<SteeringInput, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_57ee);
    move |_, _, _| {
        let angle = if max_deg > 0.0 { rng.random_range(-max_deg..=max_deg) } else { 0.0 };
        Ok(SteeringInput {
            angle_deg: Some(angle),
            ..Default::default()
        })
    }
}

fn frame_norms<S: Scalar>(frames: &[S], d: usize) -> Vec<f64> {
    frames
        .chunks(d)
        .map(|f| f.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt())
        .collect()
}

/// One rollout per seed, each starting from the first `context_frames`
/// frames (and actions) of dataset sequence `seed mod N`.
pub fn run_rollout_stability<S: Scalar, M: Denoiser<S> + ?Sized>(
    model: &M,
    data: &SequenceBatch<S>,
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule<S>,
    cfg: &StabilityConfig,
) -> Result<Vec<StabilityRun>, HarnessError> {
    let rc = cfg.rollout_config()?;
    let scale = data_scale(data);
    if !(scale > 0.0) {
        return Err(HarnessError::Config("data scale must be positive".into()));
    }
    if data.frames < cfg.context_frames {
        return Err(HarnessError::Config("dataset sequences are shorter than the context".into()));
    }
    let d = data.dim;
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let row = (seed as usize) % data.batch;
        let init = data.sequence(row)[..cfg.context_frames * d].to_vec();
        let acts = data
            .actions
            .as_ref()
            .map(|a| a[row * data.frames..row * data.frames + cfg.context_frames].to_vec());
        let mut session = RolloutSession::new(init, d, acts, seed)?;
        let mut steer = scripted_steering(seed, cfg.max_steer_deg);
        let mut divergence = None;
        let bound = cfg.norm_factor * scale;
        for w in 0..cfg.windows {
            let rec = session.step_window(model, &rc, sampler, schedule, &mut steer)?;
            let new = &session.frames()[rec.start_frame * d..];
            if divergence.is_none() && frame_norms(new, d).iter().any(|&n| !(n < bound)) {
                divergence = Some(w);
            }
        }
        let norms = frame_norms(session.frames(), d);
        let max = norms.iter().cloned().fold(0.0, f64::max);
        runs.push(StabilityRun {
            seed,
            frames: session.len(),
            max_norm_ratio: max / scale,
            divergence_window: divergence,
            escalations: session.windows().iter().filter(|w| w.escalated).count(),
            norms,
            sequence: session.frames().iter().map(|v| v.f64()).collect(),
        });
    }
    Ok(runs)
}

/// Metric rows carry only the divergence step; see [`write_stability_csv`].
pub fn stability_report(runs: &[StabilityRun], scheme: &str) -> MetricReport {
    MetricReport {
        rows: runs
            .iter()
            .map(|r| {
                let mut row = MetricRow::new(format!("rollout/seed={}", r.seed), scheme, 0.0, 0.0);
                row.rollout_divergence_step = r.divergence_window;
                row
            })
            .collect(),
    }
}

/// `seed,frames,max_norm_ratio,divergence_window,escalations`.
pub fn write_stability_csv<W: std::io::Write>(runs: &[StabilityRun], w: W) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["seed", "frames", "max_norm_ratio", "divergence_window", "escalations"])?;
    for r in runs {
        out.write_record([
            r.seed.to_string(),
            r.frames.to_string(),
            r.max_norm_ratio.to_string(),
            r.divergence_window.map(|w| w.to_string()).unwrap_or_default(),
            r.escalations.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
