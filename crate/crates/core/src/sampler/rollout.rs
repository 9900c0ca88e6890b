//! Sliding-window autoregressive rollout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{GuidanceScheme, HistoryNoise, SchemeConfig, StabilizationMode, TaskSpec};
use crate::model::Denoiser;
use crate::sampler::sample::sample;
use crate::sampler::step::SamplerConfig;
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

/// Switches to the escalation scheme when the steering input exceeds a threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EscalationPredicate {
    /// Trigger when `|angle_deg|` exceeds this.
    #[serde(default = "EscalationPredicate::default_angle")]
    pub angle_deg_above: Option<f64>,
    /// Trigger when `distance` exceeds this.
    #[serde(default)]
    pub distance_above: Option<f64>,
}

impl EscalationPredicate {
    fn default_angle() -> Option<f64> {
        Some(30.0)
    }

    pub fn fires(&self, input: &SteeringInput) -> bool {
        let angle = matches!((self.angle_deg_above, input.angle_deg), (Some(th), Some(a)) if a.abs() > th);
        let dist = matches!((self.distance_above, input.distance), (Some(th), Some(d)) if d > th);
        angle || dist
    }
}

impl Default for EscalationPredicate {
    fn default() -> Self {
        Self {
            angle_deg_above: Self::default_angle(),
            distance_above: None,
        }
    }
}

/// Turns a steering angle into per-frame action labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionMapping {
    pub forward: usize,
    pub left: usize,
    pub right: usize,
    /// Heading change produced by one turn action.
    pub turn_step_deg: f64,
}

impl ActionMapping {
    /// `round(|angle| / turn_step)` turn actions (left for positive angles),
    /// then forward actions.
    pub fn actions(&self, angle_deg: f64, frames: usize) -> Vec<usize> {
        let turns = ((angle_deg.abs() / self.turn_step_deg).round() as usize).min(frames);
        let turn = if angle_deg >= 0.0 { self.left } else { self.right };
        (0..frames).map(|i| if i < turns { turn } else { self.forward }).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteeringInput {
    /// Explicit label for every new frame; takes precedence over `angle_deg`.
    #[serde(default)]
    pub action: Option<usize>,
    #[serde(default)]
    pub angle_deg: Option<f64>,
    #[serde(default)]
    pub distance: Option<f64>,
    /// Replaces the default scheme for this window (escalation still wins).
    #[serde(default)]
    pub scheme: Option<SchemeConfig>,
}

impl SteeringInput {
    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.angle_deg {
            if !(-180.0..=180.0).contains(&a) {
                return Err(Error::InvalidConfig(format!("steering angle {a} outside [-180, 180]")));
            }
        }
        if let Some(d) = self.distance {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(Error::InvalidConfig(format!("steering distance {d} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Supplies steering for each window; errors abort the window.
pub trait SteeringProvider {
    fn steer(&mut self, window: usize, frames: &[f64], dim: usize) -> std::result::Result<SteeringInput, String>;
}

impl<F> SteeringProvider for F
where
    F: FnMut(usize, &[f64], usize) -> std::result::Result<SteeringInput, String>,
{
    fn steer(&mut self, window: usize, frames: &[f64], dim: usize) -> std::result::Result<SteeringInput, String> {
        self(window, frames, dim)
    }
}

/// Always returns the same input.
#[derive(Debug, Clone, Default)]
pub struct FixedSteering(pub SteeringInput);

impl SteeringProvider for FixedSteering {
    fn steer(&mut self, _: usize, _: &[f64], _: usize) -> std::result::Result<SteeringInput, String> {
        Ok(self.0.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    pub context_frames: usize,
    pub frames_per_window: usize,
    #[serde(default = "RolloutConfig::default_stabilization")]
    pub stabilization_k: f64,
    #[serde(default)]
    pub stabilization_mode: StabilizationMode,
    pub scheme_default: GuidanceScheme,
    #[serde(default)]
    pub scheme_escalation: Option<GuidanceScheme>,
    #[serde(default)]
    pub escalation: EscalationPredicate,
    #[serde(default)]
    pub action_mapping: Option<ActionMapping>,
}

impl RolloutConfig {
    fn default_stabilization() -> f64 {
        0.02
    }

    pub fn new(context_frames: usize, frames_per_window: usize, scheme_default: GuidanceScheme) -> Self {
        Self {
            context_frames,
            frames_per_window,
            stabilization_k: Self::default_stabilization(),
            stabilization_mode: StabilizationMode::Declared,
            scheme_default,
            scheme_escalation: None,
            escalation: EscalationPredicate::default(),
            action_mapping: None,
        }
    }

    pub fn validate(&self, max_frames: usize) -> Result<()> {
        if self.context_frames == 0 || self.frames_per_window == 0 {
            return Err(Error::InvalidConfig("context_frames and frames_per_window must be positive".into()));
        }
        if self.context_frames + self.frames_per_window > max_frames {
            return Err(Error::InvalidConfig(format!(
                "context {} + window {} exceeds model length {max_frames}",
                self.context_frames, self.frames_per_window
            )));
        }
        if !(0.0..=1.0).contains(&self.stabilization_k) {
            return Err(Error::NoiseLevelOutOfRange(self.stabilization_k));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub index: usize,
    /// First newly generated frame.
    pub start_frame: usize,
    pub generated: usize,
    pub scheme: String,
    pub escalated: bool,
}

/// Rollout state: the sequence so far and the sampling RNG.
#[derive(Debug, Clone)]
pub struct RolloutSession<S> {
    dim: usize,
    frames: Vec<S>,
    actions: Vec<Option<usize>>,
    rng: ChaCha8Rng,
    windows: Vec<WindowRecord>,
}

impl<S: Scalar> RolloutSession<S> {
    pub fn new(initial: Vec<S>, dim: usize, initial_actions: Option<Vec<usize>>, seed: u64) -> Result<Self> {
        if dim == 0 || initial.len() % dim != 0 {
            return Err(Error::ShapeMismatch(format!("{} values do not form {dim}-dim frames", initial.len())));
        }
        if initial.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("initial history".into()));
        }
        let n = initial.len() / dim;
        let actions = match initial_actions {
            Some(a) if a.len() != n => {
                return Err(Error::ShapeMismatch(format!("{} actions for {n} frames", a.len())));
            }
            Some(a) => a.into_iter().map(Some).collect(),
            None => vec![None; n],
        };
        Ok(Self {
            dim,
            frames: initial,
            actions,
            rng: ChaCha8Rng::seed_from_u64(seed),
            windows: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.frames.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// All frames so far, `len × D`.
    pub fn frames(&self) -> &[S] {
        &self.frames
    }

    pub fn actions(&self) -> &[Option<usize>] {
        &self.actions
    }

    pub fn windows(&self) -> &[WindowRecord] {
        &self.windows
    }

    /// Generates one window; on error the session is left unchanged.
    pub fn step_window<M: Denoiser<S> + ?Sized>(
        &mut self,
        model: &M,
        config: &RolloutConfig,
        sampler: &SamplerConfig,
        schedule: &NoiseSchedule<S>,
        steering: &mut dyn SteeringProvider,
    ) -> Result<WindowRecord> {
        let t_max = model.max_frames();
        config.validate(t_max)?;
        if model.frame_dim() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "session frames are {}-dim, model expects {}",
                self.dim,
                model.frame_dim()
            )));
        }
        let index = self.windows.len();
        let len = self.len();
        let view: Vec<f64> = self.frames.iter().map(|v| v.f64()).collect();
        let input = steering.steer(index, &view, self.dim).map_err(Error::Steering)?;
        input.validate()?;

        // the first window may see less context than configured
        let ctx = len.min(config.context_frames);
        let new = config.frames_per_window;
        let escalated = config.scheme_escalation.is_some() && config.escalation.fires(&input);
        let mut scheme = match (&config.scheme_escalation, &input.scheme) {
            (Some(esc), _) if escalated => esc.clone(),
            (_, Some(over)) => over.build()?,
            _ => config.scheme_default.clone(),
        };

        let d = self.dim;
        let history: Vec<usize> = (0..ctx).collect();
        let history_values = self.frames[(len - ctx) * d..].to_vec();
        let mut task = TaskSpec::new(ctx + new, d, history, history_values)?.with_history_noise(HistoryNoise {
            level: config.stabilization_k,
            mode: config.stabilization_mode,
        })?;
        if ctx == 0 {
            scheme = GuidanceScheme::unconditional();
        } else if scheme.validate(&task).is_err() {
            // term indices written for the full context do not fit a short first window
            scheme = GuidanceScheme::conditional();
        }

        let new_actions = self.new_actions(model, config, &input, new)?;
        if let Some(vocab) = model.action_vocab() {
            let mut acts: Vec<usize> = self.actions[len - ctx..].iter().map(|a| a.unwrap_or(vocab)).collect();
            acts.extend(new_actions.iter().map(|a| a.unwrap_or(vocab)));
            task = task.with_actions(acts)?;
        }

        let mut rng = self.rng.clone();
        let out = sample(&task, &scheme, model, sampler, schedule, 1, &mut rng)?;
        self.rng = rng;
        self.frames.extend_from_slice(&out.data);
        self.actions.extend(new_actions);
        let record = WindowRecord {
            index,
            start_frame: len,
            generated: new,
            scheme: scheme.name.clone(),
            escalated,
        };
        self.windows.push(record.clone());
        Ok(record)
    }

    fn new_actions<M: Denoiser<S> + ?Sized>(
        &self,
        model: &M,
        config: &RolloutConfig,
        input: &SteeringInput,
        frames: usize,
    ) -> Result<Vec<Option<usize>>> {
        let Some(vocab) = model.action_vocab() else {
            return Ok(vec![None; frames]);
        };
        if let Some(a) = input.action {
            if a >= vocab {
                return Err(Error::ActionOutOfVocabulary { action: a, vocab });
            }
            return Ok(vec![Some(a); frames]);
        }
        Ok(match config.action_mapping {
            Some(m) => m.actions(input.angle_deg.unwrap_or(0.0), frames).into_iter().map(Some).collect(),
            None => vec![None; frames],
        })
    }
}

/// Runs `num_windows` windows from `initial` (`n × D`) and returns the session.
#[allow(clippy::too_many_arguments)]
pub fn rollout<S: Scalar, M: Denoiser<S> + ?Sized>(
    initial: Vec<S>,
    dim: usize,
    num_windows: usize,
    steering: &mut dyn SteeringProvider,
    config: &RolloutConfig,
    model: &M,
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule<S>,
    seed: u64,
) -> Result<RolloutSession<S>> {
    let mut session = RolloutSession::new(initial, dim, None, seed)?;
    for _ in 0..num_windows {
        session.step_window(model, config, sampler, schedule, steering)?;
    }
    Ok(session)
}
