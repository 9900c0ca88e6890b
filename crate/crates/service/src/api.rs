//! Wire types of the JSON protocol, version [`API_VERSION`]. See
//! `docs/api.md` for the schema with examples.

use histdiff_core::guidance::{SchemeConfig, StabilizationMode};
use histdiff_core::sampler::{EscalationPredicate, SteeringInput, WindowRecord};
use serde::{Deserialize, Serialize};

pub const API_VERSION: u32 = 1;

fn version() -> u32 {
    API_VERSION
}

/// How a thin client should draw a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rendering {
    /// Frames are `(x, y, cos h, sin h)`; `poses` carries decoded values.
    PositionHeading,
    /// No geometric reading; draw the raw values.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading_deg: f64,
}

/// Overrides of the model's default rollout settings; every field optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutSpec {
    #[serde(default)]
    pub context_frames: Option<usize>,
    #[serde(default)]
    pub frames_per_window: Option<usize>,
    #[serde(default)]
    pub scheme: Option<SchemeConfig>,
    #[serde(default)]
    pub scheme_escalation: Option<SchemeConfig>,
    #[serde(default)]
    pub escalation: Option<EscalationPredicate>,
    #[serde(default)]
    pub stabilization_k: Option<f64>,
    #[serde(default)]
    pub stabilization_mode: Option<StabilizationMode>,
}

/// Fully resolved rollout settings of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedRollout {
    pub context_frames: usize,
    pub frames_per_window: usize,
    pub scheme: SchemeConfig,
    pub scheme_escalation: Option<SchemeConfig>,
    pub escalation: EscalationPredicate,
    pub stabilization_k: f64,
    pub stabilization_mode: StabilizationMode,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSessionRequest {
    #[serde(default)]
    pub version: Option<u32>,
    #[serde(default)]
    pub model_id: Option<String>,
    #[serde(default)]
    pub seed: u64,
    /// Initial history, one array per frame; defaults to the first
    /// `context_frames` frames of dataset sequence `seed mod size`.
    #[serde(default)]
    pub initial_frames: Option<Vec<Vec<f64>>>,
    /// One action label per initial frame (action-conditioned models).
    #[serde(default)]
    pub initial_actions: Option<Vec<usize>>,
    #[serde(default)]
    pub rollout: RolloutSpec,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRequest {
    #[serde(default)]
    pub version: Option<u32>,
    #[serde(default)]
    pub steering: SteeringInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpolateRequest {
    #[serde(default)]
    pub version: Option<u32>,
    pub factor: usize,
    #[serde(default)]
    pub scheme: Option<SchemeConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    #[serde(default = "version")]
    pub version: u32,
    pub session_id: String,
    pub model_id: String,
    pub seed: u64,
    pub length: usize,
    pub dim: usize,
    pub rendering: Rendering,
    pub frames: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poses: Option<Vec<Pose>>,
    pub actions: Vec<Option<usize>>,
    pub windows: Vec<WindowRecord>,
    pub transcript: Vec<SteeringInput>,
    pub rollout: ResolvedRollout,
    pub busy: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResponse {
    #[serde(default = "version")]
    pub version: u32,
    pub session_id: String,
    pub window: WindowRecord,
    /// Name of the scheme applied to this window.
    pub scheme: String,
    pub escalated: bool,
    pub new_frames: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_poses: Option<Vec<Pose>>,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolateResponse {
    #[serde(default = "version")]
    pub version: u32,
    pub session_id: String,
    pub factor: usize,
    pub length: usize,
    pub rendering: Rendering,
    pub frames: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poses: Option<Vec<Pose>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub id: String,
    pub frame_dim: usize,
    pub max_frames: usize,
    pub action_vocab: Option<usize>,
    pub rendering: Rendering,
    pub default_rollout: ResolvedRollout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelsResponse {
    #[serde(default = "version")]
    pub version: u32,
    pub models: Vec<ModelInfo>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorCode {
    NotFound,
    Busy,
    InvalidInput,
    UnsupportedVersion,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    #[serde(default = "version")]
    pub version: u32,
    pub code: ErrorCode,
    pub error: String,
    /// `true` when the same request may succeed later (busy session).
    pub retryable: bool,
}
