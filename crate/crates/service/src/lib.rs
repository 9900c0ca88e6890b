//! Interactive rollout service: steerable sessions over HTTP/JSON.
//!
//! Each session owns a [`RolloutSession`] and advances one sliding window
//! per `step` request. Models are shared read-only across sessions; steps
//! within one session are strictly serialized by a busy flag, and a step
//! arriving while another is in flight is rejected with `409` and
//! `retryable: true`. Every response is a pure function of the session's
//! config, seed and steering transcript.

pub mod api;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use histdiff_core::model::Denoiser;
use histdiff_core::sampler::{interpolate, ActionMapping, FixedSteering, InterpolationConfig, RolloutConfig, RolloutSession};
use histdiff_core::{NoiseSchedule, SamplerConfig, SequenceBatch};
use histdiff_harness::dataset::{DatasetKind, FORWARD, LEFT, RIGHT};
use histdiff_harness::{ExperimentConfig, HarnessError, HarnessModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

use api::*;

/// A model served to sessions, with its defaults.
pub struct ModelEntry {
    pub id: String,
    model: HarnessModel<f32>,
    schedule: NoiseSchedule<f32>,
    sampler: SamplerConfig,
    defaults: ResolvedRollout,
    turn_step_deg: f64,
    rendering: Rendering,
    /// Sequences that supply the default initial history.
    pool: SequenceBatch<f32>,
}

impl ModelEntry {
    /// Loads the model, schedule, sampler and rollout defaults of `cfg`;
    /// the entry is registered under `cfg.serve.model_id`.
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self, HarnessError> {
        let model = histdiff_harness::experiment::load_model::<f32>(cfg)?;
        let schedule = cfg.schedule.build::<f32>()?;
        let r = &cfg.rollout;
        let defaults = ResolvedRollout {
            context_frames: r.context_frames,
            frames_per_window: r.frames_per_window,
            scheme: r.scheme.clone(),
            scheme_escalation: r.scheme_escalation.clone(),
            escalation: r.escalation,
            stabilization_k: r.stabilization_k,
            stabilization_mode: r.stabilization_mode,
        };
        let rendering = match cfg.dataset.kind {
            DatasetKind::Navigation2d(_) => Rendering::PositionHeading,
            DatasetKind::GaussianAr1 { .. } => Rendering::Raw,
        };
        let entry = Self {
            id: cfg.serve.model_id.clone(),
            model,
            schedule,
            sampler: cfg.sampler.clone(),
            defaults,
            turn_step_deg: r.turn_step_deg,
            rendering,
            pool: cfg.dataset.generate::<f32>()?,
        };
        entry.rollout_config(&entry.defaults)?;
        Ok(entry)
    }

    pub fn info(&self) -> ModelInfo {
        ModelInfo {
            id: self.id.clone(),
            frame_dim: self.model.frame_dim(),
            max_frames: self.model.max_frames(),
            action_vocab: self.model.action_vocab(),
            rendering: self.rendering,
            default_rollout: self.defaults.clone(),
        }
    }

    fn resolve(&self, spec: &RolloutSpec) -> ResolvedRollout {
        let d = &self.defaults;
        ResolvedRollout {
            context_frames: spec.context_frames.unwrap_or(d.context_frames),
            frames_per_window: spec.frames_per_window.unwrap_or(d.frames_per_window),
            scheme: spec.scheme.clone().unwrap_or_else(|| d.scheme.clone()),
            scheme_escalation: spec.scheme_escalation.clone().or_else(|| d.scheme_escalation.clone()),
            escalation: spec.escalation.unwrap_or(d.escalation),
            stabilization_k: spec.stabilization_k.unwrap_or(d.stabilization_k),
            stabilization_mode: spec.stabilization_mode.unwrap_or(d.stabilization_mode),
        }
    }

    fn rollout_config(&self, r: &ResolvedRollout) -> Result<RolloutConfig, histdiff_core::Error> {
        let mut cfg = RolloutConfig::new(r.context_frames, r.frames_per_window, r.scheme.build()?);
        cfg.stabilization_k = r.stabilization_k;
        cfg.stabilization_mode = r.stabilization_mode;
        cfg.scheme_escalation = r.scheme_escalation.as_ref().map(|s| s.build()).transpose()?;
        cfg.escalation = r.escalation;
        if self.model.action_vocab().is_some() {
            cfg.action_mapping = Some(ActionMapping {
                forward: FORWARD,
                left: LEFT,
                right: RIGHT,
                turn_step_deg: self.turn_step_deg,
            });
        }
        cfg.validate(self.model.max_frames())?;
        Ok(cfg)
    }

    fn poses(&self, frames: &[f32]) -> Option<Vec<Pose>> {
        (self.rendering == Rendering::PositionHeading).then(|| {
            frames
                .chunks(self.model.frame_dim())
                .map(|f| Pose {
                    x: f[0] as f64,
                    y: f[1] as f64,
                    heading_deg: (f[3] as f64).atan2(f[2] as f64).to_degrees(),
                })
                .collect()
        })
    }

    fn nested(&self, frames: &[f32]) -> Vec<Vec<f64>> {
        frames
            .chunks(self.model.frame_dim())
            .map(|f| f.iter().map(|&v| v as f64).collect())
            .collect()
    }
}

struct SessionState {
    session: RolloutSession<f32>,
    seed: u64,
    rollout: ResolvedRollout,
    config: RolloutConfig,
    transcript: Vec<histdiff_core::sampler::SteeringInput>,
}

struct Slot {
    id: String,
    model: Arc<ModelEntry>,
    busy: AtomicBool,
    state: tokio::sync::Mutex<SessionState>,
}

/// Clears the busy flag when the step finishes, however it finishes.
struct BusyGuard(Arc<Slot>);

impl Drop for BusyGuard {
    fn drop(&mut self) {
        self.0.busy.store(false, Ordering::Release);
    }
}

struct Inner {
    models: Vec<Arc<ModelEntry>>,
    sessions: RwLock<HashMap<String, Arc<Slot>>>,
    next_id: AtomicU64,
}

/// Shared service state; cheap to clone.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    /// The first model is the default for requests without `model_id`.
    pub fn new(models: Vec<ModelEntry>) -> Self {
        Self(Arc::new(Inner {
            models: models.into_iter().map(Arc::new).collect(),
            sessions: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        }))
    }

    fn model(&self, id: Option<&str>) -> Result<Arc<ModelEntry>, ApiError> {
        match id {
            None => self.0.models.first().cloned().ok_or_else(|| ApiError::not_found("no models are loaded")),
            Some(id) => self
                .0
                .models
                .iter()
                .find(|m| m.id == id)
                .cloned()
                .ok_or_else(|| ApiError::not_found(format!("unknown model {id:?}"))),
        }
    }

    fn slot(&self, id: &str) -> Result<Arc<Slot>, ApiError> {
        self.0
            .sessions
            .read()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session {id:?}")))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: ErrorCode, msg: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                version: API_VERSION,
                code,
                error: msg.into(),
                retryable: code == ErrorCode::Busy,
            },
        }
    }

    fn not_found(msg: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, ErrorCode::NotFound, msg)
    }

    fn invalid(msg: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, ErrorCode::InvalidInput, msg)
    }

    fn internal(msg: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, ErrorCode::Internal, msg)
    }
}

impl From<histdiff_core::Error> for ApiError {
    fn from(e: histdiff_core::Error) -> Self {
        use histdiff_core::Error as E;
        match e {
            E::NoiseLevelOutOfRange(_)
            | E::ShapeMismatch(_)
            | E::ActionOutOfVocabulary { .. }
            | E::NonFinite(_)
            | E::InvalidTask(_)
            | E::InvalidScheme(_)
            | E::InvalidConfig(_)
            | E::Steering(_) => ApiError::invalid(e.to_string()),
            _ => ApiError::internal(e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

/// Parses a JSON body, reporting malformed input as a versioned error.
fn parse<T: DeserializeOwned>(body: &Bytes, version: impl Fn(&T) -> Option<u32>) -> Result<T, ApiError> {
    let req: T = serde_json::from_slice(body).map_err(|e| ApiError::invalid(format!("malformed request: {e}")))?;
    match version(&req) {
        Some(v) if v != API_VERSION => Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            ErrorCode::UnsupportedVersion,
            format!("request version {v}, service speaks {API_VERSION}"),
        )),
        _ => Ok(req),
    }
}

fn ok<T: Serialize>(status: StatusCode, body: T) -> Response {
    (status, Json(body)).into_response()
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/models", get(list_models))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/step", post(step_session))
        .route("/sessions/{id}/interpolate", post(interpolate_session))
        .with_state(state)
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

async fn list_models(State(state): State<AppState>) -> Response {
    ok(
        StatusCode::OK,
        ModelsResponse {
            version: API_VERSION,
            models: state.0.models.iter().map(|m| m.info()).collect(),
        },
    )
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateSessionRequest = parse(&body, |r: &CreateSessionRequest| r.version)?;
    let entry = state.model(req.model_id.as_deref())?;
    let rollout = entry.resolve(&req.rollout);
    let config = entry.rollout_config(&rollout)?;
    let dim = entry.model.frame_dim();

    let (initial, actions) = match req.initial_frames {
        Some(frames) => {
            if frames.len() > entry.model.max_frames() * 64 {
                return Err(ApiError::invalid("initial history is too long"));
            }
            let mut flat = Vec::with_capacity(frames.len() * dim);
            for (t, f) in frames.iter().enumerate() {
                if f.len() != dim {
                    return Err(ApiError::invalid(format!("frame {t} has {} values, expected {dim}", f.len())));
                }
                flat.extend(f.iter().map(|&v| v as f32));
            }
            (flat, req.initial_actions)
        }
        None => {
            let pool = &entry.pool;
            if req.initial_actions.is_some() {
                return Err(ApiError::invalid("initial_actions requires initial_frames"));
            }
            let n = rollout.context_frames.min(pool.frames);
            let row = (req.seed % pool.batch as u64) as usize;
            let init = pool.sequence(row)[..n * dim].to_vec();
            let acts = pool.actions.as_ref().map(|a| a[row * pool.frames..row * pool.frames + n].to_vec());
            (init, acts)
        }
    };
    let actions = match (entry.model.action_vocab(), actions) {
        (None, Some(_)) => return Err(ApiError::invalid("this model takes no actions")),
        (Some(vocab), Some(a)) => {
            if let Some(&bad) = a.iter().find(|&&x| x >= vocab) {
                return Err(histdiff_core::Error::ActionOutOfVocabulary { action: bad, vocab }.into());
            }
            Some(a)
        }
        (_, a) => a,
    };
    let session = RolloutSession::new(initial, dim, actions, req.seed)?;

    let id = format!("s{:06}", state.0.next_id.fetch_add(1, Ordering::Relaxed));
    let slot = Arc::new(Slot {
        id: id.clone(),
        model: entry,
        busy: AtomicBool::new(false),
        state: tokio::sync::Mutex::new(SessionState {
            session,
            seed: req.seed,
            rollout,
            config,
            transcript: Vec::new(),
        }),
    });
    let view = {
        let st = slot.state.lock().await;
        snapshot(&slot, &st)
    };
    state.0.sessions.write().expect("session map poisoned").insert(id, slot);
    Ok(ok(StatusCode::CREATED, view))
}

fn snapshot(slot: &Slot, st: &SessionState) -> SessionView {
    let m = &slot.model;
    let frames = st.session.frames();
    SessionView {
        version: API_VERSION,
        session_id: slot.id.clone(),
        model_id: m.id.clone(),
        seed: st.seed,
        length: st.session.len(),
        dim: st.session.dim(),
        rendering: m.rendering,
        frames: m.nested(frames),
        poses: m.poses(frames),
        actions: st.session.actions().to_vec(),
        windows: st.session.windows().to_vec(),
        transcript: st.transcript.clone(),
        rollout: st.rollout.clone(),
        busy: slot.busy.load(Ordering::Acquire),
    }
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let slot = state.slot(&id)?;
    let st = slot.state.lock().await;
    Ok(ok(StatusCode::OK, snapshot(&slot, &st)))
}

async fn step_session(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let slot = state.slot(&id)?;
    let req: StepRequest = parse(&body, |r: &StepRequest| r.version)?;
    req.steering.validate()?;
    if req.steering.action.is_some() && slot.model.model.action_vocab().is_none() {
        return Err(ApiError::invalid("this model takes no actions"));
    }
    if slot
        .busy
        .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
        .is_err()
    {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            ErrorCode::Busy,
            format!("session {id} has a window in flight"),
        ));
    }
    let guard = BusyGuard(slot.clone());
    let resp = tokio::task::spawn_blocking(move || {
        let slot = &guard.0;
        let m = &slot.model;
        let mut st = slot.state.blocking_lock();
        let st = &mut *st;
        let mut steer = FixedSteering(req.steering.clone());
        let rec = st
            .session
            .step_window(&m.model, &st.config, &m.sampler, &m.schedule, &mut steer)?;
        st.transcript.push(req.steering);
        let d = st.session.dim();
        let new = &st.session.frames()[rec.start_frame * d..];
        Ok::<_, ApiError>(StepResponse {
            version: API_VERSION,
            session_id: slot.id.clone(),
            scheme: rec.scheme.clone(),
            escalated: rec.escalated,
            new_frames: m.nested(new),
            new_poses: m.poses(new),
            length: st.session.len(),
            window: rec,
        })
    })
    .await
    .map_err(|e| ApiError::internal(format!("step task failed: {e}")))??;
    Ok(ok(StatusCode::OK, resp))
}

/// RNG of an interpolation request: a function of the session seed, the
/// current length and the factor only, so repeated calls agree.
fn interpolation_rng(seed: u64, length: usize, factor: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(length as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(factor as u64).to_le_bytes());
    key[24..].copy_from_slice(b"interp\0\0");
    ChaCha8Rng::from_seed(key)
}

async fn interpolate_session(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let slot = state.slot(&id)?;
    let req: InterpolateRequest = parse(&body, |r: &InterpolateRequest| r.version)?;
    let scheme = req
        .scheme
        .clone()
        .unwrap_or(histdiff_core::guidance::SchemeConfig::Conditional)
        .build()?;
    let (frames, seed, len) = {
        let st = slot.state.lock().await;
        (st.session.frames().to_vec(), st.seed, st.session.len())
    };
    let slot2 = slot.clone();
    let out = tokio::task::spawn_blocking(move || {
        let m = &slot2.model;
        let mut rng = interpolation_rng(seed, len, req.factor);
        interpolate(
            &frames,
            m.model.frame_dim(),
            &InterpolationConfig { factor: req.factor },
            &m.model,
            &scheme,
            &m.sampler,
            &m.schedule,
            &mut rng,
        )
    })
    .await
    .map_err(|e| ApiError::internal(format!("interpolation task failed: {e}")))??;
    let m = &slot.model;
    Ok(ok(
        StatusCode::OK,
        InterpolateResponse {
            version: API_VERSION,
            session_id: slot.id.clone(),
            factor: req.factor,
            length: out.len() / m.model.frame_dim(),
            rendering: m.rendering,
            frames: m.nested(&out),
            poses: m.poses(&out),
        },
    ))
}
