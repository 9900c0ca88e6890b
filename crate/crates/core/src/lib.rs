//! History-guided sequence diffusion.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`):
//! noise schedules and parameterizations, sequence denoisers (an exact
//! Gaussian posterior denoiser and a tiny attention network), the
//! per-frame-noise training objectives, history-guidance composition,
//! reverse-process samplers with sliding-window rollout, and closed-form
//! Gaussian oracles used to verify all of the above.

pub mod batch;
pub mod error;
pub mod guidance;
pub mod model;
pub mod oracle;
pub mod param;
pub mod sampler;
pub mod scalar;
pub mod schedule;
pub mod tensorfile;
pub mod training;
pub mod weighting;

pub use batch::{DenoiserOutput, NoiseLevelVector, SequenceBatch};
pub use error::{Error, Result};
pub use guidance::{GuidanceScheme, GuidanceTerm, TaskSpec};
pub use model::{Checkpoint, Denoiser, GaussianDenoiser, TinyDenoiser, TinyDenoiserConfig};
pub use param::{convert_param, forward_diffuse, Parameterization};
pub use sampler::{SamplerConfig, SamplerKind};
pub use scalar::Scalar;
pub use schedule::{DiscreteNoiseGrid, NoiseLevel, NoiseSchedule, ScheduleFamily};
pub use training::{Objective, TrainConfig};
pub use weighting::LossWeighting;

pub type Schedule32 = NoiseSchedule<f32>;
pub type Schedule64 = NoiseSchedule<f64>;
pub type Batch32 = SequenceBatch<f32>;
pub type Batch64 = SequenceBatch<f64>;
pub type TinyDenoiser32 = TinyDenoiser<f32>;
pub type TinyDenoiser64 = TinyDenoiser<f64>;
pub type GaussianDenoiser32 = GaussianDenoiser<f32>;
pub type GaussianDenoiser64 = GaussianDenoiser<f64>;
pub type Checkpoint32 = Checkpoint<f32>;
pub type Checkpoint64 = Checkpoint<f64>;
pub type Task32 = TaskSpec<f32>;
pub type Task64 = TaskSpec<f64>;
