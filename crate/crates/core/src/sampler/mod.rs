//! Reverse-process sampling, rollout and interpolation.

pub mod interpolate;
pub mod rollout;
pub mod sample;
pub mod step;

pub use interpolate::{interpolate, InterpolationConfig};
pub use rollout::{
    rollout, ActionMapping, EscalationPredicate, FixedSteering, RolloutConfig, RolloutSession, SteeringInput,
    SteeringProvider, WindowRecord,
};
pub use sample::{assemble, check_model, sample};
pub use step::{reverse_step, SamplerConfig, SamplerKind};
