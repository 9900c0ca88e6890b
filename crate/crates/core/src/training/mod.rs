//! Training objectives, loss and loop.

pub mod loss;
pub mod objective;
pub mod optim;
pub mod train;

pub use loss::{loss, loss_and_grad, loss_from_prediction, prepare_inputs, LossInputs};
pub use objective::{LevelDraw, Objective};
pub use optim::{clip_global_norm, warmup_lr, AdamW};
pub use train::{train, CurvePoint, TrainConfig, TrainOutcome};
