//! Denoiser interface and implementations.

pub mod checkpoint;
pub mod gaussian;
pub mod tiny;

use crate::batch::{DenoiserOutput, NoiseLevelVector, SequenceBatch};
use crate::error::{Error, Result};
use crate::param::Parameterization;
use crate::scalar::Scalar;

pub use checkpoint::Checkpoint;
pub use gaussian::GaussianDenoiser;
pub use tiny::{TinyDenoiser, TinyDenoiserConfig};

/// A sequence denoiser: predicts every frame from a batch of noised
/// sequences and their per-frame noise levels.
pub trait Denoiser<S: Scalar>: Send + Sync {
    fn parameterization(&self) -> Parameterization;

    fn frame_dim(&self) -> usize;

    fn max_frames(&self) -> usize;

    /// Number of real action labels; the null token is `vocab`.
    fn action_vocab(&self) -> Option<usize> {
        None
    }

    /// `levels[b]` holds the per-frame levels of sequence `b`.
    fn denoise(&self, batch: &SequenceBatch<S>, levels: &[NoiseLevelVector<S>]) -> Result<DenoiserOutput<S>>;
}

impl<S: Scalar, M: Denoiser<S> + ?Sized> Denoiser<S> for &M {
    fn parameterization(&self) -> Parameterization {
        (**self).parameterization()
    }
    fn frame_dim(&self) -> usize {
        (**self).frame_dim()
    }
    fn max_frames(&self) -> usize {
        (**self).max_frames()
    }
    fn action_vocab(&self) -> Option<usize> {
        (**self).action_vocab()
    }
    fn denoise(&self, batch: &SequenceBatch<S>, levels: &[NoiseLevelVector<S>]) -> Result<DenoiserOutput<S>> {
        (**self).denoise(batch, levels)
    }
}

impl<S: Scalar, M: Denoiser<S> + ?Sized> Denoiser<S> for std::sync::Arc<M> {
    fn parameterization(&self) -> Parameterization {
        (**self).parameterization()
    }
    fn frame_dim(&self) -> usize {
        (**self).frame_dim()
    }
    fn max_frames(&self) -> usize {
        (**self).max_frames()
    }
    fn action_vocab(&self) -> Option<usize> {
        (**self).action_vocab()
    }
    fn denoise(&self, batch: &SequenceBatch<S>, levels: &[NoiseLevelVector<S>]) -> Result<DenoiserOutput<S>> {
        (**self).denoise(batch, levels)
    }
}

/// Shared precondition checks for [`Denoiser::denoise`].
pub fn check_inputs<S: Scalar, M: Denoiser<S> + ?Sized>(
    model: &M,
    batch: &SequenceBatch<S>,
    levels: &[NoiseLevelVector<S>],
) -> Result<()> {
    if batch.dim != model.frame_dim() {
        return Err(Error::ShapeMismatch(format!(
            "model expects D = {}, batch has D = {}",
            model.frame_dim(),
            batch.dim
        )));
    }
    if batch.frames > model.max_frames() {
        return Err(Error::ShapeMismatch(format!(
            "model supports at most {} frames, batch has {}",
            model.max_frames(),
            batch.frames
        )));
    }
    if levels.len() != batch.batch || levels.iter().any(|l| l.len() != batch.frames) {
        return Err(Error::ShapeMismatch(format!(
            "need {} level vectors of length {}",
            batch.batch, batch.frames
        )));
    }
    if let Some(actions) = &batch.actions {
        let vocab = model.action_vocab().unwrap_or(0);
        if let Some(&bad) = actions.iter().find(|&&a| a > vocab) {
            return Err(Error::ActionOutOfVocabulary { action: bad, vocab });
        }
    }
    Ok(())
}
