//! Exact ground truth: Gaussian conditionals and scores, path ELBOs,
//! frequency-domain attenuation and MLE score combination.

pub mod elbo;
pub mod fourier;
pub mod gaussian;
pub mod mle;

pub use elbo::{elbo, elbo_with, ElboReport, PathKind, PathSpec, ReverseVariance};
pub use fourier::{fourier_attenuation, FourierSpec};
pub use gaussian::{lemma_conditional, Conditional, GaussianSeqSpec};
pub use mle::{mle_combine, partition_example_mse, PartitionMse, ScoreEnsembleSpec};
