//! Model selection: the analytic Gaussian denoiser or a tiny network.

use std::path::PathBuf;

use histdiff_core::model::Denoiser;
use histdiff_core::{
    Checkpoint, DenoiserOutput, GaussianDenoiser, NoiseLevelVector, NoiseSchedule, Parameterization, Scalar,
    ScheduleFamily, SequenceBatch, TinyDenoiser, TinyDenoiserConfig,
};
use serde::{Deserialize, Serialize};

use crate::dataset::ToyDataset;
use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "ScheduleConfig::default_family")]
    pub family: ScheduleFamily,
    /// Only read for `shifted-cosine`.
    #[serde(default = "ScheduleConfig::default_shift")]
    pub shift: f64,
}

impl ScheduleConfig {
    fn default_family() -> ScheduleFamily {
        ScheduleFamily::Cosine
    }
    fn default_shift() -> f64 {
        0.125
    }

    pub fn build<S: Scalar>(&self) -> Result<NoiseSchedule<S>, HarnessError> {
        Ok(NoiseSchedule::from_family(self.family, self.shift)?)
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            family: Self::default_family(),
            shift: Self::default_shift(),
        }
    }
}

/// Width and depth of a fresh tiny denoiser; shapes come from the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    #[serde(default = "Architecture::default_embed")]
    pub embed_dim: usize,
    #[serde(default = "Architecture::default_heads")]
    pub num_heads: usize,
    #[serde(default = "Architecture::default_blocks")]
    pub num_blocks: usize,
    #[serde(default = "Architecture::default_mlp")]
    pub mlp_ratio: usize,
    #[serde(default = "Architecture::default_level_features")]
    pub level_features: usize,
    #[serde(default)]
    pub zero_head: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Architecture {
    fn default_embed() -> usize {
        32
    }
    fn default_heads() -> usize {
        4
    }
    fn default_blocks() -> usize {
        2
    }
    fn default_mlp() -> usize {
        4
    }
    fn default_level_features() -> usize {
        16
    }

    pub fn for_dataset(&self, data: &ToyDataset) -> TinyDenoiserConfig {
        let mut cfg = TinyDenoiserConfig::new(data.dim(), data.frames());
        cfg.embed_dim = self.embed_dim;
        cfg.num_heads = self.num_heads;
        cfg.num_blocks = self.num_blocks;
        cfg.mlp_ratio = self.mlp_ratio;
        cfg.level_features = self.level_features;
        cfg.zero_head = self.zero_head;
        cfg.action_vocab = data.action_vocab();
        cfg.seed = self.seed;
        cfg
    }
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            embed_dim: Self::default_embed(),
            num_heads: Self::default_heads(),
            num_blocks: Self::default_blocks(),
            mlp_ratio: Self::default_mlp(),
            level_features: Self::default_level_features(),
            zero_head: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    /// Exact posterior denoiser of the dataset's Gaussian law.
    Analytic,
    Tiny {
        /// Checkpoint to load (sampling) or to fine-tune from (training).
        #[serde(default)]
        checkpoint: Option<PathBuf>,
        /// Use the EMA weights of a loaded checkpoint.
        #[serde(default = "ModelConfig::default_ema")]
        use_ema: bool,
        #[serde(default)]
        architecture: Architecture,
    },
}

impl ModelConfig {
    fn default_ema() -> bool {
        true
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Tiny {
            checkpoint: None,
            use_ema: true,
            architecture: Architecture::default(),
        }
    }
}

/// Either model behind one [`Denoiser`] face.
#[derive(Debug, Clone)]
pub enum HarnessModel<S> {
    Analytic(GaussianDenoiser<S>),
    Tiny(TinyDenoiser<S>),
}

impl<S: Scalar> HarnessModel<S> {
    /// Builds the configured model; a tiny model needs a checkpoint.
    pub fn load(cfg: &ModelConfig, data: &ToyDataset, schedule: NoiseSchedule<S>) -> Result<Self, HarnessError> {
        match cfg {
            ModelConfig::Analytic => {
                let spec = data
                    .oracle()?
                    .ok_or_else(|| HarnessError::Config("the analytic model needs a gaussian-ar1 dataset".into()))?;
                Ok(HarnessModel::Analytic(GaussianDenoiser::new(spec, schedule)))
            }
            ModelConfig::Tiny { checkpoint, use_ema, .. } => {
                let path = checkpoint
                    .as_ref()
                    .ok_or_else(|| HarnessError::MissingCheckpoint("model.checkpoint is not set".into()))?;
                if !path.exists() {
                    return Err(HarnessError::MissingCheckpoint(path.display().to_string()));
                }
                let ck = Checkpoint::<S>::load(path)?;
                Ok(HarnessModel::Tiny(tiny_from_checkpoint(&ck, *use_ema)?))
            }
        }
    }
}

pub fn tiny_from_checkpoint<S: Scalar>(ck: &Checkpoint<S>, use_ema: bool) -> Result<TinyDenoiser<S>, HarnessError> {
    Ok(if use_ema && ck.ema.is_some() {
        ck.ema_model()?
    } else {
        ck.raw_model()?
    })
}

impl<S: Scalar> Denoiser<S> for HarnessModel<S> {
    fn parameterization(&self) -> Parameterization {
        match self {
            HarnessModel::Analytic(m) => m.parameterization(),
            HarnessModel::Tiny(m) => m.parameterization(),
        }
    }

    fn frame_dim(&self) -> usize {
        match self {
            HarnessModel::Analytic(m) => m.frame_dim(),
            HarnessModel::Tiny(m) => m.frame_dim(),
        }
    }

    fn max_frames(&self) -> usize {
        match self {
            HarnessModel::Analytic(m) => m.max_frames(),
            HarnessModel::Tiny(m) => m.max_frames(),
        }
    }

    fn action_vocab(&self) -> Option<usize> {
        match self {
            HarnessModel::Analytic(m) => m.action_vocab(),
            HarnessModel::Tiny(m) => m.action_vocab(),
        }
    }

    fn denoise(
        &self,
        batch: &SequenceBatch<S>,
        levels: &[NoiseLevelVector<S>],
    ) -> histdiff_core::Result<DenoiserOutput<S>> {
        match self {
            HarnessModel::Analytic(m) => m.denoise(batch, levels),
            HarnessModel::Tiny(m) => m.denoise(batch, levels),
        }
    }
}
