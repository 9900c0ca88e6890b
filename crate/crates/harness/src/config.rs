//! The engine-wide experiment file: one TOML document fully specifies an
//! experiment. Every field and default is listed in `docs/config.md`.

use std::path::{Path, PathBuf};

use histdiff_core::guidance::SchemeConfig;
use histdiff_core::{Objective, SamplerConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::dataset::ToyDataset;
use crate::flexibility::FlexibilityConfig;
use crate::model::{ModelConfig, ScheduleConfig};
use crate::ood::OodConfig;
use crate::stability::StabilityConfig;
use crate::sweep::SweepConfig;
use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// `sample`: draws from one conditioning task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    /// Conditioning frame indices; values come from dataset row `history_row`.
    #[serde(default = "SampleSection::default_history")]
    pub history: Vec<usize>,
    #[serde(default)]
    pub history_row: usize,
    #[serde(default = "SampleSection::default_num")]
    pub num_samples: usize,
    #[serde(default = "SampleSection::default_scheme")]
    pub scheme: SchemeConfig,
}

impl SampleSection {
    fn default_history() -> Vec<usize> {
        vec![0]
    }
    fn default_num() -> usize {
        16
    }
    fn default_scheme() -> SchemeConfig {
        SchemeConfig::Conditional
    }
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            history: Self::default_history(),
            history_row: 0,
            num_samples: Self::default_num(),
            scheme: Self::default_scheme(),
        }
    }
}

/// `interpolate`: densify every `factor`-th frame of dataset row `row`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpolateSection {
    #[serde(default = "InterpolateSection::default_factor")]
    pub factor: usize,
    #[serde(default)]
    pub row: usize,
    #[serde(default = "InterpolateSection::default_scheme")]
    pub scheme: SchemeConfig,
}

impl InterpolateSection {
    fn default_factor() -> usize {
        2
    }
    fn default_scheme() -> SchemeConfig {
        SchemeConfig::Conditional
    }
}

impl Default for InterpolateSection {
    fn default() -> Self {
        Self {
            factor: Self::default_factor(),
            row: 0,
            scheme: Self::default_scheme(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeSection {
    #[serde(default = "ServeSection::default_port")]
    pub port: u16,
    /// Model id advertised by `GET /models`.
    #[serde(default = "ServeSection::default_model_id")]
    pub model_id: String,
}

impl ServeSection {
    fn default_port() -> u16 {
        8080
    }
    fn default_model_id() -> String {
        "default".into()
    }
}

impl Default for ServeSection {
    fn default() -> Self {
        Self {
            port: Self::default_port(),
            model_id: Self::default_model_id(),
        }
    }
}

fn default_train() -> TrainConfig {
    let mut t = TrainConfig::new(2000, 64, 3e-3);
    t.warmup_steps = 100;
    t
}

fn default_dataset() -> ToyDataset {
    ToyDataset::gaussian_ar1(0.8, 1, 8, 4096, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Overrides the training, sampler and evaluation seeds when set (the
    /// CLI's `--seed` sets it too); the dataset keeps its own seed.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default = "default_dataset")]
    pub dataset: ToyDataset,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "ExperimentConfig::default_objective")]
    pub objective: Objective,
    #[serde(default = "default_train")]
    pub train: TrainConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default)]
    pub interpolate: InterpolateSection,
    #[serde(default)]
    pub rollout: StabilityConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub flexibility: Option<FlexibilityConfig>,
    #[serde(default)]
    pub ood: Option<OodConfig>,
    #[serde(default)]
    pub serve: ServeSection,
}

impl ExperimentConfig {
    fn default_objective() -> Objective {
        Objective::Dfot
    }

    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let mut cfg: Self = toml::from_str(text)?;
        if let Some(seed) = cfg.seed {
            cfg.apply_seed(seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; relative checkpoint paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let mut cfg = Self::from_toml_str(&std::fs::read_to_string(path)?)?;
        if let ModelConfig::Tiny {
            checkpoint: Some(ck), ..
        } = &mut cfg.model
        {
            if ck.is_relative() {
                let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
                *ck = base.join(&*ck);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String, HarnessError> {
        toml::to_string_pretty(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// One seed for every stochastic stage except dataset generation.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.train.seed = seed;
        self.sampler.seed = seed;
        if let Some(s) = &mut self.sweep {
            s.eval.seed = seed;
        }
        if let Some(f) = &mut self.flexibility {
            f.eval.seed = seed;
        }
        if let Some(o) = &mut self.ood {
            o.seed = seed;
        }
    }

    pub fn set_checkpoint(&mut self, path: PathBuf) {
        if let ModelConfig::Tiny { checkpoint, .. } = &mut self.model {
            *checkpoint = Some(path);
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.dataset.validate()?;
        self.schedule.build::<f64>()?;
        self.objective.validate(self.dataset.frames())?;
        self.train.validate()?;
        self.sampler.validate()?;
        if self.sample.num_samples == 0 {
            return Err(HarnessError::Config("sample.num_samples must be positive".into()));
        }
        if self.sample.history.iter().any(|&t| t >= self.dataset.frames()) {
            return Err(HarnessError::Config("sample.history indexes past the sequence".into()));
        }
        if self.sample.history_row >= self.dataset.size || self.interpolate.row >= self.dataset.size {
            return Err(HarnessError::Config("dataset row out of range".into()));
        }
        if self.interpolate.factor < 2 {
            return Err(HarnessError::Config("interpolate.factor must be >= 2".into()));
        }
        self.sample.scheme.build()?;
        self.interpolate.scheme.build()?;
        self.rollout.rollout_config()?;
        Ok(())
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: None,
            precision: Precision::default(),
            dataset: default_dataset(),
            schedule: ScheduleConfig::default(),
            model: ModelConfig::default(),
            objective: Self::default_objective(),
            train: default_train(),
            sampler: SamplerConfig::default(),
            sample: SampleSection::default(),
            interpolate: InterpolateSection::default(),
            rollout: StabilityConfig::default(),
            sweep: None,
            flexibility: None,
            ood: None,
            serve: ServeSection::default(),
        }
    }
}
