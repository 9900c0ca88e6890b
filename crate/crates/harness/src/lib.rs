//! Experiment harness: toy datasets, oracle-referenced metrics, sweeps,
//! flexibility / OOD / rollout-stability suites, configuration and report
//! emission (CSV + SVG).

pub mod config;
pub mod dataset;
pub mod eval;
pub mod experiment;
pub mod flexibility;
pub mod metrics;
pub mod model;
pub mod ood;
pub mod plot;
pub mod report;
pub mod stability;
pub mod sweep;
pub mod verify;

pub use config::ExperimentConfig;
pub use dataset::{DatasetKind, NavigationParams, ToyDataset};
pub use model::{HarnessModel, ModelConfig, ScheduleConfig};
pub use report::{MetricReport, MetricRow};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] histdiff_core::Error),
    #[error("configuration: {0}")]
    Config(String),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("metric: {0}")]
    Metric(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("plot: {0}")]
    Plot(String),
}

pub type HarnessModel32 = HarnessModel<f32>;
pub type HarnessModel64 = HarnessModel<f64>;
