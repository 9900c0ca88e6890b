//! One model, many conditioning tasks: history lengths 1–6 and interpolation.

use std::collections::BTreeMap;

use histdiff_core::model::Denoiser;
use histdiff_core::oracle::GaussianSeqSpec;
use histdiff_core::{GuidanceScheme, NoiseSchedule, SamplerConfig, Scalar};
use serde::{Deserialize, Serialize};

use crate::eval::{evaluate_conditional, EvalConfig};
use crate::report::{MetricReport, MetricRow};
use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlexTask {
    pub name: String,
    pub history: Vec<usize>,
}

impl FlexTask {
    pub fn new(name: impl Into<String>, history: Vec<usize>) -> Self {
        Self { name: name.into(), history }
    }
}

/// Prediction from the first `h` frames for `h = 1..=6`, plus four
/// interpolation tasks; needs `frames >= 8`.
pub fn default_tasks(frames: usize) -> Result<Vec<FlexTask>, HarnessError> {
    if frames < 8 {
        return Err(HarnessError::Config(format!("the flexibility tasks need T >= 8, got {frames}")));
    }
    let last = frames - 1;
    let mut tasks: Vec<FlexTask> = (1..=6).map(|h| FlexTask::new(format!("history-{h}"), (0..h).collect())).collect();
    tasks.push(FlexTask::new("interp-ends", vec![0, last]));
    tasks.push(FlexTask::new("interp-three", vec![0, last / 2, last]));
    tasks.push(FlexTask::new("interp-even", (0..frames).step_by(2).collect()));
    tasks.push(FlexTask::new("interp-pairs", vec![0, 1, last - 1, last]));
    Ok(tasks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlexibilityConfig {
    #[serde(default)]
    pub eval: EvalConfig,
    /// `tau = tolerance_factor × analytic-model error`, per task.
    #[serde(default = "FlexibilityConfig::default_factor")]
    pub tolerance_factor: f64,
    /// Defaults to [`default_tasks`].
    #[serde(default)]
    pub tasks: Option<Vec<FlexTask>>,
}

impl FlexibilityConfig {
    fn default_factor() -> f64 {
        3.0
    }

    pub fn tasks(&self, frames: usize) -> Result<Vec<FlexTask>, HarnessError> {
        match &self.tasks {
            Some(t) => Ok(t.clone()),
            None => default_tasks(frames),
        }
    }
}

impl Default for FlexibilityConfig {
    fn default() -> Self {
        Self {
            eval: EvalConfig::default(),
            tolerance_factor: Self::default_factor(),
            tasks: None,
        }
    }
}

/// Conditional sampling (no guidance) on every task; one row per task with
/// `cell` = task name.
pub fn run_flexibility_suite<S: Scalar, M: Denoiser<S> + ?Sized>(
    model: &M,
    spec: &GaussianSeqSpec,
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule<S>,
    cfg: &FlexibilityConfig,
) -> Result<MetricReport, HarnessError> {
    let scheme = GuidanceScheme::conditional();
    let mut rows = Vec::new();
    for task in cfg.tasks(spec.frames())? {
        let st = evaluate_conditional(model, spec, &task.history, &scheme, sampler, schedule, &cfg.eval)?;
        let mut row = MetricRow::new(task.name.clone(), scheme.name.clone(), 1.0, 0.0);
        row.mean_error = st.mean_error;
        row.cov_error = st.cov_error;
        row.energy_distance = st.energy_distance;
        row.sample_variance = st.sample_variance;
        rows.push(row);
    }
    Ok(MetricReport { rows })
}

/// Per-task thresholds on energy distance from an analytic-model report.
pub fn thresholds(analytic: &MetricReport, factor: f64) -> BTreeMap<String, f64> {
    analytic.rows.iter().map(|r| (r.cell.clone(), factor * r.energy_distance)).collect()
}

/// Tasks whose energy distance is not below its threshold.
pub fn failures(report: &MetricReport, tau: &BTreeMap<String, f64>) -> Vec<String> {
    report
        .rows
        .iter()
        .filter(|r| tau.get(&r.cell).map_or(true, |&t| !(r.energy_distance < t)))
        .map(|r| r.cell.clone())
        .collect()
}

pub fn mean_energy(report: &MetricReport) -> f64 {
    report.rows.iter().map(|r| r.energy_distance).sum::<f64>() / report.rows.len().max(1) as f64
}

/// Mean energy distance of the history-length tasks other than `on_task`,
/// divided by the energy distance of `on_task`.
pub fn off_task_ratio(report: &MetricReport, on_task: &str) -> Option<f64> {
    let on = report.row(on_task)?.energy_distance;
    let off: Vec<f64> = report
        .rows
        .iter()
        .filter(|r| r.cell.starts_with("history-") && r.cell != on_task)
        .map(|r| r.energy_distance)
        .collect();
    if off.is_empty() || on <= 0.0 {
        return None;
    }
    Some(off.iter().sum::<f64>() / off.len() as f64 / on)
}
