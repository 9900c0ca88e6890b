//! Guidance-scale sweeps: vanilla and fractional history guidance over ω.

use histdiff_core::model::Denoiser;
use histdiff_core::oracle::GaussianSeqSpec;
use histdiff_core::{GuidanceScheme, NoiseSchedule, SamplerConfig, Scalar};
use serde::{Deserialize, Serialize};

use crate::eval::{evaluate_conditional, EvalConfig};
use crate::report::{MetricReport, MetricRow};
use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "SweepConfig::default_omegas")]
    pub omegas: Vec<f64>,
    /// Fractional rows at this masking level; `None` skips them.
    #[serde(default = "SweepConfig::default_k_h")]
    pub fractional_k_h: Option<f64>,
    /// Conditioning frames of the swept task.
    #[serde(default = "SweepConfig::default_history")]
    pub history: Vec<usize>,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl SweepConfig {
    fn default_omegas() -> Vec<f64> {
        vec![1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0]
    }
    fn default_k_h() -> Option<f64> {
        Some(0.8)
    }
    fn default_history() -> Vec<usize> {
        vec![1, 2]
    }

    fn validate(&self) -> Result<(), HarnessError> {
        if self.omegas.iter().any(|w| !w.is_finite()) {
            return Err(HarnessError::Config("sweep omegas must be finite".into()));
        }
        Ok(())
    }
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            omegas: Self::default_omegas(),
            fractional_k_h: Self::default_k_h(),
            history: Self::default_history(),
            eval: EvalConfig::default(),
        }
    }
}

pub fn cell_id(scheme: &str, omega: f64, k_h: f64) -> String {
    format!("{scheme}/w={omega:.2}/kh={k_h:.2}")
}

/// Rows: one unguided `baseline` (conditional sampling), then one per
/// `(scheme, ω)`. Every cell uses the same histories and sampler noise.
pub fn run_sweep<S: Scalar, M: Denoiser<S> + ?Sized>(
    model: &M,
    spec: &GaussianSeqSpec,
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule<S>,
    cfg: &SweepConfig,
) -> Result<MetricReport, HarnessError> {
    cfg.validate()?;
    let mut cells: Vec<(String, GuidanceScheme, f64, f64)> = vec![("baseline".into(), GuidanceScheme::conditional(), 1.0, 0.0)];
    for &w in &cfg.omegas {
        cells.push((cell_id("vanilla", w, 0.0), GuidanceScheme::vanilla(w), w, 0.0));
        if let Some(k) = cfg.fractional_k_h {
            cells.push((cell_id("fractional", w, k), GuidanceScheme::fractional(w, k)?, w, k));
        }
    }
    let mut rows = Vec::with_capacity(cells.len());
    for (cell, scheme, w, k) in cells {
        let st = evaluate_conditional(model, spec, &cfg.history, &scheme, sampler, schedule, &cfg.eval)?;
        let mut row = MetricRow::new(cell, scheme.name.clone(), w, k);
        row.mean_error = st.mean_error;
        row.cov_error = st.cov_error;
        row.energy_distance = st.energy_distance;
        row.sample_variance = st.sample_variance;
        rows.push(row);
    }
    Ok(MetricReport { rows })
}

/// `(ω, sample variance)` of the rows of one scheme, in sweep order.
pub fn variance_curve(report: &MetricReport, scheme_prefix: &str) -> Vec<(f64, f64)> {
    report
        .rows
        .iter()
        .filter(|r| r.cell.starts_with(scheme_prefix))
        .map(|r| (r.omega, r.sample_variance))
        .collect()
}
