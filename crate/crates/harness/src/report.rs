//! Metric tables and their CSV forms.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::HarnessError;

/// One evaluated cell. `cell` identifies the task / configuration the row
/// belongs to; rows are merged and sorted by it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub cell: String,
    pub scheme: String,
    pub omega: f64,
    pub k_h: f64,
    pub mean_error: f64,
    pub cov_error: f64,
    pub energy_distance: f64,
    pub sample_variance: f64,
    /// First window whose frame norm left the stability bound; empty when
    /// not a rollout row or when the rollout stayed bounded.
    pub rollout_divergence_step: Option<usize>,
}

pub const METRIC_COLUMNS: [&str; 9] = [
    "cell",
    "scheme",
    "omega",
    "k_h",
    "mean_error",
    "cov_error",
    "energy_distance",
    "sample_variance",
    "rollout_divergence_step",
];

impl MetricRow {
    pub fn new(cell: impl Into<String>, scheme: impl Into<String>, omega: f64, k_h: f64) -> Self {
        Self {
            cell: cell.into(),
            scheme: scheme.into(),
            omega,
            k_h,
            mean_error: 0.0,
            cov_error: 0.0,
            energy_distance: 0.0,
            sample_variance: 0.0,
            rollout_divergence_step: None,
        }
    }

    fn numbers(&self) -> [f64; 6] {
        [self.omega, self.k_h, self.mean_error, self.cov_error, self.energy_distance, self.sample_variance]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    /// Deterministic merge: rows keyed by `cell`, stable within a cell.
    pub fn merge(parts: impl IntoIterator<Item = MetricReport>) -> Self {
        let mut rows: Vec<MetricRow> = parts.into_iter().flat_map(|p| p.rows).collect();
        rows.sort_by(|a, b| a.cell.cmp(&b.cell));
        Self { rows }
    }

    pub fn check_finite(&self) -> Result<(), HarnessError> {
        for r in &self.rows {
            if r.numbers().iter().any(|v| !v.is_finite()) {
                return Err(HarnessError::Metric(format!("non-finite entry in cell {}", r.cell)));
            }
        }
        Ok(())
    }

    pub fn row(&self, cell: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.cell == cell)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), HarnessError> {
        self.check_finite()?;
        let mut out = csv::Writer::from_writer(w);
        out.write_record(METRIC_COLUMNS)?;
        for r in &self.rows {
            let n = r.numbers();
            let mut rec = vec![r.cell.clone(), r.scheme.clone()];
            rec.extend(n.iter().map(|v| v.to_string()));
            rec.push(r.rollout_divergence_step.map(|s| s.to_string()).unwrap_or_default());
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), HarnessError> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self, HarnessError> {
        let mut rd = csv::Reader::from_reader(r);
        let header: Vec<String> = rd.headers()?.iter().map(String::from).collect();
        if header != METRIC_COLUMNS {
            return Err(HarnessError::Metric(format!("unexpected metric header {header:?}")));
        }
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64, HarnessError> {
                rec[i].parse().map_err(|e| HarnessError::Metric(format!("column {}: {e}", METRIC_COLUMNS[i])))
            };
            rows.push(MetricRow {
                cell: rec[0].to_string(),
                scheme: rec[1].to_string(),
                omega: num(2)?,
                k_h: num(3)?,
                mean_error: num(4)?,
                cov_error: num(5)?,
                energy_distance: num(6)?,
                sample_variance: num(7)?,
                rollout_divergence_step: if rec[8].is_empty() {
                    None
                } else {
                    Some(rec[8].parse().map_err(|e| HarnessError::Metric(format!("divergence step: {e}")))?)
                },
            });
        }
        Ok(Self { rows })
    }
}

/// Training curve CSV: `step,loss,ema_loss`.
pub fn write_loss_csv<W: Write>(curve: &[histdiff_core::training::CurvePoint], w: W) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["step", "loss", "ema_loss"])?;
    for p in curve {
        out.write_record([p.step.to_string(), p.loss.to_string(), p.ema_loss.to_string()])?;
    }
    out.flush()?;
    Ok(())
}
