//! SVG figures for the experiment drivers.

use std::path::Path;

use plotters::prelude::*;

use crate::report::MetricReport;
use crate::HarnessError;

const SIZE: (u32, u32) = (720, 480);
/// Longer series are drawn as bare lines.
const MAX_MARKERS: usize = 64;
const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn plot_err<E: std::fmt::Debug>(e: E) -> HarnessError {
    HarnessError::Plot(format!("{e:?}"))
}

/// Padded `[lo, hi]` of finite `values`; a degenerate range is widened.
fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 * lo.abs().max(1.0) };
    (lo - pad, hi + pad)
}

/// Named polylines on shared axes.
pub fn line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> Result<(), HarnessError> {
    let (x0, x1) = range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let (y0, y1) = range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(plot_err)?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = pts.iter().copied().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        if pts.len() <= MAX_MARKERS {
            chart
                .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
                .map_err(plot_err)?;
        }
    }
    if series.len() > 1 {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Sample variance and energy distance against ω, one line per scheme.
pub fn guidance_curves(report: &MetricReport, dir: &Path) -> Result<(), HarnessError> {
    let mut schemes: Vec<String> = report
        .rows
        .iter()
        .filter(|r| r.cell != "baseline")
        .map(|r| r.scheme.clone())
        .collect();
    schemes.dedup();
    let curve = |f: fn(&crate::report::MetricRow) -> f64| -> Vec<(String, Vec<(f64, f64)>)> {
        schemes
            .iter()
            .map(|s| {
                let pts = report
                    .rows
                    .iter()
                    .filter(|r| r.cell != "baseline" && &r.scheme == s)
                    .map(|r| (r.omega, f(r)))
                    .collect();
                (s.clone(), pts)
            })
            .collect()
    };
    line_chart(
        &dir.join("guidance_variance.svg"),
        "Sample variance vs guidance scale",
        "omega",
        "sample variance",
        &curve(|r| r.sample_variance),
    )?;
    line_chart(
        &dir.join("guidance_error.svg"),
        "Energy distance to the exact conditional vs guidance scale",
        "omega",
        "energy distance",
        &curve(|r| r.energy_distance),
    )
}

/// Raw and smoothed training loss.
pub fn loss_curve(curve: &[histdiff_core::training::CurvePoint], path: &Path) -> Result<(), HarnessError> {
    let raw = curve.iter().map(|p| (p.step as f64, p.loss)).collect();
    let ema = curve.iter().map(|p| (p.step as f64, p.ema_loss)).collect();
    line_chart(
        path,
        "Training loss",
        "step",
        "loss",
        &[("loss".to_string(), raw), ("ema loss".to_string(), ema)],
    )
}

/// Bars `(label, value, threshold)`; a threshold draws a red tick.
pub fn bar_chart(
    path: &Path,
    title: &str,
    y_label: &str,
    bars: &[(String, f64, Option<f64>)],
) -> Result<(), HarnessError> {
    let (_, y1) = range(bars.iter().flat_map(|b| [b.1, b.2.unwrap_or(0.0), 0.0]));
    let n = bars.len().max(1);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d((0..n).into_segmented(), 0.0..y1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n)
        .x_label_formatter(&|v| match v {
            SegmentValue::CenterOf(i) => bars.get(*i).map(|b| b.0.clone()).unwrap_or_default(),
            _ => String::new(),
        })
        .y_desc(y_label)
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(bars.iter().enumerate().map(|(i, b)| {
            let mut bar = Rectangle::new(
                [(SegmentValue::Exact(i), 0.0), (SegmentValue::Exact(i + 1), b.1.max(0.0))],
                PALETTE[0].filled(),
            );
            bar.set_margin(0, 0, 6, 6);
            bar
        }))
        .map_err(plot_err)?;
    chart
        .draw_series(bars.iter().enumerate().filter_map(|(i, b)| {
            b.2.map(|t| {
                PathElement::new(
                    vec![(SegmentValue::Exact(i), t), (SegmentValue::Exact(i + 1), t)],
                    PALETTE[3].stroke_width(2),
                )
            })
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Per-task energy distance with its acceptance threshold.
pub fn flexibility_bars(
    report: &MetricReport,
    tau: &std::collections::BTreeMap<String, f64>,
    path: &Path,
) -> Result<(), HarnessError> {
    let bars: Vec<(String, f64, Option<f64>)> = report
        .rows
        .iter()
        .map(|r| (r.cell.clone(), r.energy_distance, tau.get(&r.cell).copied()))
        .collect();
    bar_chart(path, "Conditional error per task", "energy distance", &bars)
}

/// Frame norm against frame index, one line per rollout.
pub fn rollout_norms(runs: &[crate::stability::StabilityRun], bound: f64, path: &Path) -> Result<(), HarnessError> {
    let mut series: Vec<(String, Vec<(f64, f64)>)> = runs
        .iter()
        .map(|r| {
            let pts = r.norms.iter().enumerate().map(|(i, &n)| (i as f64, n)).collect();
            (format!("seed {}", r.seed), pts)
        })
        .collect();
    let frames = runs.iter().map(|r| r.norms.len()).max().unwrap_or(1);
    series.push(("bound".into(), vec![(0.0, bound), (frames as f64, bound)]));
    line_chart(path, "Frame norms over the rollout", "frame", "norm", &series)
}
