//! Experiment drivers behind the CLI subcommands. Each reads one
//! [`ExperimentConfig`], writes its artifacts under `out_dir` and returns
//! the paths it wrote.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use histdiff_core::model::Denoiser;
use histdiff_core::sampler::{interpolate, sample, InterpolationConfig};
use histdiff_core::tensorfile::Tensor;
use histdiff_core::training::train;
use histdiff_core::{Checkpoint, Scalar, SequenceBatch, TaskSpec, TinyDenoiser};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, Precision};
use crate::dataset::{data_scale, DatasetKind};
use crate::eval::gaussian_draws;
use crate::flexibility::{run_flexibility_suite, thresholds};
use crate::metrics::{cov_error, energy_distance, mean_cov, mean_error, rms, sample_variance};
use crate::model::{HarnessModel, ModelConfig};
use crate::ood::run_ood_suite;
use crate::report::{write_loss_csv, MetricReport, MetricRow};
use crate::stability::{run_rollout_stability, stability_report, write_stability_csv};
use crate::sweep::run_sweep;
use crate::verify::{oracle_verify, Check};
use crate::{plot, HarnessError};

macro_rules! by_precision {
    ($cfg:expr, $f:ident($($arg:expr),*)) => {
        match $cfg.precision {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn create(path: &Path) -> Result<BufWriter<File>, HarnessError> {
    Ok(BufWriter::new(File::create(path)?))
}

fn prepare(out_dir: &Path, cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml_string()?)?;
    Ok(vec![path])
}

/// `samples × frames × dim` tensor plus a long-form CSV `sample,frame,d0,..`.
fn save_sequences<S: Scalar>(
    stem: &Path,
    data: &[S],
    frames: usize,
    dim: usize,
    written: &mut Vec<PathBuf>,
) -> Result<(), HarnessError> {
    let n = data.len() / (frames * dim).max(1);
    let tensor_path = stem.with_extension("tensor");
    Tensor::new(vec![n, frames, dim], data.to_vec())?.save(&tensor_path)?;
    let csv_path = stem.with_extension("csv");
    let mut w = csv::Writer::from_writer(create(&csv_path)?);
    let mut header = vec!["sample".to_string(), "frame".to_string()];
    header.extend((0..dim).map(|j| format!("d{j}")));
    w.write_record(&header)?;
    for (i, frame) in data.chunks(dim).enumerate() {
        let mut rec = vec![(i / frames).to_string(), (i % frames).to_string()];
        rec.extend(frame.iter().map(|v| v.f64().to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    written.push(tensor_path);
    written.push(csv_path);
    Ok(())
}

// ---- train ----

pub fn run_train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    by_precision!(cfg, train_impl(cfg, out_dir))
}

fn train_impl<S: Scalar>(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let ModelConfig::Tiny {
        checkpoint,
        architecture,
        ..
    } = &cfg.model
    else {
        return Err(HarnessError::Config("training needs model.kind = \"tiny\"".into()));
    };
    let mut written = prepare(out_dir, cfg)?;
    let data = cfg.dataset.generate::<S>()?;
    let schedule = cfg.schedule.build::<S>()?;
    let init = match checkpoint {
        Some(path) if path.exists() => Checkpoint::<S>::load(path)?,
        Some(path) => return Err(HarnessError::MissingCheckpoint(path.display().to_string())),
        None => {
            let model = TinyDenoiser::<S>::new(architecture.for_dataset(&cfg.dataset))?;
            let extra = serde_json::json!({
                "objective": cfg.objective,
                "dataset": cfg.dataset,
                "schedule": cfg.schedule,
            });
            Checkpoint::from_model(&model, extra)?
        }
    };
    let out = train(init, &data, &cfg.objective, &schedule, &cfg.train)?;
    let ck_path = out_dir.join("checkpoint.bin");
    out.checkpoint.save(&ck_path)?;
    written.push(ck_path);
    let loss_path = out_dir.join("loss.csv");
    write_loss_csv(&out.curve, create(&loss_path)?)?;
    written.push(loss_path);
    let svg = out_dir.join("loss.svg");
    plot::loss_curve(&out.curve, &svg)?;
    written.push(svg);
    Ok(written)
}

// ---- sample ----

pub fn run_sample(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    by_precision!(cfg, sample_impl(cfg, out_dir))
}

/// History frames (and all actions) of dataset row `row`.
fn task_from_row<S: Scalar>(
    data: &SequenceBatch<S>,
    row: usize,
    history: &[usize],
) -> Result<TaskSpec<S>, HarnessError> {
    let values: Vec<S> = history.iter().flat_map(|&t| data.frame(row, t).to_vec()).collect();
    let mut task = TaskSpec::new(data.frames, data.dim, history.to_vec(), values)?;
    if let Some(a) = &data.actions {
        task = task.with_actions(a[row * data.frames..(row + 1) * data.frames].to_vec())?;
    }
    Ok(task)
}

fn sample_impl<S: Scalar>(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let mut written = prepare(out_dir, cfg)?;
    let data = cfg.dataset.generate::<S>()?;
    let schedule = cfg.schedule.build::<S>()?;
    let model = HarnessModel::load(&cfg.model, &cfg.dataset, schedule)?;
    let s = &cfg.sample;
    let task = task_from_row(&data, s.history_row, &s.history)?;
    let scheme = s.scheme.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sampler.seed);
    let out = sample(&task, &scheme, &model, &cfg.sampler, &schedule, s.num_samples, &mut rng)?;
    let g = task.generated().len() * task.dim;
    let mut full = Vec::with_capacity(s.num_samples * data.frames * data.dim);
    for x_g in out.data.chunks(g) {
        full.extend(histdiff_core::sampler::assemble(&task, x_g)?);
    }
    save_sequences(&out_dir.join("samples"), &full, data.frames, data.dim, &mut written)?;

    if let Some(spec) = cfg.dataset.oracle()? {
        let x_h: Vec<f64> = task.history_values.iter().map(|v| v.f64()).collect();
        let cond = spec.conditional(&s.history, &x_h)?;
        let got: Vec<f64> = out.data.iter().map(|v| v.f64()).collect();
        let mut row = MetricRow::new("sample", scheme.name.clone(), 1.0, 0.0);
        row.sample_variance = sample_variance(&got, g);
        if s.num_samples >= 2 {
            let (m, c) = mean_cov(&got, g);
            row.mean_error = mean_error(&m, &cond.mean);
            row.cov_error = cov_error(&c, &cond.cov);
            let mut oracle_rng = ChaCha8Rng::seed_from_u64(cfg.sampler.seed ^ 0x0c1e);
            let exact = gaussian_draws(&cond.mean, &cond.cov, s.num_samples, &mut oracle_rng)?;
            row.energy_distance = energy_distance(&got, &exact, g);
        }
        let path = out_dir.join("metrics.csv");
        MetricReport { rows: vec![row] }.save_csv(&path)?;
        written.push(path);
    }
    Ok(written)
}

// ---- rollout ----

pub fn run_rollout(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    by_precision!(cfg, rollout_impl(cfg, out_dir))
}

fn rollout_impl<S: Scalar>(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let mut written = prepare(out_dir, cfg)?;
    let data = cfg.dataset.generate::<S>()?;
    let schedule = cfg.schedule.build::<S>()?;
    let model = HarnessModel::load(&cfg.model, &cfg.dataset, schedule)?;
    let sc = &cfg.rollout;
    let runs = run_rollout_stability(&model, &data, &cfg.sampler, &schedule, sc)?;
    let path = out_dir.join("rollout.csv");
    write_stability_csv(&runs, create(&path)?)?;
    written.push(path);
    let path = out_dir.join("metrics.csv");
    stability_report(&runs, &sc.scheme.build()?.name).save_csv(&path)?;
    written.push(path);
    let path = out_dir.join("rollout_norms.svg");
    plot::rollout_norms(&runs, sc.norm_factor * data_scale(&data), &path)?;
    written.push(path);
    for r in &runs {
        let seq: Vec<S> = r.sequence.iter().map(|&v| S::of(v)).collect();
        save_sequences(
            &out_dir.join(format!("rollout_seed{}", r.seed)),
            &seq,
            r.frames,
            data.dim,
            &mut written,
        )?;
    }
    Ok(written)
}

// ---- interpolate ----

pub fn run_interpolate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    by_precision!(cfg, interpolate_impl(cfg, out_dir))
}

/// Keeps every `factor`-th frame of a dataset row, fills the gaps back in
/// and reports the RMS error of the inserted frames against the row.
fn interpolate_impl<S: Scalar>(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let mut written = prepare(out_dir, cfg)?;
    let data = cfg.dataset.generate::<S>()?;
    let schedule = cfg.schedule.build::<S>()?;
    let model = HarnessModel::load(&cfg.model, &cfg.dataset, schedule)?;
    let ic = &cfg.interpolate;
    let (f, d) = (ic.factor, data.dim);
    let kept: Vec<usize> = (0..data.frames).step_by(f).collect();
    if kept.len() < 2 {
        return Err(HarnessError::Config(format!(
            "factor {f} keeps fewer than two of {} frames",
            data.frames
        )));
    }
    let coarse: Vec<S> = kept.iter().flat_map(|&t| data.frame(ic.row, t).to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sampler.seed);
    let dense = interpolate(
        &coarse,
        d,
        &InterpolationConfig { factor: f },
        &model,
        &ic.scheme.build()?,
        &cfg.sampler,
        &schedule,
        &mut rng,
    )?;
    let frames = dense.len() / d;
    save_sequences(&out_dir.join("interpolated"), &dense, frames, d, &mut written)?;
    let diff: Vec<f64> = (0..frames)
        .filter(|t| t % f != 0)
        .flat_map(|t| (0..d).map(move |j| (t, j)))
        .map(|(t, j)| dense[t * d + j].f64() - data.frame(ic.row, t)[j].f64())
        .collect();
    let mut row = MetricRow::new("interpolate", ic.scheme.build()?.name, 1.0, 0.0);
    row.mean_error = rms(&diff);
    let path = out_dir.join("metrics.csv");
    MetricReport { rows: vec![row] }.save_csv(&path)?;
    written.push(path);
    Ok(written)
}

// ---- sweep ----

/// Runs every configured suite (`[sweep]`, `[flexibility]`, `[ood]`) and
/// writes one merged `metrics.csv` plus figures.
pub fn run_sweeps(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    by_precision!(cfg, sweeps_impl(cfg, out_dir))
}

fn sweeps_impl<S: Scalar>(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    if cfg.sweep.is_none() && cfg.flexibility.is_none() && cfg.ood.is_none() {
        return Err(HarnessError::Config(
            "nothing to run: add a [sweep], [flexibility] or [ood] section".into(),
        ));
    }
    let mut written = prepare(out_dir, cfg)?;
    let schedule = cfg.schedule.build::<S>()?;
    let model = HarnessModel::load(&cfg.model, &cfg.dataset, schedule)?;
    let mut parts = Vec::new();
    if cfg.sweep.is_some() || cfg.flexibility.is_some() {
        let spec = cfg
            .dataset
            .oracle()?
            .ok_or_else(|| HarnessError::Config("[sweep] and [flexibility] need a gaussian-ar1 dataset".into()))?;
        if let Some(sw) = &cfg.sweep {
            let r = run_sweep(&model, &spec, &cfg.sampler, &schedule, sw)?;
            plot::guidance_curves(&r, out_dir)?;
            written.push(out_dir.join("guidance_variance.svg"));
            written.push(out_dir.join("guidance_error.svg"));
            parts.push(prefixed(r, "sweep/"));
        }
        if let Some(fx) = &cfg.flexibility {
            let analytic = histdiff_core::GaussianDenoiser::new(spec.clone(), schedule);
            let base = run_flexibility_suite(&analytic, &spec, &cfg.sampler, &schedule, fx)?;
            let tau = thresholds(&base, fx.tolerance_factor);
            let r = run_flexibility_suite(&model, &spec, &cfg.sampler, &schedule, fx)?;
            let path = out_dir.join("flexibility.svg");
            plot::flexibility_bars(&r, &tau, &path)?;
            written.push(path);
            parts.push(prefixed(r, "flexibility/"));
        }
    }
    if let Some(o) = &cfg.ood {
        let DatasetKind::Navigation2d(nav) = &cfg.dataset.kind else {
            return Err(HarnessError::Config("[ood] needs a navigation2d dataset".into()));
        };
        parts.push(run_ood_suite(&model, nav, &cfg.sampler, &schedule, o)?);
    }
    let report = MetricReport::merge(parts);
    report.check_finite()?;
    let path = out_dir.join("metrics.csv");
    report.save_csv(&path)?;
    written.push(path);
    Ok(written)
}

fn prefixed(mut r: MetricReport, prefix: &str) -> MetricReport {
    for row in &mut r.rows {
        row.cell = format!("{prefix}{}", row.cell);
    }
    r
}

// ---- oracle-verify ----

/// Writes `oracle_checks.csv` (`check,passed,detail`) and returns the checks.
pub fn run_oracle_verify(
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<(Vec<Check>, Vec<PathBuf>), HarnessError> {
    let mut written = prepare(out_dir, cfg)?;
    let checks = oracle_verify(cfg.seed.unwrap_or(0))?;
    let path = out_dir.join("oracle_checks.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["check", "passed", "detail"])?;
    for c in &checks {
        w.write_record([c.name.as_str(), if c.passed { "true" } else { "false" }, c.detail.as_str()])?;
    }
    w.flush()?;
    written.push(path);
    Ok((checks, written))
}

/// Loads the configured model at `S`, for callers outside the drivers.
pub fn load_model<S: Scalar>(cfg: &ExperimentConfig) -> Result<HarnessModel<S>, HarnessError> {
    let m = HarnessModel::load(&cfg.model, &cfg.dataset, cfg.schedule.build::<S>()?)?;
    if m.max_frames() < cfg.dataset.frames() || m.frame_dim() != cfg.dataset.dim() {
        return Err(HarnessError::Config("checkpoint shape does not match the dataset".into()));
    }
    Ok(m)
}
