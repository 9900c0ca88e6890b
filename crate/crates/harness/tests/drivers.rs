use std::path::Path;

use histdiff_core::tensorfile::Tensor;
use histdiff_harness::config::ExperimentConfig;
use histdiff_harness::experiment::{run_interpolate, run_rollout, run_sample, run_sweeps, run_train};
use histdiff_harness::report::MetricReport;

const TINY: &str = r#"
    [dataset]
    kind = "gaussian-ar1"
    rho = 0.8
    dim = 1
    frames = 6
    size = 64

    [model]
    kind = "tiny"

    [model.architecture]
    embed_dim = 8
    num_heads = 2
    num_blocks = 1
    mlp_ratio = 2
    level_features = 4

    [train]
    steps = 5
    batch_size = 8
    learning_rate = 1e-3

    [sampler]
    steps = 4

    [sample]
    history = [0, 1]
    num_samples = 6
    scheme = { preset = "vanilla", omega = 2.0 }

    [interpolate]
    factor = 2
"#;

fn header(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn train_then_sample_then_interpolate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_toml_str(TINY).unwrap();
    let train_dir = dir.path().join("train");
    let written = run_train(&cfg, &train_dir).unwrap();
    for name in ["checkpoint.bin", "loss.csv", "loss.svg", "config.toml"] {
        assert!(written.contains(&train_dir.join(name)), "missing {name}");
    }
    assert_eq!(header(&train_dir.join("loss.csv")), "step,loss,ema_loss");
    assert_eq!(std::fs::read_to_string(train_dir.join("loss.csv")).unwrap().lines().count(), 6);

    let mut cfg = cfg;
    cfg.set_checkpoint(train_dir.join("checkpoint.bin"));
    let sample_dir = dir.path().join("sample");
    run_sample(&cfg, &sample_dir).unwrap();
    let t = Tensor::<f32>::load(sample_dir.join("samples.tensor")).unwrap();
    assert_eq!(t.shape, vec![6, 6, 1]);
    // history frames are copied verbatim from the dataset row
    let data = cfg.dataset.generate::<f32>().unwrap();
    for s in 0..6 {
        assert_eq!(t.data[s * 6], data.frame(0, 0)[0]);
        assert_eq!(t.data[s * 6 + 1], data.frame(0, 1)[0]);
    }
    let m = MetricReport::read_csv(std::fs::File::open(sample_dir.join("metrics.csv")).unwrap()).unwrap();
    m.check_finite().unwrap();

    let interp_dir = dir.path().join("interp");
    run_interpolate(&cfg, &interp_dir).unwrap();
    let t = Tensor::<f32>::load(interp_dir.join("interpolated.tensor")).unwrap();
    // frames 0, 2, 4 kept; 5 frames back out
    assert_eq!(t.shape, vec![1, 5, 1]);
    for (i, src) in [0usize, 2, 4].into_iter().enumerate() {
        assert_eq!(t.data[i * 2], data.frame(0, src)[0]);
    }
}

#[test]
fn same_config_same_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_toml_str(TINY).unwrap();
    run_train(&cfg, &dir.path().join("a")).unwrap();
    run_train(&cfg, &dir.path().join("b")).unwrap();
    let a = std::fs::read(dir.path().join("a/checkpoint.bin")).unwrap();
    let b = std::fs::read(dir.path().join("b/checkpoint.bin")).unwrap();
    assert_eq!(a, b);
    let mut cfg = cfg;
    cfg.apply_seed(1);
    run_train(&cfg, &dir.path().join("c")).unwrap();
    assert_ne!(a, std::fs::read(dir.path().join("c/checkpoint.bin")).unwrap());
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::from_toml_str(TINY).unwrap();
    assert!(run_sample(&cfg, dir.path()).is_err());
    cfg.set_checkpoint(dir.path().join("nope.bin"));
    let err = run_sample(&cfg, dir.path()).unwrap_err();
    assert!(matches!(err, histdiff_harness::HarnessError::MissingCheckpoint(_)));
}

#[test]
fn sweep_command_writes_merged_report_and_figures() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"
        precision = "f64"
        [dataset]
        kind = "gaussian-ar1"
        rho = 0.8
        dim = 1
        frames = 8
        size = 16
        [model]
        kind = "analytic"
        [sampler]
        steps = 5
        [sweep]
        omegas = [1.0, 2.0]
        eval = { num_histories = 1, samples_per_history = 8 }
        [flexibility]
        eval = { num_histories = 1, samples_per_history = 8 }
    "#;
    let cfg = ExperimentConfig::from_toml_str(text).unwrap();
    run_sweeps(&cfg, dir.path()).unwrap();
    for f in ["metrics.csv", "guidance_variance.svg", "guidance_error.svg", "flexibility.svg"] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    let r = MetricReport::read_csv(std::fs::File::open(dir.path().join("metrics.csv")).unwrap()).unwrap();
    // 1 baseline + 2 ω × {vanilla, fractional} + 10 tasks
    assert_eq!(r.rows.len(), 15);
    assert!(r.rows.windows(2).all(|w| w[0].cell <= w[1].cell));
    let svg = std::fs::read_to_string(dir.path().join("guidance_variance.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn sweep_without_sections_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_toml_str("[model]\nkind = \"analytic\"").unwrap();
    assert!(run_sweeps(&cfg, dir.path()).is_err());
}

#[test]
fn rollout_command_on_navigation() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"
        [dataset]
        kind = "navigation2d"
        frames = 8
        size = 16
        [model]
        kind = "tiny"
        [model.architecture]
        embed_dim = 8
        num_heads = 2
        num_blocks = 1
        [train]
        steps = 3
        batch_size = 4
        learning_rate = 1e-3
        [sampler]
        steps = 3
        [rollout]
        windows = 3
        seeds = [0, 1]
    "#;
    let mut cfg = ExperimentConfig::from_toml_str(text).unwrap();
    run_train(&cfg, dir.path()).unwrap();
    cfg.set_checkpoint(dir.path().join("checkpoint.bin"));
    let out = dir.path().join("rollout");
    run_rollout(&cfg, &out).unwrap();
    assert_eq!(
        header(&out.join("rollout.csv")),
        "seed,frames,max_norm_ratio,divergence_window,escalations"
    );
    let t = Tensor::<f32>::load(out.join("rollout_seed1.tensor")).unwrap();
    assert_eq!(t.shape, vec![1, 4 + 3 * 4, 4]);
    assert!(out.join("rollout_norms.svg").exists());
}
