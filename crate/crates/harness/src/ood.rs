//! Out-of-distribution histories on navigation2d: turn rates beyond the
//! training range, continued by forward motion.

use histdiff_core::model::Denoiser;
use histdiff_core::sampler::sample;
use histdiff_core::{GuidanceScheme, NoiseSchedule, SamplerConfig, Scalar, TaskSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{nav_trajectory, NavState, NavigationParams, FORWARD, LEFT, NAV_DIM};
use crate::metrics::rms;
use crate::report::{MetricReport, MetricRow};
use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodConfig {
    /// Per-step history turn rates, degrees.
    #[serde(default = "OodConfig::default_angles")]
    pub turn_angles: Vec<f64>,
    #[serde(default = "OodConfig::default_history")]
    pub history_frames: usize,
    /// Frames generated after the history; 0 yields an empty report.
    #[serde(default = "OodConfig::default_generate")]
    pub generate_frames: usize,
    #[serde(default = "OodConfig::default_histories")]
    pub num_histories: usize,
    #[serde(default = "OodConfig::default_omega")]
    pub omega: f64,
    #[serde(default)]
    pub seed: u64,
}

impl OodConfig {
    fn default_angles() -> Vec<f64> {
        vec![0.0, 15.0, 30.0, 45.0, 60.0]
    }
    fn default_history() -> usize {
        4
    }
    fn default_generate() -> usize {
        4
    }
    fn default_histories() -> usize {
        32
    }
    fn default_omega() -> f64 {
        2.0
    }
}

impl Default for OodConfig {
    fn default() -> Self {
        Self {
            turn_angles: Self::default_angles(),
            history_frames: Self::default_history(),
            generate_frames: Self::default_generate(),
            num_histories: Self::default_histories(),
            omega: Self::default_omega(),
            seed: 0,
        }
    }
}

/// No guidance, vanilla, temporal over two overlapping history windows,
/// and the extended form that also splits the generation.
pub fn ood_schemes(h: usize, g: usize, omega: f64) -> Vec<(&'static str, GuidanceScheme)> {
    let mut out = vec![("no-guidance", GuidanceScheme::conditional()), ("vanilla", GuidanceScheme::vanilla(omega))];
    if h >= 2 {
        let terms = vec![((0..h - 1).collect(), omega), ((1..h).collect(), omega)];
        out.push(("temporal", GuidanceScheme::temporal(terms.clone())));
        if g >= 2 {
            let subs = vec![(h..h + g - 1).collect(), (h + 1..h + g).collect()];
            out.push(("extended", GuidanceScheme::extended(terms, subs)));
        }
    }
    out
}

/// Rows `ood/turn=<deg>/<scheme>`; `mean_error` is the RMS distance of the
/// generated frames from the true continuation, averaged over histories.
pub fn run_ood_suite<S: Scalar, M: Denoiser<S> + ?Sized>(
    model: &M,
    nav: &NavigationParams,
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule<S>,
    cfg: &OodConfig,
) -> Result<MetricReport, HarnessError> {
    let (h, g) = (cfg.history_frames, cfg.generate_frames);
    if g == 0 || cfg.num_histories == 0 {
        return Ok(MetricReport::default());
    }
    if h == 0 || h + g > model.max_frames() || model.frame_dim() != NAV_DIM {
        return Err(HarnessError::Config(format!(
            "OOD window of {h} + {g} frames does not fit the model"
        )));
    }
    let mut rows = Vec::new();
    for &angle in &cfg.turn_angles {
        let mut start_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let cases: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.num_histories)
            .map(|_| {
                let start = NavState {
                    x: start_rng.random_range(-0.5..0.5),
                    y: start_rng.random_range(-0.5..0.5),
                    heading: start_rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
                };
                let hist = nav_trajectory(start, &vec![LEFT; h], angle, nav);
                let last = NavState::from_features(&hist[(h - 1) * NAV_DIM..]);
                let fut = nav_trajectory(last, &vec![FORWARD; g + 1], 0.0, nav)[NAV_DIM..].to_vec();
                (hist, fut)
            })
            .collect();
        let mut actions = vec![LEFT; h];
        actions.extend(vec![FORWARD; g]);
        for (name, scheme) in ood_schemes(h, g, cfg.omega) {
            let mut errs = Vec::with_capacity(cases.len());
            for (i, (hist, fut)) in cases.iter().enumerate() {
                let mut task = TaskSpec::new(h + g, NAV_DIM, (0..h).collect(), hist.iter().map(|&v| S::of(v)).collect())?;
                if model.action_vocab().is_some() {
                    task = task.with_actions(actions.clone())?;
                }
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(31 * i as u64 + 1));
                let out = sample(&task, &scheme, model, sampler, schedule, 1, &mut rng)?;
                let diff: Vec<f64> = out.data.iter().zip(fut).map(|(a, b)| a.f64() - b).collect();
                errs.push(rms(&diff));
            }
            let mut row = MetricRow::new(format!("ood/turn={angle:05.1}/{name}"), scheme.name.clone(), cfg.omega, 0.0);
            row.mean_error = errs.iter().sum::<f64>() / errs.len() as f64;
            rows.push(row);
        }
    }
    Ok(MetricReport { rows })
}
