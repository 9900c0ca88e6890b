//! Toy sequence datasets.
//!
//! `gaussian-ar1` draws from a stationary AR(1) law and so comes with an
//! exact oracle. `navigation2d` is an agent in a square arena driven by
//! forward / left / right actions; frames are `(x, y, cos h, sin h)` and the
//! agent reflects off the walls, so positions stay bounded over arbitrarily
//! long rollouts.

use histdiff_core::oracle::GaussianSeqSpec;
use histdiff_core::{Error, Result, Scalar, SequenceBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const FORWARD: usize = 0;
pub const LEFT: usize = 1;
pub const RIGHT: usize = 2;
pub const NAV_ACTIONS: usize = 3;
pub const NAV_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NavigationParams {
    pub frames: usize,
    #[serde(default = "NavigationParams::default_step")]
    pub step_size: f64,
    #[serde(default = "NavigationParams::default_turn")]
    pub turn_deg: f64,
    /// Half-width of the square arena.
    #[serde(default = "NavigationParams::default_arena")]
    pub arena: f64,
    /// Probability that an action is a turn (split evenly left / right).
    #[serde(default = "NavigationParams::default_turn_prob")]
    pub turn_prob: f64,
}

impl NavigationParams {
    fn default_step() -> f64 {
        0.25
    }
    fn default_turn() -> f64 {
        15.0
    }
    fn default_arena() -> f64 {
        2.0
    }
    fn default_turn_prob() -> f64 {
        0.4
    }

    pub fn new(frames: usize) -> Self {
        Self {
            frames,
            step_size: Self::default_step(),
            turn_deg: Self::default_turn(),
            arena: Self::default_arena(),
            turn_prob: Self::default_turn_prob(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::InvalidConfig("navigation needs at least one frame".into()));
        }
        if !(self.step_size >= 0.0 && self.arena > 0.0 && self.step_size < self.arena) {
            return Err(Error::InvalidConfig(format!(
                "navigation needs 0 <= step_size < arena, got {} and {}",
                self.step_size, self.arena
            )));
        }
        if !(0.0..=1.0).contains(&self.turn_prob) || !self.turn_deg.is_finite() {
            return Err(Error::InvalidConfig("turn_prob must be in [0, 1] and turn_deg finite".into()));
        }
        Ok(())
    }
}

/// Agent state in the arena.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavState {
    pub x: f64,
    pub y: f64,
    /// Heading in radians.
    pub heading: f64,
}

impl NavState {
    pub fn features(&self) -> [f64; NAV_DIM] {
        [self.x, self.y, self.heading.cos(), self.heading.sin()]
    }

    /// Inverse of [`NavState::features`]; heading from the (unnormalized) direction.
    pub fn from_features(f: &[f64]) -> Self {
        Self {
            x: f[0],
            y: f[1],
            heading: f[3].atan2(f[2]),
        }
    }
}

fn reflect(p: f64, l: f64) -> (f64, bool) {
    if p > l {
        (2.0 * l - p, true)
    } else if p < -l {
        (-2.0 * l - p, true)
    } else {
        (p, false)
    }
}

/// Applies `action` with turn size `turn_deg`, then moves forward one step.
pub fn nav_step(s: NavState, action: usize, turn_deg: f64, p: &NavigationParams) -> NavState {
    let turn = turn_deg.to_radians();
    let mut h = match action {
        LEFT => s.heading + turn,
        RIGHT => s.heading - turn,
        _ => s.heading,
    };
    let (x, fx) = reflect(s.x + p.step_size * h.cos(), p.arena);
    if fx {
        h = std::f64::consts::PI - h;
    }
    let (y, fy) = reflect(s.y + p.step_size * h.sin(), p.arena);
    if fy {
        h = -h;
    }
    NavState {
        x,
        y,
        heading: h.sin().atan2(h.cos()),
    }
}

/// Frames reached from `start`; `actions[t]` produces frame `t` from `t - 1`
/// (`actions[0]` is carried as a label only).
pub fn nav_trajectory(start: NavState, actions: &[usize], turn_deg: f64, p: &NavigationParams) -> Vec<f64> {
    let mut s = start;
    let mut out = Vec::with_capacity(actions.len() * NAV_DIM);
    for (t, &a) in actions.iter().enumerate() {
        if t > 0 {
            s = nav_step(s, a, turn_deg, p);
        }
        out.extend_from_slice(&s.features());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DatasetKind {
    GaussianAr1 { rho: f64, dim: usize, frames: usize },
    Navigation2d(NavigationParams),
}

/// A dataset: its kind, number of sequences and generation seed. In a
/// config file the kind's fields sit next to `size` and `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawDataset", into = "RawDataset")]
pub struct ToyDataset {
    pub kind: DatasetKind,
    pub size: usize,
    pub seed: u64,
}

/// Flat wire form of [`ToyDataset`]; strict about unknown keys.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
enum RawDataset {
    GaussianAr1 {
        rho: f64,
        dim: usize,
        frames: usize,
        size: usize,
        #[serde(default)]
        seed: u64,
    },
    Navigation2d {
        frames: usize,
        #[serde(default = "NavigationParams::default_step")]
        step_size: f64,
        #[serde(default = "NavigationParams::default_turn")]
        turn_deg: f64,
        #[serde(default = "NavigationParams::default_arena")]
        arena: f64,
        #[serde(default = "NavigationParams::default_turn_prob")]
        turn_prob: f64,
        size: usize,
        #[serde(default)]
        seed: u64,
    },
}

impl From<RawDataset> for ToyDataset {
    fn from(raw: RawDataset) -> Self {
        match raw {
            RawDataset::GaussianAr1 {
                rho,
                dim,
                frames,
                size,
                seed,
            } => ToyDataset::gaussian_ar1(rho, dim, frames, size, seed),
            RawDataset::Navigation2d {
                frames,
                step_size,
                turn_deg,
                arena,
                turn_prob,
                size,
                seed,
            } => ToyDataset::navigation(
                NavigationParams {
                    frames,
                    step_size,
                    turn_deg,
                    arena,
                    turn_prob,
                },
                size,
                seed,
            ),
        }
    }
}

impl From<ToyDataset> for RawDataset {
    fn from(d: ToyDataset) -> Self {
        let (size, seed) = (d.size, d.seed);
        match d.kind {
            DatasetKind::GaussianAr1 { rho, dim, frames } => RawDataset::GaussianAr1 {
                rho,
                dim,
                frames,
                size,
                seed,
            },
            DatasetKind::Navigation2d(p) => RawDataset::Navigation2d {
                frames: p.frames,
                step_size: p.step_size,
                turn_deg: p.turn_deg,
                arena: p.arena,
                turn_prob: p.turn_prob,
                size,
                seed,
            },
        }
    }
}

impl ToyDataset {
    pub fn gaussian_ar1(rho: f64, dim: usize, frames: usize, size: usize, seed: u64) -> Self {
        Self {
            kind: DatasetKind::GaussianAr1 { rho, dim, frames },
            size,
            seed,
        }
    }

    pub fn navigation(params: NavigationParams, size: usize, seed: u64) -> Self {
        Self {
            kind: DatasetKind::Navigation2d(params),
            size,
            seed,
        }
    }

    pub fn frames(&self) -> usize {
        match self.kind {
            DatasetKind::GaussianAr1 { frames, .. } => frames,
            DatasetKind::Navigation2d(p) => p.frames,
        }
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            DatasetKind::GaussianAr1 { dim, .. } => dim,
            DatasetKind::Navigation2d(_) => NAV_DIM,
        }
    }

    pub fn action_vocab(&self) -> Option<usize> {
        match self.kind {
            DatasetKind::GaussianAr1 { .. } => None,
            DatasetKind::Navigation2d(_) => Some(NAV_ACTIONS),
        }
    }

    /// The exact law of the data, when there is one.
    pub fn oracle(&self) -> Result<Option<GaussianSeqSpec>> {
        match self.kind {
            DatasetKind::GaussianAr1 { rho, dim, frames } => Ok(Some(GaussianSeqSpec::ar1(rho, dim, frames)?)),
            DatasetKind::Navigation2d(_) => Ok(None),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::InvalidConfig("dataset size must be positive".into()));
        }
        match self.kind {
            DatasetKind::GaussianAr1 { rho, dim, frames } => GaussianSeqSpec::ar1(rho, dim, frames).map(|_| ()),
            DatasetKind::Navigation2d(p) => p.validate(),
        }
    }

    /// Deterministic in `(kind, size, seed)`.
    pub fn generate<S: Scalar>(&self) -> Result<SequenceBatch<S>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (t, d) = (self.frames(), self.dim());
        match self.kind {
            DatasetKind::GaussianAr1 { .. } => {
                let spec = self.oracle()?.expect("gaussian dataset has an oracle");
                let draws = spec.sample(&mut rng, self.size)?;
                let data = draws.iter().flat_map(|v| v.iter().map(|&x| S::of(x))).collect();
                SequenceBatch::new(self.size, t, d, data)
            }
            DatasetKind::Navigation2d(p) => {
                let mut data = Vec::with_capacity(self.size * t * d);
                let mut actions = Vec::with_capacity(self.size * t);
                for _ in 0..self.size {
                    let start = NavState {
                        x: rng.random_range(-p.arena..p.arena),
                        y: rng.random_range(-p.arena..p.arena),
                        heading: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
                    };
                    let acts = random_actions(&mut rng, t, p.turn_prob);
                    data.extend(nav_trajectory(start, &acts, p.turn_deg, &p).into_iter().map(S::of));
                    actions.extend(acts);
                }
                SequenceBatch::new(self.size, t, d, data)?.with_actions(actions)
            }
        }
    }
}

pub fn random_actions<R: Rng + ?Sized>(rng: &mut R, n: usize, turn_prob: f64) -> Vec<usize> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            if u < turn_prob / 2.0 {
                LEFT
            } else if u < turn_prob {
                RIGHT
            } else {
                FORWARD
            }
        })
        .collect()
}

/// Root-mean-square frame norm of a batch; the "data scale" of rollouts.
pub fn data_scale<S: Scalar>(batch: &SequenceBatch<S>) -> f64 {
    let n = batch.batch * batch.frames;
    if n == 0 {
        return 0.0;
    }
    let ss: f64 = batch.data.iter().map(|v| v.f64() * v.f64()).sum();
    (ss / n as f64).sqrt()
}
