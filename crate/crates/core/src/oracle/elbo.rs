//! Closed-form evidence lower bounds along monotone noise-level paths.
//!
//! A path is a sequence of integer level vectors `k^0 = 0, ..., k^N = K`.
//! Under the forward process each coordinate at level `n` is
//! `sqrt(alpha_bar_n) x0 + sqrt(1 - alpha_bar_n) eps`. The reverse model
//! moves the coordinates that change between `k^{j+1}` and `k^j` down one
//! level with a Gaussian kernel whose mean uses a denoiser's `x0` guess
//! from the whole current state. For an affine denoiser every expectation
//! in the bound is Gaussian, so the bound is exact, not sampled.

use nalgebra::{DMatrix, DVector};
use rand::seq::IteratorRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::gaussian::{gaussian_log_density, GaussianSeqSpec};
use crate::schedule::DiscreteNoiseGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathKind {
    Autoregressive,
    FullSequence,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathSpec {
    frames: usize,
    max_level: usize,
    states: Vec<Vec<usize>>,
}

impl PathSpec {
    /// Validates: starts at zero, ends at `K` everywhere, every step raises
    /// a nonempty set of frames by exactly one.
    pub fn new(frames: usize, max_level: usize, states: Vec<Vec<usize>>) -> Result<Self> {
        if frames == 0 || max_level == 0 {
            return Err(Error::InvalidPath("path needs T, K >= 1".into()));
        }
        if states.len() < 2 {
            return Err(Error::InvalidPath("path needs at least two states".into()));
        }
        if states.iter().any(|s| s.len() != frames) {
            return Err(Error::InvalidPath(format!("every state needs {frames} levels")));
        }
        if states[0].iter().any(|&k| k != 0) {
            return Err(Error::InvalidPath("path must begin at zero noise".into()));
        }
        if states.last().unwrap().iter().any(|&k| k != max_level) {
            return Err(Error::InvalidPath(format!("path must end at level {max_level}")));
        }
        for (j, w) in states.windows(2).enumerate() {
            let mut moved = false;
            for t in 0..frames {
                let (lo, hi) = (w[0][t], w[1][t]);
                if hi < lo {
                    return Err(Error::InvalidPath(format!("step {j} decreases frame {t}")));
                }
                if hi > lo + 1 {
                    return Err(Error::InvalidPath(format!("step {j} raises frame {t} by more than one")));
                }
                moved |= hi > lo;
            }
            if !moved {
                return Err(Error::InvalidPath(format!("step {j} changes nothing")));
            }
        }
        Ok(Self {
            frames,
            max_level,
            states,
        })
    }

    pub fn make(kind: PathKind, frames: usize, max_level: usize) -> Result<Self> {
        match kind {
            PathKind::Autoregressive => Self::autoregressive(frames, max_level),
            PathKind::FullSequence => Self::full_sequence(frames, max_level),
            PathKind::Custom => Err(Error::InvalidPath("custom paths are built with PathSpec::new".into())),
        }
    }

    /// Frame 1 goes 0..K, then frame 2, and so on.
    pub fn autoregressive(frames: usize, max_level: usize) -> Result<Self> {
        let mut states = vec![vec![0; frames]];
        for t in 0..frames {
            for _ in 0..max_level {
                let mut s = states.last().unwrap().clone();
                s[t] += 1;
                states.push(s);
            }
        }
        Self::new(frames, max_level, states)
    }

    /// `k^j_t = j`.
    pub fn full_sequence(frames: usize, max_level: usize) -> Result<Self> {
        Self::new(frames, max_level, (0..=max_level).map(|j| vec![j; frames]).collect())
    }

    /// Each step raises a uniformly chosen nonempty subset of unfinished frames.
    pub fn random_monotone<R: Rng + ?Sized>(frames: usize, max_level: usize, rng: &mut R) -> Result<Self> {
        let mut states = vec![vec![0; frames]];
        loop {
            let cur = states.last().unwrap().clone();
            let open: Vec<usize> = (0..frames).filter(|&t| cur[t] < max_level).collect();
            if open.is_empty() {
                break;
            }
            let size = rng.random_range(1..=open.len());
            let mut next = cur;
            for t in open.iter().copied().choose_multiple(rng, size) {
                next[t] += 1;
            }
            states.push(next);
        }
        Self::new(frames, max_level, states)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    pub fn states(&self) -> &[Vec<usize>] {
        &self.states
    }

    /// Number of transitions `N`.
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }
}

/// Reverse-kernel covariance used by the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReverseVariance {
    /// Discrete-time model: forward posterior variance (`beta_1` at level 1).
    Posterior,
    /// The true reverse conditionals of the data law along the path.
    Exact,
}

/// Affine `x0` predictor: given per-frame integer levels of the current
/// state, returns `(K, c)` with `x0_hat = K x + c` over the flattened state.
pub type AffineDenoiser<'a> = dyn Fn(&[usize]) -> Result<(DMatrix<f64>, DVector<f64>)> + 'a;

#[derive(Debug, Clone, PartialEq)]
pub struct ElboReport {
    /// The lower bound on `ln p_theta(x0)`.
    pub bound: f64,
    /// Contribution of each reverse transition, indexed by `j` in `k^{j+1} -> k^j`.
    pub step_terms: Vec<f64>,
    /// `-KL(q(x^K | x0) || N(0, I))`.
    pub prior_term: f64,
    /// Weights `c_1..c_K` of the x0-prediction form.
    pub coefficients: Vec<f64>,
    /// The model's exact `ln p_theta(x0)` along this path.
    pub log_likelihood: f64,
}

/// Per-coordinate forward coefficients for a state.
fn coefficients(spec: &GaussianSeqSpec, grid: &DiscreteNoiseGrid, levels: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let d = spec.dim();
    let n = spec.len();
    let mut a = vec![0.0; n];
    let mut s = vec![0.0; n];
    for u in 0..n {
        let ab = grid.alpha_bar(levels[u / d]);
        a[u] = ab.sqrt();
        s[u] = (1.0 - ab).max(0.0).sqrt();
    }
    (a, s)
}

/// The exact posterior-mean denoiser of `spec`, as an affine map.
pub fn exact_denoiser<'a>(spec: &'a GaussianSeqSpec, grid: &'a DiscreteNoiseGrid) -> impl Fn(&[usize]) -> Result<(DMatrix<f64>, DVector<f64>)> + 'a {
    move |levels: &[usize]| {
        let (a, s) = coefficients(spec, grid, levels);
        let (k, c, _) = spec.posterior_map(&a, &s)?;
        Ok((k, c))
    }
}

struct Transition {
    changed: Vec<usize>,
    /// level before the step for each changed coordinate
    from: Vec<usize>,
    f: DMatrix<f64>,
    g: DVector<f64>,
    lambda: DMatrix<f64>,
}

fn transition(
    spec: &GaussianSeqSpec,
    grid: &DiscreteNoiseGrid,
    hi: &[usize],
    lo: &[usize],
    denoiser: &AffineDenoiser<'_>,
    variance: ReverseVariance,
) -> Result<Transition> {
    let d = spec.dim();
    let n = spec.len();
    let changed: Vec<usize> = (0..n).filter(|&u| lo[u / d] < hi[u / d]).collect();
    let from: Vec<usize> = changed.iter().map(|&u| hi[u / d]).collect();
    let (k, c) = denoiser(hi)?;
    if k.nrows() != n || k.ncols() != n || c.len() != n {
        return Err(Error::ShapeMismatch("denoiser map has the wrong shape".into()));
    }
    let m = changed.len();
    let mut f = DMatrix::zeros(m, n);
    let mut g = DVector::zeros(m);
    let mut c0s = vec![0.0; m];
    for (i, (&u, &lv)) in changed.iter().zip(&from).enumerate() {
        let (cx, c0) = grid.posterior_coefficients(lv);
        c0s[i] = c0;
        for v in 0..n {
            f[(i, v)] = c0 * k[(u, v)];
        }
        f[(i, u)] += cx;
        g[i] = c0 * c[u];
    }
    let lambda = match variance {
        ReverseVariance::Posterior => DMatrix::from_fn(m, m, |i, j| if i == j { grid.reverse_variance(from[i]) } else { 0.0 }),
        ReverseVariance::Exact => {
            let (a, s) = coefficients(spec, grid, hi);
            let (_, _, post) = spec.posterior_map(&a, &s)?;
            DMatrix::from_fn(m, m, |i, j| {
                let base = if i == j { grid.posterior_variance(from[i]) } else { 0.0 };
                base + c0s[i] * c0s[j] * post[(changed[i], changed[j])]
            })
        }
    };
    Ok(Transition {
        changed,
        from,
        f,
        g,
        lambda,
    })
}

/// Exact ELBO of `x0` along `path` for an affine denoiser.
pub fn elbo_with(
    spec: &GaussianSeqSpec,
    x0: &[f64],
    path: &PathSpec,
    grid: &DiscreteNoiseGrid,
    denoiser: &AffineDenoiser<'_>,
    variance: ReverseVariance,
) -> Result<ElboReport> {
    let n = spec.len();
    let d = spec.dim();
    if x0.len() != n {
        return Err(Error::ShapeMismatch(format!("data has {} values, spec {n}", x0.len())));
    }
    if path.frames() != spec.frames() || grid.steps() != path.max_level() {
        return Err(Error::InvalidPath(format!(
            "path over {} frames / {} levels does not fit spec T = {} with a {}-step grid",
            path.frames(),
            path.max_level(),
            spec.frames(),
            grid.steps()
        )));
    }
    let x0v = DVector::from_column_slice(x0);
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let states = path.states();

    // model marginal of the whole state, propagated from N(0, I)
    let mut pm = DVector::<f64>::zeros(n);
    let mut pc = DMatrix::<f64>::identity(n, n);

    let mut step_terms = vec![0.0; path.steps()];
    for j in (0..path.steps()).rev() {
        let (hi, lo) = (&states[j + 1], &states[j]);
        let tr = transition(spec, grid, hi, lo, denoiser, variance)?;
        let m = tr.changed.len();

        // q-law of the state at hi given x0
        let (a, s) = coefficients(spec, grid, hi);
        let mean_x = DVector::from_fn(n, |u, _| a[u] * x0[u]);
        let var_x: Vec<f64> = s.iter().map(|v| v * v).collect();

        // residual r = L x + h + noise
        let mut l = -tr.f.clone();
        let mut h = -tr.g.clone();
        let mut noise = vec![0.0; m];
        let mut entropy = 0.0;
        for (i, (&u, &lv)) in tr.changed.iter().zip(&tr.from).enumerate() {
            if lv >= 2 {
                let (cx, c0) = grid.posterior_coefficients(lv);
                l[(i, u)] += cx;
                h[i] += c0 * x0[u];
                let pv = grid.posterior_variance(lv);
                noise[i] = pv;
                entropy += 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * pv).ln();
            } else {
                h[i] += x0[u];
            }
        }
        let mean_r = &l * &mean_x + h;
        let mut cov_r = DMatrix::from_fn(m, m, |i, k| (0..n).map(|u| l[(i, u)] * var_x[u] * l[(k, u)]).sum());
        for i in 0..m {
            cov_r[(i, i)] += noise[i];
        }
        let ch = tr
            .lambda
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Singular(format!("reverse covariance at step {j}")))?;
        let logdet: f64 = ch.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let quad = mean_r.dot(&ch.solve(&mean_r)) + ch.solve(&cov_r).trace();
        step_terms[j] = -0.5 * (m as f64 * ln2pi + logdet + quad) + entropy;

        // propagate the model: rows `changed` of the state become F z + g + noise
        let mut op = DMatrix::<f64>::identity(n, n);
        for (i, &u) in tr.changed.iter().enumerate() {
            op.set_row(u, &tr.f.row(i));
        }
        let mut shift = DVector::zeros(n);
        for (i, &u) in tr.changed.iter().enumerate() {
            shift[u] = tr.g[i];
        }
        pm = &op * pm + shift;
        pc = &op * pc * op.transpose();
        for (i, &u) in tr.changed.iter().enumerate() {
            for (k, &v) in tr.changed.iter().enumerate() {
                pc[(u, v)] += tr.lambda[(i, k)];
            }
        }
    }

    // prior: q(x^K | x0) = N(sqrt(ab_K) x0, (1 - ab_K) I) against N(0, I)
    let ab = grid.alpha_bar(path.max_level());
    let v = 1.0 - ab;
    let prior_term: f64 = (0..n)
        .map(|u| {
            let mu2 = ab * x0[u] * x0[u];
            -0.5 * (v + mu2 - 1.0 - v.ln())
        })
        .sum();
    debug_assert_eq!(d * spec.frames(), n);

    let pc = (&pc + pc.transpose()) * 0.5;
    let log_likelihood = gaussian_log_density(&x0v, &pm, &pc)?;
    let bound = prior_term + step_terms.iter().sum::<f64>();
    Ok(ElboReport {
        bound,
        step_terms,
        prior_term,
        coefficients: (1..=grid.steps()).map(|i| grid.elbo_weight(i)).collect(),
        log_likelihood,
    })
}

/// ELBO with the exact posterior-mean denoiser of `spec`.
pub fn elbo(
    spec: &GaussianSeqSpec,
    x0: &[f64],
    path: &PathSpec,
    grid: &DiscreteNoiseGrid,
    variance: ReverseVariance,
) -> Result<ElboReport> {
    let den = exact_denoiser(spec, grid);
    elbo_with(spec, x0, path, grid, &den, variance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::NoiseSchedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn path_shapes() {
        let p = PathSpec::full_sequence(3, 2).unwrap();
        assert_eq!(p.states(), &[vec![0, 0, 0], vec![1, 1, 1], vec![2, 2, 2]]);
        let p = PathSpec::autoregressive(2, 2).unwrap();
        assert_eq!(p.states(), &[vec![0, 0], vec![1, 0], vec![2, 0], vec![2, 1], vec![2, 2]]);
        assert_eq!(p.steps(), 4);
        assert_eq!(
            PathSpec::autoregressive(1, 3).unwrap(),
            PathSpec::full_sequence(1, 3).unwrap()
        );
    }

    #[test]
    fn rejects_invalid_custom_paths() {
        assert!(PathSpec::new(2, 2, vec![vec![0, 0], vec![2, 0], vec![2, 2]]).is_err());
        assert!(PathSpec::new(2, 1, vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![1, 1]]).is_err());
        assert!(PathSpec::new(1, 1, vec![vec![0], vec![0], vec![1]]).is_err());
        assert!(PathSpec::new(1, 1, vec![vec![1], vec![1]]).is_err());
        assert!(PathSpec::make(PathKind::Custom, 1, 1).is_err());
    }

    #[test]
    fn random_paths_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let p = PathSpec::random_monotone(3, 4, &mut rng).unwrap();
            assert!(p.steps() >= 4 && p.steps() <= 12);
        }
    }

    #[test]
    fn exact_reverse_is_tight() {
        let spec = GaussianSeqSpec::ar1(0.7, 1, 3).unwrap();
        let grid = NoiseSchedule::<f64>::cosine().grid(4).unwrap();
        let x0 = [0.4, -0.2, 1.1];
        let want = spec.log_density(&DVector::from_column_slice(&x0)).unwrap();
        for path in [PathSpec::autoregressive(3, 4).unwrap(), PathSpec::full_sequence(3, 4).unwrap()] {
            let r = elbo(&spec, &x0, &path, &grid, ReverseVariance::Exact).unwrap();
            assert!((r.bound - want).abs() < 1e-8, "{} vs {want}", r.bound);
            assert!((r.log_likelihood - want).abs() < 1e-8);
        }
    }

    #[test]
    fn posterior_variance_bound_holds() {
        let spec = GaussianSeqSpec::ar1(0.9, 2, 2).unwrap();
        let grid = NoiseSchedule::<f64>::cosine().grid(5).unwrap();
        let x0 = [0.3, -1.0, 0.8, 0.1];
        for path in [PathSpec::autoregressive(2, 5).unwrap(), PathSpec::full_sequence(2, 5).unwrap()] {
            let r = elbo(&spec, &x0, &path, &grid, ReverseVariance::Posterior).unwrap();
            assert!(r.bound <= r.log_likelihood + 1e-9, "{} > {}", r.bound, r.log_likelihood);
        }
    }

    #[test]
    fn latent_steps_match_weighted_x0_error() {
        // for a step with no observed coordinates, the step term plus the
        // matched-variance Gaussian constants equals -c_n E||x0_hat - x0||^2
        let spec = GaussianSeqSpec::ar1(0.6, 1, 2).unwrap();
        let grid = NoiseSchedule::<f64>::cosine().grid(4).unwrap();
        let x0 = [0.9, -0.4];
        let path = PathSpec::full_sequence(2, 4).unwrap();
        let r = elbo(&spec, &x0, &path, &grid, ReverseVariance::Posterior).unwrap();
        let den = exact_denoiser(&spec, &grid);
        for j in 1..4 {
            let lv = j + 1;
            let (k, c) = den(&[lv, lv]).unwrap();
            let (a, s) = coefficients(&spec, &grid, &[lv, lv]);
            let mut err = 0.0;
            for u in 0..2 {
                let mean: f64 = (0..2).map(|v| k[(u, v)] * a[v] * x0[v]).sum::<f64>() + c[u] - x0[u];
                let var: f64 = (0..2).map(|v| k[(u, v)] * k[(u, v)] * s[v] * s[v]).sum();
                err += mean * mean + var;
            }
            let want = -grid.elbo_weight(lv) * err;
            assert!((r.step_terms[j] - want).abs() < 1e-10, "step {j}: {} vs {want}", r.step_terms[j]);
        }
    }
}
