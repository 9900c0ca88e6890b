//! Score composition over history subsets, masking levels and generation
//! subsequences.
//!
//! Every branch is evaluated on the same `x_G` at the same level, so the
//! composition is carried out on x0-predictions: scores are affine in x0 with
//! a shared slope, and the weights of `s∅ + Σ ωᵢ (sⁱ − s∅)` sum to one.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batch::NoiseLevelVector;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::{NoiseLevel, NoiseSchedule};

/// How history frames at the stabilization level are fed to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StabilizationMode {
    /// Clean values, declared at the level in the noise-level vector.
    #[default]
    Declared,
    /// Values actually diffused to the level with fresh noise.
    Diffused,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HistoryNoise {
    #[serde(default)]
    pub level: f64,
    #[serde(default)]
    pub mode: StabilizationMode,
}

/// A generation problem: which frames are given and which are produced.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec<S> {
    pub frames: usize,
    pub dim: usize,
    /// Sorted history indices `H`.
    pub history: Vec<usize>,
    /// `|H| × D`, rows in the order of `history`.
    pub history_values: Vec<S>,
    /// Frames neither given nor generated; always fed as pure noise
    /// (e.g. the future under causal sampling).
    pub masked: Vec<usize>,
    /// Per-frame action labels over all `frames`.
    pub actions: Option<Vec<usize>>,
    pub history_noise: HistoryNoise,
}

impl<S: Scalar> TaskSpec<S> {
    pub fn new(frames: usize, dim: usize, history: Vec<usize>, history_values: Vec<S>) -> Result<Self> {
        let task = Self {
            frames,
            dim,
            history,
            history_values,
            masked: Vec::new(),
            actions: None,
            history_noise: HistoryNoise::default(),
        };
        task.validate()?;
        Ok(task)
    }

    /// No history at all.
    pub fn unconditional(frames: usize, dim: usize) -> Self {
        Self {
            frames,
            dim,
            history: Vec::new(),
            history_values: Vec::new(),
            masked: Vec::new(),
            actions: None,
            history_noise: HistoryNoise::default(),
        }
    }

    pub fn with_masked(mut self, masked: Vec<usize>) -> Result<Self> {
        self.masked = masked;
        self.validate()?;
        Ok(self)
    }

    pub fn with_actions(mut self, actions: Vec<usize>) -> Result<Self> {
        self.actions = Some(actions);
        self.validate()?;
        Ok(self)
    }

    pub fn with_history_noise(mut self, history_noise: HistoryNoise) -> Result<Self> {
        self.history_noise = history_noise;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidTask(m));
        if self.frames == 0 || self.dim == 0 {
            return bad("T and D must be positive".into());
        }
        if self.history.windows(2).any(|w| w[0] >= w[1]) {
            return bad("history indices must be strictly increasing".into());
        }
        let mut seen = vec![false; self.frames];
        for &t in self.history.iter().chain(&self.masked) {
            if t >= self.frames {
                return bad(format!("frame {t} outside 0..{}", self.frames));
            }
            if seen[t] {
                return bad(format!("frame {t} listed twice"));
            }
            seen[t] = true;
        }
        if self.history_values.len() != self.history.len() * self.dim {
            return bad(format!(
                "history_values has {} entries, expected {}×{}",
                self.history_values.len(),
                self.history.len(),
                self.dim
            ));
        }
        if self.history_values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("history values".into()));
        }
        if let Some(a) = &self.actions {
            if a.len() != self.frames {
                return bad(format!("{} actions for {} frames", a.len(), self.frames));
            }
        }
        if !(0.0..=1.0).contains(&self.history_noise.level) {
            return Err(Error::NoiseLevelOutOfRange(self.history_noise.level));
        }
        Ok(())
    }

    /// Generated frames `G`, in increasing order.
    pub fn generated(&self) -> Vec<usize> {
        (0..self.frames)
            .filter(|t| !self.history.contains(t) && !self.masked.contains(t))
            .collect()
    }

    pub fn history_frame(&self, t: usize) -> Option<&[S]> {
        let i = self.history.iter().position(|&h| h == t)?;
        Some(&self.history_values[i * self.dim..(i + 1) * self.dim])
    }
}

/// One conditional branch `(H_i, k_Hi, ω_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceTerm {
    /// `H_i`; `None` means all of `H`.
    #[serde(default, rename = "history_indices")]
    pub history: Option<Vec<usize>>,
    #[serde(default)]
    pub mask_level: f64,
    pub weight: f64,
}

impl GuidanceTerm {
    pub fn full(mask_level: f64, weight: f64) -> Self {
        Self {
            history: None,
            mask_level,
            weight,
        }
    }

    pub fn subset(history: Vec<usize>, mask_level: f64, weight: f64) -> Self {
        Self {
            history: Some(history),
            mask_level,
            weight,
        }
    }

    /// `H_i` resolved against a task; errors unless `H_i ⊆ H`.
    pub fn resolve<S: Scalar>(&self, task: &TaskSpec<S>) -> Result<Vec<usize>> {
        match &self.history {
            None => Ok(task.history.clone()),
            Some(h) => {
                if let Some(t) = h.iter().find(|t| !task.history.contains(t)) {
                    return Err(Error::InvalidScheme(format!("term history frame {t} is not in H")));
                }
                let mut h = h.clone();
                h.sort_unstable();
                h.dedup();
                Ok(h)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceScheme {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub terms: Vec<GuidanceTerm>,
    /// `G_j` for extended-temporal composition; `None` means the single `G`.
    #[serde(default)]
    pub generation_subsequences: Option<Vec<Vec<usize>>>,
}

impl GuidanceScheme {
    /// No terms: the unconditional score.
    pub fn unconditional() -> Self {
        Self {
            name: "unconditional".into(),
            terms: Vec::new(),
            generation_subsequences: None,
        }
    }

    /// `{(H, 0, 1)}`.
    pub fn conditional() -> Self {
        Self {
            name: "conditional".into(),
            ..Self::vanilla(1.0)
        }
    }

    /// `{(H, 0, ω)}`.
    pub fn vanilla(omega: f64) -> Self {
        Self {
            name: format!("vanilla({omega})"),
            terms: vec![GuidanceTerm::full(0.0, omega)],
            generation_subsequences: None,
        }
    }

    /// `{(H, 0, 1), (H, k_H, ω − 1)}`.
    pub fn fractional(omega: f64, k_h: f64) -> Result<Self> {
        if !(k_h > 0.0 && k_h < 1.0) {
            return Err(Error::InvalidScheme(format!("fractional k_H must be in (0, 1), got {k_h}")));
        }
        Ok(Self {
            name: format!("fractional({omega}, {k_h})"),
            terms: vec![GuidanceTerm::full(0.0, 1.0), GuidanceTerm::full(k_h, omega - 1.0)],
            generation_subsequences: None,
        })
    }

    /// `{(H_i, 0, ω_i)}`.
    pub fn temporal(terms: Vec<(Vec<usize>, f64)>) -> Self {
        Self {
            name: "temporal".into(),
            terms: terms.into_iter().map(|(h, w)| GuidanceTerm::subset(h, 0.0, w)).collect(),
            generation_subsequences: None,
        }
    }

    /// Temporal terms evaluated on each `G_j`, then averaged frame-wise.
    pub fn extended(terms: Vec<(Vec<usize>, f64)>, subsequences: Vec<Vec<usize>>) -> Self {
        Self {
            name: "extended".into(),
            generation_subsequences: Some(subsequences),
            ..Self::temporal(terms)
        }
    }

    pub fn total_weight(&self) -> f64 {
        self.terms.iter().map(|t| t.weight).sum()
    }

    /// Model evaluations per sampling step and sample.
    pub fn evaluations_per_step(&self) -> usize {
        let j = self.generation_subsequences.as_ref().map_or(1, Vec::len);
        j * (1 + self.terms.len())
    }

    /// Checks the scheme against a task and returns the resolved `H_i`.
    pub fn validate<S: Scalar>(&self, task: &TaskSpec<S>) -> Result<Vec<Vec<usize>>> {
        let bad = |m: String| Err(Error::InvalidScheme(m));
        for t in &self.terms {
            if !(0.0..=1.0).contains(&t.mask_level) {
                return Err(Error::NoiseLevelOutOfRange(t.mask_level));
            }
            if !t.weight.is_finite() {
                return bad(format!("weight {} is not finite", t.weight));
            }
        }
        if task.history.is_empty() && !self.terms.is_empty() && self.total_weight() != 1.0 {
            return bad(format!(
                "guidance weight {} with empty history guides toward nothing",
                self.total_weight()
            ));
        }
        if let Some(subs) = &self.generation_subsequences {
            let g = task.generated();
            if subs.is_empty() {
                return bad("generation_subsequences is empty".into());
            }
            let mut covered = vec![false; task.frames];
            for s in subs {
                if s.is_empty() {
                    return bad("empty generation subsequence".into());
                }
                for &t in s {
                    if !g.contains(&t) {
                        return bad(format!("subsequence frame {t} is not generated"));
                    }
                    covered[t] = true;
                }
            }
            if let Some(t) = g.iter().find(|&&t| !covered[t]) {
                return bad(format!("generated frame {t} is not covered by any subsequence"));
            }
        }
        self.terms.iter().map(|t| t.resolve(task)).collect()
    }
}

/// Which conditioning a model input encodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Branch<'a> {
    Unconditional,
    Term(&'a GuidanceTerm),
}

/// Assembles one full-length model input.
///
/// `x_g` holds the current `|G| × D` generated frames at level `current`.
/// With `subset = Some(G_j)`, generated frames outside `G_j` are masked.
pub fn build_model_input<S: Scalar, R: Rng + ?Sized>(
    task: &TaskSpec<S>,
    branch: Branch<'_>,
    current: NoiseLevel<S>,
    x_g: &[S],
    subset: Option<&[usize]>,
    rng: &mut R,
    schedule: &NoiseSchedule<S>,
) -> Result<(Vec<S>, NoiseLevelVector<S>)> {
    let g = task.generated();
    let d = task.dim;
    if x_g.len() != g.len() * d {
        return Err(Error::ShapeMismatch(format!(
            "x_G has {} entries, expected {}×{d}",
            x_g.len(),
            g.len()
        )));
    }
    let (h_i, k_hi) = match branch {
        Branch::Unconditional => (Vec::new(), 0.0),
        Branch::Term(term) => {
            if !(0.0..=1.0).contains(&term.mask_level) {
                return Err(Error::NoiseLevelOutOfRange(term.mask_level));
            }
            (term.resolve(task)?, term.mask_level)
        }
    };
    let stab = task.history_noise;
    let mut data = Vec::with_capacity(task.frames * d);
    let mut levels = Vec::with_capacity(task.frames);
    let mut gi = 0;
    for t in 0..task.frames {
        if let Some(hv) = task.history_frame(t) {
            let eps: Vec<S> = (0..d).map(|_| S::sample_normal(rng)).collect();
            if h_i.contains(&t) {
                // the larger of the term's masking level and the stabilization level wins
                let (k, diffuse) = if k_hi >= stab.level {
                    (k_hi, true)
                } else {
                    (stab.level, stab.mode == StabilizationMode::Diffused)
                };
                let k = NoiseLevel::new(S::of(k))?;
                if diffuse {
                    let (a, s) = schedule.alpha_sigma(k);
                    data.extend(hv.iter().zip(&eps).map(|(&x, &e)| a * x + s * e));
                } else {
                    data.extend_from_slice(hv);
                }
                levels.push(k);
            } else {
                data.extend(eps);
                levels.push(NoiseLevel::masked());
            }
        } else if task.masked.contains(&t) {
            data.extend((0..d).map(|_| S::sample_normal(rng)));
            levels.push(NoiseLevel::masked());
        } else {
            if subset.is_none_or(|s| s.contains(&t)) {
                data.extend_from_slice(&x_g[gi * d..(gi + 1) * d]);
                levels.push(current);
            } else {
                data.extend((0..d).map(|_| S::sample_normal(rng)));
                levels.push(NoiseLevel::masked());
            }
            gi += 1;
        }
    }
    Ok((data, NoiseLevelVector(levels)))
}

/// `s∅ + Σ ωᵢ (sⁱ − s∅)`, evaluated as `(1 − Σ ωᵢ) s∅ + Σ ωᵢ sⁱ` so that a
/// single unit-weight term returns `s¹` exactly.
pub fn compose_scores<S: Scalar>(unconditional: &[S], conditionals: &[(&[S], f64)]) -> Result<Vec<S>> {
    for (s, _) in conditionals {
        if s.len() != unconditional.len() {
            return Err(Error::ShapeMismatch(format!(
                "branch score has {} entries, unconditional has {}",
                s.len(),
                unconditional.len()
            )));
        }
    }
    let total: f64 = conditionals.iter().map(|(_, w)| w).sum();
    if conditionals.is_empty() {
        return Ok(unconditional.to_vec());
    }
    let c0 = S::of(1.0 - total);
    let mut out: Vec<S> = unconditional.iter().map(|&u| c0 * u).collect();
    for (s, w) in conditionals {
        let w = S::of(*w);
        for (o, &v) in out.iter_mut().zip(*s) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Frame-wise mean over the subsequences containing each frame of `G`.
///
/// `inner[j]` is `|G_j| × D` in the order of `subsequences[j]`.
pub fn compose_extended<S: Scalar>(
    generated: &[usize],
    subsequences: &[Vec<usize>],
    inner: &[Vec<S>],
    dim: usize,
) -> Result<Vec<S>> {
    if subsequences.len() != inner.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} subsequences but {} inner scores",
            subsequences.len(),
            inner.len()
        )));
    }
    let mut sum = vec![S::zero(); generated.len() * dim];
    let mut count = vec![0usize; generated.len()];
    for (sub, vals) in subsequences.iter().zip(inner) {
        if vals.len() != sub.len() * dim {
            return Err(Error::ShapeMismatch(format!(
                "inner score has {} entries, subsequence needs {}",
                vals.len(),
                sub.len() * dim
            )));
        }
        for (j, t) in sub.iter().enumerate() {
            let gi = generated
                .iter()
                .position(|g| g == t)
                .ok_or_else(|| Error::InvalidScheme(format!("frame {t} is not generated")))?;
            count[gi] += 1;
            for c in 0..dim {
                sum[gi * dim + c] += vals[j * dim + c];
            }
        }
    }
    if let Some(gi) = count.iter().position(|&c| c == 0) {
        return Err(Error::InvalidScheme(format!("generated frame {} is uncovered", generated[gi])));
    }
    for (gi, &c) in count.iter().enumerate() {
        let inv = S::one() / S::of(c as f64);
        sum[gi * dim..(gi + 1) * dim].iter_mut().for_each(|v| *v *= inv);
    }
    Ok(sum)
}

/// Preset form used in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SchemeConfig {
    Unconditional,
    Conditional,
    Vanilla {
        omega: f64,
    },
    Fractional {
        omega: f64,
        k_h: f64,
    },
    Temporal {
        terms: Vec<TemporalTerm>,
    },
    Extended {
        terms: Vec<TemporalTerm>,
        generation_subsequences: Vec<Vec<usize>>,
    },
    Custom {
        #[serde(default)]
        name: String,
        terms: Vec<GuidanceTerm>,
        #[serde(default)]
        generation_subsequences: Option<Vec<Vec<usize>>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemporalTerm {
    pub history_indices: Vec<usize>,
    pub weight: f64,
}

impl SchemeConfig {
    pub fn build(&self) -> Result<GuidanceScheme> {
        let pairs = |ts: &[TemporalTerm]| ts.iter().map(|t| (t.history_indices.clone(), t.weight)).collect();
        Ok(match self {
            SchemeConfig::Unconditional => GuidanceScheme::unconditional(),
            SchemeConfig::Conditional => GuidanceScheme::conditional(),
            SchemeConfig::Vanilla { omega } => GuidanceScheme::vanilla(*omega),
            SchemeConfig::Fractional { omega, k_h } => GuidanceScheme::fractional(*omega, *k_h)?,
            SchemeConfig::Temporal { terms } => GuidanceScheme::temporal(pairs(terms)),
            SchemeConfig::Extended {
                terms,
                generation_subsequences,
            } => GuidanceScheme::extended(pairs(terms), generation_subsequences.clone()),
            SchemeConfig::Custom {
                name,
                terms,
                generation_subsequences,
            } => GuidanceScheme {
                name: if name.is_empty() { "custom".into() } else { name.clone() },
                terms: terms.clone(),
                generation_subsequences: generation_subsequences.clone(),
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn task() -> TaskSpec<f64> {
        TaskSpec::new(4, 1, vec![0, 1], vec![0.3, -0.7]).unwrap()
    }

    #[test]
    fn presets() {
        let f = GuidanceScheme::fractional(3.0, 0.4).unwrap();
        assert_eq!(f.terms, vec![GuidanceTerm::full(0.0, 1.0), GuidanceTerm::full(0.4, 2.0)]);
        assert!(GuidanceScheme::fractional(3.0, 0.0).is_err());
        let t = GuidanceScheme::temporal(vec![(vec![0, 1, 2], 2.0), (vec![1, 2, 3], 2.0)]);
        assert_eq!(t.terms.len(), 2);
        assert!(t.terms.iter().all(|t| t.weight == 2.0 && t.mask_level == 0.0));
        assert_eq!(t.evaluations_per_step(), 3);
    }

    #[test]
    fn input_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sch = NoiseSchedule::cosine();
        let task = task();
        let term = GuidanceTerm::full(0.0, 1.0);
        let k = NoiseLevel::new(0.5).unwrap();
        let (x, l) = build_model_input(&task, Branch::Term(&term), k, &[1.0, 2.0], None, &mut rng, &sch).unwrap();
        assert_eq!(x, vec![0.3, -0.7, 1.0, 2.0]);
        assert_eq!(l.values(), vec![0.0, 0.0, 0.5, 0.5]);
        let (x, l) = build_model_input(&task, Branch::Unconditional, k, &[1.0, 2.0], None, &mut rng, &sch).unwrap();
        assert_eq!(l.values(), vec![1.0, 1.0, 0.5, 0.5]);
        assert_ne!(&x[..2], &[0.3, -0.7]);
        let part = GuidanceTerm::subset(vec![1], 0.0, 1.0);
        let (x, l) = build_model_input(&task, Branch::Term(&part), k, &[1.0, 2.0], Some(&[3]), &mut rng, &sch).unwrap();
        assert_eq!(l.values(), vec![1.0, 0.0, 1.0, 0.5]);
        assert_eq!((x[1], x[3]), (-0.7, 2.0));
        let outside = GuidanceTerm::subset(vec![2], 0.0, 1.0);
        assert!(build_model_input(&task, Branch::Term(&outside), k, &[1.0, 2.0], None, &mut rng, &sch).is_err());
    }

    #[test]
    fn stabilization_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sch = NoiseSchedule::cosine();
        let declared = task().with_history_noise(HistoryNoise { level: 0.02, mode: StabilizationMode::Declared }).unwrap();
        let term = GuidanceTerm::full(0.0, 1.0);
        let k = NoiseLevel::masked();
        let (x, l) = build_model_input(&declared, Branch::Term(&term), k, &[0.0, 0.0], None, &mut rng, &sch).unwrap();
        assert_eq!(&x[..2], &[0.3, -0.7]);
        assert_eq!(l.get(0), 0.02);
        let diffused = task().with_history_noise(HistoryNoise { level: 0.02, mode: StabilizationMode::Diffused }).unwrap();
        let (x, _) = build_model_input(&diffused, Branch::Term(&term), k, &[0.0, 0.0], None, &mut rng, &sch).unwrap();
        assert_ne!(x[0], 0.3);
        // a fractional level above the stabilization level takes precedence
        let frac = GuidanceTerm::full(0.4, 1.0);
        let (_, l) = build_model_input(&declared, Branch::Term(&frac), k, &[0.0, 0.0], None, &mut rng, &sch).unwrap();
        assert_eq!(l.get(1), 0.4);
    }

    #[test]
    fn composition_examples() {
        let s = compose_scores(&[0.0], &[(&[2.0][..], 1.5), (&[-1.0][..], 0.5)]).unwrap();
        assert_eq!(s, vec![2.5]);
        assert_eq!(compose_scores(&[0.7, 0.1], &[]).unwrap(), vec![0.7, 0.1]);
        assert_eq!(compose_scores(&[0.7], &[(&[0.123456789][..], 1.0)]).unwrap(), vec![0.123456789]);
        assert!(compose_scores(&[0.7], &[(&[0.1, 0.2][..], 1.0)]).is_err());
    }

    #[test]
    fn extended_averaging() {
        let g = vec![4, 5, 6, 7];
        let subs = vec![vec![4, 5, 6], vec![5, 6, 7]];
        let out = compose_extended(&g, &subs, &[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]], 1).unwrap();
        assert_eq!(out, vec![1.0, 3.0, 4.0, 6.0]);
        assert!(compose_extended(&g, &subs[..1], &[vec![1.0, 2.0, 3.0]], 1).is_err());
    }

    #[test]
    fn empty_history_guidance_flagged() {
        let t = TaskSpec::<f64>::unconditional(3, 1);
        assert!(GuidanceScheme::vanilla(2.0).validate(&t).is_err());
        assert!(GuidanceScheme::vanilla(1.0).validate(&t).is_ok());
        assert!(GuidanceScheme::unconditional().validate(&t).is_ok());
    }

    #[test]
    fn scheme_config_presets() {
        let c: SchemeConfig = serde_json::from_str(r#"{"preset":"fractional","omega":4,"k_h":0.4}"#).unwrap();
        assert_eq!(c.build().unwrap().terms, GuidanceScheme::fractional(4.0, 0.4).unwrap().terms);
        let c: SchemeConfig = serde_json::from_str(
            r#"{"preset":"custom","terms":[{"history_indices":[0],"mask_level":0.2,"weight":1.5}]}"#,
        )
        .unwrap();
        assert_eq!(c.build().unwrap().terms[0], GuidanceTerm::subset(vec![0], 0.2, 1.5));
    }
}
