//! Training regimes and their per-frame noise-level distributions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batch::NoiseLevelVector;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::NoiseLevel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Objective {
    /// Independent level per frame.
    Dfot,
    /// Independent levels on the first `max_history` frames; the rest share one.
    DfotSimplified { max_history: usize },
    /// Fixed clean history `history`; one shared level on the rest.
    Sd { history: Vec<usize> },
    /// History frames `history` each dropped (fully masked) w.p. `drop_prob`;
    /// one shared level on the rest.
    Bd { history: Vec<usize>, drop_prob: f64 },
    /// One shared level on every frame.
    Fs,
}

/// Levels for one training sequence plus which frames enter the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelDraw<S> {
    pub levels: NoiseLevelVector<S>,
    pub in_loss: Vec<bool>,
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Dfot => "dfot",
            Objective::DfotSimplified { .. } => "dfot-simplified",
            Objective::Sd { .. } => "sd",
            Objective::Bd { .. } => "bd",
            Objective::Fs => "fs",
        }
    }

    pub fn validate(&self, frames: usize) -> Result<()> {
        let check_history = |h: &[usize]| -> Result<()> {
            let mut seen = vec![false; frames];
            for &t in h {
                if t >= frames || seen[t] {
                    return Err(Error::InvalidConfig(format!(
                        "history frame {t} invalid for T = {frames}"
                    )));
                }
                seen[t] = true;
            }
            if h.len() >= frames {
                return Err(Error::InvalidConfig("history leaves no frame to generate".into()));
            }
            Ok(())
        };
        match self {
            Objective::Dfot | Objective::Fs => Ok(()),
            Objective::DfotSimplified { max_history } => {
                if *max_history == 0 || *max_history > frames {
                    Err(Error::InvalidConfig(format!(
                        "max_history must be in 1..={frames}, got {max_history}"
                    )))
                } else {
                    Ok(())
                }
            }
            Objective::Sd { history } => check_history(history),
            Objective::Bd { history, drop_prob } => {
                if !(0.0..=1.0).contains(drop_prob) {
                    return Err(Error::InvalidConfig(format!("drop_prob must be in [0, 1], got {drop_prob}")));
                }
                check_history(history)
            }
        }
    }

    /// Draws levels on the grid `{1/N, ..., 1}`; exact 0 is reserved for
    /// conditioning frames.
    pub fn sample_noise_levels<S: Scalar, R: Rng + ?Sized>(
        &self,
        frames: usize,
        grid_steps: usize,
        rng: &mut R,
    ) -> Result<LevelDraw<S>> {
        self.validate(frames)?;
        let mut draw = || NoiseLevel::grid(rng.random_range(1..=grid_steps), grid_steps);
        let mut levels = vec![NoiseLevel::masked(); frames];
        let mut in_loss = vec![true; frames];
        match self {
            Objective::Dfot => levels.iter_mut().for_each(|k| *k = draw()),
            Objective::Fs => {
                let k = draw();
                levels.iter_mut().for_each(|l| *l = k);
            }
            Objective::DfotSimplified { max_history } => {
                for l in levels.iter_mut().take(*max_history) {
                    *l = draw();
                }
                let k = draw();
                for l in levels.iter_mut().skip(*max_history) {
                    *l = k;
                }
            }
            Objective::Sd { history } => {
                let k = draw();
                levels.iter_mut().for_each(|l| *l = k);
                for &t in history {
                    levels[t] = NoiseLevel::clean();
                    in_loss[t] = false;
                }
            }
            Objective::Bd { history, drop_prob } => {
                let k = draw();
                levels.iter_mut().for_each(|l| *l = k);
                for &t in history {
                    let dropped = rng.random::<f64>() < *drop_prob;
                    levels[t] = if dropped { NoiseLevel::masked() } else { NoiseLevel::clean() };
                    in_loss[t] = false;
                }
            }
        }
        Ok(LevelDraw {
            levels: NoiseLevelVector(levels),
            in_loss,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sd_and_fs_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sd = Objective::Sd { history: vec![0] };
        for _ in 0..200 {
            let d = sd.sample_noise_levels::<f64, _>(3, 10, &mut rng).unwrap();
            assert_eq!(d.levels.get(0), 0.0);
            assert_eq!(d.levels.get(1), d.levels.get(2));
            assert_eq!(d.in_loss, vec![false, true, true]);
            let f = Objective::Fs.sample_noise_levels::<f64, _>(4, 10, &mut rng).unwrap();
            assert!(f.levels.values().windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn bd_history_is_binary() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bd = Objective::Bd { history: vec![0, 1], drop_prob: 0.5 };
        let (mut zeros, mut ones) = (0, 0);
        for _ in 0..1000 {
            let d = bd.sample_noise_levels::<f64, _>(4, 10, &mut rng).unwrap();
            for t in 0..2 {
                match d.levels.get(t) {
                    k if k == 0.0 => zeros += 1,
                    k if k == 1.0 => ones += 1,
                    k => panic!("unexpected history level {k}"),
                }
            }
            assert!(d.levels.get(2) > 0.0 && d.levels.get(2) == d.levels.get(3));
        }
        assert!(zeros > 850 && ones > 850);
    }

    #[test]
    fn validation() {
        assert!(Objective::DfotSimplified { max_history: 0 }.validate(4).is_err());
        assert!(Objective::DfotSimplified { max_history: 5 }.validate(4).is_err());
        assert!(Objective::Sd { history: vec![4] }.validate(4).is_err());
        assert!(Objective::Sd { history: vec![0, 1, 2, 3] }.validate(4).is_err());
        assert!(Objective::Bd { history: vec![0], drop_prob: 1.5 }.validate(4).is_err());
    }
}
