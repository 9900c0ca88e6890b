//! Sequence batches, per-frame noise levels and denoiser outputs.

use crate::error::{Error, Result};
use crate::param::Parameterization;
use crate::scalar::Scalar;
use crate::schedule::NoiseLevel;

/// `B × T × D` frames, row-major, with optional `B × T` action labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch<S> {
    pub batch: usize,
    pub frames: usize,
    pub dim: usize,
    pub data: Vec<S>,
    pub actions: Option<Vec<usize>>,
}

impl<S: Scalar> SequenceBatch<S> {
    pub fn new(batch: usize, frames: usize, dim: usize, data: Vec<S>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::ShapeMismatch("batch needs T >= 1 and D >= 1".into()));
        }
        if data.len() != batch * frames * dim {
            return Err(Error::ShapeMismatch(format!(
                "{batch}x{frames}x{dim} batch given {} values",
                data.len()
            )));
        }
        Ok(Self {
            batch,
            frames,
            dim,
            data,
            actions: None,
        })
    }

    pub fn zeros(batch: usize, frames: usize, dim: usize) -> Self {
        Self {
            batch,
            frames,
            dim,
            data: vec![S::zero(); batch * frames * dim],
            actions: None,
        }
    }

    pub fn with_actions(mut self, actions: Vec<usize>) -> Result<Self> {
        if actions.len() != self.batch * self.frames {
            return Err(Error::ShapeMismatch(format!(
                "expected {} action labels, got {}",
                self.batch * self.frames,
                actions.len()
            )));
        }
        self.actions = Some(actions);
        Ok(self)
    }

    pub fn frame_len(&self) -> usize {
        self.dim
    }

    pub fn seq_len(&self) -> usize {
        self.frames * self.dim
    }

    pub fn sequence(&self, b: usize) -> &[S] {
        &self.data[b * self.seq_len()..(b + 1) * self.seq_len()]
    }

    pub fn sequence_mut(&mut self, b: usize) -> &mut [S] {
        let n = self.seq_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn frame(&self, b: usize, t: usize) -> &[S] {
        let o = (b * self.frames + t) * self.dim;
        &self.data[o..o + self.dim]
    }

    pub fn frame_mut(&mut self, b: usize, t: usize) -> &mut [S] {
        let o = (b * self.frames + t) * self.dim;
        &mut self.data[o..o + self.dim]
    }

    pub fn action(&self, b: usize, t: usize) -> Option<usize> {
        self.actions.as_ref().map(|a| a[b * self.frames + t])
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("sequence batch".into()))
        }
    }

    /// Keeps only the listed sequences, in order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.seq_len());
        for &b in rows {
            data.extend_from_slice(self.sequence(b));
        }
        let actions = self.actions.as_ref().map(|a| {
            rows.iter()
                .flat_map(|&b| a[b * self.frames..(b + 1) * self.frames].iter().copied())
                .collect()
        });
        Self {
            batch: rows.len(),
            frames: self.frames,
            dim: self.dim,
            data,
            actions,
        }
    }
}

/// Per-frame noise levels of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseLevelVector<S>(pub Vec<NoiseLevel<S>>);

impl<S: Scalar> NoiseLevelVector<S> {
    pub fn new(levels: &[S]) -> Result<Self> {
        levels
            .iter()
            .map(|&k| NoiseLevel::new(k))
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }

    pub fn uniform(frames: usize, k: NoiseLevel<S>) -> Self {
        Self(vec![k; frames])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, t: usize) -> S {
        self.0[t].get()
    }

    pub fn values(&self) -> Vec<S> {
        self.0.iter().map(|k| k.get()).collect()
    }

    /// Bitwise key, used to group sequences that share a level pattern.
    pub fn key(&self) -> Vec<u64> {
        self.0.iter().map(|k| k.get().f64().to_bits()).collect()
    }
}

/// Model output over all `T` frames of every sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput<S> {
    pub prediction: SequenceBatch<S>,
    pub parameterization: Parameterization,
}
