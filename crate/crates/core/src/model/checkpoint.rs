//! Checkpoints: named parameter tensors, EMA shadow, config and step.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic      b"HDCK"
//! version    u32 (= 1)
//! header_len u64
//! header     JSON: {dtype, step, config, tensors: [{name, shape}], ema}
//! payload    parameters, then EMA shadow (same order) if present
//! ```
//!
//! The header is written from a `serde_json::Value`, whose object keys are
//! ordered, so load-then-save reproduces the file byte for byte.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::tiny::{ParamEntry, TinyDenoiser, TinyDenoiserConfig};
use crate::scalar::Scalar;
use crate::tensorfile::{decode, read_u32, read_u64, DType};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    dtype: DType,
    step: u64,
    config: serde_json::Value,
    tensors: Vec<TensorMeta>,
    ema: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    /// Free-form configuration (model and training settings).
    pub config: serde_json::Value,
    pub step: u64,
    pub entries: Vec<ParamEntry>,
    pub params: Vec<S>,
    pub ema: Option<Vec<S>>,
}

impl<S: Scalar> Checkpoint<S> {
    /// Snapshot of a tiny model; the EMA shadow starts equal to the parameters.
    pub fn from_model(model: &TinyDenoiser<S>, extra: serde_json::Value) -> Result<Self> {
        let config = serde_json::json!({
            "model": serde_json::to_value(model.config()).map_err(|e| Error::Format(e.to_string()))?,
            "extra": extra,
        });
        Ok(Self {
            config,
            step: 0,
            entries: model.layout().to_vec(),
            params: model.params().to_vec(),
            ema: Some(model.params().to_vec()),
        })
    }

    pub fn model_config(&self) -> Result<TinyDenoiserConfig> {
        serde_json::from_value(self.config["model"].clone())
            .map_err(|e| Error::Format(format!("checkpoint model config: {e}")))
    }

    /// Model with raw (training) weights.
    pub fn raw_model(&self) -> Result<TinyDenoiser<S>> {
        TinyDenoiser::from_params(self.model_config()?, self.params.clone())
    }

    /// Model with EMA weights (used for sampling); falls back to raw weights.
    pub fn ema_model(&self) -> Result<TinyDenoiser<S>> {
        let w = self.ema.as_ref().unwrap_or(&self.params).clone();
        TinyDenoiser::from_params(self.model_config()?, w)
    }

    /// `shadow <- decay * shadow + (1 - decay) * param`.
    pub fn ema_update(&mut self, decay: f64) -> Result<()> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::InvalidConfig(format!("EMA decay must be in [0, 1), got {decay}")));
        }
        let d = S::of(decay);
        let one_minus = S::one() - d;
        let shadow = self.ema.get_or_insert_with(|| self.params.clone());
        for (s, &p) in shadow.iter_mut().zip(&self.params) {
            *s = d * *s + one_minus * p;
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            dtype: S::DTYPE,
            step: self.step,
            config: self.config.clone(),
            tensors: self
                .entries
                .iter()
                .map(|e| TensorMeta {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                })
                .collect(),
            ema: self.ema.is_some(),
        };
        let value = serde_json::to_value(&header).map_err(|e| Error::Format(e.to_string()))?;
        let json = serde_json::to_vec(&value).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&S::to_le_bytes_vec(&self.params))?;
        if let Some(ema) = &self.ema {
            w.write_all(&S::to_le_bytes_vec(ema))?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = read_u64(&mut r)? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Format(e.to_string()))?;
        let mut entries = Vec::with_capacity(header.tensors.len());
        let mut offset = 0;
        for t in header.tensors {
            let n: usize = t.shape.iter().product();
            entries.push(ParamEntry {
                name: t.name,
                shape: t.shape,
                offset,
            });
            offset += n;
        }
        let mut bytes = vec![0u8; offset * header.dtype.size()];
        r.read_exact(&mut bytes)?;
        let params = decode(header.dtype, &bytes);
        let ema = if header.ema {
            r.read_exact(&mut bytes)?;
            Some(decode(header.dtype, &bytes))
        } else {
            None
        };
        Ok(Self {
            config: header.config,
            step: header.step,
            entries,
            params,
            ema,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt() -> Checkpoint<f64> {
        let mut cfg = TinyDenoiserConfig::new(2, 4);
        cfg.embed_dim = 8;
        cfg.num_heads = 2;
        cfg.zero_head = false;
        let m = TinyDenoiser::<f64>::new(cfg).unwrap();
        let mut c = Checkpoint::from_model(&m, serde_json::json!({"lr": 3e-4, "note": "x"})).unwrap();
        c.step = 17;
        c
    }

    #[test]
    fn byte_identical_round_trip() {
        let c = ckpt();
        let mut a = Vec::new();
        c.write_to(&mut a).unwrap();
        let back = Checkpoint::<f64>::read_from(a.as_slice()).unwrap();
        assert_eq!(back, c);
        let mut b = Vec::new();
        back.write_to(&mut b).unwrap();
        assert_eq!(a, b);
        let m = back.ema_model().unwrap();
        assert_eq!(m.params(), c.params.as_slice());
    }

    #[test]
    fn ema_rule() {
        let mut c = ckpt();
        c.params = vec![1.0; c.params.len()];
        c.ema = Some(vec![0.0; c.params.len()]);
        c.ema_update(0.5).unwrap();
        assert!(c.ema.as_ref().unwrap().iter().all(|&v| v == 0.5));
        c.ema_update(0.0).unwrap();
        assert!(c.ema.as_ref().unwrap().iter().all(|&v| v == 1.0));
        assert!(c.ema_update(1.0).is_err());
    }
}
