//! Trained-model checkpoints.
//!
//! Layout: `"MMCK"`, version (u16 LE), header length (u64 LE), JSON header
//! (run config, model config, parameter names and shapes, fold, best step
//! and accuracy), then every parameter's values as f64 LE in header order.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::autodiff::{ParamStore, Tensor};
use crate::config::RunConfig;
use crate::encoders::{DualEncoder, ModelConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MMCK";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub model: ModelConfig,
    pub fold: usize,
    pub best_step: usize,
    pub best_val_accuracy: f64,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    run: RunConfig,
    model: ModelConfig,
    fold: usize,
    best_step: usize,
    /// null when no evaluation happened
    best_val_accuracy: Option<f64>,
    params: Vec<ParamEntry>,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = Header {
            run: self.run.clone(),
            model: self.model.clone(),
            fold: self.fold,
            best_step: self.best_step,
            best_val_accuracy: self.best_val_accuracy.is_finite().then_some(self.best_val_accuracy),
            params: self.params.iter().map(|p| ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec() }).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(14 + json.len() + 8 * self.params.num_values());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.params.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 14 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        let body = bytes.get(14..14usize.saturating_add(hlen)).ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut payload = &bytes[14 + hlen..];
        let mut params = ParamStore::new();
        for p in header.params {
            let n: usize = p.shape.iter().product();
            if payload.len() < 8 * n {
                return Err(Error::Format(format!("truncated payload for parameter `{}`", p.name)));
            }
            let data = payload[..8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            payload = &payload[8 * n..];
            params.add(p.name, Tensor::new(p.shape, data)?)?;
        }
        if !payload.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after the parameters", payload.len())));
        }
        Ok(Self {
            run: header.run,
            model: header.model,
            fold: header.fold,
            best_step: header.best_step,
            best_val_accuracy: header.best_val_accuracy.unwrap_or(f64::NAN),
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Self::decode(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    /// Rebuilds the encoders and loads the stored parameters by name.
    pub fn to_model(&self) -> Result<DualEncoder> {
        let mut model = DualEncoder::new(self.model.clone(), 0)?;
        if model.params.len() != self.params.len() {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint has {} parameters, the configured model {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for p in self.params.iter() {
            let id = model.params.find(&p.name).ok_or_else(|| Error::ConfigMismatch(format!("unknown parameter `{}`", p.name)))?;
            let target = model.params.get_mut(id);
            if target.value.shape() != p.value.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "parameter `{}` has shape {:?}, model expects {:?}",
                    p.name,
                    p.value.shape(),
                    target.value.shape()
                )));
            }
            target.value = p.value.clone();
        }
        Ok(model)
    }
}
