//! JSON checkpoint container.
//!
//! ```text
//! {
//!   "format": "dema-checkpoint",
//!   "version": 1,
//!   "config": { ...ModelConfig fields... },
//!   "tensors": [ { "name": "block0.ssd.a_log", "shape": [16], "data": [...] }, ... ]
//! }
//! ```
//!
//! Tensors are listed in parameter creation order. Loading rebuilds the
//! model from `config` and requires every parameter to be present with a
//! matching shape.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DemaError, Result};
use crate::tensor::Tensor;

use super::{Model, ModelConfig};

pub const CHECKPOINT_FORMAT: &str = "dema-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        let store = model.store();
        let tensors = store
            .ids()
            .map(|id| NamedTensor {
                name: store.name(id).to_string(),
                shape: store.get(id).shape().to_vec(),
                data: store.get(id).data().to_vec(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            tensors,
        }
    }

    pub fn into_model(self) -> Result<Model> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(DemaError::Checkpoint(format!(
                "unknown format `{}`",
                self.format
            )));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(DemaError::Checkpoint(format!(
                "unsupported version {}",
                self.version
            )));
        }
        let mut model = Model::new(self.config, 0)?;
        let store = model.store_mut();
        if self.tensors.len() != store.len() {
            return Err(DemaError::Checkpoint(format!(
                "expected {} tensors, found {}",
                store.len(),
                self.tensors.len()
            )));
        }
        for t in self.tensors {
            let id = store
                .find(&t.name)
                .ok_or_else(|| DemaError::Checkpoint(format!("unexpected tensor `{}`", t.name)))?;
            let value = Tensor::new(t.shape, t.data)
                .map_err(|e| DemaError::Checkpoint(format!("{}: {e}", t.name)))?;
            store
                .set(id, value)
                .map_err(|e| DemaError::Checkpoint(format!("{}: {e}", t.name)))?;
        }
        Ok(model)
    }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_vec(&Checkpoint::from_model(model))?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let ckpt: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
    ckpt.into_model()
}
