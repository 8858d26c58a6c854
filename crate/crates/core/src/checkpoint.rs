//! Single-file checkpoint: format version, configuration echo and named
//! parameter tensors with shapes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Architecture, Model};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "dfrnn-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: RunConfig,
    pub architecture: Architecture,
    pub epoch: usize,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(model: &Model, config: &RunConfig, architecture: Architecture, epoch: usize) -> Self {
        let tensors = model
            .params
            .iter()
            .map(|(_, name, t)| NamedTensor {
                name: name.to_string(),
                shape: [t.rows(), t.cols()],
                data: t.data().to_vec(),
            })
            .collect();
        Self {
            format: FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: RunConfig {
                model: model.config.clone(),
                ..config.clone()
            },
            architecture,
            epoch,
            tensors,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// Parse checkpoint text; `context` prefixes error messages.
    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("{context}: {e}")))?;
        if ck.format != FORMAT {
            return Err(Error::Checkpoint(format!("{context}: not a checkpoint")));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{context}: version {} unsupported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }

    /// Rebuild the model; tensor names and shapes must match the echoed
    /// model configuration.
    pub fn model(&self) -> Result<Model> {
        let mut store = ParamStore::new();
        for t in &self.tensors {
            let [r, c] = t.shape;
            if r * c != t.data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has {} values for shape {r}x{c}",
                    t.name,
                    t.data.len()
                )));
            }
            if store.id_of(&t.name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {}", t.name)));
            }
            store.add(t.name.clone(), Tensor::from_vec(r, c, t.data.clone()));
        }
        Model::with_params(self.config.model.clone(), store)
    }
}
