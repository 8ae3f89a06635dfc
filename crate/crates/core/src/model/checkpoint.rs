use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, Model, ModelError, ModelResult};
use crate::autodiff::Tensor;
use crate::dataset::Vocab;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// JSON checkpoint: config, its hash, vocabularies and every parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub items: Vec<String>,
    pub expls: Vec<String>,
    pub params: Vec<SavedParam>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, items: &Vocab, expls: &Vocab) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            config_hash: model.config.hash(),
            items: items.ids().to_vec(),
            expls: expls.ids().to_vec(),
            params: model
                .store
                .iter()
                .map(|(_, p)| SavedParam {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the model, checking version, hash, names and shapes.
    pub fn into_model(self) -> ModelResult<(Model, Vocab, Vocab)> {
        let bad = |msg: String| ModelError::Checkpoint(msg);
        if self.format_version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported format version {}", self.format_version)));
        }
        if self.config.hash() != self.config_hash {
            return Err(bad("config hash does not match the stored config".into()));
        }
        let mut model = Model::new(self.config, self.items.len(), self.expls.len())?;
        if model.store.len() != self.params.len() {
            return Err(bad(format!(
                "expected {} parameter tensors, found {}",
                model.store.len(),
                self.params.len()
            )));
        }
        for saved in self.params {
            let id = model
                .store
                .find(&saved.name)
                .ok_or_else(|| bad(format!("unknown parameter `{}`", saved.name)))?;
            let target = model.store.get_mut(id);
            if target.shape() != saved.shape.as_slice() {
                return Err(bad(format!(
                    "`{}` has shape {:?}, expected {:?}",
                    saved.name,
                    saved.shape,
                    target.shape()
                )));
            }
            let value = Tensor::new(saved.shape, saved.data)?;
            if !value.is_finite() {
                return Err(bad(format!("`{}` holds non-finite values", saved.name)));
            }
            target.data_mut().copy_from_slice(value.data());
        }
        Ok((model, Vocab::from_ids(self.items), Vocab::from_ids(self.expls)))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, items: &Vocab, expls: &Vocab) -> ModelResult<()> {
    let path = path.as_ref();
    let json = serde_json::to_string(&Checkpoint::from_model(model, items, expls))
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    std::fs::write(path, json).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> ModelResult<(Model, Vocab, Vocab)> {
    let path = path.as_ref();
    let raw = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let ckpt: Checkpoint = serde_json::from_str(&raw).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    ckpt.into_model()
}
