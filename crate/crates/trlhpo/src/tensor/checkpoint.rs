//! Parameter checkpoints: a JSON manifest of named tensors plus named
//! scalars, with a format/version header.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Tensor;

pub const CHECKPOINT_FORMAT: &str = "trlhpo-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("not a {CHECKPOINT_FORMAT} file (format {format:?}, version {version})")]
    WrongHeader { format: String, version: u32 },
    #[error("checkpoint entry {name:?}: shape {shape:?} does not hold {len} values")]
    BadEntry {
        name: String,
        shape: Vec<usize>,
        len: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub params: Vec<NamedTensor>,
    #[serde(default)]
    pub scalars: BTreeMap<String, f64>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            params: Vec::new(),
            scalars: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.params.push(NamedTensor {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        });
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| Tensor::new(p.shape.clone(), p.data.clone()).expect("validated entry"))
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let ckpt: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::WrongHeader {
                format: ckpt.format,
                version: ckpt.version,
            });
        }
        for p in &ckpt.params {
            if p.shape.iter().product::<usize>() != p.data.len() {
                return Err(CheckpointError::BadEntry {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    len: p.data.len(),
                });
            }
        }
        Ok(ckpt)
    }
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new()
    }
}
