//! Self-describing checkpoint container.
//!
//! Checkpoints are safetensors files. All non-tensor fields (model kind,
//! configs, schedule parameters, seeds, step counters) live in one JSON
//! object stored under the `mitodiff` metadata key, so the header bytes are
//! deterministic.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::Module;

pub const FORMAT: &str = "mitodiff-checkpoint/1";
const META_KEY: &str = "mitodiff";

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub tensors: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        let mut ckpt = Self::default();
        ckpt.metadata.insert("format".into(), FORMAT.into());
        ckpt.metadata.insert("kind".into(), kind.into());
        ckpt
    }

    pub fn kind(&self) -> Option<&str> {
        self.metadata.get("kind").and_then(|v| v.as_str())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        match self.kind() {
            Some(k) if k == kind => Ok(()),
            other => Err(Error::validation(format!(
                "expected a {kind} checkpoint, found {other:?}"
            ))),
        }
    }

    pub fn set<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        self.metadata
            .insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        let value = self
            .metadata
            .get(key)
            .ok_or_else(|| Error::validation(format!("checkpoint is missing `{key}`")))?;
        Ok(serde_json::from_value(value.clone())?)
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.insert(name.into(), StoredTensor { shape, data });
    }

    pub fn tensor(&self, name: &str) -> Result<&StoredTensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::validation(format!("checkpoint is missing tensor `{name}`")))
    }

    /// Stores every parameter of `module` under `prefix`.
    pub fn insert_module(&mut self, prefix: &str, module: &impl Module) {
        for p in module.params() {
            self.insert(
                format!("{prefix}{}", p.name()),
                p.shape().to_vec(),
                p.value.clone(),
            );
        }
    }

    /// Overwrites the parameters of `module` with the stored values under `prefix`.
    pub fn load_module(&self, prefix: &str, module: &mut impl Module) -> Result<()> {
        for p in module.params_mut() {
            let name = format!("{prefix}{}", p.name());
            let stored = self.tensor(&name)?;
            if stored.shape != p.shape() {
                return Err(Error::validation(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    stored.shape,
                    p.shape()
                )));
            }
            p.value.copy_from_slice(&stored.data);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let raw: Vec<(&String, Vec<u8>, &StoredTensor)> = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let bytes = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
                (name, bytes, t)
            })
            .collect();
        let views = raw
            .iter()
            .map(|(name, bytes, t)| {
                TensorView::new(Dtype::F32, t.shape.clone(), bytes)
                    .map(|view| (name.as_str(), view))
                    .map_err(|e| Error::validation(format!("tensor `{name}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta = HashMap::from([(
            META_KEY.to_string(),
            serde_json::to_string(&self.metadata)?,
        )]);
        safetensors::serialize(views, Some(meta))
            .map_err(|e| Error::validation(format!("serializing checkpoint: {e}")))
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| e.to_string())?;
        let meta_json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or("missing checkpoint metadata")?;
        let metadata: BTreeMap<String, serde_json::Value> =
            serde_json::from_str(meta_json).map_err(|e| e.to_string())?;
        if metadata.get("format").and_then(|v| v.as_str()) != Some(FORMAT) {
            return Err(format!("unsupported checkpoint format, expected {FORMAT}"));
        }
        let st = SafeTensors::deserialize(bytes).map_err(|e| e.to_string())?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(format!("tensor `{name}` is not f32"));
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.insert(
                name,
                StoredTensor {
                    shape: view.shape().to_vec(),
                    data,
                },
            );
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|message| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        })
    }
}
