//! Binary model checkpoints.
//!
//! Layout: the magic `MDL1`, a little-endian `u32` header length, a JSON
//! header of that many bytes, then every tensor as little-endian `f32` in
//! header order. Trained parameters are already f32-representable, so a
//! save/load round trip reproduces them bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::ScheduleParams;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

use super::classifier::{ClassifierConfig, ClassifierModel};
use super::denoiser::{DenoiserConfig, DenoiserModel};

pub const MAGIC: &[u8; 4] = b"MDL1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Denoiser,
    Classifier,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in f32 elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: ModelKind,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub schedule: Option<ScheduleParams>,
    pub seed: u64,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CheckpointModel {
    Denoiser(DenoiserModel),
    Classifier(ClassifierModel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: CheckpointModel,
    /// Diffusion schedule the denoiser was trained with.
    pub schedule: Option<ScheduleParams>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn denoiser(model: DenoiserModel, schedule: ScheduleParams) -> Self {
        Self {
            model: CheckpointModel::Denoiser(model),
            schedule: Some(schedule),
            meta: BTreeMap::new(),
        }
    }

    pub fn classifier(model: ClassifierModel) -> Self {
        Self {
            model: CheckpointModel::Classifier(model),
            schedule: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self.model {
            CheckpointModel::Denoiser(_) => ModelKind::Denoiser,
            CheckpointModel::Classifier(_) => ModelKind::Classifier,
        }
    }

    pub fn into_denoiser(self) -> Result<(DenoiserModel, ScheduleParams)> {
        match self.model {
            CheckpointModel::Denoiser(m) => Ok((m, self.schedule.unwrap_or_default())),
            CheckpointModel::Classifier(_) => Err(Error::format("kind", "expected a denoiser checkpoint")),
        }
    }

    pub fn into_classifier(self) -> Result<ClassifierModel> {
        match self.model {
            CheckpointModel::Classifier(m) => Ok(m),
            CheckpointModel::Denoiser(_) => Err(Error::format("kind", "expected a classifier checkpoint")),
        }
    }

    fn parts(&self) -> Result<(serde_json::Value, &ParamStore, u64)> {
        Ok(match &self.model {
            CheckpointModel::Denoiser(m) => (serde_json::to_value(m.config())?, m.params(), m.seed),
            CheckpointModel::Classifier(m) => (serde_json::to_value(m.config())?, m.params(), m.seed),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (config, params, seed) = self.parts()?;
        let mut tensors = Vec::with_capacity(params.len());
        let mut offset = 0;
        for (name, t) in params.iter() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
        }
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            kind: self.kind(),
            config,
            tensors,
            schedule: self.schedule,
            seed,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in params.iter() {
            for v in t.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::format("magic", "not a model checkpoint"));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let Some(json) = bytes.get(8..8 + hlen) else {
            return Err(Error::format("header", "truncated"));
        };
        let header: CheckpointHeader = serde_json::from_slice(json)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::format(
                "format_version",
                format!("unsupported version {}", header.format_version),
            ));
        }
        let data = &bytes[8 + hlen..];
        if data.len() % 4 != 0 {
            return Err(Error::format("data", "length is not a multiple of 4"));
        }
        let values: Vec<f64> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let mut store = ParamStore::new();
        let mut expected_offset = 0;
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            if entry.offset != expected_offset || entry.offset + n > values.len() {
                return Err(Error::format("tensors", format!("bad extent for `{}`", entry.name)));
            }
            let t = Tensor::from_vec(&entry.shape, values[entry.offset..entry.offset + n].to_vec())
                .map_err(|e| Error::format("tensors", format!("`{}`: {e}", entry.name)))?;
            store.add(entry.name.clone(), t);
            expected_offset += n;
        }
        if expected_offset != values.len() {
            return Err(Error::format(
                "data",
                format!("{} values for {} declared", values.len(), expected_offset),
            ));
        }
        let model = match header.kind {
            ModelKind::Denoiser => {
                let config: DenoiserConfig = serde_json::from_value(header.config)?;
                CheckpointModel::Denoiser(DenoiserModel::from_parts(config, store, header.seed)?)
            }
            ModelKind::Classifier => {
                let config: ClassifierConfig = serde_json::from_value(header.config)?;
                CheckpointModel::Classifier(ClassifierModel::from_parts(config, store, header.seed)?)
            }
        };
        Ok(Self {
            model,
            schedule: header.schedule,
            meta: header.meta,
        })
    }
}

/// Hex SHA-256 of a byte string.
pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes via a temporary sibling file and a rename. Returns the digest of
/// the written bytes.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<String> {
    let bytes = ckpt.to_bytes()?;
    crate::io::write_atomic(path, &bytes)?;
    Ok(digest_bytes(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
