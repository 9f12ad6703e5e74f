//! Checkpoint file: magic, a little-endian `u64` header length, a JSON
//! header, then every tensor as little-endian `f64` values.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::optim::Adam;
use super::train::Trainer;
use crate::error::{Error, Result};
use crate::fsutil::write_file_atomically;
use crate::model::Modetr;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"MODETR1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Param,
    FirstMoment,
    SecondMoment,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    role: Role,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: RunConfig,
    step: usize,
    optimizer_steps: u64,
    rng: ChaCha8Rng,
    tensors: Vec<Entry>,
}

/// Everything needed to resume a run or evaluate its model.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamStore,
    pub optimizer: Adam,
    pub step: usize,
    pub rng: ChaCha8Rng,
}

impl From<&Trainer> for Checkpoint {
    fn from(t: &Trainer) -> Self {
        Checkpoint {
            config: t.config.clone(),
            params: t.model.params.clone(),
            optimizer: t.optimizer.clone(),
            step: t.step,
            rng: t.rng.clone(),
        }
    }
}

impl Checkpoint {
    pub fn into_trainer(self) -> Result<Trainer> {
        let model = Modetr::from_params(self.config.model.clone(), self.params)?;
        Ok(Trainer {
            config: self.config,
            model,
            optimizer: self.optimizer,
            step: self.step,
            rng: self.rng,
        })
    }

    pub fn model(&self) -> Result<Modetr> {
        Modetr::from_params(self.config.model.clone(), self.params.clone())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut payload: Vec<u8> = Vec::new();
        let mut tensors = Vec::new();
        let moments = [
            (Role::FirstMoment, &self.optimizer.first_moment),
            (Role::SecondMoment, &self.optimizer.second_moment),
        ];
        for (name, t) in self.params.iter() {
            tensors.push(Entry {
                name: name.to_string(),
                role: Role::Param,
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
            });
            t.data().iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes()));
        }
        for (role, values) in moments {
            if values.len() != self.params.len() {
                return Err(Error::contract("optimizer state does not match the parameters"));
            }
            for ((name, t), m) in self.params.iter().zip(values) {
                tensors.push(Entry {
                    name: name.to_string(),
                    role,
                    shape: t.shape().to_vec(),
                    offset: payload.len() as u64,
                });
                m.iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes()));
            }
        }
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            step: self.step,
            optimizer_steps: self.optimizer.t,
            rng: self.rng.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(15 + json.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |offset: usize, msg: String| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            msg,
        };
        let magic_len = CHECKPOINT_MAGIC.len();
        if bytes.get(..magic_len) != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(err(0, "bad checkpoint magic".into()));
        }
        let len_bytes = bytes
            .get(magic_len..magic_len + 8)
            .ok_or_else(|| err(bytes.len(), "truncated header length".into()))?;
        let header_len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes"));
        let header_start = magic_len + 8;
        let payload_start = usize::try_from(header_len)
            .ok()
            .and_then(|l| l.checked_add(header_start))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| err(bytes.len(), format!("header of {header_len} bytes is truncated")))?;
        let header: Header = serde_json::from_slice(&bytes[header_start..payload_start])
            .map_err(|e| err(header_start, format!("invalid header: {e}")))?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(err(header_start, format!("unsupported version {}", header.format_version)));
        }
        let payload = &bytes[payload_start..];
        let mut expected_end = 0u64;
        let mut params = ParamStore::new();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for entry in &header.tensors {
            let numel: usize = entry.shape.iter().product();
            if entry.offset != expected_end {
                return Err(err(payload_start, format!("tensor {} is not contiguous", entry.name)));
            }
            let start = entry.offset as usize;
            let end = start + 8 * numel;
            let raw = payload
                .get(start..end)
                .ok_or_else(|| err(bytes.len(), format!("payload of {} is truncated", entry.name)))?;
            expected_end = end as u64;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            match entry.role {
                Role::Param => {
                    if params.id(&entry.name).is_some() {
                        return Err(err(header_start, format!("duplicate parameter {}", entry.name)));
                    }
                    params.insert(entry.name.clone(), Tensor::new(&entry.shape, values)?);
                }
                Role::FirstMoment => first.push(values),
                Role::SecondMoment => second.push(values),
            }
        }
        if expected_end as usize != payload.len() {
            return Err(err(payload_start + expected_end as usize, "trailing bytes".into()));
        }
        if first.len() != params.len() || second.len() != params.len() {
            return Err(err(header_start, "optimizer state does not match the parameters".into()));
        }
        let optimizer = Adam {
            config: header.config.optimizer.clone(),
            t: header.optimizer_steps,
            first_moment: first,
            second_moment: second,
        };
        let ckpt = Checkpoint {
            config: header.config,
            params,
            optimizer,
            step: header.step,
            rng: header.rng,
        };
        // Validates names and shapes against the architecture.
        ckpt.model().map_err(|e| err(header_start, e.to_string()))?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file_atomically(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}
