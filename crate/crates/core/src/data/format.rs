use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scene::{SamplePair, SceneSpec};
use crate::error::{Error, Result};
use crate::fsutil::write_dir_atomically;
use crate::matching::GroundTruthObject;
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"MDTB";
pub const TENSOR_VERSION: u8 = 1;
pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

fn format_error(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

/// Serializes with 32-bit reals; every value must be exactly representable.
pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::contract("tensor rank exceeds 255"))?;
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(TENSOR_VERSION);
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::contract("tensor dim exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        let f = v as f32;
        if f64::from(f) != v && !v.is_nan() {
            return Err(Error::contract(format!("value {v} is not representable as f32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

/// Parses a tensor file image; `path` is used only in error reports.
pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let need = |offset: usize, len: usize, what: &str| -> Result<&[u8]> {
        bytes
            .get(offset..offset + len)
            .ok_or_else(|| format_error(path, bytes.len(), format!("truncated {what}")))
    };
    if need(0, 4, "magic")? != TENSOR_MAGIC {
        return Err(format_error(path, 0, "bad magic"));
    }
    let version = need(4, 1, "version")?[0];
    if version != TENSOR_VERSION {
        return Err(format_error(path, 4, format!("unsupported version {version}")));
    }
    let rank = need(5, 1, "rank")?[0] as usize;
    let mut offset = 6;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u32::from_le_bytes(need(offset, 4, "shape")?.try_into().expect("4 bytes"));
        if d == 0 {
            return Err(format_error(path, offset, "zero dimension"));
        }
        shape.push(d as usize);
        offset += 4;
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_error(path, 6, "shape overflows"))?;
    let payload = numel
        .checked_mul(4)
        .ok_or_else(|| format_error(path, 6, "shape overflows"))?;
    let body = need(offset, payload, "payload")?;
    if bytes.len() != offset + payload {
        return Err(format_error(path, offset + payload, "trailing bytes"));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Tensor::new(&shape, data)
}

pub fn write_tensor_file(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub frame_t: String,
    pub frame_t1: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<String>,
    pub objects: Vec<GroundTruthObject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    #[serde(default)]
    pub spec: Option<SceneSpec>,
    pub samples: Vec<SampleRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: Option<SceneSpec>,
    pub samples: Vec<SamplePair>,
}

impl Dataset {
    pub fn has_flow(&self) -> bool {
        self.samples.iter().all(|s| s.flow.is_some())
    }
}

/// Writes into a staging directory, then renames it into place.
///
/// An existing target is replaced only if it is empty or holds a manifest.
pub fn write_dataset(dir: &Path, spec: Option<&SceneSpec>, samples: &[SamplePair]) -> Result<()> {
    let is_dataset = |d: &Path| d.join(MANIFEST).is_file();
    write_dir_atomically(dir, is_dataset, |stage| {
        let mut records = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let name = |part: &str| format!("sample_{i:05}_{part}.mdtb");
            let rec = SampleRecord {
                frame_t: name("frame_t"),
                frame_t1: name("frame_t1"),
                flow: s.flow.as_ref().map(|_| name("flow")),
                objects: s.objects.clone(),
            };
            write_tensor_file(&stage.join(&rec.frame_t), &s.frame_t)?;
            write_tensor_file(&stage.join(&rec.frame_t1), &s.frame_t1)?;
            if let (Some(f), Some(file)) = (&s.flow, &rec.flow) {
                write_tensor_file(&stage.join(file), f)?;
            }
            records.push(rec);
        }
        let manifest = Manifest {
            format_version: DATASET_FORMAT_VERSION,
            spec: spec.cloned(),
            samples: records,
        };
        let path = stage.join(MANIFEST);
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    })
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_slice(&text).map_err(|e| {
        format_error(&path, 0, format!("invalid manifest: {e}"))
    })?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(format_error(
            &path,
            0,
            format!("unsupported dataset format version {}", manifest.format_version),
        ));
    }
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for rec in &manifest.samples {
        let frame_t = read_tensor_file(&dir.join(&rec.frame_t))?;
        let frame_t1 = read_tensor_file(&dir.join(&rec.frame_t1))?;
        let flow = rec
            .flow
            .as_ref()
            .map(|f| read_tensor_file(&dir.join(f)))
            .transpose()?;
        let rgb_shape = frame_t.shape().to_vec();
        if rgb_shape.len() != 3 || rgb_shape[0] != 3 || frame_t1.shape() != rgb_shape.as_slice() {
            return Err(Error::shape("dataset frames", &rgb_shape, frame_t1.shape()));
        }
        if let Some(f) = &flow {
            if f.shape() != [2, rgb_shape[1], rgb_shape[2]] {
                return Err(Error::shape("dataset flow", f.shape(), &rgb_shape));
            }
        }
        for o in &rec.objects {
            o.validate()?;
        }
        samples.push(SamplePair {
            frame_t,
            frame_t1,
            flow,
            objects: rec.objects.clone(),
        });
    }
    Ok(Dataset {
        spec: manifest.spec,
        samples,
    })
}
