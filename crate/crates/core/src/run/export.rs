//! Decoder cross-attention heatmaps as PGM images, plus the input frames as
//! PPM images.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::SamplePair;
use crate::error::{Error, Result};
use crate::fsutil::write_dir_atomically;
use crate::model::{ModelConfig, Modetr, PredictionSet};
use crate::tensor::Tensor;

/// Value range below which a map counts as flat and renders all zero.
const FLAT_RANGE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMap {
    pub layer: usize,
    pub query: usize,
    /// Memory block (frame) index when the memory spans several frames.
    pub block: Option<usize>,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl AttentionMap {
    pub fn file_name(&self) -> String {
        match self.block {
            Some(b) => format!("layer{}_query{:02}_t{b}.pgm", self.layer, self.query),
            None => format!("layer{}_query{:02}.pgm", self.layer, self.query),
        }
    }
}

/// Min-max scaling to `0..=255`.
pub fn normalize_to_u8(values: &[f64]) -> Vec<u8> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if !(range > FLAT_RANGE * max.abs().max(1.0)) {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|v| (255.0 * (v - min) / range).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Head-averaged maps for every (decoder layer, query, memory block).
pub fn attention_maps(pred: &PredictionSet, config: &ModelConfig) -> Result<Vec<AttentionMap>> {
    let s = pred.cross_attention.shape();
    let (grid_h, grid_w) = config.grid();
    let tokens = grid_h * grid_w;
    let blocks = config.variant.memory_blocks();
    if s.len() != 4 || s[3] != blocks * tokens {
        return Err(Error::shape("attention maps", s, &[blocks * tokens]));
    }
    let (layers, heads, queries, mem) = (s[0], s[1], s[2], s[3]);
    let data = pred.cross_attention.data();
    let mut maps = Vec::with_capacity(layers * queries * blocks);
    for layer in 0..layers {
        for query in 0..queries {
            let mut mean = vec![0.0; mem];
            for head in 0..heads {
                let at = ((layer * heads + head) * queries + query) * mem;
                for (m, v) in mean.iter_mut().zip(&data[at..at + mem]) {
                    *m += v / heads as f64;
                }
            }
            for (b, block) in mean.chunks(tokens).enumerate() {
                maps.push(AttentionMap {
                    layer,
                    query,
                    block: (blocks > 1).then_some(b),
                    height: grid_h,
                    width: grid_w,
                    pixels: normalize_to_u8(block),
                });
            }
        }
    }
    Ok(maps)
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// `3×H×W` image in `[0,1]` as binary PPM.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("ppm", s, &[3]));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let data = image.data();
    for i in 0..plane {
        for c in 0..3 {
            out.push((data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

fn only_images(dir: &Path) -> bool {
    fs::read_dir(dir).is_ok_and(|entries| {
        entries.flatten().all(|e| {
            let name = e.file_name();
            let name = name.to_string_lossy();
            name.ends_with(".pgm") || name.ends_with(".ppm")
        })
    })
}

/// Writes every attention map and the RGB frames the model saw; returns the
/// file names in write order.
pub fn export_attention(model: &Modetr, sample: &SamplePair, out: &Path) -> Result<Vec<PathBuf>> {
    let variant = model.config.variant;
    let input = super::train::model_input(sample, variant)?;
    let pred = model.predict(&input)?;
    let maps = attention_maps(&pred, &model.config)?;
    let mut files: Vec<(String, Vec<u8>)> = maps
        .iter()
        .map(|m| (m.file_name(), encode_pgm(m.width, m.height, &m.pixels)))
        .collect();
    let frames: Vec<(&str, &Tensor)> = match variant.rgb_frames() {
        1 => vec![("frame_t1.ppm", &sample.frame_t1)],
        _ => vec![("frame_t.ppm", &sample.frame_t), ("frame_t1.ppm", &sample.frame_t1)],
    };
    for (name, frame) in frames {
        files.push((name.to_string(), encode_ppm(frame)?));
    }
    write_dir_atomically(out, only_images, |stage| {
        for (name, bytes) in &files {
            let path = stage.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    })?;
    Ok(files.into_iter().map(|(n, _)| PathBuf::from(n)).collect())
}
