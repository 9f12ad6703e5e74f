//! Spatial positional encoding over flattened feature-map tokens and
//! temporal positional encoding over the frame window.
//!
//! The spatial code is one-dimensional over the flattened token index
//! `0..H'·W'`, not the split row/column encoding used by the original
//! detection transformer.

use crate::error::{Error, Result};
use crate::nn::{Bound, Embedding, ParamBuilder};
use crate::tensor::{Tape, Tensor, Var};

/// Fixed sinusoidal code, one row per flattened token.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeTable(Tensor);

impl SpeTable {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn tokens(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn on_tape<'t>(&self, tape: &'t Tape) -> Var<'t> {
        tape.constant(&self.0)
    }
}

/// `PE[pos, 2i] = sin(pos / 10000^(2i/D))`, `PE[pos, 2i+1] = cos(…)`.
pub fn spe_sinusoidal(tokens: usize, dim: usize) -> Result<SpeTable> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::contract(format!("positional dim must be even, got {dim}")));
    }
    if tokens == 0 {
        return Err(Error::contract("positional table needs at least one token"));
    }
    let mut data = vec![0.0; tokens * dim];
    for pos in 0..tokens {
        for i in 0..dim / 2 {
            let rate = 10000f64.powf((2 * i) as f64 / dim as f64);
            let angle = pos as f64 / rate;
            data[pos * dim + 2 * i] = angle.sin();
            data[pos * dim + 2 * i + 1] = angle.cos();
        }
    }
    Ok(SpeTable(Tensor::new(&[tokens, dim], data)?))
}

/// Learned per-frame embedding, indexed by position inside the window.
#[derive(Debug, Clone)]
pub struct TpeTable {
    pub embedding: Embedding,
}

impl TpeTable {
    /// Zero-initialized, so a fresh model starts TPE-neutral.
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, frames: usize, dim: usize) -> Self {
        TpeTable {
            embedding: Embedding::zeros(pb, name, frames, dim),
        }
    }

    pub fn frames(&self) -> usize {
        self.embedding.rows
    }

    /// Row `frame` broadcast over `tokens` rows.
    pub fn rows<'t>(&self, p: &Bound<'t>, frame: usize, tokens: usize) -> Result<Var<'t>> {
        if frame >= self.frames() {
            return Err(Error::Index {
                index: frame,
                len: self.frames(),
            });
        }
        self.embedding.lookup(p, &vec![frame; tokens])
    }
}

fn check_frames(frames: &[Var<'_>], tokens: usize, dim: usize) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::contract("at least one frame required"));
    }
    for f in frames {
        let s = f.shape();
        if s != [tokens, dim] {
            return Err(Error::shape("frame tokens", &s, &[tokens, dim]));
        }
    }
    Ok(())
}

/// Concatenates the frames in time order into one `(N·L)×D` token stream and
/// builds the matching position stream `SPE + TPE[t]`.
///
/// With `tpe` absent the positions are plain SPE for every frame.
pub fn apply_early_tpe<'t>(
    p: &Bound<'t>,
    frames: &[Var<'t>],
    spe: &SpeTable,
    tpe: Option<&TpeTable>,
) -> Result<(Var<'t>, Var<'t>)> {
    let (tokens, dim) = (spe.tokens(), spe.tensor().shape()[1]);
    check_frames(frames, tokens, dim)?;
    let tape = frames[0].tape();
    let spe_var = spe.on_tape(tape);
    let mut positions = Vec::with_capacity(frames.len());
    for t in 0..frames.len() {
        positions.push(match tpe {
            Some(tpe) => {
                if frames.len() > tpe.frames() {
                    return Err(Error::contract(format!(
                        "{} frames exceed the TPE window of {}",
                        frames.len(),
                        tpe.frames()
                    )));
                }
                spe_var.add(tpe.rows(p, t, tokens)?)?
            }
            None => spe_var,
        });
    }
    Ok((tape.concat(frames, 0)?, tape.concat(&positions, 0)?))
}

/// Adds `TPE[t]` to every token of already-encoded frame `t`.
pub fn apply_late_tpe<'t>(p: &Bound<'t>, encoded: &[Var<'t>], tpe: &TpeTable) -> Result<Vec<Var<'t>>> {
    let first = encoded
        .first()
        .ok_or_else(|| Error::contract("at least one frame required"))?
        .shape();
    check_frames(encoded, first[0], first[1])?;
    if encoded.len() > tpe.frames() {
        return Err(Error::contract("more frames than TPE rows"));
    }
    encoded
        .iter()
        .enumerate()
        .map(|(t, f)| f.add(tpe.rows(p, t, first[0])?))
        .collect()
}
