//! Post-norm transformer encoder and decoder layers.

use super::attention::MultiHeadAttention;
use super::layers::{LayerNorm, Linear};
use super::params::{Bound, ParamBuilder};
use crate::error::Result;
use crate::tensor::{Tensor, Var};

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub expand: Linear,
    pub project: Linear,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize, hidden: usize) -> Self {
        let mut pb = pb.sub(name);
        FeedForward {
            expand: Linear::new(&mut pb, "expand", dim, hidden),
            project: Linear::new(&mut pb, "project", hidden, dim),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.expand.forward(p, x)?.relu();
        self.project.forward(p, h)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub self_attn: MultiHeadAttention,
    pub ffn: FeedForward,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize, heads: usize, ff_dim: usize) -> Result<Self> {
        let mut pb = pb.sub(name);
        Ok(EncoderLayer {
            self_attn: MultiHeadAttention::new(&mut pb, "self_attn", dim, heads)?,
            ffn: FeedForward::new(&mut pb, "ffn", dim, ff_dim),
            norm1: LayerNorm::new(&mut pb, "norm1", dim),
            norm2: LayerNorm::new(&mut pb, "norm2", dim),
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, tokens: Var<'t>, pos: Var<'t>) -> Result<Var<'t>> {
        let (attn, _) = self.self_attn.forward(p, tokens, tokens, Some(pos), Some(pos))?;
        let x = self.norm1.forward(p, tokens.add(attn)?)?;
        let ff = self.ffn.forward(p, x)?;
        self.norm2.forward(p, x.add(ff)?)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub cross_attn: MultiHeadAttention,
    pub ffn: FeedForward,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize, heads: usize, ff_dim: usize) -> Result<Self> {
        let mut pb = pb.sub(name);
        Ok(DecoderLayer {
            self_attn: MultiHeadAttention::new(&mut pb, "self_attn", dim, heads)?,
            cross_attn: MultiHeadAttention::new(&mut pb, "cross_attn", dim, heads)?,
            ffn: FeedForward::new(&mut pb, "ffn", dim, ff_dim),
            norm1: LayerNorm::new(&mut pb, "norm1", dim),
            norm2: LayerNorm::new(&mut pb, "norm2", dim),
            norm3: LayerNorm::new(&mut pb, "norm3", dim),
        })
    }

    /// Returns the updated queries and the cross-attention weights `h×N_q×L`.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        queries: Var<'t>,
        memory: Var<'t>,
        query_pos: Var<'t>,
        mem_pos: Var<'t>,
    ) -> Result<(Var<'t>, Tensor)> {
        let (sa, _) = self
            .self_attn
            .forward(p, queries, queries, Some(query_pos), Some(query_pos))?;
        let x = self.norm1.forward(p, queries.add(sa)?)?;
        let (ca, weights) = self
            .cross_attn
            .forward(p, x, memory, Some(query_pos), Some(mem_pos))?;
        let x = self.norm2.forward(p, x.add(ca)?)?;
        let ff = self.ffn.forward(p, x)?;
        Ok((self.norm3.forward(p, x.add(ff)?)?, weights))
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        depth: usize,
        dim: usize,
        heads: usize,
        ff_dim: usize,
    ) -> Result<Self> {
        let mut pb = pb.sub(name);
        let layers = (0..depth)
            .map(|i| EncoderLayer::new(&mut pb, &format!("layers.{i}"), dim, heads, ff_dim))
            .collect::<Result<_>>()?;
        Ok(Encoder { layers })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, tokens: Var<'t>, pos: Var<'t>) -> Result<Var<'t>> {
        self.layers
            .iter()
            .try_fold(tokens, |x, layer| layer.forward(p, x, pos))
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
}

impl Decoder {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        depth: usize,
        dim: usize,
        heads: usize,
        ff_dim: usize,
    ) -> Result<Self> {
        let mut pb = pb.sub(name);
        let layers = (0..depth)
            .map(|i| DecoderLayer::new(&mut pb, &format!("layers.{i}"), dim, heads, ff_dim))
            .collect::<Result<_>>()?;
        Ok(Decoder { layers })
    }

    /// Output of the last layer plus each layer's cross-attention weights.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        queries: Var<'t>,
        memory: Var<'t>,
        query_pos: Var<'t>,
        mem_pos: Var<'t>,
    ) -> Result<(Var<'t>, Vec<Tensor>)> {
        let mut x = queries;
        let mut maps = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, w) = layer.forward(p, x, memory, query_pos, mem_pos)?;
            x = next;
            maps.push(w);
        }
        Ok((x, maps))
    }
}
