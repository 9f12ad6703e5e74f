use super::layers::Linear;
use super::params::{Bound, ParamBuilder};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Multi-head scaled dot-product attention.
///
/// Positional terms are added to queries and keys only; values stay
/// position-free. The key projection has no bias: a per-query constant in
/// the scores cancels in the softmax, so such a bias would never train.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::contract(format!(
                "model dim {dim} not divisible by {heads} heads"
            )));
        }
        let mut pb = pb.sub(name);
        Ok(MultiHeadAttention {
            query: Linear::new(&mut pb, "query", dim, dim),
            key: Linear::no_bias(&mut pb, "key", dim, dim),
            value: Linear::new(&mut pb, "value", dim, dim),
            output: Linear::new(&mut pb, "output", dim, dim),
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Returns the projected output `Lq×D` and the attention weights
    /// `h×Lq×Lk` (detached, for inspection).
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        q: Var<'t>,
        kv: Var<'t>,
        q_pos: Option<Var<'t>>,
        k_pos: Option<Var<'t>>,
    ) -> Result<(Var<'t>, Tensor)> {
        let (qs, ks) = (q.shape(), kv.shape());
        if qs.len() != 2 || ks.len() != 2 || qs[1] != self.dim || ks[1] != self.dim {
            return Err(Error::shape("attention", &qs, &ks));
        }
        let (lq, lk) = (qs[0], ks[0]);
        let q_in = match q_pos {
            Some(pos) => q.add(pos)?,
            None => q,
        };
        let k_in = match k_pos {
            Some(pos) => kv.add(pos)?,
            None => kv,
        };
        let qp = self.query.forward(p, q_in)?;
        let kp = self.key.forward(p, k_in)?;
        let vp = self.value.forward(p, kv)?;

        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads * lq * lk);
        for h in 0..self.heads {
            let qh = qp.slice(1, h * dh, dh)?;
            let kh = kp.slice(1, h * dh, dh)?;
            let vh = vp.slice(1, h * dh, dh)?;
            let attn = qh.matmul_nt(kh)?.scale(scale).softmax(1)?;
            attn.with_data(|w| weights.extend_from_slice(w));
            heads.push(attn.matmul(vh)?);
        }
        let merged = q.tape().concat(&heads, 1)?;
        let out = self.output.forward(p, merged)?;
        Ok((out, Tensor::new(&[self.heads, lq, lk], weights)?))
    }
}
