use super::params::{Bound, ParamBuilder, ParamId};
use crate::error::{Error, Result};
use crate::tensor::Var;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine map `x·Wᵀ + b` applied to every row.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d_in: usize, d_out: usize) -> Self {
        let mut pb = pb.sub(name);
        Linear {
            weight: pb.uniform_fan_in("weight", &[d_out, d_in], d_in),
            bias: Some(pb.constant("bias", &[d_out], 0.0)),
            d_in,
            d_out,
        }
    }

    /// Purely linear map without a bias term.
    pub fn no_bias(pb: &mut ParamBuilder<'_>, name: &str, d_in: usize, d_out: usize) -> Self {
        let mut pb = pb.sub(name);
        Linear {
            weight: pb.uniform_fan_in("weight", &[d_out, d_in], d_in),
            bias: None,
            d_in,
            d_out,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul_nt(p.get(self.weight))?;
        match self.bias {
            Some(b) => y.add_bias(p.get(b)),
            None => Ok(y),
        }
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists every width, input first: `[D, D, D, 4]` is three layers.
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dims: &[usize]) -> Self {
        let mut pb = pb.sub(name);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut pb, &format!("layers.{i}"), w[0], w[1]))
            .collect();
        Mlp { layers }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(p, h)?;
            if i + 1 < self.layers.len() {
                h = h.relu();
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d: usize) -> Self {
        let mut pb = pb.sub(name);
        LayerNorm {
            gamma: pb.constant("gamma", &[d], 1.0),
            beta: pb.constant("beta", &[d], 0.0),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(p.get(self.gamma), p.get(self.beta), LAYER_NORM_EPS)
    }
}

/// Square-kernel 2-D convolution over `C×H×W` maps.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        assert!(kernel == 1 || kernel == 3, "kernel must be 1 or 3");
        assert!(stride == 1 || stride == 2, "stride must be 1 or 2");
        let mut pb = pb.sub(name);
        Conv2d {
            weight: pb.uniform_fan_in("weight", &[c_out, c_in, kernel, kernel], c_in * kernel * kernel),
            bias: pb.constant("bias", &[c_out], 0.0),
            c_in,
            c_out,
            kernel,
            stride,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[0] != self.c_in {
            return Err(Error::shape("conv2d channels", &shape, &[self.c_in]));
        }
        x.conv2d(p.get(self.weight), p.get(self.bias), self.stride)
    }

    /// Applies a 1×1 stride-1 kernel to an `L×C_in` token matrix, which is
    /// the same map in token layout.
    pub fn forward_tokens<'t>(&self, p: &Bound<'t>, tokens: Var<'t>) -> Result<Var<'t>> {
        if self.kernel != 1 || self.stride != 1 {
            return Err(Error::contract("token-layout conv requires a 1x1 stride-1 kernel"));
        }
        let shape = tokens.shape();
        if shape.len() != 2 || shape[1] != self.c_in {
            return Err(Error::shape("conv1x1 channels", &shape, &[self.c_in]));
        }
        let w = p.get(self.weight).reshape(&[self.c_out, self.c_in])?;
        tokens.matmul_nt(w)?.add_bias(p.get(self.bias))
    }
}

/// Learned lookup table of `V` rows.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub const INIT_STD: f64 = 0.02;

    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, rows: usize, dim: usize) -> Self {
        let mut pb = pb.sub(name);
        Embedding {
            table: pb.normal("table", &[rows, dim], Self::INIT_STD),
            rows,
            dim,
        }
    }

    /// Table with every entry zero.
    pub fn zeros(pb: &mut ParamBuilder<'_>, name: &str, rows: usize, dim: usize) -> Self {
        let mut pb = pb.sub(name);
        Embedding {
            table: pb.constant("table", &[rows, dim], 0.0),
            rows,
            dim,
        }
    }

    pub fn lookup<'t>(&self, p: &Bound<'t>, indices: &[usize]) -> Result<Var<'t>> {
        p.get(self.table).gather_rows(indices)
    }
}
