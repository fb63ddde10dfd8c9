//! Parameterized building blocks shared by encoder, convertor, decoder and
//! prompt aggregation.

use std::rc::Rc;

use crate::autodiff::Var;
use crate::error::Result;
use crate::model::params::{Bound, Init, ParamId};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let weight = init.trunc_normal(&format!("{name}.weight"), &[in_dim, out_dim])?;
        let bias = if bias {
            Some(init.zeros(&format!("{name}.bias"), &[out_dim])?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// Applies `x W + b` over the last axis of `x`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = x.reshape(&[rows, self.in_dim])?;
        let mut y = flat.matmul(p.get(self.weight))?;
        if let Some(b) = self.bias {
            y = y.add(p.get(b))?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = self.out_dim;
        y.reshape(&out_shape)
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Result<Self> {
        Ok(Norm {
            gamma: init.ones(&format!("{name}.gamma"), &[dim])?,
            beta: init.zeros(&format!("{name}.beta"), &[dim])?,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(p.get(self.gamma), p.get(self.beta))
    }
}

/// Two-layer perceptron with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init<'_>, name: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(init, &format!("{name}.fc1"), in_dim, hidden, true)?,
            fc2: Linear::new(init, &format!("{name}.fc2"), hidden, out_dim, true)?,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.fc1.forward(p, x)?.gelu();
        self.fc2.forward(p, h)
    }
}

/// Multi-head self-attention over a batch of independent sequences.
#[derive(Clone, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Attention {
            qkv: Linear::new(init, &format!("{name}.qkv"), dim, 3 * dim, true)?,
            proj: Linear::new(init, &format!("{name}.proj"), dim, dim, true)?,
            heads,
            dim,
        })
    }

    /// `x` is `(batch, tokens, dim)`; `bias`, when given, is added to the
    /// pre-softmax scores and must be `(batch, heads, tokens, tokens)`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let shape = x.shape();
        let (b, t, c) = (shape[0], shape[1], shape[2]);
        let h = self.heads;
        let hd = c / h;
        let qkv = self
            .qkv
            .forward(p, x)?
            .reshape(&[b, t, 3, h, hd])?
            .permute(&[2, 0, 3, 1, 4])?
            .reshape(&[3, b * h, t, hd])?;
        let q = qkv.slice(0, 0, 1)?.reshape(&[b * h, t, hd])?;
        let k = qkv.slice(0, 1, 1)?.reshape(&[b * h, t, hd])?;
        let v = qkv.slice(0, 2, 1)?.reshape(&[b * h, t, hd])?;
        let mut scores = q.matmul_t(k)?.scale(1.0 / (hd as f64).sqrt());
        if let Some(bias) = bias {
            scores = scores
                .reshape(&[b, h, t, t])?
                .add(bias)?
                .reshape(&[b * h, t, t])?;
        }
        let attn = scores.softmax()?;
        let out = attn
            .matmul(v)?
            .reshape(&[b, h, t, hd])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, t, c])?;
        self.proj.forward(p, out)
    }
}

/// Pre-norm transformer layer: attention and MLP sublayers with residuals.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub mlp: Mlp,
}

impl TransformerLayer {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(TransformerLayer {
            norm1: Norm::new(init, &format!("{name}.norm1"), dim)?,
            attn: Attention::new(init, &format!("{name}.attn"), dim, heads)?,
            norm2: Norm::new(init, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(init, &format!("{name}.mlp"), dim, dim * mlp_ratio, dim)?,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let a = self.attn.forward(p, self.norm1.forward(p, x)?, bias)?;
        let y = x.add(a)?;
        let m = self.mlp.forward(p, self.norm2.forward(p, y)?)?;
        y.add(m)
    }

    /// `4d + (3d^2 + 3d) + (d^2 + d) + 2 r d^2 + (r + 1) d` for width `d` and
    /// MLP ratio `r`.
    pub fn param_count(dim: usize, mlp_ratio: usize) -> usize {
        let d = dim;
        let r = mlp_ratio;
        4 * d + 3 * d * d + 3 * d + d * d + d + 2 * r * d * d + (r + 1) * d
    }
}

/// Row-index table for [`Var::gather`] shared between calls.
pub type Index = Rc<Vec<Option<usize>>>;

pub fn index(rows: impl IntoIterator<Item = usize>) -> Index {
    Rc::new(rows.into_iter().map(Some).collect())
}
