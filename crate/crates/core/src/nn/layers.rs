use rand::Rng;

use super::{Graph, ParamId, ParamStore, Real, Segments, Var};
use crate::error::Result;

/// Standard deviation of Gaussian weight initialization for projections.
pub const INIT_STD: f64 = 0.02;

/// Affine map `x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Result<Self> {
        let weight = store.add_normal(format!("{name}.weight"), &[in_dim, out_dim], INIT_STD, rng)?;
        let bias = store.add_const(format!("{name}.bias"), &[out_dim], 0.0)?;
        Ok(Linear { weight, bias, in_dim, out_dim })
    }

    /// Looks up an existing layer by name (used after loading a checkpoint).
    pub fn lookup<T: Real>(store: &ParamStore<T>, name: &str) -> Option<Self> {
        let weight = store.id(&format!("{name}.weight"))?;
        let bias = store.id(&format!("{name}.bias"))?;
        let shape = &store.get(weight).shape;
        Some(Linear { weight, bias, in_dim: shape[0], out_dim: shape[1] })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add_const(format!("{name}.gamma"), &[dim], 1.0)?;
        let beta = store.add_const(format!("{name}.beta"), &[dim], 0.0)?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Projects `x` to packed q/k/v, runs masked multi-head attention per segment
/// and applies the output projection.
pub fn causal_self_attention<T: Real>(
    g: &mut Graph<'_, T>,
    x: Var,
    qkv: &Linear,
    out: &Linear,
    heads: usize,
    segs: &Segments,
) -> Result<Var> {
    let packed = qkv.forward(g, x)?;
    let attn = g.causal_attention(packed, heads, segs)?;
    out.forward(g, attn)
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
#[derive(Debug, Clone, Copy)]
pub struct Block {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc: Linear,
    pub fc_out: Linear,
    pub heads: usize,
}

impl Block {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(Block {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            qkv: Linear::new(store, &format!("{name}.attn.qkv"), dim, 3 * dim, rng)?,
            proj: Linear::new(store, &format!("{name}.attn.proj"), dim, dim, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            fc: Linear::new(store, &format!("{name}.mlp.fc"), dim, 4 * dim, rng)?,
            fc_out: Linear::new(store, &format!("{name}.mlp.proj"), 4 * dim, dim, rng)?,
            heads,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, segs: &Segments) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let a = causal_self_attention(g, h, &self.qkv, &self.proj, self.heads, segs)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let h = self.fc.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.fc_out.forward(g, h)?;
        g.add(x, h)
    }
}
