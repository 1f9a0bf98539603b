//! Transformer building blocks: linear maps, layer norm, sinusoidal
//! positions, scaled dot-product and multi-head attention, and the pre-norm
//! transformer layer used by every stack in the model.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamId, Session};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = init.glorot(format!("{name}.weight"), d_in, d_out);
        let bias = init.constant(format!("{name}.bias"), &[d_out], 0.0);
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn num_params(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let y = s.matmul(x, w)?;
        s.add(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new(init: &mut Init<'_>, name: &str, d: usize) -> Self {
        Self {
            gamma: init.constant(format!("{name}.gamma"), &[d], 1.0),
            beta: init.constant(format!("{name}.beta"), &[d], 0.0),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        layer_norm(s, x, g, b, LN_EPS)
    }
}

/// Row-wise layer normalisation.
pub fn layer_norm(g: &mut Graph, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    g.layer_norm(x, gamma, beta, eps)
}

/// Fixed sinusoidal table: `sin(pos / 10000^(2i/d))` on even columns and the
/// matching cosine on odd columns.
pub fn positional_encoding(t: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[t, d], |idx| {
        let (pos, j) = ((idx / d) as f64, idx % d);
        let freq = libm::pow(10000.0, -((j - j % 2) as f64) / d as f64);
        if j % 2 == 0 {
            libm::sin(pos * freq)
        } else {
            libm::cos(pos * freq)
        }
    })
}

/// `softmax(Q Kᵀ / sqrt(d_k)) V` with full visibility (no mask).
pub fn scaled_dot_attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let (qs, ks, vs) = (g.shape(q), g.shape(k), g.shape(v));
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(Error::shape("scaled_dot_attention", qs, ks));
    }
    let d_k = qs[1];
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / libm::sqrt(d_k as f64))?;
    let weights = g.softmax_rows(scores)?;
    g.matmul(weights, v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub heads: usize,
}

impl AttentionConfig {
    pub fn new(d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "{heads} heads do not divide model width {d_model}"
            )));
        }
        Ok(Self { d_model, heads })
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn scale(&self) -> f64 {
        1.0 / libm::sqrt(self.d_k() as f64)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init<'_>, name: &str, cfg: AttentionConfig) -> Self {
        let d = cfg.d_model;
        Self {
            cfg,
            query: Linear::new(init, &format!("{name}.q"), d, d),
            key: Linear::new(init, &format!("{name}.k"), d, d),
            value: Linear::new(init, &format!("{name}.v"), d, d),
            output: Linear::new(init, &format!("{name}.o"), d, d),
        }
    }

    pub fn num_params(d: usize) -> usize {
        4 * Linear::num_params(d, d)
    }

    /// Queries from `target`, keys and values from `source`.
    pub fn forward(&self, s: &mut Session<'_>, target: Var, source: Var) -> Result<Var> {
        let d = self.cfg.d_model;
        if s.shape(target).last() != Some(&d) || s.shape(source).last() != Some(&d) {
            return Err(Error::shape("multi_head_attention", s.shape(target), s.shape(source)));
        }
        let q = self.query.forward(s, target)?;
        let k = self.key.forward(s, source)?;
        let v = self.value.forward(s, source)?;
        let merged = if self.cfg.heads == 1 {
            scaled_dot_attention(s, q, k, v)?
        } else {
            let dk = self.cfg.d_k();
            let mut heads = Vec::with_capacity(self.cfg.heads);
            for h in 0..self.cfg.heads {
                let qh = s.narrow(q, 1, h * dk, dk)?;
                let kh = s.narrow(k, 1, h * dk, dk)?;
                let vh = s.narrow(v, 1, h * dk, dk)?;
                heads.push(scaled_dot_attention(s, qh, kh, vh)?);
            }
            s.concat(&heads, 1)?
        };
        self.output.forward(s, merged)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Init<'_>, name: &str, d: usize, ratio: usize) -> Self {
        Self {
            up: Linear::new(init, &format!("{name}.up"), d, d * ratio),
            down: Linear::new(init, &format!("{name}.down"), d * ratio, d),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let h = self.up.forward(s, x)?;
        let h = s.gelu(h)?;
        self.down.forward(s, h)
    }
}

/// Pre-norm transformer layer:
/// `x + MHA(LN₁(x), LN₁(ctx))` followed by `x + FFN(LN₂(x))`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub ln_attn: LayerNormParams,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNormParams,
    pub ffn: FeedForward,
}

impl TransformerLayer {
    pub fn new(init: &mut Init<'_>, name: &str, cfg: AttentionConfig, ffn_ratio: usize) -> Self {
        let d = cfg.d_model;
        Self {
            ln_attn: LayerNormParams::new(init, &format!("{name}.ln1"), d),
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), cfg),
            ln_ffn: LayerNormParams::new(init, &format!("{name}.ln2"), d),
            ffn: FeedForward::new(init, &format!("{name}.ffn"), d, ffn_ratio),
        }
    }

    pub fn num_params(d: usize, ffn_ratio: usize) -> usize {
        4 * d
            + MultiHeadAttention::num_params(d)
            + Linear::num_params(d, d * ffn_ratio)
            + Linear::num_params(d * ffn_ratio, d)
    }

    /// Self-attention when `context` is `None`.
    pub fn forward(&self, s: &mut Session<'_>, x: Var, context: Option<Var>) -> Result<Var> {
        let h = self.ln_attn.forward(s, x)?;
        let c = match context {
            Some(c) => self.ln_attn.forward(s, c)?,
            None => h,
        };
        let a = self.attn.forward(s, h, c)?;
        let a = s.dropout(a)?;
        let x = s.add(x, a)?;
        let h = self.ln_ffn.forward(s, x)?;
        let f = self.ffn.forward(s, h)?;
        let f = s.dropout(f)?;
        s.add(x, f)
    }
}

/// A stack of self-attention transformer layers.
#[derive(Clone, Debug)]
pub struct TransformerStack {
    pub layers: Vec<TransformerLayer>,
}

impl TransformerStack {
    pub fn new(init: &mut Init<'_>, name: &str, cfg: AttentionConfig, ffn_ratio: usize, depth: usize) -> Self {
        let layers = (0..depth)
            .map(|i| TransformerLayer::new(init, &format!("{name}.layer{i}"), cfg, ffn_ratio))
            .collect();
        Self { layers }
    }

    pub fn num_params(d: usize, ffn_ratio: usize, depth: usize) -> usize {
        depth * TransformerLayer::num_params(d, ffn_ratio)
    }

    pub fn forward(&self, s: &mut Session<'_>, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(s, x, None)?;
        }
        Ok(x)
    }
}
