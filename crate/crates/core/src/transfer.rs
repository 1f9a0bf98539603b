//! Knowledge-transfer networks that reconstruct acoustic features from the
//! encoded vision and language streams, plus the consistency losses that tie
//! the reconstructions to the encoded ground-truth audio.

use alloc::format;

use crate::error::{Error, Result};
use crate::fusion::{EncodedModality, Modality};
use crate::graph::{Graph, Var};
use crate::nn::{AttentionConfig, Linear, TransformerStack};
use crate::params::{Init, Session};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum ConsistencyKind {
    L1,
    #[default]
    L2,
}

impl ConsistencyKind {
    pub fn name(self) -> &'static str {
        match self {
            ConsistencyKind::L1 => "L1",
            ConsistencyKind::L2 => "L2",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "L1" | "l1" => Some(ConsistencyKind::L1),
            "L2" | "l2" => Some(ConsistencyKind::L2),
            _ => None,
        }
    }
}

/// Mean squared (L2) or mean absolute (L1) difference.
pub fn consistency_loss(g: &mut Graph, recon: Var, target: Var, kind: ConsistencyKind) -> Result<Var> {
    if g.shape(recon) != g.shape(target) {
        return Err(Error::shape("consistency_loss", g.shape(recon), g.shape(target)));
    }
    let diff = g.sub(recon, target)?;
    let e = match kind {
        ConsistencyKind::L2 => g.square(diff)?,
        ConsistencyKind::L1 => g.abs(diff)?,
    };
    g.mean(e)
}

/// `[T', T]` linear interpolation matrix on an endpoint-aligned grid:
/// output step `j` samples input position `j·(T−1)/(T'−1)`. A single output
/// step samples the midpoint.
pub fn resample_matrix(t: usize, t_new: usize) -> Tensor {
    let mut m = Tensor::zeros(&[t_new, t]);
    for j in 0..t_new {
        let pos = if t_new == 1 {
            (t - 1) as f64 / 2.0
        } else {
            j as f64 * (t - 1) as f64 / (t_new - 1) as f64
        };
        let lo = libm::floor(pos) as usize;
        let frac = pos - lo as f64;
        let data = m.data_mut();
        if lo + 1 < t && frac > 0.0 {
            data[j * t + lo] = 1.0 - frac;
            data[j * t + lo + 1] = frac;
        } else {
            data[j * t + lo.min(t - 1)] = 1.0;
        }
    }
    m
}

/// Linear temporal resampling of `[T, d]` to `[t_new, d]`; identity when
/// the length already matches.
pub fn resample_sequence(g: &mut Graph, x: Var, t_new: usize) -> Result<Var> {
    if t_new == 0 {
        return Err(Error::contract("resample target length must be positive"));
    }
    let t = g.shape(x)[0];
    if t == t_new {
        return Ok(x);
    }
    let r = g.constant(resample_matrix(t, t_new));
    g.matmul(r, x)
}

/// θ or φ: input map, transformer stack, output map, then resampling to the
/// reconstruction length.
#[derive(Clone, Debug)]
pub struct TransferNet {
    pub input: Linear,
    pub stack: TransformerStack,
    pub output: Linear,
}

impl TransferNet {
    pub fn new(init: &mut Init<'_>, name: &str, cfg: AttentionConfig, ffn_ratio: usize, depth: usize) -> Self {
        let d = cfg.d_model;
        Self {
            input: Linear::new(init, &format!("{name}.in"), d, d),
            stack: TransformerStack::new(init, name, cfg, ffn_ratio, depth),
            output: Linear::new(init, &format!("{name}.out"), d, d),
        }
    }

    pub fn num_params(d: usize, ffn_ratio: usize, depth: usize) -> usize {
        2 * Linear::num_params(d, d) + TransformerStack::num_params(d, ffn_ratio, depth)
    }

    pub fn forward(&self, s: &mut Session<'_>, f: &EncodedModality, t_rec: usize) -> Result<Var> {
        let h = self.input.forward(s, f.features)?;
        let h = self.stack.forward(s, h)?;
        let h = self.output.forward(s, h)?;
        resample_sequence(s, h, t_rec)
    }
}

/// δ: transformer stack over the concatenated `[T, 2·d]` reconstructions,
/// projected back to `d`.
#[derive(Clone, Debug)]
pub struct ReconstructionFusion {
    pub stack: TransformerStack,
    pub output: Linear,
}

impl ReconstructionFusion {
    pub fn new(init: &mut Init<'_>, cfg: AttentionConfig, ffn_ratio: usize, depth: usize) -> Result<Self> {
        let wide = AttentionConfig::new(2 * cfg.d_model, cfg.heads)?;
        Ok(Self {
            stack: TransformerStack::new(init, "transfer.delta", wide, ffn_ratio, depth),
            output: Linear::new(init, "transfer.delta.out", 2 * cfg.d_model, cfg.d_model),
        })
    }

    pub fn num_params(d: usize, ffn_ratio: usize, depth: usize) -> usize {
        TransformerStack::num_params(2 * d, ffn_ratio, depth) + Linear::num_params(2 * d, d)
    }

    pub fn forward(&self, s: &mut Session<'_>, from_vision: Var, from_language: Var) -> Result<EncodedModality> {
        if s.shape(from_vision) != s.shape(from_language) {
            return Err(Error::shape(
                "fuse_reconstruction",
                s.shape(from_vision),
                s.shape(from_language),
            ));
        }
        let joint = s.concat(&[from_vision, from_language], 1)?;
        let h = self.stack.forward(s, joint)?;
        let features = self.output.forward(s, h)?;
        Ok(EncodedModality {
            modality: Modality::Audio,
            features,
        })
    }
}

/// θ (vision → audio), φ (language → audio) and δ.
#[derive(Clone, Debug)]
pub struct KnowledgeTransfer {
    pub theta: TransferNet,
    pub phi: TransferNet,
    pub delta: ReconstructionFusion,
}

impl KnowledgeTransfer {
    pub fn new(init: &mut Init<'_>, cfg: AttentionConfig, ffn_ratio: usize, depth: usize) -> Result<Self> {
        Ok(Self {
            theta: TransferNet::new(init, "transfer.theta", cfg, ffn_ratio, depth),
            phi: TransferNet::new(init, "transfer.phi", cfg, ffn_ratio, depth),
            delta: ReconstructionFusion::new(init, cfg, ffn_ratio, depth)?,
        })
    }

    pub fn num_params(d: usize, ffn_ratio: usize, depth: usize) -> usize {
        2 * TransferNet::num_params(d, ffn_ratio, depth) + ReconstructionFusion::num_params(d, ffn_ratio, depth)
    }

    pub fn transfer_theta(&self, s: &mut Session<'_>, f_v: &EncodedModality, t_rec: usize) -> Result<Var> {
        self.theta.forward(s, f_v, t_rec)
    }

    pub fn transfer_phi(&self, s: &mut Session<'_>, f_l: &EncodedModality, t_rec: usize) -> Result<Var> {
        self.phi.forward(s, f_l, t_rec)
    }

    pub fn fuse_reconstruction(&self, s: &mut Session<'_>, a_v: Var, a_l: Var) -> Result<EncodedModality> {
        self.delta.forward(s, a_v, a_l)
    }
}
