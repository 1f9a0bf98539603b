//! Modality encoders, cross-modal attention blocks and the fusion decoder.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{positional_encoding, AttentionConfig, LayerNormParams, Linear, MultiHeadAttention, TransformerStack};
use crate::params::{Init, Session};
use crate::tensor::Tensor;

/// Temporal convolution width of the modality encoders.
pub const CONV_KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Vision,
    Language,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Vision, Modality::Language, Modality::Audio];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn short(self) -> &'static str {
        match self {
            Modality::Vision => "V",
            Modality::Language => "L",
            Modality::Audio => "A",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Vision => "vision",
            Modality::Language => "language",
            Modality::Audio => "audio",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A raw `[T, d_raw]` feature sequence of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalitySequence {
    pub modality: Modality,
    pub features: Tensor,
}

impl ModalitySequence {
    pub fn new(modality: Modality, features: Tensor) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::shape("ModalitySequence", features.shape(), &[0, 0]));
        }
        Ok(Self { modality, features })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// A `[T, d_model]` sequence living in a session graph.
#[derive(Clone, Copy, Debug)]
pub struct EncodedModality {
    pub modality: Modality,
    pub features: Var,
}

/// Conv1d (kernel 3, same padding) to `d_model`, sinusoidal positions,
/// then a self-attention transformer stack.
#[derive(Clone, Debug)]
pub struct ModalityEncoder {
    pub modality: Modality,
    pub d_raw: usize,
    pub d_model: usize,
    pub conv: Linear,
    pub stack: TransformerStack,
}

impl ModalityEncoder {
    pub fn new(
        init: &mut Init<'_>,
        modality: Modality,
        d_raw: usize,
        cfg: AttentionConfig,
        ffn_ratio: usize,
        depth: usize,
    ) -> Self {
        let name = format!("encoder.{}", modality.short());
        Self {
            modality,
            d_raw,
            d_model: cfg.d_model,
            conv: Linear::new(init, &format!("{name}.conv"), CONV_KERNEL * d_raw, cfg.d_model),
            stack: TransformerStack::new(init, &name, cfg, ffn_ratio, depth),
        }
    }

    pub fn num_params(d_raw: usize, d: usize, ffn_ratio: usize, depth: usize) -> usize {
        Linear::num_params(CONV_KERNEL * d_raw, d) + TransformerStack::num_params(d, ffn_ratio, depth)
    }

    pub fn encode(&self, s: &mut Session<'_>, x: &ModalitySequence) -> Result<EncodedModality> {
        if x.modality != self.modality {
            return Err(Error::config(format!(
                "{} encoder fed a {} sequence",
                self.modality, x.modality
            )));
        }
        if x.is_empty() {
            return Err(Error::contract("cannot encode an empty sequence"));
        }
        if x.dim() != self.d_raw {
            return Err(Error::shape(
                "encode_modality",
                x.features.shape(),
                &[x.len(), self.d_raw],
            ));
        }
        let t = x.len();
        let input = s.constant(x.features.clone());
        let windows = s.unfold(input, CONV_KERNEL)?;
        let h = self.conv.forward(s, windows)?;
        let pe = s.constant(positional_encoding(t, self.d_model));
        let h = s.add(h, pe)?;
        let features = self.stack.forward(s, h)?;
        Ok(EncodedModality {
            modality: self.modality,
            features,
        })
    }
}

/// Cross-modal attention with residual: queries from the target stream,
/// keys and values from the source stream.
#[derive(Clone, Debug)]
pub struct CrossModalBlock {
    pub ln_target: LayerNormParams,
    pub ln_source: LayerNormParams,
    pub attn: MultiHeadAttention,
}

impl CrossModalBlock {
    pub fn new(init: &mut Init<'_>, name: &str, cfg: AttentionConfig) -> Self {
        Self {
            ln_target: LayerNormParams::new(init, &format!("{name}.ln_target"), cfg.d_model),
            ln_source: LayerNormParams::new(init, &format!("{name}.ln_source"), cfg.d_model),
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), cfg),
        }
    }

    pub fn num_params(d: usize) -> usize {
        4 * d + MultiHeadAttention::num_params(d)
    }

    /// The attended term `Z` alone, shaped like the target.
    pub fn attend(&self, s: &mut Session<'_>, target: Var, source: Var) -> Result<Var> {
        let q = self.ln_target.forward(s, target)?;
        let kv = self.ln_source.forward(s, source)?;
        self.attn.forward(s, q, kv)
    }

    /// `target + Z`.
    pub fn forward(
        &self,
        s: &mut Session<'_>,
        target: &EncodedModality,
        source: &EncodedModality,
    ) -> Result<EncodedModality> {
        let z = self.attend(s, target.features, source.features)?;
        let features = s.add(target.features, z)?;
        Ok(EncodedModality {
            modality: target.modality,
            features,
        })
    }
}

/// Streams entering the fusion network. The acoustic stream carries either
/// the reconstruction `f_A'` or, in full-modality mode, the encoded `f_A`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stream {
    Language,
    Vision,
    Acoustic,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::Language, Stream::Vision, Stream::Acoustic];

    pub fn bit(self) -> u8 {
        1 << self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Stream::Language => "L",
            Stream::Vision => "V",
            Stream::Acoustic => "A",
        }
    }

    pub fn from_name(s: &str) -> Option<Stream> {
        match s {
            "L" | "l" | "language" => Some(Stream::Language),
            "V" | "v" | "vision" => Some(Stream::Vision),
            "A" | "A'" | "a" | "audio" | "acoustic" => Some(Stream::Acoustic),
            _ => None,
        }
    }
}

/// Small ordered set of [`Stream`]s.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct StreamSet(u8);

impl StreamSet {
    pub const EMPTY: StreamSet = StreamSet(0);
    pub const ALL: StreamSet = StreamSet(0b111);

    pub fn of(streams: &[Stream]) -> Self {
        StreamSet(streams.iter().fold(0, |acc, s| acc | s.bit()))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn from_bits(bits: u8) -> Option<Self> {
        (bits <= 0b111).then_some(StreamSet(bits))
    }

    pub fn contains(self, s: Stream) -> bool {
        self.0 & s.bit() != 0
    }

    pub fn is_subset(self, other: StreamSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = Stream> {
        Stream::ALL.into_iter().filter(move |s| self.contains(*s))
    }
}

impl fmt::Display for StreamSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.iter().map(Stream::name).collect();
        f.write_str(&names.join(","))
    }
}

/// Output head layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadMode {
    /// Seven classes for the integer sentiment scores -3..=3.
    SevenClass,
    /// Four independent binary emotions (happy, sad, angry, neutral).
    MultiLabel4,
}

impl HeadMode {
    pub fn classes(self) -> usize {
        match self {
            HeadMode::SevenClass => 7,
            HeadMode::MultiLabel4 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadMode::SevenClass => "sevenclass",
            HeadMode::MultiLabel4 => "multilabel4",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "sevenclass" => Some(HeadMode::SevenClass),
            "multilabel4" => Some(HeadMode::MultiLabel4),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionConfig {
    pub streams: StreamSet,
    pub targets: StreamSet,
    pub head: HeadMode,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::config("at least one fusion target must be enabled"));
        }
        if !self.targets.is_subset(self.streams) {
            return Err(Error::config(format!(
                "fusion targets {} are not all among the available streams {}",
                self.targets, self.streams
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CrossEdge {
    pub source: Stream,
    pub target: Stream,
    pub block: CrossModalBlock,
}

/// Cross-modal fusion over the enabled targets, mean pooling, a
/// self-attention decoder over the pooled vectors and a linear head.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub cfg: FusionConfig,
    pub d_model: usize,
    pub edges: Vec<CrossEdge>,
    pub decoder: TransformerStack,
    pub head: Linear,
}

impl Fusion {
    pub fn new(
        init: &mut Init<'_>,
        cfg: FusionConfig,
        attn: AttentionConfig,
        ffn_ratio: usize,
        depth: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut edges = Vec::new();
        for target in cfg.targets.iter() {
            for source in cfg.streams.iter().filter(|s| *s != target) {
                let name = format!("fusion.cm.{}_to_{}", source.name(), target.name());
                edges.push(CrossEdge {
                    source,
                    target,
                    block: CrossModalBlock::new(init, &name, attn),
                });
            }
        }
        let decoder = TransformerStack::new(init, "fusion.decoder", attn, ffn_ratio, depth);
        let head = Linear::new(
            init,
            "fusion.head",
            cfg.targets.len() * attn.d_model,
            cfg.head.classes(),
        );
        Ok(Self {
            cfg,
            d_model: attn.d_model,
            edges,
            decoder,
            head,
        })
    }

    pub fn num_params(cfg: &FusionConfig, d: usize, ffn_ratio: usize, depth: usize) -> usize {
        let edges = cfg.targets.len() * (cfg.streams.len() - 1);
        edges * CrossModalBlock::num_params(d)
            + TransformerStack::num_params(d, ffn_ratio, depth)
            + Linear::num_params(cfg.targets.len() * d, cfg.head.classes())
    }

    /// Target stream after adding every attended source, before pooling.
    pub fn target_stream(&self, s: &mut Session<'_>, target: Stream, inputs: &[Option<Var>; 3]) -> Result<Var> {
        let ft = inputs[target as usize]
            .ok_or_else(|| Error::config(format!("fusion target {} has no input", target.name())))?;
        let mut acc = ft;
        for edge in self.edges.iter().filter(|e| e.target == target) {
            let fs = inputs[edge.source as usize]
                .ok_or_else(|| Error::config(format!("fusion source {} has no input", edge.source.name())))?;
            let z = edge.block.attend(s, ft, fs)?;
            acc = s.add(acc, z)?;
        }
        Ok(acc)
    }

    /// Logits `[1, C]` from per-stream `[T, d_model]` features indexed by
    /// [`Stream`] discriminant.
    pub fn forward(&self, s: &mut Session<'_>, inputs: &[Option<Var>; 3]) -> Result<Var> {
        for st in self.cfg.streams.iter() {
            let v = inputs[st as usize].ok_or_else(|| Error::config(format!("stream {} has no input", st.name())))?;
            if s.shape(v).len() != 2 || s.shape(v)[1] != self.d_model {
                return Err(Error::shape("fuse_and_predict", s.shape(v), &[0, self.d_model]));
            }
        }
        let mut pooled = Vec::with_capacity(self.cfg.targets.len());
        for target in self.cfg.targets.iter() {
            let stream = self.target_stream(s, target, inputs)?;
            pooled.push(s.mean_rows(stream)?);
        }
        let stacked = s.concat(&pooled, 0)?;
        let decoded = self.decoder.forward(s, stacked)?;
        let flat = s.reshape(decoded, &[1, pooled.len() * self.d_model])?;
        self.head.forward(s, flat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn attn(d: usize) -> AttentionConfig {
        AttentionConfig::new(d, 2).unwrap()
    }

    #[test]
    fn encoder_preserves_length() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = ModalityEncoder::new(&mut Init::new(&mut store, &mut rng), Modality::Vision, 5, attn(8), 2, 3);
        assert_eq!(store.num_scalars(), ModalityEncoder::num_params(5, 8, 2, 3));
        for t in [1, 2, 7] {
            let x = ModalitySequence::new(Modality::Vision, Tensor::from_fn(&[t, 5], |i| i as f64 * 0.1)).unwrap();
            let mut s = Session::new(&store);
            let e = enc.encode(&mut s, &x).unwrap();
            assert_eq!(s.shape(e.features), &[t, 8]);
        }
        let wrong = ModalitySequence::new(Modality::Vision, Tensor::zeros(&[3, 4])).unwrap();
        let mut s = Session::new(&store);
        assert!(matches!(enc.encode(&mut s, &wrong), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_input_encoding_is_deterministic() {
        let build = || {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let enc = ModalityEncoder::new(&mut Init::new(&mut store, &mut rng), Modality::Audio, 3, attn(8), 2, 3);
            let x = ModalitySequence::new(Modality::Audio, Tensor::zeros(&[4, 3])).unwrap();
            let mut s = Session::new(&store);
            let e = enc.encode(&mut s, &x).unwrap();
            s.value(e.features).clone()
        };
        let a = build();
        assert_eq!(a, build());
        // rows differ only through the positional encoding
        assert_ne!(a.row(0), a.row(1));
    }

    #[test]
    fn cross_block_single_source_step_gives_identical_rows() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let block = CrossModalBlock::new(&mut Init::new(&mut store, &mut rng), "cm", attn(8));
        let mut s = Session::new(&store);
        let tgt = s.constant(Tensor::from_fn(&[5, 8], |i| (i as f64 * 0.7).sin()));
        let src = s.constant(Tensor::from_fn(&[1, 8], |i| (i as f64 * 0.3).cos()));
        let z = block.attend(&mut s, tgt, src).unwrap();
        let z = s.value(z).clone();
        assert_eq!(z.shape(), &[5, 8]);
        for r in 1..5 {
            for j in 0..8 {
                assert!((z.at(r, j) - z.at(0, j)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cross_block_zero_projection_is_residual_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let block = CrossModalBlock::new(&mut Init::new(&mut store, &mut rng), "cm", attn(4));
        *store.get_mut(block.attn.output.weight) = Tensor::zeros(&[4, 4]);
        let mut s = Session::new(&store);
        let x = Tensor::from_fn(&[3, 4], |i| i as f64 - 5.5);
        let tgt = s.constant(x.clone());
        let src = s.constant(Tensor::from_fn(&[6, 4], |i| (i as f64).sqrt()));
        let out = block
            .forward(
                &mut s,
                &EncodedModality {
                    modality: Modality::Language,
                    features: tgt,
                },
                &EncodedModality {
                    modality: Modality::Vision,
                    features: src,
                },
            )
            .unwrap();
        assert_eq!(s.value(out.features), &x);
    }

    #[test]
    fn fusion_logit_count_follows_head_mode() {
        for (head, c) in [(HeadMode::SevenClass, 7), (HeadMode::MultiLabel4, 4)] {
            let cfg = FusionConfig {
                streams: StreamSet::ALL,
                targets: StreamSet::ALL,
                head,
            };
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let fusion = Fusion::new(&mut Init::new(&mut store, &mut rng), cfg.clone(), attn(8), 2, 3).unwrap();
            assert_eq!(store.num_scalars(), Fusion::num_params(&cfg, 8, 2, 3));
            let mut s = Session::new(&store);
            let l = s.constant(Tensor::from_fn(&[3, 8], |i| (i as f64).sin()));
            let v = s.constant(Tensor::from_fn(&[5, 8], |i| (i as f64).cos()));
            let a = s.constant(Tensor::from_fn(&[4, 8], |i| (i as f64 * 0.5).sin()));
            let logits = fusion.forward(&mut s, &[Some(l), Some(v), Some(a)]).unwrap();
            assert_eq!(s.shape(logits), &[1, c]);
            assert!(matches!(
                fusion.forward(&mut s, &[Some(l), Some(v), None]),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn single_language_target_has_two_sources() {
        let cfg = FusionConfig {
            streams: StreamSet::ALL,
            targets: StreamSet::of(&[Stream::Language]),
            head: HeadMode::SevenClass,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fusion = Fusion::new(&mut Init::new(&mut store, &mut rng), cfg, attn(8), 2, 3).unwrap();
        let edges: Vec<(Stream, Stream)> = fusion.edges.iter().map(|e| (e.source, e.target)).collect();
        assert_eq!(
            edges,
            [(Stream::Vision, Stream::Language), (Stream::Acoustic, Stream::Language)]
        );
    }

    #[test]
    fn targets_must_be_available() {
        let cfg = FusionConfig {
            streams: StreamSet::of(&[Stream::Language, Stream::Vision]),
            targets: StreamSet::ALL,
            head: HeadMode::SevenClass,
        };
        assert!(cfg.validate().is_err());
        let empty = FusionConfig {
            targets: StreamSet::EMPTY,
            ..cfg
        };
        assert!(empty.validate().is_err());
    }
}
