//! The full missing-modality sentiment model.
//!
//! ```text
//!   X_V ─ encoder_V ─ f_V ─┬──────────────── θ ─┐
//!   X_L ─ encoder_L ─ f_L ─┼──────────────── φ ─┴─ δ ─ f_A' ─┐
//!   X_A ─ encoder_A ─ f_A ─┼─ (consistency targets)           │
//!                          └─ cross-modal fusion ◄────────────┘ ─ decoder ─ head
//! ```
//!
//! Which encoders and branches exist is fixed by [`ModelConfig`]; which
//! streams feed the fusion network on a given pass is picked by
//! [`ModalityMode`].

use alloc::format;
use alloc::vec::Vec;
use core::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::{
    EncodedModality, Fusion, FusionConfig, HeadMode, Modality, ModalityEncoder, ModalitySequence, Stream, StreamSet,
};
use crate::graph::Var;
use crate::losses::{cross_entropy, total_loss, Label, LossTerms, Objective};
use crate::nn::AttentionConfig;
use crate::params::{Init, ParamStore, Session};
use crate::tensor::Tensor;
use crate::transfer::{consistency_loss, resample_sequence, KnowledgeTransfer};

/// Which modalities a run may use, mirroring the comparison rows of the
/// evaluation tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModalityMode {
    /// Audio is reconstructed from vision and language.
    MissingAudio,
    /// Ground-truth audio is encoded and fused directly.
    FullModality,
    VisionOnly,
    LanguageOnly,
    /// Vision and language fused, no acoustic stream at all.
    LanguageVision,
}

impl ModalityMode {
    pub const ALL: [ModalityMode; 5] = [
        ModalityMode::MissingAudio,
        ModalityMode::FullModality,
        ModalityMode::VisionOnly,
        ModalityMode::LanguageOnly,
        ModalityMode::LanguageVision,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModalityMode::MissingAudio => "missing_audio",
            ModalityMode::FullModality => "full_modality",
            ModalityMode::VisionOnly => "vision_only",
            ModalityMode::LanguageOnly => "language_only",
            ModalityMode::LanguageVision => "language_vision",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Streams entering the fusion network.
    pub fn streams(self) -> StreamSet {
        match self {
            ModalityMode::MissingAudio | ModalityMode::FullModality => StreamSet::ALL,
            ModalityMode::VisionOnly => StreamSet::of(&[Stream::Vision]),
            ModalityMode::LanguageOnly => StreamSet::of(&[Stream::Language]),
            ModalityMode::LanguageVision => StreamSet::of(&[Stream::Language, Stream::Vision]),
        }
    }

    /// Whether the mode reads raw acoustic features (at training time for
    /// the consistency targets, at any time for full modality).
    pub fn reads_audio_in_training(self) -> bool {
        matches!(self, ModalityMode::MissingAudio | ModalityMode::FullModality)
    }

    pub fn reads_audio_in_evaluation(self) -> bool {
        self == ModalityMode::FullModality
    }
}

impl fmt::Display for ModalityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture of a model. Two models with equal configs have identical
/// parameter names and shapes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Raw feature widths of vision, language and audio.
    pub dims: [usize; 3],
    pub d_model: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    /// Transformer layers in every stack.
    pub depth: usize,
    pub fusion: FusionConfig,
    pub transfer: bool,
    pub acoustic_encoder: bool,
}

pub const DEFAULT_D_MODEL: usize = 32;
pub const DEFAULT_HEADS: usize = 4;
pub const DEFAULT_FFN_RATIO: usize = 4;
pub const DEFAULT_DEPTH: usize = 3;

impl ModelConfig {
    /// Architecture trained by `mode`, with all available targets enabled.
    pub fn for_mode(mode: ModalityMode, dims: [usize; 3], head: HeadMode) -> Self {
        let streams = mode.streams();
        Self {
            dims,
            d_model: DEFAULT_D_MODEL,
            heads: DEFAULT_HEADS,
            ffn_ratio: DEFAULT_FFN_RATIO,
            depth: DEFAULT_DEPTH,
            fusion: FusionConfig {
                streams,
                targets: streams,
                head,
            },
            transfer: mode == ModalityMode::MissingAudio,
            acoustic_encoder: mode.reads_audio_in_training(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::config("raw feature widths must be positive"));
        }
        if self.depth == 0 || self.ffn_ratio == 0 {
            return Err(Error::config("depth and ffn ratio must be positive"));
        }
        AttentionConfig::new(self.d_model, self.heads)?;
        self.fusion.validate()?;
        if self.transfer && !self.fusion.streams.contains(Stream::Acoustic) {
            return Err(Error::config("transfer network without an acoustic stream"));
        }
        Ok(())
    }

    fn needs_encoder(&self, m: Modality) -> bool {
        match m {
            Modality::Vision => self.fusion.streams.contains(Stream::Vision) || self.transfer,
            Modality::Language => self.fusion.streams.contains(Stream::Language) || self.transfer,
            Modality::Audio => self.acoustic_encoder,
        }
    }

    /// Exact number of scalar parameters.
    pub fn num_params(&self) -> usize {
        let (d, r, n) = (self.d_model, self.ffn_ratio, self.depth);
        let enc: usize = Modality::ALL
            .iter()
            .filter(|m| self.needs_encoder(**m))
            .map(|m| ModalityEncoder::num_params(self.dims[m.index()], d, r, n))
            .sum();
        let kt = if self.transfer {
            KnowledgeTransfer::num_params(d, r, n)
        } else {
            0
        };
        enc + kt + Fusion::num_params(&self.fusion, d, r, n)
    }

    /// Whether a model of this architecture can run `mode`.
    pub fn supports(&self, mode: ModalityMode) -> Result<()> {
        if self.fusion.streams != mode.streams() {
            return Err(Error::config(format!(
                "mode {mode} fuses streams {} but the model was built for {}",
                mode.streams(),
                self.fusion.streams
            )));
        }
        match mode {
            ModalityMode::MissingAudio if !self.transfer => {
                Err(Error::config("missing_audio needs the knowledge-transfer network"))
            }
            ModalityMode::FullModality if !self.acoustic_encoder => {
                Err(Error::config("full_modality needs the acoustic encoder"))
            }
            _ => Ok(()),
        }
    }
}

/// Raw inputs of one sample; absent modalities are `None`.
#[derive(Clone, Copy, Debug, Default)]
pub struct SampleInputs<'a> {
    pub vision: Option<&'a Tensor>,
    pub language: Option<&'a Tensor>,
    pub audio: Option<&'a Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub mode: ModalityMode,
    /// Stop consistency gradients from reaching the acoustic encoder.
    pub detach_acoustic_target: bool,
    /// Stop prediction gradients from reaching θ, φ and δ.
    pub detach_reconstruction: bool,
}

impl ForwardOptions {
    pub fn new(mode: ModalityMode) -> Self {
        Self {
            mode,
            detach_acoustic_target: false,
            detach_reconstruction: false,
        }
    }
}

/// Graph nodes produced by [`Model::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub f_vision: Option<Var>,
    pub f_language: Option<Var>,
    /// Encoded ground-truth audio (full modality, or missing-audio training).
    pub f_audio: Option<Var>,
    /// θ(f_V) at the reconstruction length.
    pub recon_vision: Option<Var>,
    /// φ(f_L) at the reconstruction length.
    pub recon_language: Option<Var>,
    /// f_A' = δ([θ(f_V) ‖ φ(f_L)]).
    pub reconstruction: Option<Var>,
    /// f_A resampled to the reconstruction length.
    pub acoustic_target: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub encoders: [Option<ModalityEncoder>; 3],
    pub transfer: Option<KnowledgeTransfer>,
    pub fusion: Fusion,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let attn = AttentionConfig::new(cfg.d_model, cfg.heads)?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut params, &mut rng);
        let encoders = Modality::ALL.map(|m| {
            cfg.needs_encoder(m)
                .then(|| ModalityEncoder::new(&mut init, m, cfg.dims[m.index()], attn, cfg.ffn_ratio, cfg.depth))
        });
        let transfer = if cfg.transfer {
            Some(KnowledgeTransfer::new(&mut init, attn, cfg.ffn_ratio, cfg.depth)?)
        } else {
            None
        };
        let fusion = Fusion::new(&mut init, cfg.fusion.clone(), attn, cfg.ffn_ratio, cfg.depth)?;
        Ok(Self {
            cfg,
            params,
            encoders,
            transfer,
            fusion,
        })
    }

    /// Rebuilds the structure for `cfg` and adopts `params`, which must match
    /// it name for name and shape for shape.
    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        model.params.assign_from(&params)?;
        Ok(model)
    }

    pub fn encoder(&self, m: Modality) -> Result<&ModalityEncoder> {
        self.encoders[m.index()]
            .as_ref()
            .ok_or_else(|| Error::config(format!("model has no {m} encoder")))
    }

    pub fn session(&self) -> Session<'_> {
        Session::new(&self.params)
    }

    fn encode(&self, s: &mut Session<'_>, m: Modality, x: Option<&Tensor>) -> Result<EncodedModality> {
        let x = x.ok_or_else(|| Error::config(format!("{m} features are required")))?;
        let seq = ModalitySequence::new(m, x.clone())?;
        self.encoder(m)?.encode(s, &seq)
    }

    /// Runs the model for `opts.mode`. In missing-audio mode the audio input
    /// is optional: when present (training) it sets the reconstruction length
    /// and provides the consistency target; when absent the reconstruction
    /// length is `max(T_V, T_L)`.
    pub fn forward(
        &self,
        s: &mut Session<'_>,
        inputs: &SampleInputs<'_>,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        let mode = opts.mode;
        self.cfg.supports(mode)?;
        let streams = mode.streams();
        let mut out = ForwardOutput {
            logits: Var(0),
            f_vision: None,
            f_language: None,
            f_audio: None,
            recon_vision: None,
            recon_language: None,
            reconstruction: None,
            acoustic_target: None,
        };
        let mut fused: [Option<Var>; 3] = [None; 3];
        let need_v = streams.contains(Stream::Vision) || mode == ModalityMode::MissingAudio;
        let need_l = streams.contains(Stream::Language) || mode == ModalityMode::MissingAudio;
        let f_v = if need_v {
            Some(self.encode(s, Modality::Vision, inputs.vision)?)
        } else {
            None
        };
        let f_l = if need_l {
            Some(self.encode(s, Modality::Language, inputs.language)?)
        } else {
            None
        };
        out.f_vision = f_v.map(|e| e.features);
        out.f_language = f_l.map(|e| e.features);
        if streams.contains(Stream::Vision) {
            fused[Stream::Vision as usize] = out.f_vision;
        }
        if streams.contains(Stream::Language) {
            fused[Stream::Language as usize] = out.f_language;
        }

        match mode {
            ModalityMode::FullModality => {
                let f_a = self.encode(s, Modality::Audio, inputs.audio)?;
                out.f_audio = Some(f_a.features);
                fused[Stream::Acoustic as usize] = Some(f_a.features);
            }
            ModalityMode::MissingAudio => {
                let (f_v, f_l) = (f_v.expect("vision encoded"), f_l.expect("language encoded"));
                let kt = self.transfer.as_ref().expect("supports() checked transfer");
                let t_rec = match inputs.audio {
                    Some(a) => a.rows(),
                    None => s.shape(f_v.features)[0].max(s.shape(f_l.features)[0]),
                };
                if inputs.audio.is_some() {
                    let f_a = self.encode(s, Modality::Audio, inputs.audio)?;
                    let mut target = resample_sequence(s, f_a.features, t_rec)?;
                    if opts.detach_acoustic_target {
                        target = s.detach(target);
                    }
                    out.f_audio = Some(f_a.features);
                    out.acoustic_target = Some(target);
                }
                let a_v = kt.transfer_theta(s, &f_v, t_rec)?;
                let a_l = kt.transfer_phi(s, &f_l, t_rec)?;
                let mut rec = kt.fuse_reconstruction(s, a_v, a_l)?.features;
                if opts.detach_reconstruction {
                    rec = s.detach(rec);
                }
                out.recon_vision = Some(a_v);
                out.recon_language = Some(a_l);
                out.reconstruction = Some(rec);
                fused[Stream::Acoustic as usize] = Some(rec);
            }
            _ => {}
        }
        out.logits = self.fusion.forward(s, &fused)?;
        Ok(out)
    }

    /// Per-sample objective: prediction loss plus, when consistency targets
    /// are available, the weighted vision and language consistency losses.
    pub fn loss(
        &self,
        s: &mut Session<'_>,
        out: &ForwardOutput,
        label: &Label,
        objective: &Objective,
    ) -> Result<LossTerms> {
        if label.head() != self.cfg.fusion.head {
            return Err(Error::config("label kind does not match the model head"));
        }
        let prediction = cross_entropy(s, out.logits, label)?;
        let (Some(target), Some(a_v), Some(a_l)) = (out.acoustic_target, out.recon_vision, out.recon_language) else {
            return Ok(LossTerms {
                total: prediction,
                prediction,
                consistency_vision: None,
                consistency_language: None,
            });
        };
        let lc_v = consistency_loss(s, a_v, target, objective.kind)?;
        let lc_l = consistency_loss(s, a_l, target, objective.kind)?;
        let total = total_loss(s, prediction, lc_v, lc_l, objective.lambda1, objective.lambda2)?;
        Ok(LossTerms {
            total,
            prediction,
            consistency_vision: Some(lc_v),
            consistency_language: Some(lc_l),
        })
    }

    /// Logits of one sample as plain numbers.
    pub fn predict(&self, inputs: &SampleInputs<'_>, mode: ModalityMode) -> Result<Vec<f64>> {
        let mut s = self.session();
        let out = self.forward(&mut s, inputs, &ForwardOptions::new(mode))?;
        Ok(s.value(out.logits).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: ModalityMode) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            heads: 2,
            ffn_ratio: 2,
            ..ModelConfig::for_mode(mode, [5, 4, 3], HeadMode::SevenClass)
        }
    }

    fn inputs() -> (Tensor, Tensor, Tensor) {
        (
            Tensor::from_fn(&[4, 5], |i| (i as f64 * 0.31).sin()),
            Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.17).cos()),
            Tensor::from_fn(&[5, 3], |i| (i as f64 * 0.53).sin()),
        )
    }

    #[test]
    fn parameter_count_is_exact_for_every_mode() {
        for mode in ModalityMode::ALL {
            let cfg = small(mode);
            let m = Model::new(cfg.clone(), 1).unwrap();
            assert_eq!(m.params.num_scalars(), cfg.num_params(), "{mode}");
        }
    }

    #[test]
    fn more_targets_means_more_parameters() {
        let base = small(ModalityMode::MissingAudio);
        let subsets = [
            StreamSet::of(&[Stream::Language]),
            StreamSet::of(&[Stream::Language, Stream::Acoustic]),
            StreamSet::ALL,
        ];
        let counts: Vec<usize> = subsets
            .iter()
            .map(|t| {
                let mut c = base.clone();
                c.fusion.targets = *t;
                Model::new(c.clone(), 0).unwrap().params.num_scalars()
            })
            .collect();
        assert!(counts[0] < counts[1] && counts[1] < counts[2]);
    }

    #[test]
    fn missing_audio_runs_without_audio() {
        let (v, l, a) = inputs();
        let m = Model::new(small(ModalityMode::MissingAudio), 3).unwrap();
        let mut s = m.session();
        let no_audio = SampleInputs {
            vision: Some(&v),
            language: Some(&l),
            audio: None,
        };
        let out = m
            .forward(&mut s, &no_audio, &ForwardOptions::new(ModalityMode::MissingAudio))
            .unwrap();
        assert_eq!(s.shape(out.logits), &[1, 7]);
        assert_eq!(s.shape(out.reconstruction.unwrap()), &[4, 8]);
        assert!(out.acoustic_target.is_none());

        let with_audio = SampleInputs {
            audio: Some(&a),
            ..no_audio
        };
        let mut s = m.session();
        let out = m
            .forward(&mut s, &with_audio, &ForwardOptions::new(ModalityMode::MissingAudio))
            .unwrap();
        assert_eq!(s.shape(out.reconstruction.unwrap()), &[5, 8]);
        let terms = m
            .loss(&mut s, &out, &Label::Sentiment(2), &Objective::default())
            .unwrap();
        let vals = terms.values(&s);
        assert!((vals.total - (vals.prediction + vals.consistency_vision + vals.consistency_language)).abs() < 1e-12);
    }

    #[test]
    fn full_modality_and_missing_audio_share_vision_language_path() {
        let (v, l, a) = inputs();
        let m = Model::new(small(ModalityMode::MissingAudio), 5).unwrap();
        let x = SampleInputs {
            vision: Some(&v),
            language: Some(&l),
            audio: Some(&a),
        };
        let mut s1 = m.session();
        let o1 = m
            .forward(&mut s1, &x, &ForwardOptions::new(ModalityMode::FullModality))
            .unwrap();
        let mut s2 = m.session();
        let o2 = m
            .forward(&mut s2, &x, &ForwardOptions::new(ModalityMode::MissingAudio))
            .unwrap();
        assert_eq!(s1.value(o1.f_vision.unwrap()), s2.value(o2.f_vision.unwrap()));
        assert_eq!(s1.value(o1.f_language.unwrap()), s2.value(o2.f_language.unwrap()));
        assert_ne!(s1.value(o1.logits), s2.value(o2.logits));
        assert_eq!(s1.shape(o1.logits), s2.shape(o2.logits));
    }

    #[test]
    fn mode_must_match_architecture() {
        let (v, l, _) = inputs();
        let m = Model::new(small(ModalityMode::LanguageVision), 0).unwrap();
        let x = SampleInputs {
            vision: Some(&v),
            language: Some(&l),
            audio: None,
        };
        let mut s = m.session();
        assert!(m
            .forward(&mut s, &x, &ForwardOptions::new(ModalityMode::LanguageVision))
            .is_ok());
        assert!(matches!(
            m.forward(&mut s, &x, &ForwardOptions::new(ModalityMode::MissingAudio)),
            Err(Error::Config(_))
        ));
        let full = Model::new(small(ModalityMode::FullModality), 0).unwrap();
        let mut s = full.session();
        assert!(matches!(
            full.forward(&mut s, &x, &ForwardOptions::new(ModalityMode::FullModality)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn from_params_rejects_foreign_layout() {
        let a = Model::new(small(ModalityMode::VisionOnly), 0).unwrap();
        let b = Model::new(small(ModalityMode::LanguageOnly), 0).unwrap();
        assert!(Model::from_params(a.cfg.clone(), b.params.clone()).is_err());
        let same = Model::from_params(a.cfg.clone(), a.params.clone()).unwrap();
        assert_eq!(same.params, a.params);
    }
}
