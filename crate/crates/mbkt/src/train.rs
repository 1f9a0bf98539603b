//! Training loop, evaluation and the JSON-facing training configuration.

use std::collections::BTreeMap;

use mbkt_core::fusion::Stream;
use mbkt_core::metrics::compute_metrics;
use mbkt_core::{
    clip_grad_norm, Adam, AdamConfig, ConsistencyKind, ForwardOptions, Label, LossValues, MetricsReport, ModalityMode,
    Model, ModelConfig, Objective, SampleInputs, StreamSet,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::CheckpointError;
use crate::data::{Dataset, SampleTensors};
use crate::Error;

/// Serde adapters that store enums by their short names.
mod names {
    use super::*;
    use serde::de::Error as _;
    use serde::{Deserializer, Serializer};

    pub mod mode {
        use super::*;
        pub fn serialize<S: Serializer>(m: &ModalityMode, s: S) -> Result<S::Ok, S::Error> {
            s.serialize_str(m.name())
        }
        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ModalityMode, D::Error> {
            let s = String::deserialize(d)?;
            ModalityMode::from_name(&s).ok_or_else(|| D::Error::custom(format!("unknown mode {s:?}")))
        }
    }

    pub mod consistency {
        use super::*;
        pub fn serialize<S: Serializer>(k: &ConsistencyKind, s: S) -> Result<S::Ok, S::Error> {
            s.serialize_str(k.name())
        }
        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ConsistencyKind, D::Error> {
            let s = String::deserialize(d)?;
            ConsistencyKind::from_name(&s).ok_or_else(|| D::Error::custom(format!("unknown consistency loss {s:?}")))
        }
    }

    pub mod targets {
        use super::*;
        pub fn serialize<S: Serializer>(t: &Option<StreamSet>, s: S) -> Result<S::Ok, S::Error> {
            match t {
                None => s.serialize_none(),
                Some(set) => s.collect_seq(set.iter().map(Stream::name)),
            }
        }
        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<StreamSet>, D::Error> {
            let v: Option<Vec<String>> = Option::deserialize(d)?;
            v.map(|names| parse_streams(&names).map_err(D::Error::custom))
                .transpose()
        }
    }
}

/// Parses stream names such as `L`, `A'`, `vision`.
pub fn parse_streams<S: AsRef<str>>(names: &[S]) -> Result<StreamSet, String> {
    let mut streams = Vec::new();
    for n in names {
        let n = n.as_ref().trim();
        streams.push(Stream::from_name(n).ok_or_else(|| format!("unknown stream {n:?}"))?);
    }
    Ok(StreamSet::of(&streams))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Caps `epochs` for quick runs.
    pub max_epochs: Option<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    #[serde(with = "names::consistency")]
    pub consistency: ConsistencyKind,
    #[serde(with = "names::mode")]
    pub mode: ModalityMode,
    /// Fusion target streams; all streams of the mode when absent.
    #[serde(with = "names::targets")]
    pub targets: Option<StreamSet>,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub depth: usize,
    pub dropout: f64,
    pub seed: u64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    /// Worker threads for per-sample passes. Gradients are reduced in sample
    /// order, so results do not depend on this.
    pub threads: usize,
    /// Stop consistency gradients at the encoded acoustic target. Without
    /// this the acoustic encoder, trained by nothing else in missing-audio
    /// mode, can shrink its output until the consistency losses vanish.
    pub detach_acoustic_target: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            max_epochs: None,
            lr: 1e-3,
            batch_size: 16,
            lambda1: 1.0,
            lambda2: 1.0,
            consistency: ConsistencyKind::L2,
            mode: ModalityMode::MissingAudio,
            targets: None,
            d_model: mbkt_core::model::DEFAULT_D_MODEL,
            heads: mbkt_core::model::DEFAULT_HEADS,
            ffn_ratio: mbkt_core::model::DEFAULT_FFN_RATIO,
            depth: mbkt_core::model::DEFAULT_DEPTH,
            dropout: 0.0,
            seed: 0,
            weight_decay: 0.0,
            grad_clip: None,
            threads: 1,
            detach_acoustic_target: true,
        }
    }
}

impl TrainConfig {
    pub fn effective_epochs(&self) -> usize {
        self.max_epochs.map_or(self.epochs, |m| m.min(self.epochs))
    }

    pub fn objective(&self) -> Objective {
        Objective {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            kind: self.consistency,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.effective_epochs() == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("lambda1 and lambda2 must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be nonnegative");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        if self.threads == 0 {
            return bad("threads must be at least 1");
        }
        Ok(())
    }

    pub fn model_config(&self, data: &Dataset) -> Result<ModelConfig, Error> {
        let mut cfg = ModelConfig::for_mode(self.mode, data.dims, data.head);
        cfg.d_model = self.d_model;
        cfg.heads = self.heads;
        cfg.ffn_ratio = self.ffn_ratio;
        cfg.depth = self.depth;
        if let Some(t) = self.targets {
            cfg.fusion.targets = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Batch-mean losses of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub total: f64,
    pub prediction: f64,
    pub consistency_vision: f64,
    pub consistency_language: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub prediction: f64,
    pub consistency_vision: f64,
    pub consistency_language: f64,
    /// Metrics of the logits seen during the epoch's training passes.
    pub train_metrics: BTreeMap<String, f64>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepRecord>,
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over the combined words
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct PassResult {
    grads: Option<Vec<Vec<f64>>>,
    values: LossValues,
    logits: Vec<f64>,
}

struct PassSpec<'a> {
    model: &'a Model,
    opts: ForwardOptions,
    objective: Objective,
    dropout: f64,
}

impl PassSpec<'_> {
    /// Forward and backward of one sample. With `into` the weighted gradient
    /// is accumulated in place, otherwise it is returned.
    fn run(
        &self,
        x: &SampleTensors,
        label: &Label,
        dropout_seed: u64,
        into: Option<(&mut [Vec<f64>], f64)>,
    ) -> Result<PassResult, Error> {
        let mut s = self.model.session().with_dropout(self.dropout, dropout_seed);
        let inputs = SampleInputs {
            vision: Some(&x.vision),
            language: Some(&x.language),
            audio: x.audio.as_ref(),
        };
        let out = self.model.forward(&mut s, &inputs, &self.opts)?;
        let terms = self.model.loss(&mut s, &out, label, &self.objective)?;
        let values = terms.values(&s);
        if !values.total.is_finite() {
            return Err(Error::Numeric("non-finite training loss".into()));
        }
        let g = s.backward(terms.total)?;
        let grads = match into {
            Some((buf, w)) => {
                s.accumulate_grads(&g, buf, w);
                None
            }
            None => Some(s.param_grads(&g)),
        };
        Ok(PassResult {
            grads,
            values,
            logits: s.value(out.logits).data().to_vec(),
        })
    }
}

fn check_training_data(cfg: &TrainConfig, data: &Dataset) -> Result<(), Error> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if cfg.mode.reads_audio_in_training() {
        if let Some(s) = data.samples.iter().find(|s| !s.has_audio()) {
            return Err(Error::Config(format!(
                "mode {} needs acoustic features for training but sample {} has none",
                cfg.mode, s.id
            )));
        }
    }
    Ok(())
}

/// Trains a fresh model; `on_epoch` sees every epoch log as it is produced.
pub fn train(cfg: &TrainConfig, data: &Dataset, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome, Error> {
    cfg.validate()?;
    check_training_data(cfg, data)?;
    let model_cfg = cfg.model_config(data)?;
    let mut model = Model::new(model_cfg, cfg.seed)?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let tensors = data.tensors();
    let labels = data.labels();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x5348_5546, 0));
    let mut opts = ForwardOptions::new(cfg.mode);
    opts.detach_acoustic_target = cfg.detach_acoustic_target;

    let mut epochs = Vec::new();
    let mut steps = Vec::new();
    let mut step = 0usize;
    for epoch in 1..=cfg.effective_epochs() {
        order.shuffle(&mut shuffle_rng);
        let mut sums = LossValues::default();
        let mut seen_logits = vec![Vec::new(); data.len()];
        for batch in order.chunks(cfg.batch_size) {
            let spec = PassSpec {
                model: &model,
                opts,
                objective: cfg.objective(),
                dropout: cfg.dropout,
            };
            let w = 1.0 / batch.len() as f64;
            let mut grads = model.params.zero_grads();
            let seed_of = |pos: usize| mix_seed(cfg.seed, epoch as u64, (step * cfg.batch_size + pos) as u64);
            let results: Vec<PassResult> = if cfg.threads <= 1 || batch.len() == 1 {
                let mut out = Vec::with_capacity(batch.len());
                for (pos, &i) in batch.iter().enumerate() {
                    out.push(spec.run(&tensors[i], &labels[i], seed_of(pos), Some((&mut grads, w)))?);
                }
                out
            } else {
                let per = batch.len().div_ceil(cfg.threads);
                let chunks: Vec<Result<Vec<PassResult>, Error>> = std::thread::scope(|scope| {
                    let handles: Vec<_> = batch
                        .chunks(per)
                        .enumerate()
                        .map(|(c, chunk)| {
                            let spec = &spec;
                            let tensors = &tensors;
                            let labels = &labels;
                            let seed_of = &seed_of;
                            scope.spawn(move || {
                                chunk
                                    .iter()
                                    .enumerate()
                                    .map(|(k, &i)| spec.run(&tensors[i], &labels[i], seed_of(c * per + k), None))
                                    .collect()
                            })
                        })
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().expect("worker panicked"))
                        .collect()
                });
                let mut out = Vec::with_capacity(batch.len());
                for chunk in chunks {
                    for r in chunk? {
                        for (acc, g) in grads.iter_mut().zip(r.grads.as_ref().expect("returned grads")) {
                            for (o, x) in acc.iter_mut().zip(g) {
                                *o += w * x;
                            }
                        }
                        out.push(r);
                    }
                }
                out
            };
            let mut batch_sum = LossValues::default();
            for (r, &i) in results.into_iter().zip(batch) {
                add_values(&mut batch_sum, &r.values);
                seen_logits[i] = r.logits;
            }
            add_values(&mut sums, &batch_sum);
            steps.push(StepRecord {
                epoch,
                step,
                total: batch_sum.total * w,
                prediction: batch_sum.prediction * w,
                consistency_vision: batch_sum.consistency_vision * w,
                consistency_language: batch_sum.consistency_language * w,
            });
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            adam.step(&mut model.params, &grads)?;
            step += 1;
        }
        let n = data.len() as f64;
        let report = compute_metrics(&seen_logits, &labels)?;
        let log = EpochLog {
            epoch,
            total: sums.total / n,
            prediction: sums.prediction / n,
            consistency_vision: sums.consistency_vision / n,
            consistency_language: sums.consistency_language / n,
            train_metrics: report.records().into_iter().collect(),
        };
        on_epoch(&log);
        epochs.push(log);
    }
    Ok(TrainOutcome { model, epochs, steps })
}

fn add_values(acc: &mut LossValues, v: &LossValues) {
    acc.total += v.total;
    acc.prediction += v.prediction;
    acc.consistency_vision += v.consistency_vision;
    acc.consistency_language += v.consistency_language;
}

/// The mode a model was built to run when none is requested.
pub fn default_mode(cfg: &ModelConfig) -> ModalityMode {
    let streams = cfg.fusion.streams;
    ModalityMode::ALL
        .into_iter()
        .filter(|m| m.streams() == streams)
        .find(|m| cfg.supports(*m).is_ok())
        .unwrap_or(ModalityMode::MissingAudio)
}

fn check_eval_data(model: &Model, data: &Dataset, mode: ModalityMode) -> Result<(), Error> {
    if model.cfg.dims != data.dims {
        return Err(Error::Checkpoint(CheckpointError::ShapeMismatch {
            name: "config.dims".into(),
            expected: model.cfg.dims.to_vec(),
            found: data.dims.to_vec(),
        }));
    }
    if model.cfg.fusion.head != data.head {
        return Err(Error::Config("dataset label mode does not match the model head".into()));
    }
    model.cfg.supports(mode)?;
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    Ok(())
}

/// Logits of every sample. Only full-modality evaluation passes acoustic
/// features to the model.
pub fn predictions(model: &Model, data: &Dataset, mode: ModalityMode) -> Result<Vec<Vec<f64>>, Error> {
    check_eval_data(model, data, mode)?;
    data.samples
        .iter()
        .map(|s| {
            let v = s.vision.to_tensor();
            let l = s.language.to_tensor();
            let a = if mode.reads_audio_in_evaluation() {
                let a = s.audio.as_ref().ok_or_else(|| {
                    Error::Config(format!(
                        "{mode} evaluation needs acoustic features; sample {} has none",
                        s.id
                    ))
                })?;
                Some(a.to_tensor())
            } else {
                None
            };
            let inputs = SampleInputs {
                vision: Some(&v),
                language: Some(&l),
                audio: a.as_ref(),
            };
            Ok(model.predict(&inputs, mode)?)
        })
        .collect()
}

pub fn evaluate(model: &Model, data: &Dataset, mode: ModalityMode) -> Result<MetricsReport, Error> {
    let preds = predictions(model, data, mode)?;
    Ok(compute_metrics(&preds, &data.labels())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic, SyntheticSpec};

    fn data(n: usize) -> Dataset {
        generate_synthetic(
            &SyntheticSpec {
                n_samples: n,
                dims: [6, 5, 3],
                t_ranges: [(3, 5), (2, 4), (3, 6)],
                ..SyntheticSpec::default()
            },
            1,
        )
        .unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            d_model: 8,
            heads: 2,
            ffn_ratio: 2,
            depth: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_json_round_trip_and_defaults() {
        let cfg = TrainConfig {
            targets: Some(StreamSet::of(&[Stream::Language, Stream::Acoustic])),
            ..TrainConfig::default()
        };
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("\"mode\":\"missing_audio\"") && json.contains("\"consistency\":\"L2\""));
        assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), cfg);
        let partial: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "targets": ["A'", "V"]}"#).unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.lr, 1e-3);
        assert_eq!(
            partial.targets,
            Some(StreamSet::of(&[Stream::Acoustic, Stream::Vision]))
        );
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"mode": "audio_only"}"#).is_err());
    }

    #[test]
    fn threads_do_not_change_results() {
        let ds = data(10);
        let one = train(&quick(), &ds, |_| {}).unwrap();
        let three = train(&TrainConfig { threads: 3, ..quick() }, &ds, |_| {}).unwrap();
        assert_eq!(one.model.params, three.model.params);
        assert_eq!(one.steps, three.steps);
        assert_eq!(one.epochs.len(), 2);
        assert_eq!(one.steps.len(), 2 * 3);
    }

    #[test]
    fn logged_total_is_additive() {
        let ds = data(8);
        let cfg = TrainConfig {
            lambda1: 0.3,
            lambda2: 2.0,
            ..quick()
        };
        let out = train(&cfg, &ds, |_| {}).unwrap();
        for s in &out.steps {
            let sum = s.prediction + 0.3 * s.consistency_vision + 2.0 * s.consistency_language;
            assert!((s.total - sum).abs() < 1e-9);
            assert!(s.consistency_vision > 0.0);
        }
    }

    #[test]
    fn mode_and_data_must_agree() {
        let mut ds = data(6);
        ds.samples[2].audio = None;
        assert!(matches!(train(&quick(), &ds, |_| {}), Err(Error::Config(_))));
        let lv = TrainConfig {
            mode: ModalityMode::LanguageVision,
            ..quick()
        };
        let out = train(&lv, &ds, |_| {}).unwrap();
        assert_eq!(default_mode(&out.model.cfg), ModalityMode::LanguageVision);
        assert!(evaluate(&out.model, &ds, ModalityMode::LanguageVision).is_ok());
        assert!(evaluate(&out.model, &ds, ModalityMode::FullModality).is_err());
        let mut wrong = ds.clone();
        wrong.dims[0] += 1;
        assert!(matches!(
            evaluate(&out.model, &wrong, ModalityMode::LanguageVision),
            Err(Error::Checkpoint(_))
        ));
    }
}
