//! Central finite-difference gradient checks for every differentiable op
//! and for the composite blocks built from them.
//!
//! A check draws fresh random inputs and parameters for each trial, runs
//! [`Graph::backward`] once and compares the analytic gradient against
//! `(f(x + ε·e_i) − f(x − ε·e_i)) / 2ε` on a set of coordinates. Outputs
//! that are not scalars are reduced with a fixed pseudo-random projection
//! so every output element contributes to the tested gradient.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::{CrossModalBlock, EncodedModality, HeadMode, Modality, ModalityEncoder, ModalitySequence};
use crate::graph::{Graph, Var};
use crate::losses::{Label, Objective};
use crate::model::{ForwardOptions, ModalityMode, Model, ModelConfig, SampleInputs};
use crate::nn::{AttentionConfig, Linear, MultiHeadAttention, TransformerLayer, TransformerStack, LN_EPS};
use crate::params::{Init, ParamStore, Session};
use crate::tensor::Tensor;
use crate::transfer::{consistency_loss, resample_sequence, ConsistencyKind, KnowledgeTransfer};

pub const FD_EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_TRIALS: usize = 10;
/// Denominator floor of [`relative_error`], so gradients that are zero on
/// both sides do not divide by zero.
pub const REL_FLOOR: f64 = 1e-4;

/// Central-difference estimate of `∂f/∂x`, one element at a time.
pub fn finite_difference_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (hi - lo) / (2.0 * eps);
    }
    out
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub trials: usize,
    /// Coordinates compared across all trials.
    pub coords: usize,
    pub passed: bool,
}

type Build = Box<dyn Fn(&mut Session<'_>, &[Var]) -> Result<Var>>;

/// One randomly drawn instance: parameters, differentiable inputs and the
/// scalar function of both.
struct Case {
    params: ParamStore,
    inputs: Vec<Tensor>,
    build: Build,
}

impl Case {
    fn op(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> Self {
        Self {
            params: ParamStore::new(),
            inputs,
            build: Box::new(move |s, xs| {
                let out = f(&mut s.graph, xs)?;
                project(&mut s.graph, out)
            }),
        }
    }

    fn block(
        params: ParamStore,
        inputs: Vec<Tensor>,
        f: impl Fn(&mut Session<'_>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self {
            params,
            inputs,
            build: Box::new(move |s, xs| {
                let out = f(s, xs)?;
                project(&mut s.graph, out)
            }),
        }
    }

    fn eval(&self, params: &ParamStore, inputs: &[Tensor]) -> Result<f64> {
        let mut s = Session::new(params);
        let xs: Vec<Var> = inputs.iter().map(|x| s.leaf(x.clone(), true)).collect();
        let loss = (self.build)(&mut s, &xs)?;
        Ok(s.value(loss).item())
    }

    /// Analytic gradients, parameters first, then inputs.
    fn analytic(&self) -> Result<Vec<Vec<f64>>> {
        let mut s = Session::new(&self.params);
        let xs: Vec<Var> = self.inputs.iter().map(|x| s.leaf(x.clone(), true)).collect();
        let loss = (self.build)(&mut s, &xs)?;
        let grads = s.backward(loss)?;
        let mut out = s.param_grads(&grads);
        for (x, t) in xs.iter().zip(&self.inputs) {
            out.push(
                grads
                    .slice(*x)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.len()]),
            );
        }
        Ok(out)
    }

    fn numeric(&self, slot: usize, idx: usize) -> Result<f64> {
        let np = self.params.len();
        let mut params = self.params.clone();
        let mut inputs = self.inputs.clone();
        let at = |delta: f64, params: &mut ParamStore, inputs: &mut Vec<Tensor>| -> Result<f64> {
            let cell = if slot < np {
                &mut params.tensors_mut()[slot].data_mut()[idx]
            } else {
                &mut inputs[slot - np].data_mut()[idx]
            };
            let orig = *cell;
            *cell = orig + delta;
            let v = self.eval(params, inputs);
            let cell = if slot < np {
                &mut params.tensors_mut()[slot].data_mut()[idx]
            } else {
                &mut inputs[slot - np].data_mut()[idx]
            };
            *cell = orig;
            v
        };
        let hi = at(FD_EPS, &mut params, &mut inputs)?;
        let lo = at(-FD_EPS, &mut params, &mut inputs)?;
        Ok((hi - lo) / (2.0 * FD_EPS))
    }
}

/// `Σ out ⊙ R` for a fixed pseudo-random `R`; scalars pass through.
fn project(g: &mut Graph, out: Var) -> Result<Var> {
    if g.value(out).len() == 1 {
        return g.sum(out);
    }
    let r = Tensor::from_fn(g.shape(out), |i| libm::sin(1.0 + 2.399963 * i as f64));
    let r = g.constant(r);
    let prod = g.mul(out, r)?;
    g.sum(prod)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero, for ops with a kink there.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5))
}

fn params_with(seed: u64, f: impl FnOnce(&mut Init<'_>)) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init::new(&mut store, &mut rng);
    f(&mut init);
    // Glorot weights plus zero biases and unit gains would hide bias and
    // gain gradients behind symmetric values; perturb everything.
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    store
}

const D: usize = 8;

fn attn(heads: usize) -> AttentionConfig {
    AttentionConfig::new(D, heads).expect("8 is divisible by 1 and 2")
}

type Make = fn(&mut ChaCha8Rng, usize) -> Result<Case>;

struct Check {
    name: &'static str,
    make: Make,
    /// Coordinates sampled per trial; `None` compares all of them.
    coords: Option<usize>,
}

const BLOCK_COORDS: Option<usize> = Some(24);

const CHECKS: &[Check] = &[
    Check {
        name: "matmul",
        make: |r, _| {
            let (m, k) = dims(r);
            let n = r.random_range(1..5);
            Ok(Case::op(vec![uniform(r, &[m, k]), uniform(r, &[k, n])], |g, x| {
                g.matmul(x[0], x[1])
            }))
        },
        coords: None,
    },
    Check {
        name: "transpose",
        make: |r, _| {
            let (m, n) = dims(r);
            Ok(Case::op(vec![uniform(r, &[m, n])], |g, x| g.transpose(x[0])))
        },
        coords: None,
    },
    Check {
        name: "add",
        make: |r, t| {
            let (m, n) = dims(r);
            let rhs = if t % 2 == 0 { vec![m, n] } else { vec![1, n] };
            Ok(Case::op(vec![uniform(r, &[m, n]), uniform(r, &rhs)], |g, x| {
                g.add(x[0], x[1])
            }))
        },
        coords: None,
    },
    Check {
        name: "sub",
        make: |r, t| {
            let (m, n) = dims(r);
            let rhs = if t % 2 == 0 { vec![m, n] } else { vec![n] };
            Ok(Case::op(vec![uniform(r, &[m, n]), uniform(r, &rhs)], |g, x| {
                g.sub(x[0], x[1])
            }))
        },
        coords: None,
    },
    Check {
        name: "mul",
        make: |r, t| {
            let (m, n) = dims(r);
            let rhs = if t % 2 == 0 { vec![m, n] } else { vec![1, n] };
            Ok(Case::op(vec![uniform(r, &[m, n]), uniform(r, &rhs)], |g, x| {
                g.mul(x[0], x[1])
            }))
        },
        coords: None,
    },
    Check {
        name: "scale",
        make: |r, _| {
            let (m, n) = dims(r);
            let c = r.random_range(-2.0..2.0);
            Ok(Case::op(vec![uniform(r, &[m, n])], move |g, x| g.scale(x[0], c)))
        },
        coords: None,
    },
    Check {
        name: "relu",
        make: |r, _| {
            let (m, n) = dims(r);
            Ok(Case::op(vec![off_zero(r, &[m, n])], |g, x| g.relu(x[0])))
        },
        coords: None,
    },
    Check {
        name: "gelu",
        make: |r, _| {
            let (m, n) = dims(r);
            Ok(Case::op(vec![uniform(r, &[m, n]).map(|v| 3.0 * v)], |g, x| {
                g.gelu(x[0])
            }))
        },
        coords: None,
    },
    Check {
        name: "square",
        make: |r, _| {
            let (m, n) = dims(r);
            Ok(Case::op(vec![uniform(r, &[m, n])], |g, x| g.square(x[0])))
        },
        coords: None,
    },
    Check {
        name: "abs",
        make: |r, _| {
            let (m, n) = dims(r);
            Ok(Case::op(vec![off_zero(r, &[m, n])], |g, x| g.abs(x[0])))
        },
        coords: None,
    },
    Check {
        name: "softmax_rows",
        make: |r, _| {
            let (m, n) = dims(r);
            Ok(Case::op(vec![uniform(r, &[m, n + 1]).map(|v| 2.0 * v)], |g, x| {
                g.softmax_rows(x[0])
            }))
        },
        coords: None,
    },
    Check {
        name: "layer_norm",
        make: |r, _| {
            let m = r.random_range(1..4);
            let n = r.random_range(2..6);
            Ok(Case::op(
                vec![uniform(r, &[m, n]), uniform(r, &[n]), uniform(r, &[n])],
                |g, x| g.layer_norm(x[0], x[1], x[2], LN_EPS),
            ))
        },
        coords: None,
    },
    Check {
        name: "concat",
        make: |r, t| {
            let (m, n) = dims(r);
            let k = r.random_range(1..4);
            let axis = t % 2;
            let b = if axis == 0 { [k, n] } else { [m, k] };
            Ok(Case::op(vec![uniform(r, &[m, n]), uniform(r, &b)], move |g, x| {
                g.concat(&[x[0], x[1]], axis)
            }))
        },
        coords: None,
    },
    Check {
        name: "narrow",
        make: |r, t| {
            let m = r.random_range(2..5);
            let n = r.random_range(2..5);
            let axis = t % 2;
            let full = if axis == 0 { m } else { n };
            let start = r.random_range(0..full - 1);
            let len = r.random_range(1..=full - start);
            Ok(Case::op(vec![uniform(r, &[m, n])], move |g, x| {
                g.narrow(x[0], axis, start, len)
            }))
        },
        coords: None,
    },
    Check {
        name: "sum",
        make: |r, _| {
            let (m, n) = dims(r);
            Ok(Case::op(vec![uniform(r, &[m, n])], |g, x| {
                let s = g.sum(x[0])?;
                g.square(s)
            }))
        },
        coords: None,
    },
    Check {
        name: "mean",
        make: |r, _| {
            let (m, n) = dims(r);
            Ok(Case::op(vec![uniform(r, &[m, n])], |g, x| {
                let s = g.mean(x[0])?;
                g.square(s)
            }))
        },
        coords: None,
    },
    Check {
        name: "mean_rows",
        make: |r, _| {
            let (m, n) = dims(r);
            Ok(Case::op(vec![uniform(r, &[m, n])], |g, x| g.mean_rows(x[0])))
        },
        coords: None,
    },
    Check {
        name: "unfold",
        make: |r, t| {
            let (m, n) = dims(r);
            let k = if t % 2 == 0 { 3 } else { 5 };
            Ok(Case::op(vec![uniform(r, &[m, n])], move |g, x| g.unfold(x[0], k)))
        },
        coords: None,
    },
    Check {
        name: "reshape",
        make: |r, _| {
            let (m, n) = dims(r);
            Ok(Case::op(vec![uniform(r, &[m, n])], move |g, x| {
                let flat = g.reshape(x[0], &[1, m * n])?;
                let sq = g.square(flat)?;
                g.reshape(sq, &[n, m])
            }))
        },
        coords: None,
    },
    Check {
        name: "cross_entropy",
        make: |r, _| {
            let label = r.random_range(0..7usize);
            Ok(Case::op(vec![uniform(r, &[1, 7]).map(|v| 3.0 * v)], move |g, x| {
                g.cross_entropy(x[0], label)
            }))
        },
        coords: None,
    },
    Check {
        name: "bce_with_logits",
        make: |r, _| {
            let targets: Vec<f64> = (0..4).map(|_| if r.random::<bool>() { 1.0 } else { 0.0 }).collect();
            Ok(Case::op(vec![uniform(r, &[1, 4]).map(|v| 3.0 * v)], move |g, x| {
                g.bce_with_logits(x[0], &targets)
            }))
        },
        coords: None,
    },
    Check {
        name: "mlp",
        make: |r, _| {
            let seed = r.random();
            let mut layers = Vec::new();
            let params = params_with(seed, |init| {
                layers.push(Linear::new(init, "mlp.0", 4, 6));
                layers.push(Linear::new(init, "mlp.1", 6, 5));
                layers.push(Linear::new(init, "mlp.2", 5, 3));
            });
            Ok(Case::block(params, vec![uniform(r, &[3, 4])], move |s, x| {
                let mut h = x[0];
                for (i, l) in layers.iter().enumerate() {
                    h = l.forward(s, h)?;
                    if i + 1 < layers.len() {
                        h = s.gelu(h)?;
                    }
                }
                Ok(h)
            }))
        },
        coords: None,
    },
    Check {
        name: "multi_head_attention",
        make: |r, t| {
            let cfg = attn(1 + t % 2);
            let seed = r.random();
            let mut mha = None;
            let params = params_with(seed, |init| mha = Some(MultiHeadAttention::new(init, "mha", cfg)));
            let mha = mha.expect("initialised");
            let (tq, ts) = (r.random_range(1..5), r.random_range(1..5));
            Ok(Case::block(
                params,
                vec![uniform(r, &[tq, D]), uniform(r, &[ts, D])],
                move |s, x| mha.forward(s, x[0], x[1]),
            ))
        },
        coords: BLOCK_COORDS,
    },
    Check {
        name: "transformer_layer",
        make: |r, t| {
            let cfg = attn(2);
            let seed = r.random();
            let mut layer = None;
            let params = params_with(seed, |init| layer = Some(TransformerLayer::new(init, "layer", cfg, 2)));
            let layer = layer.expect("initialised");
            let cross = t % 2 == 1;
            Ok(Case::block(
                params,
                vec![uniform(r, &[3, D]), uniform(r, &[4, D])],
                move |s, x| layer.forward(s, x[0], cross.then_some(x[1])),
            ))
        },
        coords: BLOCK_COORDS,
    },
    Check {
        name: "transformer_stack",
        make: |r, _| {
            let seed = r.random();
            let mut stack = None;
            let params = params_with(seed, |init| {
                stack = Some(TransformerStack::new(init, "stack", attn(2), 2, 3))
            });
            let stack = stack.expect("initialised");
            Ok(Case::block(params, vec![uniform(r, &[3, D])], move |s, x| {
                stack.forward(s, x[0])
            }))
        },
        coords: BLOCK_COORDS,
    },
    Check {
        name: "encoder",
        make: |r, _| {
            let seed = r.random();
            let mut enc = None;
            let params = params_with(seed, |init| {
                enc = Some(ModalityEncoder::new(init, Modality::Language, 6, attn(2), 2, 3))
            });
            let enc = enc.expect("initialised");
            let raw = ModalitySequence::new(Modality::Language, uniform(r, &[5, 6]))?;
            Ok(Case::block(params, Vec::new(), move |s, _| {
                Ok(enc.encode(s, &raw)?.features)
            }))
        },
        coords: BLOCK_COORDS,
    },
    Check {
        name: "cross_modal_block",
        make: |r, _| {
            let seed = r.random();
            let mut block = None;
            let params = params_with(seed, |init| block = Some(CrossModalBlock::new(init, "cm", attn(2))));
            let block = block.expect("initialised");
            let (tt, ts) = (r.random_range(1..5), r.random_range(1..5));
            Ok(Case::block(
                params,
                vec![uniform(r, &[tt, D]), uniform(r, &[ts, D])],
                move |s, x| {
                    let t = EncodedModality {
                        modality: Modality::Language,
                        features: x[0],
                    };
                    let src = EncodedModality {
                        modality: Modality::Vision,
                        features: x[1],
                    };
                    Ok(block.forward(s, &t, &src)?.features)
                },
            ))
        },
        coords: BLOCK_COORDS,
    },
    Check {
        name: "transfer_theta",
        make: |r, _| transfer_case(r, 0),
        coords: BLOCK_COORDS,
    },
    Check {
        name: "transfer_phi",
        make: |r, _| transfer_case(r, 1),
        coords: BLOCK_COORDS,
    },
    Check {
        name: "reconstruction_delta",
        make: |r, _| transfer_case(r, 2),
        coords: BLOCK_COORDS,
    },
    Check {
        name: "resample",
        make: |r, _| {
            let t = r.random_range(1..6);
            let t_new = r.random_range(1..7);
            Ok(Case::op(vec![uniform(r, &[t, 3])], move |g, x| {
                resample_sequence(g, x[0], t_new)
            }))
        },
        coords: None,
    },
    Check {
        name: "consistency_loss",
        make: |r, t| {
            let kind = if t % 2 == 0 {
                ConsistencyKind::L2
            } else {
                ConsistencyKind::L1
            };
            let (m, n) = dims(r);
            let a = uniform(r, &[m, n]);
            let b = Tensor::from_fn(&[m, n], |i| a.data()[i] + off_zero(r, &[1]).item());
            Ok(Case::op(vec![a, b], move |g, x| consistency_loss(g, x[0], x[1], kind)))
        },
        coords: None,
    },
    Check {
        name: "full_model",
        make: |r, t| full_model_case(r, t),
        coords: Some(32),
    },
];

/// θ (which 0), φ (1) or δ applied to θ/φ outputs (2), over the transfer
/// network's own parameters and its input features.
fn transfer_case(r: &mut ChaCha8Rng, which: u8) -> Result<Case> {
    let seed = r.random();
    let mut kt = None;
    let mut err = None;
    let params = params_with(seed, |init| match KnowledgeTransfer::new(init, attn(2), 2, 3) {
        Ok(k) => kt = Some(k),
        Err(e) => err = Some(e),
    });
    if let Some(e) = err {
        return Err(e);
    }
    let kt = kt.expect("initialised");
    let (tv, tl, t_rec) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..6));
    Ok(Case::block(
        params,
        vec![uniform(r, &[tv, D]), uniform(r, &[tl, D])],
        move |s, x| {
            let f_v = EncodedModality {
                modality: Modality::Vision,
                features: x[0],
            };
            let f_l = EncodedModality {
                modality: Modality::Language,
                features: x[1],
            };
            match which {
                0 => kt.transfer_theta(s, &f_v, t_rec),
                1 => kt.transfer_phi(s, &f_l, t_rec),
                _ => {
                    let a_v = kt.transfer_theta(s, &f_v, t_rec)?;
                    let a_l = kt.transfer_phi(s, &f_l, t_rec)?;
                    Ok(kt.fuse_reconstruction(s, a_v, a_l)?.features)
                }
            }
        },
    ))
}

/// Summed training objective of a three-sample toy batch, alternating
/// between the missing-audio and full-modality paths.
fn full_model_case(r: &mut ChaCha8Rng, trial: usize) -> Result<Case> {
    let dims_raw = [5, 4, 3];
    let cfg = ModelConfig {
        d_model: D,
        heads: 2,
        ffn_ratio: 2,
        ..ModelConfig::for_mode(ModalityMode::MissingAudio, dims_raw, HeadMode::SevenClass)
    };
    let mut model = Model::new(cfg, r.random())?;
    for t in model.params.tensors_mut() {
        for v in t.data_mut() {
            *v += r.random_range(-0.2..0.2);
        }
    }
    let params = model.params.clone();
    let mode = if trial.is_multiple_of(2) {
        ModalityMode::MissingAudio
    } else {
        ModalityMode::FullModality
    };
    let mut batch = Vec::new();
    for _ in 0..3 {
        let tv = r.random_range(1..5);
        let tl = r.random_range(1..5);
        let ta = r.random_range(1..5);
        let label = Label::Sentiment(r.random_range(0..7u8));
        batch.push((
            uniform(r, &[tv, dims_raw[0]]),
            uniform(r, &[tl, dims_raw[1]]),
            uniform(r, &[ta, dims_raw[2]]),
            label,
        ));
    }
    Ok(Case {
        params,
        inputs: Vec::new(),
        build: Box::new(move |s, _| {
            let mut total: Option<Var> = None;
            for (v, l, a, label) in &batch {
                let x = SampleInputs {
                    vision: Some(v),
                    language: Some(l),
                    audio: Some(a),
                };
                let out = model.forward(s, &x, &ForwardOptions::new(mode))?;
                let terms = model.loss(s, &out, label, &Objective::default())?;
                total = Some(match total {
                    Some(acc) => s.add(acc, terms.total)?,
                    None => terms.total,
                });
            }
            Ok(total.expect("nonempty batch"))
        }),
    })
}

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.name).collect()
}

pub fn run_check(name: &str, trials: usize, seed: u64) -> Result<CheckReport> {
    let (i, check) = CHECKS
        .iter()
        .enumerate()
        .find(|(_, c)| c.name == name)
        .ok_or_else(|| Error::config(format!("unknown gradient check {name:?}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut worst = 0.0f64;
    let mut coords = 0;
    for trial in 0..trials {
        let case = (check.make)(&mut rng, trial)?;
        let analytic = case.analytic()?;
        let all: Vec<(usize, usize)> = analytic
            .iter()
            .enumerate()
            .flat_map(|(slot, g)| (0..g.len()).map(move |j| (slot, j)))
            .collect();
        let picked: Vec<(usize, usize)> = match check.coords {
            Some(k) if all.len() > k => (0..k).map(|_| all[rng.random_range(0..all.len())]).collect(),
            _ => all,
        };
        for (slot, j) in picked {
            let num = case.numeric(slot, j)?;
            let err = relative_error(analytic[slot][j], num);
            if !err.is_finite() {
                return Err(Error::NonFinite("gradient check"));
            }
            worst = worst.max(err);
            coords += 1;
        }
    }
    Ok(CheckReport {
        name: check.name,
        max_rel_error: worst,
        trials,
        coords,
        passed: worst < TOLERANCE,
    })
}

/// Runs every registered check, or only `only` when given.
pub fn run_all(only: Option<&str>, trials: usize, seed: u64) -> Result<Vec<CheckReport>> {
    match only {
        Some(name) => Ok(vec![run_check(name, trials, seed)?]),
        None => CHECKS.iter().map(|c| run_check(c.name, trials, seed)).collect(),
    }
}

/// One aligned line per report.
pub fn describe(reports: &[CheckReport]) -> String {
    let mut s = String::new();
    for r in reports {
        s.push_str(&format!(
            "{:<22} max_rel_err={:.3e} trials={} coords={} {}\n",
            r.name,
            r.max_rel_error,
            r.trials,
            r.coords,
            if r.passed { "ok" } else { "FAIL" }
        ));
    }
    s
}
