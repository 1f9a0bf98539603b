#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use mbkt::data::Dataset;
use mbkt::synth::{generate_synthetic, SyntheticSpec};
use mbkt::train::TrainConfig;
use mbkt_core::metrics::MetricsReport;
use mbkt_core::tensor::matmul;
use mbkt_core::transfer::resample_matrix;
use mbkt_core::Label;
use nalgebra::DMatrix;

pub fn mbkt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mbkt"))
        .args(args)
        .current_dir(dir)
        .env_remove("MB_SEED")
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// `key=value` lines of a command's stdout.
pub fn kv(o: &Output) -> Vec<(String, String)> {
    stdout(o)
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

pub fn small_spec(n: usize) -> SyntheticSpec {
    SyntheticSpec {
        n_samples: n,
        dims: [6, 5, 3],
        t_ranges: [(3, 5), (2, 4), (3, 6)],
        ..SyntheticSpec::default()
    }
}

pub fn small_data(n: usize, seed: u64) -> Dataset {
    generate_synthetic(&small_spec(n), seed).unwrap()
}

/// A model small enough for debug-build integration tests.
pub fn tiny_config() -> TrainConfig {
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

/// Per-step regression rows `[V'_t ‖ L'_t ‖ 1]` with vision and language
/// resampled to the audio length, and the audio rows.
pub fn audio_regression_rows(ds: &Dataset) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in &ds.samples {
        let a = s.audio.as_ref().unwrap().to_tensor();
        let v = s.vision.to_tensor();
        let l = s.language.to_tensor();
        let rv = matmul(&resample_matrix(v.rows(), a.rows()), &v).unwrap();
        let rl = matmul(&resample_matrix(l.rows(), a.rows()), &l).unwrap();
        for t in 0..a.rows() {
            let mut x = rv.row(t).to_vec();
            x.extend_from_slice(rl.row(t));
            x.push(1.0);
            xs.push(x);
            ys.push(a.row(t).to_vec());
        }
    }
    rows_to_matrices(&xs, &ys)
}

pub fn rows_to_matrices(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> (DMatrix<f64>, DMatrix<f64>) {
    let x = DMatrix::from_fn(xs.len(), xs[0].len(), |i, j| xs[i][j]);
    let y = DMatrix::from_fn(ys.len(), ys[0].len(), |i, j| ys[i][j]);
    (x, y)
}

/// Closed-form least squares `min ‖XW − Y‖²`.
pub fn least_squares(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    x.clone().svd(true, true).solve(y, 1e-12).unwrap()
}

pub fn mse(pred: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    (pred - y).norm_squared() / y.len() as f64
}

/// MSE of predicting every row of `y` by the column means of `fit`.
pub fn constant_mean_mse(fit: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let mean = fit.row_mean();
    let mut s = 0.0;
    for i in 0..y.nrows() {
        s += (y.row(i) - &mean).norm_squared();
    }
    s / y.len() as f64
}

/// Sentiment and emotion metrics written directly from their definitions,
/// sharing nothing with the library code.
pub struct OracleMetrics {
    pub keys: Vec<(&'static str, f64)>,
}

fn f1_from_pr(tp: f64, fp: f64, fn_: f64) -> f64 {
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn oracle_metrics(preds: &[Vec<f64>], labels: &[Label]) -> OracleMetrics {
    let n = preds.len() as f64;
    match labels[0] {
        Label::Sentiment(_) => {
            let mut expected = Vec::new();
            let mut truth = Vec::new();
            let mut hits = 0.0;
            for (p, l) in preds.iter().zip(labels) {
                let Label::Sentiment(c) = l else { unreachable!() };
                let z: f64 = p.iter().map(|x| x.exp()).sum();
                expected.push(
                    p.iter()
                        .enumerate()
                        .map(|(i, x)| x.exp() / z * (i as f64 - 3.0))
                        .sum::<f64>(),
                );
                truth.push(*c as f64 - 3.0);
                let best = (0..7).fold(0, |b, i| if p[i] > p[b] { i } else { b });
                if best == *c as usize {
                    hits += 1.0;
                }
            }
            let nonzero: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] != 0.0).collect();
            let agree = nonzero
                .iter()
                .filter(|&&i| (expected[i] > 0.0) == (truth[i] > 0.0))
                .count() as f64;
            let tp = nonzero.iter().filter(|&&i| expected[i] > 0.0 && truth[i] > 0.0).count() as f64;
            let fp = nonzero.iter().filter(|&&i| expected[i] > 0.0 && truth[i] < 0.0).count() as f64;
            let fn_ = nonzero
                .iter()
                .filter(|&&i| expected[i] <= 0.0 && truth[i] > 0.0)
                .count() as f64;
            let mae = expected.iter().zip(&truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
            let me = expected.iter().sum::<f64>() / n;
            let mt = truth.iter().sum::<f64>() / n;
            let cov = expected
                .iter()
                .zip(&truth)
                .map(|(a, b)| (a - me) * (b - mt))
                .sum::<f64>()
                / n;
            let se = (expected.iter().map(|a| (a - me).powi(2)).sum::<f64>() / n).sqrt();
            let st = (truth.iter().map(|b| (b - mt).powi(2)).sum::<f64>() / n).sqrt();
            let corr = if se > 0.0 && st > 0.0 { cov / (se * st) } else { 0.0 };
            OracleMetrics {
                keys: vec![
                    ("acc7", hits / n),
                    (
                        "acc2",
                        if nonzero.is_empty() {
                            0.0
                        } else {
                            agree / nonzero.len() as f64
                        },
                    ),
                    ("f1", f1_from_pr(tp, fp, fn_)),
                    ("mae", mae),
                    ("corr", corr),
                ],
            }
        }
        Label::Emotion(_) => {
            const NAMES: [(&str, &str); 4] = [
                ("acc_happy", "f1_happy"),
                ("acc_sad", "f1_sad"),
                ("acc_angry", "f1_angry"),
                ("acc_neutral", "f1_neutral"),
            ];
            let mut keys = Vec::new();
            for (c, (acc_key, f1_key)) in NAMES.iter().enumerate() {
                let (mut right, mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0, 0.0);
                for (p, l) in preds.iter().zip(labels) {
                    let Label::Emotion(f) = l else { unreachable!() };
                    let yhat = 1.0 / (1.0 + (-p[c]).exp()) > 0.5;
                    right += f64::from(u8::from(yhat == f[c]));
                    tp += f64::from(u8::from(yhat && f[c]));
                    fp += f64::from(u8::from(yhat && !f[c]));
                    fn_ += f64::from(u8::from(!yhat && f[c]));
                }
                keys.push((*acc_key, right / n));
                keys.push((*f1_key, f1_from_pr(tp, fp, fn_)));
            }
            OracleMetrics { keys }
        }
    }
}

/// Largest per-metric gap between the library report and the oracle.
pub fn oracle_gap(report: &MetricsReport, oracle: &OracleMetrics) -> f64 {
    oracle
        .keys
        .iter()
        .map(|(k, v)| (report.get(k).expect("metric present") - v).abs())
        .fold(0.0, f64::max)
}
