//! Evaluation metrics: 7-class accuracy, binary accuracy and F1 over the
//! non-neutral samples, MAE and Pearson correlation of expected scores, and
//! per-emotion accuracy/F1 for the multi-label head.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::losses::{Label, EMOTIONS};

/// Expected sentiment score `Σ softmax(logits)[c] · (c − 3)`.
pub fn predict_score(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    let mut acc = 0.0;
    for (c, &l) in logits.iter().enumerate() {
        let e = libm::exp(l - max);
        z += e;
        acc += e * (c as f64 - 3.0);
    }
    acc / z
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// F1 of the positive class; zero when it is undefined.
pub fn binary_f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Pearson correlation, `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentimentMetrics {
    pub acc7: f64,
    pub acc2: f64,
    pub f1: f64,
    pub mae: f64,
    pub corr: f64,
    /// False when one side had zero variance and `corr` was reported as 0.
    pub corr_defined: bool,
    pub samples: usize,
    /// Samples with a nonzero true score, the population of acc2/f1.
    pub binary_samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmotionMetrics {
    pub acc: [f64; 4],
    pub f1: [f64; 4],
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MetricsReport {
    Sentiment(SentimentMetrics),
    Emotion(EmotionMetrics),
}

impl MetricsReport {
    /// Flat `(key, value)` pairs with stable key names.
    pub fn records(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        match self {
            MetricsReport::Sentiment(m) => {
                for (k, v) in [
                    ("acc7", m.acc7),
                    ("acc2", m.acc2),
                    ("f1", m.f1),
                    ("mae", m.mae),
                    ("corr", m.corr),
                ] {
                    out.push((String::from(k), v));
                }
            }
            MetricsReport::Emotion(m) => {
                for (i, name) in EMOTIONS.iter().enumerate() {
                    out.push((alloc::format!("acc_{name}"), m.acc[i]));
                    out.push((alloc::format!("f1_{name}"), m.f1[i]));
                }
            }
        }
        out
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.records().into_iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn sentiment(&self) -> Option<&SentimentMetrics> {
        match self {
            MetricsReport::Sentiment(m) => Some(m),
            MetricsReport::Emotion(_) => None,
        }
    }
}

/// One `key=value` line per metric; values use shortest round-trip form.
impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.records() {
            writeln!(f, "{k}={v}")?;
        }
        if let MetricsReport::Sentiment(m) = self {
            if !m.corr_defined {
                writeln!(f, "corr_undefined=1")?;
            }
        }
        Ok(())
    }
}

pub fn compute_metrics(preds: &[Vec<f64>], labels: &[Label]) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(Error::contract("metrics need at least one prediction"));
    }
    if preds.len() != labels.len() {
        return Err(Error::contract("prediction and label counts differ"));
    }
    match labels[0] {
        Label::Sentiment(_) => sentiment_metrics(preds, labels).map(MetricsReport::Sentiment),
        Label::Emotion(_) => emotion_metrics(preds, labels).map(MetricsReport::Emotion),
    }
}

fn sentiment_metrics(preds: &[Vec<f64>], labels: &[Label]) -> Result<SentimentMetrics> {
    let n = preds.len();
    let mut exact = 0usize;
    let mut abs_err = 0.0;
    let mut predicted = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    let (mut bin_n, mut bin_correct, mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for (p, label) in preds.iter().zip(labels) {
        let Label::Sentiment(class) = label else {
            return Err(Error::contract("mixed label kinds"));
        };
        label.validate()?;
        if p.len() != 7 {
            return Err(Error::shape("compute_metrics", &[p.len()], &[7]));
        }
        let y = label.score().unwrap_or(0.0);
        let s = predict_score(p);
        if argmax(p) == *class as usize {
            exact += 1;
        }
        abs_err += libm::fabs(s - y);
        predicted.push(s);
        truth.push(y);
        if y != 0.0 {
            bin_n += 1;
            let (pp, tpos) = (s > 0.0, y > 0.0);
            if pp == tpos {
                bin_correct += 1;
            }
            match (pp, tpos) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let corr = pearson(&predicted, &truth);
    Ok(SentimentMetrics {
        acc7: exact as f64 / n as f64,
        acc2: if bin_n == 0 {
            0.0
        } else {
            bin_correct as f64 / bin_n as f64
        },
        f1: binary_f1(tp, fp, fn_),
        mae: abs_err / n as f64,
        corr: corr.unwrap_or(0.0),
        corr_defined: corr.is_some(),
        samples: n,
        binary_samples: bin_n,
    })
}

fn emotion_metrics(preds: &[Vec<f64>], labels: &[Label]) -> Result<EmotionMetrics> {
    let mut correct = [0usize; 4];
    let mut tp = [0usize; 4];
    let mut fp = [0usize; 4];
    let mut fn_ = [0usize; 4];
    for (p, label) in preds.iter().zip(labels) {
        let Label::Emotion(flags) = label else {
            return Err(Error::contract("mixed label kinds"));
        };
        if p.len() != 4 {
            return Err(Error::shape("compute_metrics", &[p.len()], &[4]));
        }
        for c in 0..4 {
            // sigmoid(l) > 0.5  ⇔  l > 0
            let yhat = p[c] > 0.0;
            if yhat == flags[c] {
                correct[c] += 1;
            }
            match (yhat, flags[c]) {
                (true, true) => tp[c] += 1,
                (true, false) => fp[c] += 1,
                (false, true) => fn_[c] += 1,
                (false, false) => {}
            }
        }
    }
    let n = preds.len();
    Ok(EmotionMetrics {
        acc: core::array::from_fn(|c| correct[c] as f64 / n as f64),
        f1: core::array::from_fn(|c| binary_f1(tp[c], fp[c], fn_[c])),
        samples: n,
    })
}
