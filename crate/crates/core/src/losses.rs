//! Prediction loss and the weighted training objective.

use crate::error::{Error, Result};
use crate::fusion::HeadMode;
use crate::graph::{Graph, Var};
use crate::transfer::ConsistencyKind;

/// Ground truth for one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    /// Class index 0..=6 for the integer sentiment score `class − 3`.
    Sentiment(u8),
    /// Happy, sad, angry, neutral.
    Emotion([bool; 4]),
}

pub const EMOTIONS: [&str; 4] = ["happy", "sad", "angry", "neutral"];

impl Label {
    pub fn sentiment_from_score(score: i32) -> Result<Self> {
        if !(-3..=3).contains(&score) {
            return Err(Error::contract("sentiment score outside -3..=3"));
        }
        Ok(Label::Sentiment((score + 3) as u8))
    }

    pub fn head(&self) -> HeadMode {
        match self {
            Label::Sentiment(_) => HeadMode::SevenClass,
            Label::Emotion(_) => HeadMode::MultiLabel4,
        }
    }

    /// Integer sentiment score in -3..=3.
    pub fn score(&self) -> Option<f64> {
        match self {
            Label::Sentiment(c) => Some(*c as f64 - 3.0),
            Label::Emotion(_) => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Label::Sentiment(c) if *c > 6 => Err(Error::contract("class label out of range")),
            _ => Ok(()),
        }
    }
}

/// Softmax cross-entropy for sentiment labels; summed per-class sigmoid
/// binary cross-entropy for emotion labels.
pub fn cross_entropy(g: &mut Graph, logits: Var, label: &Label) -> Result<Var> {
    let c = g.value(logits).len();
    match label {
        Label::Sentiment(class) => {
            if c != 7 {
                return Err(Error::shape("cross_entropy", g.shape(logits), &[1, 7]));
            }
            g.cross_entropy(logits, *class as usize)
        }
        Label::Emotion(flags) => {
            if c != 4 {
                return Err(Error::shape("cross_entropy", g.shape(logits), &[1, 4]));
            }
            let targets = flags.map(|f| if f { 1.0 } else { 0.0 });
            g.bce_with_logits(logits, &targets)
        }
    }
}

/// `l_e + λ1·lc_v + λ2·lc_l` as a graph node.
pub fn total_loss(g: &mut Graph, l_e: Var, lc_v: Var, lc_l: Var, lambda1: f64, lambda2: f64) -> Result<Var> {
    if lambda1 < 0.0 || lambda2 < 0.0 {
        return Err(Error::contract("loss weights must be nonnegative"));
    }
    let a = g.scale(lc_v, lambda1)?;
    let b = g.scale(lc_l, lambda2)?;
    let t = g.add(l_e, a)?;
    g.add(t, b)
}

/// Plain-number counterpart of [`total_loss`].
pub fn total_loss_value(l_e: f64, lc_v: f64, lc_l: f64, lambda1: f64, lambda2: f64) -> f64 {
    l_e + lambda1 * lc_v + lambda2 * lc_l
}

/// Weights and distance used by the training objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub lambda1: f64,
    pub lambda2: f64,
    pub kind: ConsistencyKind,
}

impl Default for Objective {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            kind: ConsistencyKind::L2,
        }
    }
}

/// Graph nodes of one sample's loss.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub prediction: Var,
    pub consistency_vision: Option<Var>,
    pub consistency_language: Option<Var>,
}

/// Numeric values read back from [`LossTerms`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub prediction: f64,
    pub consistency_vision: f64,
    pub consistency_language: f64,
}

impl LossTerms {
    pub fn values(&self, g: &Graph) -> LossValues {
        let v = |x: Option<Var>| x.map(|x| g.value(x).item()).unwrap_or(0.0);
        LossValues {
            total: g.value(self.total).item(),
            prediction: g.value(self.prediction).item(),
            consistency_vision: v(self.consistency_vision),
            consistency_language: v(self.consistency_language),
        }
    }
}
