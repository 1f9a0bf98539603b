//! Seeded, label-stratified train/valid/test split.

use std::collections::BTreeMap;

use mbkt_core::Label;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SplitError {
    #[error("split fractions must be nonnegative and sum to 1, got {0:?}")]
    Fractions([f64; 3]),
    #[error("the {part} part would be empty although its fraction is {fraction}")]
    EmptyPart { part: &'static str, fraction: f64 },
}

fn stratum(l: &Label) -> u8 {
    match l {
        Label::Sentiment(c) => *c,
        Label::Emotion(f) => f.iter().enumerate().fold(0, |acc, (i, &b)| acc | (u8::from(b) << i)),
    }
}

/// Within every label stratum the samples are shuffled and cut at rounded
/// fractions, so each part holds within one sample of its share of every
/// class. Parts keep the original sample order.
pub fn split_dataset(ds: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset), SplitError> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(*f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(SplitError::Fractions(fractions));
    }
    let mut strata: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, s) in ds.samples.iter().enumerate() {
        strata.entry(stratum(&s.label)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for idx in strata.values_mut() {
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let n_train = ((fractions[0] * n).round() as usize).min(idx.len());
        let n_valid = ((fractions[1] * n).round() as usize).min(idx.len() - n_train);
        parts[0].extend_from_slice(&idx[..n_train]);
        parts[1].extend_from_slice(&idx[n_train..n_train + n_valid]);
        parts[2].extend_from_slice(&idx[n_train + n_valid..]);
    }
    for ((p, name), fraction) in parts.iter_mut().zip(["train", "valid", "test"]).zip(fractions) {
        if p.is_empty() && fraction > 0.0 {
            return Err(SplitError::EmptyPart { part: name, fraction });
        }
        p.sort_unstable();
    }
    Ok((ds.subset(&parts[0]), ds.subset(&parts[1]), ds.subset(&parts[2])))
}
