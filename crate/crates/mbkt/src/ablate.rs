//! Ablation sweeps over fusion targets and consistency losses.

use std::fmt::Write as _;

use mbkt_core::fusion::Stream;
use mbkt_core::{ConsistencyKind, MetricsReport, StreamSet};

use crate::data::Dataset;
use crate::train::{evaluate, train, TrainConfig};
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationKind {
    /// One row per single fusion target plus all targets together.
    Targets,
    /// One row per consistency loss.
    Loss,
}

impl AblationKind {
    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "targets" => Some(AblationKind::Targets),
            "loss" => Some(AblationKind::Loss),
            _ => None,
        }
    }

    /// Row labels and the config of each row.
    pub fn rows(self, base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
        match self {
            AblationKind::Targets => [
                ("Language", Some(Stream::Language)),
                ("Audio", Some(Stream::Acoustic)),
                ("Vision", Some(Stream::Vision)),
                ("Ours", None),
            ]
            .into_iter()
            .map(|(label, s)| {
                let targets = s.map_or(StreamSet::ALL, |s| StreamSet::of(&[s]));
                (
                    label,
                    TrainConfig {
                        targets: Some(targets),
                        ..base.clone()
                    },
                )
            })
            .collect(),
            AblationKind::Loss => [("L1", ConsistencyKind::L1), ("L2", ConsistencyKind::L2)]
                .into_iter()
                .map(|(label, kind)| {
                    (
                        label,
                        TrainConfig {
                            consistency: kind,
                            ..base.clone()
                        },
                    )
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: &'static str,
    pub config: TrainConfig,
    pub per_seed: Vec<(u64, MetricsReport)>,
}

impl AblationRow {
    /// Seed-mean of every metric.
    pub fn mean(&self) -> Vec<(String, f64)> {
        let mut acc = self.per_seed[0].1.records();
        for (_, r) in &self.per_seed[1..] {
            for ((_, a), (_, v)) in acc.iter_mut().zip(r.records()) {
                *a += v;
            }
        }
        let n = self.per_seed.len() as f64;
        acc.into_iter().map(|(k, v)| (k, v / n)).collect()
    }
}

/// Trains and evaluates every row of `kind` under each seed. Each run is an
/// ordinary [`train`] + [`evaluate`] call with the row's config.
pub fn ablate(
    kind: AblationKind,
    base: &TrainConfig,
    seeds: &[u64],
    train_set: &Dataset,
    test_set: &Dataset,
    mut progress: impl FnMut(&str, u64),
) -> Result<Vec<AblationRow>, Error> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    if kind == AblationKind::Targets && base.mode.streams() != StreamSet::ALL {
        return Err(Error::Config(format!(
            "target ablation needs a three-stream mode, not {}",
            base.mode
        )));
    }
    let mut rows = Vec::new();
    for (label, cfg) in kind.rows(base) {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            progress(label, seed);
            let cfg = TrainConfig { seed, ..cfg.clone() };
            let out = train(&cfg, train_set, |_| {})?;
            per_seed.push((seed, evaluate(&out.model, test_set, cfg.mode)?));
        }
        rows.push(AblationRow {
            label,
            config: cfg,
            per_seed,
        });
    }
    Ok(rows)
}

fn header(key: &str) -> String {
    match key {
        "acc7" => "Acc7".into(),
        "acc2" => "Acc2".into(),
        "f1" => "F1".into(),
        "mae" => "MAE".into(),
        "corr" => "Corr".into(),
        other => other.to_string(),
    }
}

/// Markdown table with one row per metric record list.
pub fn markdown_table(first_column: &str, rows: &[(String, Vec<(String, f64)>)]) -> String {
    let mut s = String::new();
    let Some((_, first)) = rows.first() else {
        return s;
    };
    let _ = write!(s, "| {first_column} |");
    for (k, _) in first {
        let _ = write!(s, " {} |", header(k));
    }
    s.push('\n');
    s.push_str("|---|");
    for _ in first {
        s.push_str("---|");
    }
    s.push('\n');
    for (label, recs) in rows {
        let _ = write!(s, "| {label} |");
        for (k, v) in recs {
            if k.starts_with("acc") || k.starts_with("f1") {
                let _ = write!(s, " {:.1} |", 100.0 * v);
            } else {
                let _ = write!(s, " {v:.3} |");
            }
        }
        s.push('\n');
    }
    s
}

pub fn ablation_markdown(kind: AblationKind, rows: &[AblationRow]) -> String {
    let first = match kind {
        AblationKind::Targets => "Target",
        AblationKind::Loss => "Loss",
    };
    let table: Vec<(String, Vec<(String, f64)>)> = rows.iter().map(|r| (r.label.to_string(), r.mean())).collect();
    markdown_table(first, &table)
}
