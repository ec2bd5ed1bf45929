//! Span-level micro precision/recall/F1, the two reward components, the
//! composite reward, and corpus-level report aggregation.
//!
//! Matching is exact (trimmed text, label) set equality. The 0/0 cases of
//! precision, recall, and F1 all resolve to 0; the one deliberate
//! exception is `reward_f1`, which returns 1 when both the prediction and
//! the gold set are empty (correct abstention).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{schema_violations, EntityMention, EntitySchema, ParseError, ReasoningOutput};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScoreError {
    #[error("no-datasets")]
    NoDatasets,
    #[error("empty-dataset: {0}")]
    EmptyDataset(String),
}

/// Pooled true-positive / false-positive / false-negative counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrfCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl PrfCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let p = self.precision();
        let r = self.recall();
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn add(&mut self, other: &PrfCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Reward weights of the composite reward: `lambda_f1 * R_F1 +
/// lambda_schema * R_schema`. Defaults are 10 and 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub lambda_f1: f64,
    pub lambda_schema: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            lambda_f1: 10.0,
            lambda_schema: 1.0,
        }
    }
}

impl RewardWeights {
    pub fn max_reward(&self) -> f64 {
        self.lambda_f1 + self.lambda_schema
    }
}

/// Exact span-level matching. Duplicates on either side are collapsed
/// before counting.
pub fn span_prf(pred: &[EntityMention], gold: &[EntityMention]) -> PrfCounts {
    let pred: BTreeSet<&EntityMention> = pred.iter().collect();
    let gold: BTreeSet<&EntityMention> = gold.iter().collect();
    let tp = pred.intersection(&gold).count();
    PrfCounts {
        tp,
        fp: pred.len() - tp,
        fn_: gold.len() - tp,
    }
}

/// Span-level F1 in [0, 1]. Parse failures score 0; an empty prediction
/// against an empty gold set scores 1.
pub fn reward_f1(output: &Result<ReasoningOutput, ParseError>, gold: &[EntityMention]) -> f64 {
    let Ok(output) = output else { return 0.0 };
    let counts = span_prf(&output.entities, gold);
    if counts.tp + counts.fp + counts.fn_ == 0 {
        1.0
    } else {
        counts.f1()
    }
}

/// Binary structural compliance: 0 on parse failure or any schema
/// violation, 1 otherwise.
pub fn reward_schema(output: &Result<ReasoningOutput, ParseError>, schema: &EntitySchema) -> f64 {
    match output {
        Ok(out) if schema_violations(&out.entities, schema).is_empty() => 1.0,
        _ => 0.0,
    }
}

/// `lambda_f1 * R_F1 + lambda_schema * R_schema`.
pub fn composite_reward(
    output: &Result<ReasoningOutput, ParseError>,
    gold: &[EntityMention],
    schema: &EntitySchema,
    weights: &RewardWeights,
) -> f64 {
    weights.lambda_f1 * reward_f1(output, gold) + weights.lambda_schema * reward_schema(output, schema)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub dataset: String,
    pub counts: PrfCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-dataset micro P/R/F1 plus the unweighted mean of the per-dataset
/// F1 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub datasets: Vec<DatasetReport>,
    pub avg_f1: f64,
}

impl Report {
    /// Fixed-width console table.
    pub fn render_table(&self) -> String {
        let width = self
            .datasets
            .iter()
            .map(|d| d.dataset.len())
            .chain(["dataset".len(), "avg".len()].into_iter())
            .max()
            .unwrap_or(7);
        let mut out = String::new();
        out.push_str(&format!(
            "{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}\n",
            "dataset", "tp", "fp", "fn", "P", "R", "F1"
        ));
        for row in &self.datasets {
            out.push_str(&format!(
                "{:<width$}  {:>6}  {:>6}  {:>6}  {:>6.4}  {:>6.4}  {:>6.4}\n",
                row.dataset, row.counts.tp, row.counts.fp, row.counts.fn_, row.precision, row.recall, row.f1
            ));
        }
        out.push_str(&format!(
            "{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6.4}\n",
            "avg", "", "", "", "", "", self.avg_f1
        ));
        out
    }
}

/// Pool tp/fp/fn across every pair of a dataset, then average the
/// per-dataset F1 values uniformly.
pub fn corpus_report(
    per_dataset: &BTreeMap<String, Vec<(Vec<EntityMention>, Vec<EntityMention>)>>,
) -> Result<Report, ScoreError> {
    if per_dataset.is_empty() {
        return Err(ScoreError::NoDatasets);
    }
    let mut datasets = Vec::with_capacity(per_dataset.len());
    for (name, pairs) in per_dataset {
        if pairs.is_empty() {
            return Err(ScoreError::EmptyDataset(name.clone()));
        }
        let mut counts = PrfCounts::default();
        for (pred, gold) in pairs {
            counts.add(&span_prf(pred, gold));
        }
        datasets.push(DatasetReport {
            dataset: name.clone(),
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
            counts,
        });
    }
    let avg_f1 = datasets.iter().map(|d| d.f1).sum::<f64>() / datasets.len() as f64;
    Ok(Report { datasets, avg_f1 })
}
