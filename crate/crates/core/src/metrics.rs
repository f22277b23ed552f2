//! Acc@k, nDCG@k and weighted F1 over scored samples.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mobility::PlaceId;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no samples to score")]
    EmptySampleSet,
    #[error("k must be at least 1")]
    ZeroK,
}

/// One prediction against its ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub sample_id: String,
    /// Empty when the model output could not be parsed.
    pub places: Vec<PlaceId>,
    pub ground_truth: PlaceId,
    pub parse_failed: bool,
}

impl ScoredSample {
    pub fn new(sample_id: impl Into<String>, places: Vec<PlaceId>, ground_truth: PlaceId) -> Self {
        Self {
            sample_id: sample_id.into(),
            places,
            ground_truth,
            parse_failed: false,
        }
    }

    pub fn failed(sample_id: impl Into<String>, ground_truth: PlaceId) -> Self {
        Self {
            sample_id: sample_id.into(),
            places: Vec::new(),
            ground_truth,
            parse_failed: true,
        }
    }

    /// 1-based position of the ground truth in the prediction.
    pub fn hit_rank(&self) -> Option<usize> {
        self.places.iter().position(|&p| p == self.ground_truth).map(|i| i + 1)
    }

    pub fn top1(&self) -> Option<PlaceId> {
        self.places.first().copied()
    }
}

fn check(samples: &[ScoredSample], k: usize) -> Result<(), MetricsError> {
    if k == 0 {
        return Err(MetricsError::ZeroK);
    }
    if samples.is_empty() {
        return Err(MetricsError::EmptySampleSet);
    }
    Ok(())
}

/// Fraction of samples whose ground truth is within the top `k`.
pub fn acc_at_k(samples: &[ScoredSample], k: usize) -> Result<f64, MetricsError> {
    check(samples, k)?;
    let hits = samples
        .iter()
        .filter(|s| s.hit_rank().is_some_and(|r| r <= k))
        .count();
    Ok(hits as f64 / samples.len() as f64)
}

/// Per-sample nDCG@k with a single relevant item. The ideal ranking puts it
/// first, so IDCG is 1/log2(2) = 1 and nDCG reduces to 1/log2(rank + 1).
pub fn sample_ndcg(sample: &ScoredSample, k: usize) -> f64 {
    match sample.hit_rank() {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

pub fn ndcg_at_k(samples: &[ScoredSample], k: usize) -> Result<f64, MetricsError> {
    check(samples, k)?;
    Ok(samples.iter().map(|s| sample_ndcg(s, k)).sum::<f64>() / samples.len() as f64)
}

/// Support-weighted F1 over the rank-1 prediction of every sample. A sample
/// without a prediction counts as a miss for its true class.
pub fn weighted_f1(samples: &[ScoredSample]) -> Result<f64, MetricsError> {
    check(samples, 1)?;
    #[derive(Default)]
    struct Counts {
        tp: u64,
        fp: u64,
        fn_: u64,
        support: u64,
    }
    let mut classes: HashMap<PlaceId, Counts> = HashMap::new();
    for s in samples {
        let truth = classes.entry(s.ground_truth).or_default();
        truth.support += 1;
        match s.top1() {
            Some(p) if p == s.ground_truth => truth.tp += 1,
            Some(p) => {
                truth.fn_ += 1;
                classes.entry(p).or_default().fp += 1;
            }
            None => truth.fn_ += 1,
        }
    }
    let total = samples.len() as f64;
    // Sort so the floating-point sum does not depend on hash order.
    let mut rows: Vec<(PlaceId, Counts)> = classes.into_iter().collect();
    rows.sort_by_key(|(p, _)| *p);
    let score = rows
        .iter()
        .filter(|(_, c)| c.support > 0)
        .map(|(_, c)| {
            let precision = if c.tp + c.fp == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fp) as f64 };
            let recall = c.tp as f64 / (c.tp + c.fn_) as f64;
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            c.support as f64 / total * f1
        })
        .sum();
    Ok(score)
}

/// Aggregate scores for one run. Cutoff metrics are `None` when the run
/// produced fewer than that many places per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc1: f64,
    pub acc5: Option<f64>,
    pub acc10: Option<f64>,
    pub weighted_f1: f64,
    pub ndcg10: Option<f64>,
    pub parse_failure_rate: f64,
    pub n_samples: usize,
}

impl MetricsReport {
    /// `k` is the number of places each prediction was asked for.
    pub fn compute(samples: &[ScoredSample], k: usize) -> Result<Self, MetricsError> {
        check(samples, k)?;
        let failures = samples.iter().filter(|s| s.parse_failed).count();
        Ok(Self {
            acc1: acc_at_k(samples, 1)?,
            acc5: (k >= 5).then(|| acc_at_k(samples, 5)).transpose()?,
            acc10: (k >= 10).then(|| acc_at_k(samples, 10)).transpose()?,
            weighted_f1: weighted_f1(samples)?,
            ndcg10: (k >= 10).then(|| ndcg_at_k(samples, 10)).transpose()?,
            parse_failure_rate: failures as f64 / samples.len() as f64,
            n_samples: samples.len(),
        })
    }

    /// Flat `key=value` lines in a fixed order; absent metrics are `-`.
    pub fn to_key_values(&self) -> Vec<(&'static str, String)> {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
        vec![
            ("acc1", format!("{:.6}", self.acc1)),
            ("acc5", opt(self.acc5)),
            ("acc10", opt(self.acc10)),
            ("weighted_f1", format!("{:.6}", self.weighted_f1)),
            ("ndcg10", opt(self.ndcg10)),
            ("parse_failure_rate", format!("{:.6}", self.parse_failure_rate)),
            ("n_samples", self.n_samples.to_string()),
        ]
    }
}
