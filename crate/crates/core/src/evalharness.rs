//! Full-ranking leave-one-out evaluation.

use serde::{Deserialize, Serialize};

use crate::corpus::{EvalCase, ItemSentence};
use crate::model::{ArchitectureGenome, Model};
use crate::train::score_items;
use crate::{Error, Result};

pub const DEFAULT_CUTOFF: usize = 10;

/// `1 + #{greater} + #{tied others}/2`; ties get the expected rank over
/// all orderings of the tied block.
pub fn rank_ground_truth(scores: &[f64], truth: usize) -> Result<f64> {
    let t = *scores.get(truth).ok_or(Error::OutOfRange {
        index: truth,
        len: scores.len(),
    })?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Invalid("non-finite score".into()));
    }
    let mut greater = 0usize;
    let mut ties = 0usize;
    for (i, &s) in scores.iter().enumerate() {
        if s > t {
            greater += 1;
        } else if s == t && i != truth {
            ties += 1;
        }
    }
    Ok(1.0 + greater as f64 + ties as f64 / 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub rr: f64,
    pub recall: f64,
    pub ndcg: f64,
}

/// Reciprocal rank, hit@n and NDCG@n for a (possibly fractional) rank.
pub fn compute_metrics(rank: f64, n: usize) -> CaseMetrics {
    assert!(rank >= 1.0, "rank must be at least 1");
    let inside = rank <= n as f64;
    CaseMetrics {
        rr: 1.0 / rank,
        recall: if inside { 1.0 } else { 0.0 },
        ndcg: if inside { 1.0 / (rank + 1.0).log2() } else { 0.0 },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub n: usize,
    pub mrr: f64,
    pub recall: f64,
    pub ndcg: f64,
    pub count: usize,
}

/// Running sums; `finish` divides by the count.
#[derive(Clone, Debug, Default)]
pub struct MetricsAccumulator {
    rr: f64,
    recall: f64,
    ndcg: f64,
    count: usize,
}

impl MetricsAccumulator {
    pub fn push(&mut self, m: CaseMetrics) {
        self.rr += m.rr;
        self.recall += m.recall;
        self.ndcg += m.ndcg;
        self.count += 1;
    }

    pub fn finish(&self, split: &str, n: usize) -> Result<MetricsReport> {
        if self.count == 0 {
            return Err(Error::EmptySplit);
        }
        let c = self.count as f64;
        Ok(MetricsReport {
            split: split.into(),
            n,
            mrr: self.rr / c,
            recall: self.recall / c,
            ndcg: self.ndcg / c,
            count: self.count,
        })
    }
}

/// Scores every case with `scorer` and averages the metrics.
pub fn evaluate_with(
    cases: &[EvalCase],
    split: &str,
    n: usize,
    mut scorer: impl FnMut(&EvalCase) -> Result<Vec<f64>>,
) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::default();
    for case in cases {
        let scores = scorer(case)?;
        acc.push(compute_metrics(rank_ground_truth(&scores, case.target)?, n));
    }
    acc.finish(split, n)
}

/// Ranks the target of each case among all items by the item-head logits at
/// the last `[SEQ]` of its context.
pub fn evaluate_model(
    model: &Model,
    genome: &ArchitectureGenome,
    cases: &[EvalCase],
    sentences: &[ItemSentence],
    split: &str,
    n: usize,
) -> Result<MetricsReport> {
    evaluate_with(cases, split, n, |c| score_items(model, genome, c.user_id, &c.context, sentences))
}
