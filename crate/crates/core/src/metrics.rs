//! Top-k ranking metrics and corpus diversity.

#[allow(unused_imports)]
use crate::math::FloatExt;
use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// `1` when the label is within the top `k`.
pub fn recall_at(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn mrr_at(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / rank as f64
    } else {
        0.0
    }
}

pub fn ndcg_at(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Means over 1-based label ranks, for the cutoffs 10 and 50.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    #[serde(rename = "recall@10")]
    pub recall_10: f64,
    #[serde(rename = "recall@50")]
    pub recall_50: f64,
    #[serde(rename = "mrr@10")]
    pub mrr_10: f64,
    #[serde(rename = "mrr@50")]
    pub mrr_50: f64,
    #[serde(rename = "ndcg@10")]
    pub ndcg_10: f64,
    #[serde(rename = "ndcg@50")]
    pub ndcg_50: f64,
    pub samples: usize,
}

impl RankingMetrics {
    pub fn from_ranks(ranks: &[usize]) -> Self {
        let n = ranks.len();
        if n == 0 {
            return Self::default();
        }
        let mean = |f: &dyn Fn(usize) -> f64| ranks.iter().map(|&r| f(r)).sum::<f64>() / n as f64;
        Self {
            recall_10: mean(&|r| recall_at(r, 10)),
            recall_50: mean(&|r| recall_at(r, 50)),
            mrr_10: mean(&|r| mrr_at(r, 10)),
            mrr_50: mean(&|r| mrr_at(r, 50)),
            ndcg_10: mean(&|r| ndcg_at(r, 10)),
            ndcg_50: mean(&|r| ndcg_at(r, 50)),
            samples: n,
        }
    }

    /// Model-selection order: Recall@50, ties broken by Recall@10 and then
    /// MRR@50.
    pub fn selection_key(&self) -> [f64; 3] {
        [self.recall_50, self.recall_10, self.mrr_50]
    }

    /// Strictly better than `other` under [`Self::selection_key`].
    pub fn improves_on(&self, other: &RankingMetrics) -> bool {
        let (a, b) = (self.selection_key(), other.selection_key());
        for (x, y) in a.iter().zip(&b) {
            if x != y {
                return x > y;
            }
        }
        false
    }
}

/// Unique whitespace-token n-grams across all responses divided by the number
/// of responses. An empty corpus scores 0.
pub fn distinct_n<S: AsRef<str>>(responses: &[S], n: usize) -> f64 {
    if responses.is_empty() || n == 0 {
        return 0.0;
    }
    let mut seen: BTreeSet<Vec<&str>> = BTreeSet::new();
    for r in responses {
        let toks: Vec<&str> = r.as_ref().split_whitespace().collect();
        if toks.len() >= n {
            for w in toks.windows(n) {
                seen.insert(w.to_vec());
            }
        }
    }
    seen.len() as f64 / responses.len() as f64
}

/// Ranking metrics plus diversity of a response corpus.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(flatten)]
    pub ranking: RankingMetrics,
    #[serde(rename = "distinct-2", default)]
    pub distinct_2: f64,
    #[serde(rename = "distinct-3", default)]
    pub distinct_3: f64,
    #[serde(rename = "distinct-4", default)]
    pub distinct_4: f64,
}

impl MetricReport {
    pub fn with_responses<S: AsRef<str>>(ranking: RankingMetrics, responses: &[S]) -> Self {
        Self {
            ranking,
            distinct_2: distinct_n(responses, 2),
            distinct_3: distinct_n(responses, 3),
            distinct_4: distinct_n(responses, 4),
        }
    }
}
