//! JSON and text renderings of catalogs and metrics.

use cfcrs_core::corpus::{Dialogue, FlowSchema, Speaker};
use cfcrs_core::kg::KnowledgeGraph;
use cfcrs_core::metrics::{MetricReport, RankingMetrics};
use cfcrs_core::schema::{describe, SchemaCatalog};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogEntry {
    pub types: Vec<String>,
    pub support: usize,
}

pub fn catalog_entries(catalog: &SchemaCatalog, kg: &KnowledgeGraph) -> Vec<CatalogEntry> {
    describe(catalog, |t| kg.type_name(t).to_string())
        .into_iter()
        .map(|(types, support)| CatalogEntry { types, support })
        .collect()
}

/// Reads a catalog export back against `kg`'s type names.
pub fn parse_catalog(text: &str, kg: &KnowledgeGraph, min_support: usize, max_len: usize) -> Result<SchemaCatalog> {
    let parse = |record, reason: String| Error::Parse { path: "catalog".into(), record, reason };
    let entries: Vec<CatalogEntry> = serde_json::from_str(text).map_err(|e| parse(0, e.to_string()))?;
    let mut out = Vec::with_capacity(entries.len());
    for (i, e) in entries.into_iter().enumerate() {
        let types = e
            .types
            .iter()
            .map(|n| kg.type_id(n).ok_or_else(|| parse(i, format!("unknown type `{n}`"))))
            .collect::<Result<Vec<_>>>()?;
        out.push((FlowSchema::new(types), e.support));
    }
    Ok(SchemaCatalog::from_entries(out, min_support, max_len))
}

/// Recommender-side utterances, the responses diversity is measured on.
pub fn responses<'d>(dialogues: impl IntoIterator<Item = &'d Dialogue>) -> Vec<&'d str> {
    dialogues
        .into_iter()
        .flat_map(|d| d.turns.iter().filter(|t| t.speaker == Speaker::Recommender).map(|t| t.text.as_str()))
        .collect()
}

pub fn metric_report(ranking: RankingMetrics, dialogues: &[&Dialogue]) -> MetricReport {
    MetricReport::with_responses(ranking, &responses(dialogues.iter().copied()))
}

/// Field-wise mean.
pub fn mean_metrics(ms: &[RankingMetrics]) -> RankingMetrics {
    let n = ms.len().max(1) as f64;
    let avg = |f: fn(&RankingMetrics) -> f64| ms.iter().map(f).sum::<f64>() / n;
    RankingMetrics {
        recall_10: avg(|m| m.recall_10),
        recall_50: avg(|m| m.recall_50),
        mrr_10: avg(|m| m.mrr_10),
        mrr_50: avg(|m| m.mrr_50),
        ndcg_10: avg(|m| m.ndcg_10),
        ndcg_50: avg(|m| m.ndcg_50),
        samples: ms.first().map_or(0, |m| m.samples),
    }
}

/// Fixed-width comparison table, one row per model.
pub fn metric_table(rows: &[(&str, RankingMetrics)]) -> String {
    let mut s = format!(
        "{:<12} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "Model", "R@10", "R@50", "MRR@10", "MRR@50", "NDCG@10", "NDCG@50"
    );
    for (name, m) in rows {
        s.push_str(&format!(
            "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
            name, m.recall_10, m.recall_50, m.mrr_10, m.mrr_50, m.ndcg_10, m.ndcg_50
        ));
    }
    s
}
