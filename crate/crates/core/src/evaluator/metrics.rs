//! Ranking metric kernels over one query's ranked hits and its relevance
//! judgments: NDCG@k, MRR@k, Recall@k.

use std::collections::BTreeMap;

use super::search::ScoredDoc;

/// Graded relevance for one query: doc id -> grade (0 means irrelevant).
pub type RelevanceRow = BTreeMap<String, u32>;

fn gain(grade: u32) -> f64 {
    (2f64.powi(grade as i32)) - 1.0
}

fn discount(rank: usize) -> f64 {
    ((rank + 1) as f64).log2()
}

/// Discounted cumulative gain over the top `k` hits, ranks starting at 1:
/// Σ (2^grade − 1) / log₂(rank + 1).
pub fn dcg_at_k(hits: &[ScoredDoc], rels: &RelevanceRow, k: usize) -> f64 {
    hits.iter()
        .take(k)
        .enumerate()
        .map(|(i, hit)| {
            let grade = rels.get(&hit.doc_id).copied().unwrap_or(0);
            gain(grade) / discount(i + 1)
        })
        .sum()
}

/// DCG normalized by the ideal DCG of the judgment set at `k`. Zero when no
/// positive grades exist.
pub fn ndcg_at_k(hits: &[ScoredDoc], rels: &RelevanceRow, k: usize) -> f64 {
    let mut grades: Vec<u32> = rels.values().copied().collect();
    grades.sort_unstable_by(|a, b| b.cmp(a));
    let ideal: f64 = grades
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain(g) / discount(i + 1))
        .sum();
    if ideal == 0.0 {
        return 0.0;
    }
    dcg_at_k(hits, rels, k) / ideal
}

/// Reciprocal rank of the first relevant hit within the top `k`, else 0.
pub fn mrr_at_k(hits: &[ScoredDoc], rels: &RelevanceRow, k: usize) -> f64 {
    for (i, hit) in hits.iter().take(k).enumerate() {
        if rels.get(&hit.doc_id).copied().unwrap_or(0) > 0 {
            return 1.0 / (i + 1) as f64;
        }
    }
    0.0
}

/// Fraction of relevant documents that appear in the top `k`. Zero when the
/// judgment set has no positive grades.
pub fn recall_at_k(hits: &[ScoredDoc], rels: &RelevanceRow, k: usize) -> f64 {
    let total = rels.values().filter(|&&g| g > 0).count();
    if total == 0 {
        return 0.0;
    }
    let found = hits
        .iter()
        .take(k)
        .filter(|hit| rels.get(&hit.doc_id).copied().unwrap_or(0) > 0)
        .count();
    found as f64 / total as f64
}
