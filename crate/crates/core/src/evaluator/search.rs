//! Exact brute-force cosine top-k over unit-normalized embedding matrices.

use crate::error::{Error, Result};

/// Row-wise unit-norm embeddings at a declared width, with stable doc ids.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    pub ids: Vec<String>,
    pub dims: usize,
    pub data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, dims: usize, data: Vec<f32>) -> Result<Self> {
        if dims == 0 {
            return Err(Error::InvalidArgument(
                "embedding matrix needs dims >= 1".into(),
            ));
        }
        if data.len() != ids.len() * dims {
            return Err(Error::shape(
                "embedding_matrix",
                format!(
                    "{} ids at width {dims} imply {} values, got {}",
                    ids.len(),
                    ids.len() * dims,
                    data.len()
                ),
            ));
        }
        Ok(Self { ids, dims, data })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dims..(i + 1) * self.dims]
    }
}

/// One scored document in a ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub score: f64,
}

/// A query's ranking: scores non-increasing, ties broken by ascending
/// doc id.
#[derive(Debug, Clone)]
pub struct RankedList {
    pub query_id: String,
    pub hits: Vec<ScoredDoc>,
}

/// Scores every query row against every doc row (dot product of unit rows =
/// cosine) and keeps the top `k` per query. `k` larger than the corpus
/// returns the full ranking.
pub fn search_exact(
    queries: &EmbeddingMatrix,
    docs: &EmbeddingMatrix,
    k: usize,
) -> Result<Vec<RankedList>> {
    if k == 0 {
        return Err(Error::InvalidArgument("search needs k >= 1".into()));
    }
    if queries.dims != docs.dims {
        return Err(Error::shape(
            "search_exact",
            format!(
                "queries at width {} vs docs at width {}",
                queries.dims, docs.dims
            ),
        ));
    }
    if docs.is_empty() {
        return Err(Error::InvalidArgument("empty document corpus".into()));
    }
    let keep = k.min(docs.len());
    let mut out = Vec::with_capacity(queries.len());
    for qi in 0..queries.len() {
        let q = queries.row(qi);
        let mut scored: Vec<(f64, usize)> = (0..docs.len())
            .map(|di| {
                let score: f64 = q
                    .iter()
                    .zip(docs.row(di))
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum();
                (score, di)
            })
            .collect();
        scored.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| docs.ids[a.1].cmp(&docs.ids[b.1]))
        });
        scored.truncate(keep);
        out.push(RankedList {
            query_id: queries.ids[qi].clone(),
            hits: scored
                .into_iter()
                .map(|(score, di)| ScoredDoc {
                    doc_id: docs.ids[di].clone(),
                    score,
                })
                .collect(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<f32> {
        (0..n)
            .flat_map(|_| {
                let row: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                row.into_iter().map(move |x| (x / norm) as f32).collect::<Vec<_>>()
            })
            .collect()
    }

    fn matrix(prefix: &str, n: usize, d: usize, data: Vec<f32>) -> EmbeddingMatrix {
        let ids = (0..n).map(|i| format!("{prefix}-{i:03}")).collect();
        EmbeddingMatrix::new(ids, d, data).unwrap()
    }

    #[test]
    fn identical_embedding_ranks_first_with_unit_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let docs_data = unit_rows(&mut rng, 20, 8);
        let docs = matrix("d", 20, 8, docs_data.clone());
        let probe = docs_data[13 * 8..14 * 8].to_vec();
        let queries = matrix("q", 1, 8, probe);
        let ranked = search_exact(&queries, &docs, 5).unwrap();
        assert_eq!(ranked[0].hits[0].doc_id, "d-013");
        assert!((ranked[0].hits[0].score - 1.0).abs() < 1e-6);
    }

    #[test]
    fn oversized_k_returns_the_full_corpus_ranking() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let docs = matrix("d", 7, 4, unit_rows(&mut rng, 7, 4));
        let queries = matrix("q", 2, 4, unit_rows(&mut rng, 2, 4));
        let ranked = search_exact(&queries, &docs, 100).unwrap();
        assert!(ranked.iter().all(|r| r.hits.len() == 7));
    }

    #[test]
    fn matches_independent_cosine_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 16;
        let docs_data = unit_rows(&mut rng, 50, d);
        let query_data = unit_rows(&mut rng, 5, d);
        let docs = matrix("d", 50, d, docs_data.clone());
        let queries = matrix("q", 5, d, query_data.clone());
        let ranked = search_exact(&queries, &docs, 10).unwrap();
        for (qi, list) in ranked.iter().enumerate() {
            // Oracle: score each doc independently, sort with the same
            // ordering rule, truncate.
            let mut oracle: Vec<(f64, String)> = (0..50)
                .map(|di| {
                    let mut s = 0.0f64;
                    for c in 0..d {
                        s += query_data[qi * d + c] as f64 * docs_data[di * d + c] as f64;
                    }
                    (s, format!("d-{di:03}"))
                })
                .collect();
            oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
            oracle.truncate(10);
            assert_eq!(list.hits.len(), 10);
            for (hit, (score, id)) in list.hits.iter().zip(&oracle) {
                assert_eq!(&hit.doc_id, id, "query {qi}");
                assert_eq!(hit.score, *score, "query {qi}");
            }
        }
    }

    #[test]
    fn exact_ties_fall_back_to_ascending_doc_id() {
        // Three identical docs: scores tie exactly, ids decide.
        let row = vec![0.6f32, 0.8];
        let docs = EmbeddingMatrix::new(
            vec!["zz".into(), "aa".into(), "mm".into()],
            2,
            [row.clone(), row.clone(), row.clone()].concat(),
        )
        .unwrap();
        let queries = EmbeddingMatrix::new(vec!["q".into()], 2, row).unwrap();
        let ranked = search_exact(&queries, &docs, 3).unwrap();
        let ids: Vec<&str> = ranked[0].hits.iter().map(|h| h.doc_id.as_str()).collect();
        assert_eq!(ids, vec!["aa", "mm", "zz"]);
    }

    #[test]
    fn scores_are_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let docs = matrix("d", 30, 6, unit_rows(&mut rng, 30, 6));
        let queries = matrix("q", 4, 6, unit_rows(&mut rng, 4, 6));
        for list in search_exact(&queries, &docs, 30).unwrap() {
            for pair in list.hits.windows(2) {
                assert!(pair[0].score >= pair[1].score);
            }
        }
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let docs = EmbeddingMatrix::new(vec!["d".into()], 2, vec![1.0, 0.0]).unwrap();
        let queries = EmbeddingMatrix::new(vec!["q".into()], 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert!(search_exact(&queries, &docs, 1).is_err());
        let q2 = EmbeddingMatrix::new(vec!["q".into()], 2, vec![1.0, 0.0]).unwrap();
        assert!(search_exact(&q2, &docs, 0).is_err());
        assert!(EmbeddingMatrix::new(vec!["x".into()], 2, vec![1.0]).is_err());
    }
}
