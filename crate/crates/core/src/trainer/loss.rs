//! Contrastive loss: cosine similarity matrix, InfoNCE with in-batch
//! negatives, and the multi-resolution (matryoshka) weighted sum over
//! prefix widths.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

/// Contrastive temperature used throughout unless overridden.
pub const DEFAULT_TEMPERATURE: f64 = 0.05;

/// Which similarity directions contribute to the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossDirection {
    /// Rows of the similarity matrix: each query against all documents.
    QueryToDoc,
    /// Average of the query-to-doc loss and its transpose (doc-to-query).
    Symmetric,
}

/// Loss hyperparameters.
///
/// `matryoshka_dims` lists embedding widths (non-increasing, leading with
/// the full width); each width's InfoNCE term is weighted by the matching
/// entry of `matryoshka_weights`. Weights are used in normalized form, so
/// only their ratios matter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    pub matryoshka_dims: Vec<usize>,
    pub matryoshka_weights: Vec<f64>,
    pub direction: LossDirection,
}

impl LossConfig {
    /// Defaults for a given width: τ = 0.05, dims {d, d/2, d/4, d/8}
    /// (dropping zeros for tiny d), equal weights, query-to-doc.
    pub fn default_for(d_model: usize) -> Self {
        let mut dims = Vec::new();
        for shift in 0..4 {
            let dim = d_model >> shift;
            if dim >= 1 && dims.last() != Some(&dim) {
                dims.push(dim);
            }
        }
        let w = 1.0 / dims.len() as f64;
        Self {
            temperature: DEFAULT_TEMPERATURE,
            matryoshka_weights: vec![w; dims.len()],
            matryoshka_dims: dims,
            direction: LossDirection::QueryToDoc,
        }
    }

    /// Validates against the embedding width the loss will see.
    pub fn validate(&self, d_model: usize) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        if self.matryoshka_dims.is_empty() {
            return Err(Error::InvalidArgument(
                "matryoshka_dims must be non-empty".into(),
            ));
        }
        if self.matryoshka_dims[0] != d_model {
            return Err(Error::InvalidArgument(format!(
                "largest matryoshka dim {} must equal d_model {d_model}",
                self.matryoshka_dims[0]
            )));
        }
        for pair in self.matryoshka_dims.windows(2) {
            if pair[1] > pair[0] {
                return Err(Error::InvalidArgument(format!(
                    "matryoshka_dims must be non-increasing, got {:?}",
                    self.matryoshka_dims
                )));
            }
        }
        if self.matryoshka_dims.iter().any(|&m| m == 0) {
            return Err(Error::InvalidArgument(
                "matryoshka_dims entries must be >= 1".into(),
            ));
        }
        if self.matryoshka_weights.len() != self.matryoshka_dims.len() {
            return Err(Error::InvalidArgument(format!(
                "{} weights for {} dims",
                self.matryoshka_weights.len(),
                self.matryoshka_dims.len()
            )));
        }
        if self
            .matryoshka_weights
            .iter()
            .any(|w| !(*w > 0.0) || !w.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "matryoshka_weights must be positive and finite, got {:?}",
                self.matryoshka_weights
            )));
        }
        Ok(())
    }

    /// Same config with weights rescaled to sum to 1 (the stored form).
    pub fn normalized(mut self) -> Self {
        let total: f64 = self.matryoshka_weights.iter().sum();
        if total > 0.0 && total.is_finite() {
            for w in &mut self.matryoshka_weights {
                *w /= total;
            }
        }
        self
    }
}

/// Cosine similarity matrix S[i][j] = qᵢ·dⱼ of unit-normalized rows.
pub fn similarity_matrix<S: Scalar>(
    tape: &mut Tape<S>,
    queries: Tensor,
    docs: Tensor,
) -> Result<Tensor> {
    let qs = tape.shape(queries).to_vec();
    let ds = tape.shape(docs).to_vec();
    if qs.len() != 2 || qs != ds {
        return Err(Error::shape(
            "similarity_matrix",
            format!("expected matching [n, d] inputs, got {qs:?} and {ds:?}"),
        ));
    }
    for (name, t) in [("queries", queries), ("docs", docs)] {
        let data = tape.data(t);
        for (i, row) in data.chunks_exact(qs[1]).enumerate() {
            let norm = row
                .iter()
                .map(|&x| x.to_f64() * x.to_f64())
                .sum::<f64>()
                .sqrt();
            if (norm - 1.0).abs() > 1e-4 {
                return Err(Error::InvalidArgument(format!(
                    "similarity_matrix requires unit-norm rows: {name} row {i} has norm {norm}"
                )));
            }
        }
    }
    tape.matmul_tb(queries, docs)
}

/// InfoNCE over a square similarity matrix with diagonal positives:
/// L = −Σᵢ ln softmax(S[i]/τ)[i].
pub fn info_nce<S: Scalar>(tape: &mut Tape<S>, sims: Tensor, temperature: f64) -> Result<Tensor> {
    let shape = tape.shape(sims).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::shape(
            "info_nce",
            format!("expected square similarity matrix, got {shape:?}"),
        ));
    }
    if shape[0] < 2 {
        return Err(Error::InvalidArgument(
            "info_nce needs n >= 2 for in-batch negatives".into(),
        ));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    if let Some(pos) = tape.data(sims).iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!(
            "info_nce input at entry ({}, {})",
            pos / shape[1],
            pos % shape[1]
        )));
    }
    let scaled = tape.scale(sims, S::from_f64(1.0 / temperature))?;
    let logp = tape.log_softmax_rows(scaled)?;
    let diag = tape.diagonal(logp)?;
    let total = tape.sum(diag)?;
    tape.scale(total, S::from_f64(-1.0))
}

/// Multi-resolution contrastive loss over raw (un-normalized) embeddings.
///
/// For each width m: keep the first m components, L2-normalize, build the
/// similarity matrix, take InfoNCE; sum the terms with normalized weights.
/// `Symmetric` direction averages each term with its transpose-matrix loss.
pub fn matryoshka_loss<S: Scalar>(
    tape: &mut Tape<S>,
    queries_raw: Tensor,
    docs_raw: Tensor,
    cfg: &LossConfig,
) -> Result<Tensor> {
    let qs = tape.shape(queries_raw).to_vec();
    let ds = tape.shape(docs_raw).to_vec();
    if qs.len() != 2 || qs != ds {
        return Err(Error::shape(
            "matryoshka_loss",
            format!("expected matching [n, d] inputs, got {qs:?} and {ds:?}"),
        ));
    }
    cfg.validate(qs[1])?;
    let weight_total: f64 = cfg.matryoshka_weights.iter().sum();

    let mut total: Option<Tensor> = None;
    for (&dim, &weight) in cfg.matryoshka_dims.iter().zip(&cfg.matryoshka_weights) {
        let (q, d) = if dim == qs[1] {
            (queries_raw, docs_raw)
        } else {
            (
                tape.slice_cols(queries_raw, dim)?,
                tape.slice_cols(docs_raw, dim)?,
            )
        };
        let qn = tape.normalize_rows(q)?;
        let dn = tape.normalize_rows(d)?;
        let sims = tape.matmul_tb(qn, dn)?;
        let mut term = info_nce(tape, sims, cfg.temperature)?;
        if cfg.direction == LossDirection::Symmetric {
            let sims_t = tape.transpose2d(sims)?;
            let reverse = info_nce(tape, sims_t, cfg.temperature)?;
            let both = tape.add(term, reverse)?;
            term = tape.scale(both, S::from_f64(0.5))?;
        }
        let weighted = tape.scale(term, S::from_f64(weight / weight_total))?;
        total = Some(match total {
            None => weighted,
            Some(acc) => tape.add(acc, weighted)?,
        });
    }
    Ok(total.expect("validated dims are non-empty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independently coded reference: L = Σᵢ [ln Σₖ e^{S[i][k]/τ} − S[i][i]/τ].
    fn info_nce_oracle(s: &[Vec<f64>], tau: f64) -> f64 {
        let n = s.len();
        let mut total = 0.0;
        for i in 0..n {
            let row_max = s[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max) / tau;
            let lse = row_max
                + s[i]
                    .iter()
                    .map(|&x| (x / tau - row_max).exp())
                    .sum::<f64>()
                    .ln();
            total += lse - s[i][i] / tau;
        }
        total
    }

    fn info_nce_value(s: &[Vec<f64>], tau: f64) -> f64 {
        let n = s.len();
        let flat: Vec<f64> = s.iter().flatten().copied().collect();
        let mut tape = Tape::<f64>::new();
        let sims = tape.var(&[n, n], flat).unwrap();
        let loss = info_nce(&mut tape, sims, tau).unwrap();
        tape.scalar_value(loss).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..n).map(|_| rng.gen_range(lo..hi)).collect())
            .collect()
    }

    #[test]
    fn identity_similarity_at_unit_temperature() {
        let s = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let expect = 2.0 * (1.0 + (-1.0f64).exp()).ln();
        assert!((info_nce_value(&s, 1.0) - expect).abs() < 1e-12);
        assert!((expect - 0.626523).abs() < 1e-5);
    }

    #[test]
    fn identical_rows_give_n_ln_n() {
        for (n, tau) in [(2usize, 0.05), (4, 1.0), (4, 0.3)] {
            let s = vec![vec![0.37; n]; n];
            let expect = n as f64 * (n as f64).ln();
            assert!((info_nce_value(&s, tau) - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn matches_log_sum_exp_oracle_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..100 {
            let s = random_matrix(&mut rng, 8, -1.0, 1.0);
            for tau in [0.05, 0.5, 1.0] {
                let got = info_nce_value(&s, tau);
                let want = info_nce_oracle(&s, tau);
                let rel = (got - want).abs() / want.abs().max(1e-12);
                assert!(rel < 1e-6, "trial {trial} tau {tau}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut tape = Tape::<f64>::new();
        let not_square = tape.var(&[2, 3], vec![0.0; 6]).unwrap();
        assert!(info_nce(&mut tape, not_square, 1.0).is_err());
        let tiny = tape.var(&[1, 1], vec![0.5]).unwrap();
        assert!(info_nce(&mut tape, tiny, 1.0).is_err());
        let ok = tape.var(&[2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!(info_nce(&mut tape, ok, 0.0).is_err());
        assert!(info_nce(&mut tape, ok, -1.0).is_err());
        let bad = tape.var(&[2, 2], vec![0.1, f64::NAN, 0.3, 0.4]).unwrap();
        let err = info_nce(&mut tape, bad, 1.0).unwrap_err().to_string();
        assert!(err.contains("(0, 1)"), "{err}");
    }

    #[test]
    fn gradient_wrt_similarities_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for tau in [0.05, 1.0] {
            let s: Vec<f64> = (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let report = gradcheck::check_all(
                &[(vec![6, 6], s)],
                |tape, leaves| info_nce(tape, leaves[0], tau),
                gradcheck::DEFAULT_H,
                &[1e-3],
            )
            .unwrap();
            assert!(
                report.max_rel_err < 1e-3,
                "tau {tau}: max rel err {}",
                report.max_rel_err
            );
        }
    }

    #[test]
    fn loss_is_invariant_under_paired_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 5;
        let d = 8;
        let q: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let doc: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let perm = [3usize, 0, 4, 1, 2];
        let permute = |xs: &[f64]| -> Vec<f64> {
            perm.iter()
                .flat_map(|&i| xs[i * d..(i + 1) * d].to_vec())
                .collect()
        };
        let cfg = LossConfig::default_for(d);
        let value = |qd: Vec<f64>, dd: Vec<f64>| -> f64 {
            let mut tape = Tape::<f64>::new();
            let qt = tape.var(&[n, d], qd).unwrap();
            let dt = tape.var(&[n, d], dd).unwrap();
            let loss = matryoshka_loss(&mut tape, qt, dt, &cfg).unwrap();
            tape.scalar_value(loss).unwrap()
        };
        let base = value(q.clone(), doc.clone());
        let permuted = value(permute(&q), permute(&doc));
        assert!((base - permuted).abs() < 1e-10, "{base} vs {permuted}");
    }

    #[test]
    fn row_shift_leaves_that_rows_term_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random_matrix(&mut rng, 4, -1.0, 1.0);
        let mut shifted = s.clone();
        for v in &mut shifted[2] {
            *v += 0.73;
        }
        // Shifting row 2 of S/τ changes only row 2's softmax input by a
        // constant, so with τ=1 the total loss is unchanged.
        let base = info_nce_value(&s, 1.0);
        let moved = info_nce_value(&shifted, 1.0);
        assert!((base - moved).abs() < 1e-10);
    }

    #[test]
    fn positive_scaling_of_raw_embeddings_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 4;
        let d = 8;
        let q: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let doc: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cfg = LossConfig::default_for(d);
        let value = |scale: f64| -> f64 {
            let mut tape = Tape::<f64>::new();
            let scaled: Vec<f64> = q.iter().map(|x| x * scale).collect();
            let qt = tape.var(&[n, d], scaled).unwrap();
            let dt = tape.var(&[n, d], doc.clone()).unwrap();
            let loss = matryoshka_loss(&mut tape, qt, dt, &cfg).unwrap();
            tape.scalar_value(loss).unwrap()
        };
        assert!((value(1.0) - value(3.0)).abs() < 1e-9);
        assert!((value(1.0) - value(0.01)).abs() < 1e-9);
    }

    #[test]
    fn single_full_width_dim_equals_plain_info_nce() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 4;
        let d = 8;
        let q: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let doc: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cfg = LossConfig {
            temperature: 0.05,
            matryoshka_dims: vec![d],
            matryoshka_weights: vec![1.0],
            direction: LossDirection::QueryToDoc,
        };
        let mut tape = Tape::<f64>::new();
        let qt = tape.var(&[n, d], q.clone()).unwrap();
        let dt = tape.var(&[n, d], doc.clone()).unwrap();
        let composed = matryoshka_loss(&mut tape, qt, dt, &cfg).unwrap();
        let qn = tape.normalize_rows(qt).unwrap();
        let dn = tape.normalize_rows(dt).unwrap();
        let sims = similarity_matrix(&mut tape, qn, dn).unwrap();
        let plain = info_nce(&mut tape, sims, 0.05).unwrap();
        assert_eq!(
            tape.scalar_value(composed).unwrap(),
            tape.scalar_value(plain).unwrap()
        );
    }

    #[test]
    fn duplicated_dims_with_half_weights_equal_single_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 3;
        let d = 4;
        let q: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let doc: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let single = LossConfig {
            temperature: 0.05,
            matryoshka_dims: vec![d],
            matryoshka_weights: vec![1.0],
            direction: LossDirection::QueryToDoc,
        };
        let double = LossConfig {
            matryoshka_dims: vec![d, d],
            matryoshka_weights: vec![0.5, 0.5],
            ..single.clone()
        };
        let value = |cfg: &LossConfig| -> f64 {
            let mut tape = Tape::<f64>::new();
            let qt = tape.var(&[n, d], q.clone()).unwrap();
            let dt = tape.var(&[n, d], doc.clone()).unwrap();
            let loss = matryoshka_loss(&mut tape, qt, dt, cfg).unwrap();
            tape.scalar_value(loss).unwrap()
        };
        assert_eq!(value(&single), value(&double));
    }

    #[test]
    fn composed_widths_match_hand_built_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 6;
        let d = 64;
        let q: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let doc: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cfg = LossConfig::default_for(d);
        assert_eq!(cfg.matryoshka_dims, vec![64, 32, 16, 8]);
        let mut tape = Tape::<f64>::new();
        let qt = tape.var(&[n, d], q.clone()).unwrap();
        let dt = tape.var(&[n, d], doc.clone()).unwrap();
        let loss = matryoshka_loss(&mut tape, qt, dt, &cfg).unwrap();
        let got = tape.scalar_value(loss).unwrap();

        let mut want = 0.0;
        for &m in &cfg.matryoshka_dims {
            let normalize = |flat: &[f64]| -> Vec<Vec<f64>> {
                flat.chunks_exact(d)
                    .map(|row| {
                        let prefix = &row[..m];
                        let norm = prefix.iter().map(|x| x * x).sum::<f64>().sqrt();
                        prefix.iter().map(|x| x / norm).collect()
                    })
                    .collect()
            };
            let qn = normalize(&q);
            let dn = normalize(&doc);
            let sims: Vec<Vec<f64>> = qn
                .iter()
                .map(|qr| {
                    dn.iter()
                        .map(|dr| qr.iter().zip(dr).map(|(a, b)| a * b).sum())
                        .collect()
                })
                .collect();
            want += 0.25 * info_nce_oracle(&sims, cfg.temperature);
        }
        let rel = (got - want).abs() / want.abs().max(1e-12);
        assert!(rel < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn symmetric_direction_averages_both_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 4;
        let d = 8;
        let q: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let doc: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let base = LossConfig {
            temperature: 0.1,
            matryoshka_dims: vec![d],
            matryoshka_weights: vec![1.0],
            direction: LossDirection::QueryToDoc,
        };
        let value = |cfg: &LossConfig, qd: &[f64], dd: &[f64]| -> f64 {
            let mut tape = Tape::<f64>::new();
            let qt = tape.var(&[n, d], qd.to_vec()).unwrap();
            let dt = tape.var(&[n, d], dd.to_vec()).unwrap();
            let loss = matryoshka_loss(&mut tape, qt, dt, cfg).unwrap();
            tape.scalar_value(loss).unwrap()
        };
        let sym = LossConfig {
            direction: LossDirection::Symmetric,
            ..base.clone()
        };
        let forward = value(&base, &q, &doc);
        let backward = value(&base, &doc, &q);
        let both = value(&sym, &q, &doc);
        assert!((both - 0.5 * (forward + backward)).abs() < 1e-10);
    }

    #[test]
    fn similarity_matrix_rejects_unnormalized_rows() {
        let mut tape = Tape::<f64>::new();
        let good = tape.var(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let bad = tape.var(&[2, 2], vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(similarity_matrix(&mut tape, good, good).is_ok());
        let err = similarity_matrix(&mut tape, good, bad).unwrap_err().to_string();
        assert!(err.contains("docs row 0"), "{err}");
    }

    #[test]
    fn similarity_entries_match_scalar_cosine() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 5;
        let d = 7;
        let unit_rows = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n)
                .flat_map(|_| {
                    let row: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    row.into_iter().map(move |x| x / norm).collect::<Vec<_>>()
                })
                .collect()
        };
        let q = unit_rows(&mut rng);
        let doc = unit_rows(&mut rng);
        let mut tape = Tape::<f64>::new();
        let qt = tape.var(&[n, d], q.clone()).unwrap();
        let dt = tape.var(&[n, d], doc.clone()).unwrap();
        let sims = similarity_matrix(&mut tape, qt, dt).unwrap();
        let data = tape.data(sims);
        for i in 0..n {
            for j in 0..n {
                let want: f64 = (0..d).map(|k| q[i * d + k] * doc[j * d + k]).sum();
                assert!((data[i * n + j] - want).abs() < 1e-6);
                assert!(data[i * n + j].abs() <= 1.0 + 1e-5);
            }
        }
    }

    #[test]
    fn config_validation_catches_each_field() {
        let good = LossConfig::default_for(64);
        assert!(good.validate(64).is_ok());
        assert!(good.validate(32).is_err());
        let mut c = good.clone();
        c.temperature = 0.0;
        assert!(c.validate(64).is_err());
        let mut c = good.clone();
        c.matryoshka_dims = vec![32, 64];
        assert!(c.validate(64).is_err());
        let mut c = good.clone();
        c.matryoshka_weights = vec![1.0];
        assert!(c.validate(64).is_err());
        let mut c = good.clone();
        c.matryoshka_weights[2] = -0.5;
        assert!(c.validate(64).is_err());
        let c = LossConfig {
            matryoshka_weights: vec![2.0, 2.0, 2.0, 4.0],
            ..good
        }
        .normalized();
        assert!((c.matryoshka_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(c.matryoshka_weights[3], 0.4);
    }

    #[test]
    fn tiny_widths_default_sensibly() {
        assert_eq!(LossConfig::default_for(8).matryoshka_dims, vec![8, 4, 2, 1]);
        assert_eq!(LossConfig::default_for(4).matryoshka_dims, vec![4, 2, 1]);
        assert_eq!(LossConfig::default_for(1).matryoshka_dims, vec![1]);
    }
}
