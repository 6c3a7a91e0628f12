//! Retrieval evaluation: embed a dataset, search exactly, score with ranking
//! metrics, and aggregate per task and overall. Also the pooling-ablation
//! runner that trains one model per pooling kind under identical data,
//! seed, and step budget.

pub mod metrics;
pub mod search;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::backbone::BackboneConfig;
use crate::checkpoint;
use crate::dataset::{make_batches, PairRecord, RetrievalDataset};
use crate::error::{Error, Result};
use crate::model::{truncate_renormalize, EmbedInput, EmbeddingModel, PoolingSpec};
use crate::pooling::PoolingKind;
use crate::prefixes::{Role, TaskType};
use crate::trainer::optimizer::AdamW;
use crate::trainer::{train_step, TrainConfig};

use search::{search_exact, EmbeddingMatrix};

/// Rank cutoff for NDCG and MRR, and the larger recall cutoff.
pub const RANK_CUTOFF: usize = 10;

/// Metric means over some set of queries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Averages {
    pub ndcg10: f64,
    pub mrr10: f64,
    pub recall1: f64,
    pub recall10: f64,
}

impl Averages {
    fn accumulate(items: impl Iterator<Item = Averages> + Clone) -> Averages {
        let n = items.clone().count();
        if n == 0 {
            return Averages::default();
        }
        let mut total = Averages::default();
        for item in items {
            total.ndcg10 += item.ndcg10;
            total.mrr10 += item.mrr10;
            total.recall1 += item.recall1;
            total.recall10 += item.recall10;
        }
        Averages {
            ndcg10: total.ndcg10 / n as f64,
            mrr10: total.mrr10 / n as f64,
            recall1: total.recall1 / n as f64,
            recall10: total.recall10 / n as f64,
        }
    }
}

/// One query's scores.
#[derive(Debug, Clone, Serialize)]
pub struct QueryMetrics {
    pub query_id: String,
    pub task: TaskType,
    #[serde(flatten)]
    pub scores: Averages,
}

/// Unweighted per-task means.
#[derive(Debug, Clone, Serialize)]
pub struct TaskBreakdown {
    pub task: TaskType,
    pub n_queries: usize,
    #[serde(flatten)]
    pub scores: Averages,
}

/// Full evaluation outcome at one embedding width.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub dims: usize,
    pub pooling: PoolingKind,
    pub model_id: String,
    pub per_query: Vec<QueryMetrics>,
    pub per_task: Vec<TaskBreakdown>,
    /// Unweighted mean over all scored queries.
    pub micro: Averages,
    /// Unweighted mean over task means.
    pub macro_avg: Averages,
    /// Queries dropped for having no relevance judgments.
    pub skipped_queries: Vec<String>,
}

impl MetricReport {
    /// Aligned-text table: per-task rows, then micro/macro summary.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "eval width={} pooling={} model={}",
            self.dims,
            self.pooling,
            &self.model_id[..16.min(self.model_id.len())]
        );
        let _ = writeln!(
            out,
            "{:<18} {:>8} {:>8} {:>8} {:>9} {:>9}",
            "task", "queries", "ndcg@10", "mrr@10", "recall@1", "recall@10"
        );
        for row in &self.per_task {
            let _ = writeln!(
                out,
                "{:<18} {:>8} {:>8.4} {:>8.4} {:>9.4} {:>9.4}",
                row.task.label(),
                row.n_queries,
                row.scores.ndcg10,
                row.scores.mrr10,
                row.scores.recall1,
                row.scores.recall10
            );
        }
        for (name, avg) in [("micro avg", self.micro), ("macro avg", self.macro_avg)] {
            let _ = writeln!(
                out,
                "{:<18} {:>8} {:>8.4} {:>8.4} {:>9.4} {:>9.4}",
                name,
                self.per_query.len(),
                avg.ndcg10,
                avg.mrr10,
                avg.recall1,
                avg.recall10
            );
        }
        if !self.skipped_queries.is_empty() {
            let _ = writeln!(
                out,
                "skipped {} queries without judgments",
                self.skipped_queries.len()
            );
        }
        out
    }

    /// Line-delimited records: one `query` record per query, one `task`
    /// record per task, then `micro`/`macro` summary records.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a, T: Serialize> {
            record: &'a str,
            dims: usize,
            #[serde(flatten)]
            body: T,
        }
        let mut out = String::new();
        for q in &self.per_query {
            let line = Line {
                record: "query",
                dims: self.dims,
                body: q,
            };
            out.push_str(&serde_json::to_string(&line).expect("serializes"));
            out.push('\n');
        }
        for t in &self.per_task {
            let line = Line {
                record: "task",
                dims: self.dims,
                body: t,
            };
            out.push_str(&serde_json::to_string(&line).expect("serializes"));
            out.push('\n');
        }
        for (name, avg) in [("micro", self.micro), ("macro", self.macro_avg)] {
            let line = Line {
                record: name,
                dims: self.dims,
                body: avg,
            };
            out.push_str(&serde_json::to_string(&line).expect("serializes"));
            out.push('\n');
        }
        out
    }
}

/// Embeds a dataset's queries and corpus at `dims`. With `role_aware` set,
/// each text gets its task/role prefix; otherwise both sides are embedded
/// with the document prefix (for measuring what role prefixes contribute).
pub fn embed_corpus(
    ds: &RetrievalDataset,
    model: &EmbeddingModel<f32>,
    role_aware: bool,
    dims: usize,
) -> Result<(EmbeddingMatrix, EmbeddingMatrix)> {
    let raw = embed_corpus_raw(ds, model, role_aware)?;
    raw.at_width(dims)
}

/// Full-width raw embeddings for a dataset, reusable across widths.
pub struct RawCorpusEmbeddings {
    pub query_ids: Vec<String>,
    pub query_raw: Vec<Vec<f32>>,
    pub doc_ids: Vec<String>,
    pub doc_raw: Vec<Vec<f32>>,
    pub d_model: usize,
}

impl RawCorpusEmbeddings {
    /// Truncate-renormalize every row at `dims` and package into matrices.
    pub fn at_width(&self, dims: usize) -> Result<(EmbeddingMatrix, EmbeddingMatrix)> {
        if dims == 0 || dims > self.d_model {
            return Err(Error::InvalidArgument(format!(
                "width {dims} outside 1..={}",
                self.d_model
            )));
        }
        let finalize = |rows: &[Vec<f32>]| -> Result<Vec<f32>> {
            let mut flat = Vec::with_capacity(rows.len() * dims);
            for row in rows {
                flat.extend(truncate_renormalize(row, dims)?);
            }
            Ok(flat)
        };
        let queries =
            EmbeddingMatrix::new(self.query_ids.clone(), dims, finalize(&self.query_raw)?)?;
        let docs = EmbeddingMatrix::new(self.doc_ids.clone(), dims, finalize(&self.doc_raw)?)?;
        Ok((queries, docs))
    }
}

/// Embeds every query and document once at full width.
pub fn embed_corpus_raw(
    ds: &RetrievalDataset,
    model: &EmbeddingModel<f32>,
    role_aware: bool,
) -> Result<RawCorpusEmbeddings> {
    ds.validate()?;
    let role_for = |role: Role| if role_aware { role } else { Role::Document };
    let query_inputs: Vec<EmbedInput> = ds
        .queries
        .iter()
        .map(|r| EmbedInput {
            task: r.task,
            role: role_for(Role::Query),
            text: &r.text,
        })
        .collect();
    let doc_inputs: Vec<EmbedInput> = ds
        .corpus
        .iter()
        .map(|r| EmbedInput {
            task: r.task,
            role: Role::Document,
            text: &r.text,
        })
        .collect();
    Ok(RawCorpusEmbeddings {
        query_ids: ds.queries.iter().map(|r| r.id.clone()).collect(),
        query_raw: model.embed_raw(&query_inputs)?,
        doc_ids: ds.corpus.iter().map(|r| r.id.clone()).collect(),
        doc_raw: model.embed_raw(&doc_inputs)?,
        d_model: model.d_model(),
    })
}

/// Scores one width's matrices against the dataset's judgments.
fn score_width(
    ds: &RetrievalDataset,
    queries: &EmbeddingMatrix,
    docs: &EmbeddingMatrix,
    dims: usize,
    pooling: PoolingKind,
    model_id: &str,
) -> Result<MetricReport> {
    let ranked = search_exact(queries, docs, RANK_CUTOFF)?;
    let task_of: BTreeMap<&str, TaskType> = ds
        .queries
        .iter()
        .map(|r| (r.id.as_str(), r.task))
        .collect();
    let mut per_query = Vec::new();
    let mut skipped = Vec::new();
    for list in &ranked {
        let rels = match ds.qrels.get(&list.query_id) {
            Some(r) if !r.is_empty() => r,
            _ => {
                skipped.push(list.query_id.clone());
                continue;
            }
        };
        per_query.push(QueryMetrics {
            query_id: list.query_id.clone(),
            task: task_of[list.query_id.as_str()],
            scores: Averages {
                ndcg10: metrics::ndcg_at_k(&list.hits, rels, RANK_CUTOFF),
                mrr10: metrics::mrr_at_k(&list.hits, rels, RANK_CUTOFF),
                recall1: metrics::recall_at_k(&list.hits, rels, 1),
                recall10: metrics::recall_at_k(&list.hits, rels, RANK_CUTOFF),
            },
        });
    }
    let mut per_task = Vec::new();
    for task in TaskType::ALL {
        let rows: Vec<Averages> = per_query
            .iter()
            .filter(|q| q.task == task)
            .map(|q| q.scores)
            .collect();
        if rows.is_empty() {
            continue;
        }
        per_task.push(TaskBreakdown {
            task,
            n_queries: rows.len(),
            scores: Averages::accumulate(rows.iter().copied()),
        });
    }
    let micro = Averages::accumulate(per_query.iter().map(|q| q.scores));
    let macro_avg = Averages::accumulate(per_task.iter().map(|t| t.scores));
    Ok(MetricReport {
        dims,
        pooling,
        model_id: model_id.to_string(),
        per_query,
        per_task,
        micro,
        macro_avg,
        skipped_queries: skipped,
    })
}

/// Evaluates the model on `ds` at each width in `dims_list`, embedding once
/// at full width and truncating per width.
pub fn run_eval(
    ds: &RetrievalDataset,
    model: &EmbeddingModel<f32>,
    dims_list: &[usize],
) -> Result<Vec<MetricReport>> {
    if dims_list.is_empty() {
        return Err(Error::InvalidArgument("no eval widths requested".into()));
    }
    let model_id = checkpoint::model_id_of(model);
    let raw = embed_corpus_raw(ds, model, true)?;
    let mut reports = Vec::with_capacity(dims_list.len());
    for &dims in dims_list {
        let (queries, docs) = raw.at_width(dims)?;
        reports.push(score_width(
            ds,
            &queries,
            &docs,
            dims,
            model.pooler.kind(),
            &model_id,
        )?);
    }
    Ok(reports)
}

/// One pooling kind's results within an ablation. `batch_ids` logs the pair
/// ids of every training batch in step order, so callers can verify the
/// arms saw the same data in the same order.
#[derive(Debug)]
pub struct AblationArm {
    pub kind: PoolingKind,
    pub batch_ids: Vec<Vec<String>>,
    pub final_loss: f64,
    pub model_id: String,
    pub untrained: MetricReport,
    pub trained: MetricReport,
}

/// Comparison across pooling kinds under a shared training recipe.
#[derive(Debug)]
pub struct AblationReport {
    pub dims: usize,
    pub arms: Vec<AblationArm>,
}

impl AblationReport {
    fn task_rows(&self) -> Vec<(String, Vec<f64>)> {
        let mut rows = Vec::new();
        for task in TaskType::ALL {
            let mut cells = Vec::new();
            for arm in &self.arms {
                let value = arm
                    .trained
                    .per_task
                    .iter()
                    .find(|t| t.task == task)
                    .map(|t| t.scores.ndcg10);
                cells.push(value);
            }
            if cells.iter().all(|c| c.is_none()) {
                continue;
            }
            rows.push((
                task.label().to_string(),
                cells.into_iter().map(|c| c.unwrap_or(0.0)).collect(),
            ));
        }
        rows.push((
            "average".to_string(),
            self.arms
                .iter()
                .map(|arm| arm.trained.macro_avg.ndcg10)
                .collect(),
        ));
        rows
    }

    /// Benchmark column plus one NDCG@10 column per pooling kind; rows are
    /// tasks then the macro average. An untrained-baseline table follows.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<18}", "benchmark");
        for arm in &self.arms {
            let _ = write!(out, " {:>16}", arm.kind.label());
        }
        out.push('\n');
        for (name, cells) in self.task_rows() {
            let _ = write!(out, "{name:<18}");
            for cell in cells {
                let _ = write!(out, " {cell:>16.4}");
            }
            out.push('\n');
        }
        out.push('\n');
        let _ = writeln!(out, "untrained baseline (NDCG@10)");
        let _ = write!(out, "{:<18}", "benchmark");
        for arm in &self.arms {
            let _ = write!(out, " {:>16}", arm.kind.label());
        }
        out.push('\n');
        let _ = write!(out, "{:<18}", "average");
        for arm in &self.arms {
            let _ = write!(out, " {:>16.4}", arm.untrained.macro_avg.ndcg10);
        }
        out.push('\n');
        out
    }

    /// Comma-separated form of the trained table.
    pub fn render_csv(&self) -> String {
        let mut out = String::from("benchmark");
        for arm in &self.arms {
            out.push(',');
            out.push_str(arm.kind.label());
        }
        out.push('\n');
        for (name, cells) in self.task_rows() {
            out.push_str(&name);
            for cell in cells {
                let _ = write!(out, ",{cell:.6}");
            }
            out.push('\n');
        }
        out
    }
}

/// Everything an ablation run produces: the comparison report plus each
/// arm's trained model (in arm order) for callers that want to save them.
pub struct AblationOutcome {
    pub report: AblationReport,
    pub models: Vec<(PoolingKind, EmbeddingModel<f32>)>,
}

/// Trains one model per pooling kind under identical data, seed, and step
/// budget, evaluating each against `heldout` before and after training.
pub fn run_ablation(
    pairs: &[PairRecord],
    heldout: &RetrievalDataset,
    backbone: &BackboneConfig,
    train: &TrainConfig,
    kinds: &[PoolingKind],
    mut on_step: impl FnMut(PoolingKind, &crate::trainer::StepReport),
) -> Result<AblationOutcome> {
    if kinds.is_empty() {
        return Err(Error::InvalidArgument("no pooling kinds requested".into()));
    }
    let mut arms = Vec::with_capacity(kinds.len());
    let mut models = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let arm_err = |e: Error| Error::Data(format!("ablation arm '{kind}': {e}"));
        let mut model = EmbeddingModel::<f32>::new(backbone.clone(), PoolingSpec::new(kind))
            .map_err(arm_err)?;
        let untrained = run_eval(heldout, &model, &[model.d_model()])
            .map_err(arm_err)?
            .remove(0);

        let mut opt = AdamW::new(train.optimizer.clone(), &model.store, train.steps)
            .map_err(arm_err)?;
        let mut batch_ids: Vec<Vec<String>> = Vec::with_capacity(train.steps);
        let mut final_loss = f64::NAN;
        let mut epoch = 0u64;
        'arm: loop {
            let batches =
                make_batches(pairs, train.batch_size, train.seed, epoch).map_err(arm_err)?;
            for batch in &batches {
                if opt.steps_taken() == train.steps {
                    break 'arm;
                }
                batch_ids.push(batch.ids().iter().map(|s| s.to_string()).collect());
                let report = train_step(&mut model, batch, &train.loss, &mut opt)
                    .map_err(arm_err)?;
                final_loss = report.loss;
                on_step(kind, &report);
            }
            if opt.steps_taken() == train.steps {
                break;
            }
            epoch += 1;
        }

        let trained = run_eval(heldout, &model, &[model.d_model()])
            .map_err(arm_err)?
            .remove(0);
        arms.push(AblationArm {
            kind,
            batch_ids,
            final_loss,
            model_id: trained.model_id.clone(),
            untrained,
            trained,
        });
        models.push((kind, model));
    }

    for arm in &arms[1..] {
        if arm.batch_ids != arms[0].batch_ids {
            let step = arms[0]
                .batch_ids
                .iter()
                .zip(&arm.batch_ids)
                .position(|(a, b)| a != b)
                .map(|i| i + 1)
                .unwrap_or(arms[0].batch_ids.len().min(arm.batch_ids.len()) + 1);
            return Err(Error::Data(format!(
                "ablation arms diverged at step {step}: arm '{}' and arm '{}' drew different \
                 batches",
                arms[0].kind, arm.kind
            )));
        }
    }
    Ok(AblationOutcome {
        report: AblationReport {
            dims: backbone.d_model,
            arms,
        },
        models,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_planted;

    fn tiny_backbone() -> BackboneConfig {
        BackboneConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 96,
            seed: 13,
            ..BackboneConfig::default()
        }
    }

    fn tiny_model(kind: PoolingKind) -> EmbeddingModel<f32> {
        EmbeddingModel::new(tiny_backbone(), PoolingSpec::new(kind)).unwrap()
    }

    fn tiny_heldout() -> RetrievalDataset {
        generate_planted(16, 31).unwrap().heldout
    }

    #[test]
    fn embedded_corpus_has_unit_rows_at_every_width() {
        let ds = tiny_heldout();
        let model = tiny_model(PoolingKind::Mean);
        for dims in [16usize, 8, 4] {
            let (queries, docs) = embed_corpus(&ds, &model, true, dims).unwrap();
            assert_eq!(queries.len(), ds.queries.len());
            assert_eq!(docs.len(), ds.corpus.len());
            for m in [&queries, &docs] {
                for i in 0..m.len() {
                    let norm: f64 = m.row(i).iter().map(|&x| x as f64 * x as f64).sum();
                    assert!((norm.sqrt() - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn full_width_truncation_is_a_no_op() {
        let ds = tiny_heldout();
        let model = tiny_model(PoolingKind::LastToken);
        let raw = embed_corpus_raw(&ds, &model, true).unwrap();
        let (queries, _) = raw.at_width(16).unwrap();
        // Reference path with no truncation: plain row normalization.
        for (i, row) in raw.query_raw.iter().enumerate() {
            let norm = (row.iter().map(|&x| x * x).sum::<f32>()).sqrt();
            let direct: Vec<f32> = row.iter().map(|&x| x / norm).collect();
            assert_eq!(queries.row(i), &direct[..], "query {i}");
        }
    }

    #[test]
    fn role_prefixes_change_embeddings() {
        let ds = tiny_heldout();
        let model = tiny_model(PoolingKind::Mean);
        let aware = embed_corpus(&ds, &model, true, 16).unwrap().0;
        let blind = embed_corpus(&ds, &model, false, 16).unwrap().0;
        assert_ne!(aware.data, blind.data);
    }

    #[test]
    fn metric_report_averages_recompute_from_per_query_table() {
        let ds = tiny_heldout();
        let model = tiny_model(PoolingKind::Mean);
        let report = run_eval(&ds, &model, &[16]).unwrap().remove(0);
        assert_eq!(report.per_query.len(), ds.queries.len());
        let micro = Averages::accumulate(report.per_query.iter().map(|q| q.scores));
        assert!((micro.ndcg10 - report.micro.ndcg10).abs() < 1e-9);
        assert!((micro.recall10 - report.micro.recall10).abs() < 1e-9);
        let macro_avg = Averages::accumulate(report.per_task.iter().map(|t| t.scores));
        assert!((macro_avg.ndcg10 - report.macro_avg.ndcg10).abs() < 1e-9);
        for q in &report.per_query {
            for v in [q.scores.ndcg10, q.scores.mrr10, q.scores.recall1, q.scores.recall10] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn queries_without_judgments_are_skipped_and_counted() {
        let mut ds = tiny_heldout();
        ds.qrels.remove("q-0003");
        let model = tiny_model(PoolingKind::Mean);
        let report = run_eval(&ds, &model, &[16]).unwrap().remove(0);
        assert_eq!(report.skipped_queries, vec!["q-0003".to_string()]);
        assert_eq!(report.per_query.len(), ds.queries.len() - 1);
    }

    #[test]
    fn eval_widths_must_fit_the_model() {
        let ds = tiny_heldout();
        let model = tiny_model(PoolingKind::Mean);
        assert!(run_eval(&ds, &model, &[32]).is_err());
        assert!(run_eval(&ds, &model, &[]).is_err());
    }

    #[test]
    fn ablation_table_has_one_column_per_arm_plus_benchmark() {
        let planted = generate_planted(16, 51).unwrap();
        let train = TrainConfig {
            steps: 2,
            batch_size: 4,
            seed: 5,
            ..TrainConfig::default_for(16)
        };
        let outcome = run_ablation(
            &planted.train_pairs,
            &planted.heldout,
            &tiny_backbone(),
            &train,
            &[PoolingKind::LastToken, PoolingKind::Mean, PoolingKind::LatentAttention],
            |_, _| {},
        )
        .unwrap();
        assert_eq!(outcome.report.arms.len(), 3);
        assert_eq!(outcome.models.len(), 3);
        let table = outcome.report.render_table();
        let header = table.lines().next().unwrap();
        assert!(header.contains("benchmark"));
        for kind in [PoolingKind::LastToken, PoolingKind::Mean, PoolingKind::LatentAttention] {
            assert!(header.contains(kind.label()), "missing column {kind}");
        }
        let csv = outcome.report.render_csv();
        let csv_header = csv.lines().next().unwrap();
        assert_eq!(
            csv_header,
            "benchmark,last_token,mean,latent_attention"
        );
        assert!(csv.lines().last().unwrap().starts_with("average,"));
        // Identical batch schedule across arms, one logged batch per step.
        let reference = &outcome.report.arms[0].batch_ids;
        assert_eq!(reference.len(), train.steps);
        for arm in &outcome.report.arms {
            assert_eq!(&arm.batch_ids, reference);
        }
    }
}
