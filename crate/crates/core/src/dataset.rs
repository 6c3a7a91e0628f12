//! Training pairs, retrieval datasets, batching, and the planted-marker
//! synthetic corpus used for end-to-end checks.
//!
//! File formats:
//!
//! * pairs: JSONL, one `{"id", "task", "query", "document"}` object per line,
//! * retrieval corpus/queries: JSONL `{"id", "task", "text"}`,
//! * qrels: TSV `query_id <TAB> doc_id <TAB> grade`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prefixes::TaskType;

/// One contrastive training example: a query and its positive document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub task: TaskType,
    pub query: String,
    pub document: String,
}

/// One retrieval-side text, used for both corpus documents and queries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextRecord {
    pub id: String,
    pub task: TaskType,
    pub text: String,
}

/// Graded relevance judgments: query id -> (doc id -> grade).
pub type Qrels = BTreeMap<String, BTreeMap<String, u32>>;

/// An evaluation split: documents, queries, and their judgments.
#[derive(Debug, Clone, Default)]
pub struct RetrievalDataset {
    pub corpus: Vec<TextRecord>,
    pub queries: Vec<TextRecord>,
    pub qrels: Qrels,
}

/// A shuffled slice of pairs sized for in-batch negatives (n >= 2).
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub pairs: Vec<PairRecord>,
}

impl TrainingBatch {
    pub fn n(&self) -> usize {
        self.pairs.len()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.pairs.iter().map(|p| p.id.as_str()).collect()
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(path, e))
}

fn parse_line_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::ParseLine {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Loads training pairs from JSONL, validating as it goes. Error messages
/// carry 1-based line numbers; duplicate ids name both offending lines.
pub fn load_pairs(path: &Path) -> Result<Vec<PairRecord>> {
    let mut pairs = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, raw) in read_lines(path)?.iter().enumerate() {
        let line_no = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let pair: PairRecord = serde_json::from_str(raw)
            .map_err(|e| parse_line_err(path, line_no, e.to_string()))?;
        if pair.id.is_empty() {
            return Err(parse_line_err(path, line_no, "empty id"));
        }
        if pair.query.is_empty() || pair.document.is_empty() {
            return Err(parse_line_err(
                path,
                line_no,
                format!("pair '{}' has an empty query or document", pair.id),
            ));
        }
        if let Some(first) = seen.insert(pair.id.clone(), line_no) {
            return Err(Error::Data(format!(
                "duplicate id '{}' on lines {first} and {line_no} of {}",
                pair.id,
                path.display()
            )));
        }
        pairs.push(pair);
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!("no pairs found in {}", path.display())));
    }
    Ok(pairs)
}

/// Writes pairs as JSONL.
pub fn save_pairs(path: &Path, pairs: &[PairRecord]) -> Result<()> {
    let mut out = String::new();
    for pair in pairs {
        out.push_str(&serde_json::to_string(pair).expect("pair serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Epoch-deterministic batching: shuffles a copy of `pairs` with a stream
/// derived from `(seed, epoch)` and cuts it into full batches, dropping the
/// remainder.
pub fn make_batches(
    pairs: &[PairRecord],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<TrainingBatch>> {
    if batch_size < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch_size {batch_size} too small for in-batch negatives (need >= 2)"
        )));
    }
    if batch_size > pairs.len() {
        return Err(Error::InvalidArgument(format!(
            "batch_size {batch_size} exceeds pair count {}",
            pairs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    Ok(order
        .chunks_exact(batch_size)
        .map(|chunk| TrainingBatch {
            pairs: chunk.iter().map(|&i| pairs[i].clone()).collect(),
        })
        .collect())
}

impl RetrievalDataset {
    /// Reads `corpus.jsonl`, `queries.jsonl`, and `qrels.tsv` from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let corpus = load_text_records(&dir.join("corpus.jsonl"))?;
        let queries = load_text_records(&dir.join("queries.jsonl"))?;
        let qrels_path = dir.join("qrels.tsv");
        let mut qrels: Qrels = BTreeMap::new();
        for (idx, raw) in read_lines(&qrels_path)?.iter().enumerate() {
            let line_no = idx + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = raw.split('\t').collect();
            if fields.len() != 3 {
                return Err(parse_line_err(
                    &qrels_path,
                    line_no,
                    format!("expected 3 tab-separated fields, got {}", fields.len()),
                ));
            }
            let grade: u32 = fields[2].parse().map_err(|_| {
                parse_line_err(&qrels_path, line_no, format!("bad grade '{}'", fields[2]))
            })?;
            qrels
                .entry(fields[0].to_string())
                .or_default()
                .insert(fields[1].to_string(), grade);
        }
        let ds = Self {
            corpus,
            queries,
            qrels,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Writes the three split files into `dir` (created if missing).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_text_records(&dir.join("corpus.jsonl"), &self.corpus)?;
        save_text_records(&dir.join("queries.jsonl"), &self.queries)?;
        let qrels_path = dir.join("qrels.tsv");
        let file = fs::File::create(&qrels_path).map_err(|e| Error::io(&qrels_path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for (qid, docs) in &self.qrels {
            for (did, grade) in docs {
                writeln!(w, "{qid}\t{did}\t{grade}").map_err(|e| Error::io(&qrels_path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&qrels_path, e))
    }

    /// Referential integrity: unique ids and qrels that point at real
    /// queries and documents.
    pub fn validate(&self) -> Result<()> {
        let doc_ids = unique_ids("corpus", &self.corpus)?;
        let query_ids = unique_ids("queries", &self.queries)?;
        for (qid, docs) in &self.qrels {
            if !query_ids.contains(qid.as_str()) {
                return Err(Error::Data(format!(
                    "qrels references unknown query id '{qid}'"
                )));
            }
            for did in docs.keys() {
                if !doc_ids.contains(did.as_str()) {
                    return Err(Error::Data(format!(
                        "qrels for query '{qid}' references unknown doc id '{did}'"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn unique_ids<'a>(what: &str, records: &'a [TextRecord]) -> Result<HashSet<&'a str>> {
    let mut ids = HashSet::with_capacity(records.len());
    for rec in records {
        if rec.id.is_empty() {
            return Err(Error::Data(format!("{what} record with empty id")));
        }
        if !ids.insert(rec.id.as_str()) {
            return Err(Error::Data(format!("duplicate {what} id '{}'", rec.id)));
        }
    }
    Ok(ids)
}

fn load_text_records(path: &Path) -> Result<Vec<TextRecord>> {
    let mut records = Vec::new();
    for (idx, raw) in read_lines(path)?.iter().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let rec: TextRecord = serde_json::from_str(raw)
            .map_err(|e| parse_line_err(path, idx + 1, e.to_string()))?;
        records.push(rec);
    }
    Ok(records)
}

fn save_text_records(path: &Path, records: &[TextRecord]) -> Result<()> {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec).expect("record serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// A synthetic corpus where each query/document pair shares a unique planted
/// marker token, so retrieval is solvable exactly and progress is easy to
/// measure.
#[derive(Debug, Clone)]
pub struct PlantedCorpus {
    pub train_pairs: Vec<PairRecord>,
    pub heldout: RetrievalDataset,
}

const MARKER_CHARS: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
const MARKER_LEN: usize = 6;

fn fresh_marker(rng: &mut ChaCha8Rng, used: &mut HashSet<String>) -> String {
    loop {
        let marker: String = (0..MARKER_LEN)
            .map(|_| MARKER_CHARS[rng.gen_range(0..MARKER_CHARS.len())] as char)
            .collect();
        if used.insert(marker.clone()) {
            return marker;
        }
    }
}

fn filler_word(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(3..=8);
    (0..len)
        .map(|_| (b'a' + rng.gen_range(0..26)) as char)
        .collect()
}

fn planted_text(rng: &mut ChaCha8Rng, marker: &str) -> String {
    format!("{} {} {}", filler_word(rng), marker, filler_word(rng))
}

/// Generates `n_pairs` training pairs plus a held-out retrieval split of
/// `n_pairs / 2` pairs with disjoint markers. Tasks round-robin over all
/// five task types. Fully determined by `seed`.
pub fn generate_planted(n_pairs: usize, seed: u64) -> Result<PlantedCorpus> {
    if n_pairs < 16 {
        return Err(Error::InvalidArgument(format!(
            "planted corpus needs >= 16 pairs, asked for {n_pairs}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = HashSet::new();
    let tasks = TaskType::ALL;

    let mut train_pairs = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let marker = fresh_marker(&mut rng, &mut used);
        train_pairs.push(PairRecord {
            id: format!("pair-{i:04}"),
            task: tasks[i % tasks.len()],
            query: planted_text(&mut rng, &marker),
            document: planted_text(&mut rng, &marker),
        });
    }

    let n_heldout = n_pairs / 2;
    let mut heldout = RetrievalDataset::default();
    for i in 0..n_heldout {
        let marker = fresh_marker(&mut rng, &mut used);
        let task = tasks[i % tasks.len()];
        let qid = format!("q-{i:04}");
        let did = format!("d-{i:04}");
        heldout.queries.push(TextRecord {
            id: qid.clone(),
            task,
            text: planted_text(&mut rng, &marker),
        });
        heldout.corpus.push(TextRecord {
            id: did.clone(),
            task,
            text: planted_text(&mut rng, &marker),
        });
        heldout.qrels.entry(qid).or_default().insert(did, 1);
    }
    heldout.validate()?;
    Ok(PlantedCorpus {
        train_pairs,
        heldout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_pairs(n: usize) -> Vec<PairRecord> {
        (0..n)
            .map(|i| PairRecord {
                id: format!("p{i}"),
                task: TaskType::ALL[i % 5],
                query: format!("query {i}"),
                document: format!("doc {i}"),
            })
            .collect()
    }

    #[test]
    fn pairs_round_trip_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let pairs = sample_pairs(7);
        save_pairs(&path, &pairs).unwrap();
        assert_eq!(load_pairs(&path).unwrap(), pairs);
    }

    #[test]
    fn duplicate_pair_ids_name_both_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let mut pairs = sample_pairs(4);
        pairs[3].id = "p1".into();
        save_pairs(&path, &pairs).unwrap();
        let err = load_pairs(&path).unwrap_err().to_string();
        assert!(err.contains("duplicate id 'p1' on lines 2 and 4"), "{err}");
    }

    #[test]
    fn unknown_task_label_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        fs::write(
            &path,
            "{\"id\":\"a\",\"task\":\"nl2code\",\"query\":\"q\",\"document\":\"d\"}\n\
             {\"id\":\"b\",\"task\":\"summarize\",\"query\":\"q\",\"document\":\"d\"}\n",
        )
        .unwrap();
        let err = load_pairs(&path).unwrap_err().to_string();
        assert!(err.contains(":2:"), "missing line number: {err}");
        assert!(err.contains("summarize"), "missing bad label: {err}");
    }

    #[test]
    fn batches_shuffle_and_drop_remainder() {
        let pairs = sample_pairs(10);
        let batches = make_batches(&pairs, 4, 42, 0).unwrap();
        assert_eq!(batches.len(), 2);
        assert!(batches.iter().all(|b| b.n() == 4));
        let mut seen: Vec<&str> = batches.iter().flat_map(|b| b.ids()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 8, "batches repeated a pair");
    }

    #[test]
    fn batching_is_deterministic_per_epoch_and_differs_across_epochs() {
        let pairs = sample_pairs(12);
        let a = make_batches(&pairs, 4, 7, 0).unwrap();
        let b = make_batches(&pairs, 4, 7, 0).unwrap();
        let ids = |bs: &[TrainingBatch]| -> Vec<String> {
            bs.iter()
                .flat_map(|b| b.pairs.iter().map(|p| p.id.clone()))
                .collect()
        };
        assert_eq!(ids(&a), ids(&b));
        let c = make_batches(&pairs, 4, 7, 1).unwrap();
        assert_ne!(ids(&a), ids(&c), "epoch stream did not change order");
    }

    #[test]
    fn batch_size_bounds_are_enforced() {
        let pairs = sample_pairs(4);
        assert!(make_batches(&pairs, 1, 0, 0).is_err());
        assert!(make_batches(&pairs, 5, 0, 0).is_err());
    }

    #[test]
    fn planted_corpus_markers_are_unique_and_shared_within_pairs() {
        let planted = generate_planted(32, 9).unwrap();
        assert_eq!(planted.train_pairs.len(), 32);
        assert_eq!(planted.heldout.queries.len(), 16);
        assert_eq!(planted.heldout.corpus.len(), 16);
        let marker_of = |text: &str| -> String {
            text.split_whitespace()
                .find(|w| w.len() == MARKER_LEN && w.chars().all(|c| MARKER_CHARS.contains(&(c as u8))))
                .expect("text contains a marker")
                .to_string()
        };
        let mut all_markers = HashSet::new();
        for pair in &planted.train_pairs {
            let m = marker_of(&pair.query);
            assert_eq!(m, marker_of(&pair.document), "pair {} mismatched", pair.id);
            assert!(all_markers.insert(m), "marker reused across pairs");
        }
        for (q, d) in planted.heldout.queries.iter().zip(&planted.heldout.corpus) {
            let m = marker_of(&q.text);
            assert_eq!(m, marker_of(&d.text));
            assert!(all_markers.insert(m), "held-out marker seen in training");
        }
    }

    #[test]
    fn planted_corpus_is_seed_deterministic() {
        let a = generate_planted(20, 5).unwrap();
        let b = generate_planted(20, 5).unwrap();
        assert_eq!(a.train_pairs, b.train_pairs);
        assert_eq!(a.heldout.queries, b.heldout.queries);
        let c = generate_planted(20, 6).unwrap();
        assert_ne!(a.train_pairs, c.train_pairs);
    }

    #[test]
    fn retrieval_dataset_round_trips_and_validates() {
        let planted = generate_planted(16, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        planted.heldout.save(dir.path()).unwrap();
        let loaded = RetrievalDataset::load(dir.path()).unwrap();
        assert_eq!(loaded.corpus, planted.heldout.corpus);
        assert_eq!(loaded.queries, planted.heldout.queries);
        assert_eq!(loaded.qrels, planted.heldout.qrels);
    }

    #[test]
    fn qrels_referencing_missing_docs_fail_validation() {
        let mut ds = generate_planted(16, 3).unwrap().heldout;
        ds.qrels
            .get_mut("q-0000")
            .unwrap()
            .insert("d-9999".into(), 1);
        let err = ds.validate().unwrap_err().to_string();
        assert!(err.contains("d-9999"), "{err}");
    }
}
