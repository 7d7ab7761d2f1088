//! User interaction logs: ingestion, time-splitting, lexical retrieval for
//! positive contexts, and cross-user sampling for negative contexts.
//!
//! The retriever is plain BM25 (k1 = 1.2, b = 0.75) over lowercase
//! whitespace tokens; at desk scale a linear scan over one user's train
//! records is plenty.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FintsError, Result};

const BM25_K1: f64 = 1.2;
const BM25_B: f64 = 0.75;

/// Identifies a record across derived corpora (splits, fractions). Assigned
/// once at construction, in (user, ts) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RecordId(pub u64);

/// One question-answer event in a user's history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    #[serde(skip, default = "unassigned_id")]
    pub id: RecordId,
    pub user_id: String,
    pub ts: i64,
    pub query: String,
    pub answer: String,
}

fn unassigned_id() -> RecordId {
    RecordId(u64::MAX)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

/// A rendered context: the fixed-template text plus the records it came
/// from. An empty block (no source records) flags a user without train data.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextBlock {
    pub text: String,
    pub source_record_ids: Vec<RecordId>,
    pub polarity: Polarity,
}

impl ContextBlock {
    pub fn is_empty(&self) -> bool {
        self.source_record_ids.is_empty()
    }
}

/// Renders records with the fixed template so prompts are byte-reproducible:
/// `Example i:\nQ: {query}\nA: {answer}\n`, concatenated in the given order.
pub fn render_examples(records: &[&InteractionRecord]) -> String {
    let mut out = String::new();
    for (i, r) in records.iter().enumerate() {
        let _ = write!(out, "Example {}:\nQ: {}\nA: {}\n", i + 1, r.query, r.answer);
    }
    out
}

#[derive(Debug, Clone)]
struct UserLog {
    records: Vec<InteractionRecord>,
    /// Records with `ts <= split_after` are train; the rest are test.
    /// `None` means everything is train.
    split_after: Option<i64>,
}

/// Per-user, time-ordered interaction logs with a train/test boundary.
/// Immutable once built; all read paths are concurrent-safe.
#[derive(Debug, Clone)]
pub struct UserCorpus {
    users: BTreeMap<String, UserLog>,
}

impl UserCorpus {
    /// Builds a corpus from records: sorts each user's log by `ts` (stable)
    /// and rejects duplicate `(user_id, ts, query)` triples. Record ids are
    /// assigned here, in (user, ts) order.
    pub fn from_records(records: Vec<InteractionRecord>) -> Result<Self> {
        // Line numbers only exist for file input; synthetic callers get 0.
        Self::build(records.into_iter().map(|r| (0usize, r)).collect())
    }

    fn build(records: Vec<(usize, InteractionRecord)>) -> Result<Self> {
        let mut users: BTreeMap<String, Vec<(usize, InteractionRecord)>> = BTreeMap::new();
        for (line, r) in records {
            if r.user_id.is_empty() {
                return Err(FintsError::CorpusParse {
                    line,
                    msg: "user_id must be non-empty".into(),
                });
            }
            if r.query.is_empty() {
                return Err(FintsError::CorpusParse {
                    line,
                    msg: "query must be non-empty".into(),
                });
            }
            users.entry(r.user_id.clone()).or_default().push((line, r));
        }
        let mut next_id = 0u64;
        let mut out = BTreeMap::new();
        for (user, mut log) in users {
            log.sort_by_key(|(_, r)| r.ts);
            let mut seen: HashSet<(i64, &str)> = HashSet::new();
            for (line, r) in &log {
                if !seen.insert((r.ts, r.query.as_str())) {
                    return Err(FintsError::DuplicateRecord {
                        line: *line,
                        user: user.clone(),
                        ts: r.ts,
                    });
                }
            }
            let records = log
                .into_iter()
                .map(|(_, mut r)| {
                    r.id = RecordId(next_id);
                    next_id += 1;
                    r
                })
                .collect();
            out.insert(
                user,
                UserLog {
                    records,
                    split_after: None,
                },
            );
        }
        Ok(Self { users: out })
    }

    /// Parses a JSON-lines log file: one object per line with keys
    /// `user_id`, `ts`, `query`, `answer`. Blank lines are skipped;
    /// malformed lines are reported with their line number.
    pub fn load_logs(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let mut records = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line_no = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: InteractionRecord =
                serde_json::from_str(&line).map_err(|e| FintsError::CorpusParse {
                    line: line_no,
                    msg: e.to_string(),
                })?;
            records.push((line_no, record));
        }
        Self::build(records)
    }

    /// Sets each user's train/test boundary so that roughly the earliest
    /// `fraction` of their records are train. Records sharing the boundary
    /// timestamp stay on the train side.
    pub fn set_split_fraction(&mut self, fraction: f64) {
        for log in self.users.values_mut() {
            let n = log.records.len();
            if n == 0 {
                log.split_after = None;
                continue;
            }
            let n_train = ((n as f64 * fraction).round() as usize).clamp(1, n);
            log.split_after = Some(log.records[n_train - 1].ts);
        }
    }

    /// A corpus whose per-user train set keeps only the earliest share of
    /// train records: `max(1, round(fraction * n_train))` of them. Test
    /// records are untouched; record ids are preserved.
    pub fn with_train_fraction(&self, fraction: f64) -> Self {
        let mut users = BTreeMap::new();
        for (user, log) in &self.users {
            let train_n = log
                .records
                .iter()
                .filter(|r| is_train(log.split_after, r.ts))
                .count();
            let keep = ((train_n as f64 * fraction).round() as usize).clamp(1, train_n.max(1));
            let mut kept = Vec::new();
            let mut seen_train = 0usize;
            for r in &log.records {
                if is_train(log.split_after, r.ts) {
                    seen_train += 1;
                    if seen_train <= keep {
                        kept.push(r.clone());
                    }
                } else {
                    kept.push(r.clone());
                }
            }
            users.insert(
                user.clone(),
                UserLog {
                    records: kept,
                    split_after: log.split_after,
                },
            );
        }
        Self { users }
    }

    pub fn user_ids(&self) -> impl Iterator<Item = &str> {
        self.users.keys().map(String::as_str)
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn contains_user(&self, user_id: &str) -> bool {
        self.users.contains_key(user_id)
    }

    pub fn records(&self, user_id: &str) -> Result<&[InteractionRecord]> {
        self.users
            .get(user_id)
            .map(|l| l.records.as_slice())
            .ok_or_else(|| FintsError::UnknownUser(user_id.to_string()))
    }

    pub fn train_records(&self, user_id: &str) -> Result<Vec<&InteractionRecord>> {
        let log = self
            .users
            .get(user_id)
            .ok_or_else(|| FintsError::UnknownUser(user_id.to_string()))?;
        Ok(log
            .records
            .iter()
            .filter(|r| is_train(log.split_after, r.ts))
            .collect())
    }

    pub fn test_records(&self, user_id: &str) -> Result<Vec<&InteractionRecord>> {
        let log = self
            .users
            .get(user_id)
            .ok_or_else(|| FintsError::UnknownUser(user_id.to_string()))?;
        Ok(log
            .records
            .iter()
            .filter(|r| !is_train(log.split_after, r.ts))
            .collect())
    }

    /// All other users' train records, in deterministic (user, ts) order.
    pub fn complement_train_records(&self, user_id: &str) -> Vec<&InteractionRecord> {
        self.users
            .iter()
            .filter(|(u, _)| u.as_str() != user_id)
            .flat_map(|(_, log)| {
                log.records
                    .iter()
                    .filter(move |r| is_train(log.split_after, r.ts))
            })
            .collect()
    }
}

fn is_train(split_after: Option<i64>, ts: i64) -> bool {
    match split_after {
        None => true,
        Some(boundary) => ts <= boundary,
    }
}

fn bm25_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// BM25 over one user's train records. Strictly positive iff at least one
/// query token appears in the document (query + answer text).
fn bm25_scores(query: &str, docs: &[&InteractionRecord]) -> Vec<f64> {
    let query_tokens = bm25_tokens(query);
    let doc_tokens: Vec<Vec<String>> = docs
        .iter()
        .map(|r| bm25_tokens(&format!("{} {}", r.query, r.answer)))
        .collect();
    let n = docs.len() as f64;
    let avgdl = doc_tokens.iter().map(Vec::len).sum::<usize>() as f64 / n.max(1.0);

    // Document frequency per query term.
    let mut df: HashMap<&str, f64> = HashMap::new();
    for token in &query_tokens {
        if df.contains_key(token.as_str()) {
            continue;
        }
        let count = doc_tokens
            .iter()
            .filter(|toks| toks.iter().any(|t| t == token))
            .count();
        df.insert(token, count as f64);
    }

    doc_tokens
        .iter()
        .map(|toks| {
            let dl = toks.len() as f64;
            let mut score = 0.0;
            for token in &query_tokens {
                let tf = toks.iter().filter(|t| *t == token).count() as f64;
                if tf == 0.0 {
                    continue;
                }
                let df = df[token.as_str()];
                let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
                let tf_norm =
                    (tf * (BM25_K1 + 1.0)) / (tf + BM25_K1 * (1.0 - BM25_B + BM25_B * dl / avgdl));
                score += idf * tf_norm;
            }
            score
        })
        .collect()
}

/// Retrieves the top-`m` train records of `user_id` for `query` and renders
/// them as a positive context. Ties break toward earlier `ts`. A user with
/// zero train records yields an empty, flagged block.
pub fn retrieve_positive(
    query: &str,
    user_id: &str,
    corpus: &UserCorpus,
    m: usize,
) -> Result<ContextBlock> {
    retrieve_positive_excluding(query, user_id, corpus, m, None)
}

/// Same as [`retrieve_positive`] but with one record barred from the
/// candidate set; pair construction excludes the target record itself.
pub fn retrieve_positive_excluding(
    query: &str,
    user_id: &str,
    corpus: &UserCorpus,
    m: usize,
    exclude: Option<RecordId>,
) -> Result<ContextBlock> {
    let candidates: Vec<&InteractionRecord> = corpus
        .train_records(user_id)?
        .into_iter()
        .filter(|r| Some(r.id) != exclude)
        .collect();
    if candidates.is_empty() {
        return Ok(ContextBlock {
            text: String::new(),
            source_record_ids: Vec::new(),
            polarity: Polarity::Positive,
        });
    }
    let scores = bm25_scores(query, &candidates);
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(candidates[a].ts.cmp(&candidates[b].ts))
            .then(candidates[a].id.cmp(&candidates[b].id))
    });
    order.truncate(m);
    let chosen: Vec<&InteractionRecord> = order.iter().map(|&i| candidates[i]).collect();
    Ok(ContextBlock {
        text: render_examples(&chosen),
        source_record_ids: chosen.iter().map(|r| r.id).collect(),
        polarity: Polarity::Positive,
    })
}

/// Uniform sample without replacement of `m` records from the union of all
/// other users' train records, rendered like a positive context.
/// Deterministic given `(corpus, user_id, m, seed)`; `m` larger than the
/// pool takes the whole pool.
pub fn sample_negative(
    user_id: &str,
    corpus: &UserCorpus,
    m: usize,
    seed: u64,
) -> Result<ContextBlock> {
    if !corpus.contains_user(user_id) {
        return Err(FintsError::UnknownUser(user_id.to_string()));
    }
    let pool = corpus.complement_train_records(user_id);
    if pool.is_empty() {
        return Err(FintsError::NoComplementPool);
    }
    let take = m.min(pool.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Partial Fisher-Yates over pool indices.
    let mut indices: Vec<usize> = (0..pool.len()).collect();
    for i in 0..take {
        let j = rng.gen_range(i..indices.len());
        indices.swap(i, j);
    }
    let chosen: Vec<&InteractionRecord> = indices[..take].iter().map(|&i| pool[i]).collect();
    Ok(ContextBlock {
        text: render_examples(&chosen),
        source_record_ids: chosen.iter().map(|r| r.id).collect(),
        polarity: Polarity::Negative,
    })
}
