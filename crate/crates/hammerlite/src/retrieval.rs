//! Two-stage retrieval: dense cosine selection over a cached premise-embedding
//! index, cross-encoder re-ranking of the selected candidates, and an Okapi
//! BM25 baseline, plus recall/MRR probe metrics.
//!
//! Everything here is deterministic: scores are exact dense dot products (no
//! approximate neighbors), and every ranking breaks ties by ascending premise
//! id, so a fixed (model, corpus, query) triple always yields the same list.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Premise};
use crate::model::{embed_premise, embed_state, rerank_score, ModelParams};
use crate::nn::{Real, Tensor};
use crate::text;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot build an index over zero premises")]
    EmptyPremiseSet,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed index {path}: {message}")]
    MalformedIndex { path: String, message: String },
    #[error("index was built by model {index} but queried with model {model}")]
    FingerprintMismatch { index: String, model: String },
}

/// Which stage produced a ranking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Select,
    Rerank,
    Bm25,
}

/// A ranked list of premises with their stage scores, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub stage: Stage,
    pub ranked: Vec<(u32, f64)>,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<u32> {
        self.ranked.iter().map(|&(id, _)| id).collect()
    }
}

/// Sorts by descending score, ascending id on ties, and keeps the first `k`.
fn top_k_desc(mut pairs: Vec<(u32, f64)>, k: usize) -> Vec<(u32, f64)> {
    pairs.sort_unstable_by(|a, b| {
        b.1.partial_cmp(&a.1).expect("finite scores").then(a.0.cmp(&b.0))
    });
    pairs.truncate(k);
    pairs
}

/// Immutable cache of unit-norm premise embeddings, rows sorted by premise
/// id, pinned to the model that produced it.
#[derive(Clone, Debug)]
pub struct PremiseIndex<R> {
    ids: Vec<u32>,
    matrix: Tensor<R>,
    fingerprint: String,
}

impl<R: Real> PremiseIndex<R> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn row(&self, i: usize) -> &[R] {
        self.matrix.row(i)
    }
}

/// Embeds every premise once (in parallel, order-stable) and caches the
/// unit-norm vectors. `candidate_filter` restricts to a subset of ids.
pub fn build_index<R: Real>(
    params: &ModelParams<R>,
    premises: &[Premise],
    candidate_filter: Option<&HashSet<u32>>,
) -> Result<PremiseIndex<R>, RetrievalError> {
    let mut selected: Vec<&Premise> = premises
        .iter()
        .filter(|p| candidate_filter.map_or(true, |f| f.contains(&p.id)))
        .collect();
    selected.sort_unstable_by_key(|p| p.id);
    if selected.is_empty() {
        return Err(RetrievalError::EmptyPremiseSet);
    }

    let ctx = params.config.ctx;
    let rows: Vec<Vec<R>> = selected
        .par_iter()
        .map(|p| embed_premise(params, &text::encode_premise(&p.text(), ctx)))
        .collect();

    let dim = params.config.dim;
    let mut matrix = Tensor::zeros(selected.len(), dim);
    for (i, row) in rows.iter().enumerate() {
        matrix.row_mut(i).copy_from_slice(row);
    }
    Ok(PremiseIndex {
        ids: selected.iter().map(|p| p.id).collect(),
        matrix,
        fingerprint: params.fingerprint(),
    })
}

/// Top `K_S` premises by cosine similarity between the state embedding and
/// the cached premise rows.
pub fn select_topk<R: Real>(
    state_text: &str,
    index: &PremiseIndex<R>,
    k_s: usize,
    params: &ModelParams<R>,
) -> RetrievalResult {
    assert!(k_s >= 1, "K_S must be at least 1");
    assert!(!index.is_empty(), "select over an empty index");
    let e = embed_state(params, &text::encode_state(state_text, params.config.ctx));
    let scored: Vec<(u32, f64)> = index
        .ids
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            let row = index.matrix.row(i);
            let dot: R = row.iter().zip(&e).map(|(&a, &b)| a * b).sum();
            (id, dot.to_f64())
        })
        .collect();
    RetrievalResult { stage: Stage::Select, ranked: top_k_desc(scored, k_s) }
}

/// Anything that can score a (state, premise) text pair in (0,1). The model
/// head implements it; tests may inject oracles.
pub trait PairScorer: Sync {
    fn score(&self, state_text: &str, premise_text: &str) -> f64;
}

/// The cross-encoder rerank head as a [`PairScorer`].
pub struct ModelScorer<'a, R: Real> {
    pub params: &'a ModelParams<R>,
}

impl<R: Real> PairScorer for ModelScorer<'_, R> {
    fn score(&self, state_text: &str, premise_text: &str) -> f64 {
        let pair = text::encode_pair(state_text, premise_text, self.params.config.ctx);
        rerank_score(self.params, &pair)
    }
}

/// Scores each `(id, premise text)` candidate independently and keeps the top
/// `min(K_R, |candidates|)`; the output is always a subset of the input.
pub fn rerank_candidates<S: PairScorer>(
    state_text: &str,
    candidates: &[(u32, String)],
    k_r: usize,
    scorer: &S,
) -> RetrievalResult {
    assert!(!candidates.is_empty(), "rerank over an empty candidate set");
    let scored: Vec<(u32, f64)> = candidates
        .par_iter()
        .map(|(id, premise_text)| (*id, scorer.score(state_text, premise_text)))
        .collect();
    RetrievalResult { stage: Stage::Rerank, ranked: top_k_desc(scored, k_r) }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrieveMode {
    Full,
    SelectOnly,
}

/// The two-stage pipeline: select `K_S` by cosine, then either rerank them
/// down to `K_R` (`Full`) or truncate the selection (`SelectOnly`).
pub fn retrieve<R: Real>(
    state_text: &str,
    index: &PremiseIndex<R>,
    corpus: &Corpus,
    params: &ModelParams<R>,
    k_s: usize,
    k_r: usize,
    mode: RetrieveMode,
) -> RetrievalResult {
    retrieve_with_scorer(state_text, index, corpus, params, k_s, k_r, mode, &ModelScorer {
        params,
    })
}

/// [`retrieve`] with the rerank stage's scorer supplied by the caller, so a
/// reference scorer can be swapped in to exercise the pipeline plumbing
/// independently of rerank quality. Unused in `SelectOnly` mode.
#[allow(clippy::too_many_arguments)]
pub fn retrieve_with_scorer<R: Real, S: PairScorer>(
    state_text: &str,
    index: &PremiseIndex<R>,
    corpus: &Corpus,
    params: &ModelParams<R>,
    k_s: usize,
    k_r: usize,
    mode: RetrieveMode,
    scorer: &S,
) -> RetrievalResult {
    assert!(k_r <= k_s, "K_R must not exceed K_S");
    let mut selected = select_topk(state_text, index, k_s, params);
    match mode {
        RetrieveMode::SelectOnly => {
            selected.ranked.truncate(k_r);
            selected
        }
        RetrieveMode::Full => {
            let candidates: Vec<(u32, String)> = selected
                .ranked
                .iter()
                .map(|&(id, _)| (id, corpus.premise(id).expect("indexed premise").text()))
                .collect();
            rerank_candidates(state_text, &candidates, k_r, scorer)
        }
    }
}

/// Lowercased alphanumeric terms of a text, in order.
pub fn bm25_tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Okapi BM25 index with the conventional constants `k1 = 1.2`, `b = 0.75`.
#[derive(Clone, Debug)]
pub struct Bm25Index {
    ids: Vec<u32>,
    term_freqs: Vec<HashMap<String, usize>>,
    doc_lens: Vec<usize>,
    doc_freqs: HashMap<String, usize>,
    avgdl: f64,
    pub k1: f64,
    pub b: f64,
}

impl Bm25Index {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn idf(&self, term: &str) -> f64 {
        let n = self.ids.len() as f64;
        let df = self.doc_freqs.get(term).copied().unwrap_or(0) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }
}

/// Builds the BM25 statistics over `(id, text)` documents.
pub fn bm25_build(docs: &[(u32, String)]) -> Result<Bm25Index, RetrievalError> {
    if docs.is_empty() {
        return Err(RetrievalError::EmptyPremiseSet);
    }
    let mut docs: Vec<&(u32, String)> = docs.iter().collect();
    docs.sort_unstable_by_key(|(id, _)| *id);

    let mut term_freqs = Vec::with_capacity(docs.len());
    let mut doc_lens = Vec::with_capacity(docs.len());
    let mut doc_freqs: HashMap<String, usize> = HashMap::new();
    for (_, text) in &docs {
        let terms = bm25_tokenize(text);
        doc_lens.push(terms.len());
        let mut tf: HashMap<String, usize> = HashMap::new();
        for t in terms {
            *tf.entry(t).or_insert(0) += 1;
        }
        for t in tf.keys() {
            *doc_freqs.entry(t.clone()).or_insert(0) += 1;
        }
        term_freqs.push(tf);
    }
    let avgdl = doc_lens.iter().sum::<usize>() as f64 / doc_lens.len() as f64;
    Ok(Bm25Index {
        ids: docs.iter().map(|(id, _)| *id).collect(),
        term_freqs,
        doc_lens,
        doc_freqs,
        avgdl,
        k1: 1.2,
        b: 0.75,
    })
}

/// Okapi score of one document against the distinct query terms, summed in
/// first-occurrence query order (the order fixes the floating-point result).
fn bm25_score(index: &Bm25Index, query_terms: &[String], doc: usize) -> f64 {
    let tf_map = &index.term_freqs[doc];
    let dl = index.doc_lens[doc] as f64;
    let mut score = 0.0;
    for term in query_terms {
        let tf = tf_map.get(term).copied().unwrap_or(0) as f64;
        if tf == 0.0 {
            continue;
        }
        score += index.idf(term) * tf * (index.k1 + 1.0)
            / (tf + index.k1 * (1.0 - index.b + index.b * dl / index.avgdl));
    }
    score
}

/// Top-k BM25 ranking; an empty or out-of-vocabulary query yields all-zero
/// scores ordered by ascending id.
pub fn bm25_topk(query: &str, index: &Bm25Index, k: usize) -> RetrievalResult {
    let mut terms = bm25_tokenize(query);
    let mut seen = HashSet::new();
    terms.retain(|t| seen.insert(t.clone()));

    let scored: Vec<(u32, f64)> = (0..index.ids.len())
        .map(|doc| (index.ids[doc], bm25_score(index, &terms, doc)))
        .collect();
    RetrievalResult { stage: Stage::Bm25, ranked: top_k_desc(scored, k) }
}

/// Fraction of the ground-truth set found in the top `k`.
pub fn recall_at_k(result: &RetrievalResult, gt: &HashSet<u32>, k: usize) -> f64 {
    assert!(k >= 1, "k must be at least 1");
    assert!(!gt.is_empty(), "recall is undefined for an empty ground-truth set");
    let hits = result.ranked.iter().take(k).filter(|(id, _)| gt.contains(id)).count();
    hits as f64 / gt.len() as f64
}

/// Reciprocal rank of the first ground-truth hit; 0 when none appears.
pub fn mrr(result: &RetrievalResult, gt: &HashSet<u32>) -> f64 {
    assert!(!gt.is_empty(), "MRR is undefined for an empty ground-truth set");
    result
        .ranked
        .iter()
        .position(|(id, _)| gt.contains(id))
        .map_or(0.0, |pos| 1.0 / (pos + 1) as f64)
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    format: String,
    fingerprint: String,
    dim: usize,
    ids: Vec<u32>,
    rows: Vec<Vec<f64>>,
}

pub const INDEX_FORMAT: &str = "hammerlite-index-v1";

pub fn save_index<R: Real>(index: &PremiseIndex<R>, path: impl AsRef<Path>) -> Result<(), RetrievalError> {
    let path = path.as_ref();
    let file = IndexFile {
        format: INDEX_FORMAT.to_string(),
        fingerprint: index.fingerprint.clone(),
        dim: index.dim(),
        ids: index.ids.clone(),
        rows: (0..index.len()).map(|i| index.matrix.row(i).iter().map(|v| v.to_f64()).collect()).collect(),
    };
    let out = File::create(path)
        .map_err(|source| RetrievalError::Io { path: path.display().to_string(), source })?;
    serde_json::to_writer(BufWriter::new(out), &file).map_err(|e| RetrievalError::MalformedIndex {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Loads an index, verifying it was built by the model with the given
/// fingerprint (pass `None` to skip the check).
pub fn load_index<R: Real>(
    path: impl AsRef<Path>,
    expected_fingerprint: Option<&str>,
) -> Result<PremiseIndex<R>, RetrievalError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| RetrievalError::Io { path: display.clone(), source })?;
    let parsed: IndexFile = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| RetrievalError::MalformedIndex { path: display.clone(), message: e.to_string() })?;
    if parsed.format != INDEX_FORMAT {
        return Err(RetrievalError::MalformedIndex {
            path: display,
            message: format!("unsupported format {:?}", parsed.format),
        });
    }
    if let Some(expected) = expected_fingerprint {
        if expected != parsed.fingerprint {
            return Err(RetrievalError::FingerprintMismatch {
                index: parsed.fingerprint,
                model: expected.to_string(),
            });
        }
    }
    if parsed.ids.len() != parsed.rows.len() || parsed.ids.is_empty() {
        return Err(RetrievalError::MalformedIndex {
            path: display,
            message: "id/row count mismatch or empty index".into(),
        });
    }
    let mut matrix = Tensor::zeros(parsed.ids.len(), parsed.dim);
    for (i, row) in parsed.rows.iter().enumerate() {
        if row.len() != parsed.dim {
            return Err(RetrievalError::MalformedIndex {
                path: display,
                message: format!("row {i} has width {} instead of {}", row.len(), parsed.dim),
            });
        }
        for (j, &v) in row.iter().enumerate() {
            matrix.set(i, j, R::from_f64(v));
        }
    }
    Ok(PremiseIndex { ids: parsed.ids, matrix, fingerprint: parsed.fingerprint })
}
