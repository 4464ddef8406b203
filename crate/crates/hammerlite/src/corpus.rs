//! Data model and JSONL ingestion for premises, proof states, and
//! (state, premise) datapoints.
//!
//! Two files define a corpus: `premises.jsonl` with one
//! `{"id", "name", "statement"}` record per line, and `states.jsonl` with
//! `{"id", "text", "premises": [names], "source", "split"?, "candidates"?}`.
//! Unknown keys are ignored, so the schema can grow without breaking old
//! files. Loading enforces referential integrity: every premise name a state
//! mentions must resolve.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which partition a datapoint came from: human proof libraries or
/// machine-generated proofs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Source {
    HPL,
    SH,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::HPL => write!(f, "HPL"),
            Source::SH => write!(f, "SH"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Premise {
    pub id: u32,
    pub name: String,
    pub statement: String,
}

impl Premise {
    /// The textual form fed to encoders: name and statement together, since
    /// both carry retrieval signal.
    pub fn text(&self) -> String {
        format!("{} : {}", self.name, self.statement)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProofState {
    pub id: u32,
    pub text: String,
    /// Names of the premises used by the recorded proof step.
    #[serde(rename = "premises")]
    pub gt_premises: Vec<String>,
    pub source: Source,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub split: Option<Split>,
    /// Optional per-state candidate pool (premise names); absent means the
    /// whole premise table is available.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub candidates: Option<Vec<String>>,
}

/// One (proof state, premise) training pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Datapoint {
    pub state_id: u32,
    pub premise_id: u32,
    pub source: Source,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed { path: String, line: usize, message: String },
    #[error("{path}:{line}: duplicate premise id {id}")]
    DuplicatePremiseId { path: String, line: usize, id: u32 },
    #[error("{path}:{line}: duplicate premise name {name:?}")]
    DuplicatePremiseName { path: String, line: usize, name: String },
    #[error("{path}:{line}: duplicate state id {id}")]
    DuplicateStateId { path: String, line: usize, id: u32 },
    #[error("state {state_id}: unresolved premise {name:?}")]
    UnresolvedPremise { state_id: u32, name: String },
    #[error("{path}:{line}: {field} must be non-empty")]
    EmptyField { path: String, line: usize, field: &'static str },
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    InvalidFractions((f64, f64, f64)),
    #[error("sample fraction must be in (0, 1], got {0}")]
    InvalidSampleFraction(f64),
}

/// Immutable-after-load collection of premises, states, and extracted
/// datapoints, with id lookup tables.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub premises: Vec<Premise>,
    pub states: Vec<ProofState>,
    pub datapoints: Vec<Datapoint>,
    premise_by_name: HashMap<String, u32>,
    premise_index: HashMap<u32, usize>,
    state_index: HashMap<u32, usize>,
}

impl Corpus {
    /// Builds a corpus from parts, checking the same invariants as
    /// [`load_corpus`]. Datapoints start empty; call [`extract_pairs`].
    pub fn new(premises: Vec<Premise>, states: Vec<ProofState>) -> Result<Self, CorpusError> {
        let mut corpus = Corpus {
            premises,
            states,
            datapoints: Vec::new(),
            premise_by_name: HashMap::new(),
            premise_index: HashMap::new(),
            state_index: HashMap::new(),
        };
        corpus.rebuild_indexes("<memory>")?;
        Ok(corpus)
    }

    fn rebuild_indexes(&mut self, origin: &str) -> Result<(), CorpusError> {
        self.premise_by_name.clear();
        self.premise_index.clear();
        self.state_index.clear();
        for (i, p) in self.premises.iter().enumerate() {
            if p.name.is_empty() {
                return Err(CorpusError::EmptyField {
                    path: origin.into(),
                    line: i + 1,
                    field: "name",
                });
            }
            if p.statement.is_empty() {
                return Err(CorpusError::EmptyField {
                    path: origin.into(),
                    line: i + 1,
                    field: "statement",
                });
            }
            if self.premise_index.insert(p.id, i).is_some() {
                return Err(CorpusError::DuplicatePremiseId {
                    path: origin.into(),
                    line: i + 1,
                    id: p.id,
                });
            }
            if self.premise_by_name.insert(p.name.clone(), p.id).is_some() {
                return Err(CorpusError::DuplicatePremiseName {
                    path: origin.into(),
                    line: i + 1,
                    name: p.name.clone(),
                });
            }
        }
        for (i, s) in self.states.iter().enumerate() {
            if s.text.is_empty() {
                return Err(CorpusError::EmptyField {
                    path: origin.into(),
                    line: i + 1,
                    field: "text",
                });
            }
            if self.state_index.insert(s.id, i).is_some() {
                return Err(CorpusError::DuplicateStateId {
                    path: origin.into(),
                    line: i + 1,
                    id: s.id,
                });
            }
            for name in s.gt_premises.iter().chain(s.candidates.iter().flatten()) {
                if !self.premise_by_name.contains_key(name) {
                    return Err(CorpusError::UnresolvedPremise {
                        state_id: s.id,
                        name: name.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn premise(&self, id: u32) -> Option<&Premise> {
        self.premise_index.get(&id).map(|&i| &self.premises[i])
    }

    pub fn state(&self, id: u32) -> Option<&ProofState> {
        self.state_index.get(&id).map(|&i| &self.states[i])
    }

    pub fn premise_id(&self, name: &str) -> Option<u32> {
        self.premise_by_name.get(name).copied()
    }

    /// Ground-truth premise ids of a state, in recorded order.
    pub fn gt_ids(&self, state: &ProofState) -> Vec<u32> {
        state.gt_premises.iter().map(|n| self.premise_by_name[n]).collect()
    }

    /// Candidate premise ids for a state: its declared pool if present,
    /// otherwise every premise in the corpus.
    pub fn candidate_ids(&self, state: &ProofState) -> Vec<u32> {
        match &state.candidates {
            Some(names) => names.iter().map(|n| self.premise_by_name[n]).collect(),
            None => self.premises.iter().map(|p| p.id).collect(),
        }
    }
}

/// Loads and validates a corpus from the two JSONL files. Datapoints are not
/// extracted here; see [`extract_pairs`].
pub fn load_corpus(
    premises_path: impl AsRef<Path>,
    states_path: impl AsRef<Path>,
) -> Result<Corpus, CorpusError> {
    let premises = read_jsonl::<Premise>(premises_path.as_ref())?;
    let states = read_jsonl::<ProofState>(states_path.as_ref())?;
    let mut corpus = Corpus {
        premises,
        states,
        datapoints: Vec::new(),
        premise_by_name: HashMap::new(),
        premise_index: HashMap::new(),
        state_index: HashMap::new(),
    };
    corpus.rebuild_indexes(&premises_path.as_ref().display().to_string())?;
    Ok(corpus)
}

/// Writes a corpus back to the two-file JSONL schema. `load_corpus` of the
/// result reproduces the input exactly (datapoints excepted; re-extract).
pub fn save_corpus(
    corpus: &Corpus,
    premises_path: impl AsRef<Path>,
    states_path: impl AsRef<Path>,
) -> Result<(), CorpusError> {
    write_jsonl(premises_path.as_ref(), &corpus.premises)?;
    write_jsonl(states_path.as_ref(), &corpus.states)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| CorpusError::Io { path: display.clone(), source })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io { path: display.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            path: display.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CorpusError> {
    let display = path.display().to_string();
    let file =
        File::create(path).map_err(|source| CorpusError::Io { path: display.clone(), source })?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("corpus records serialize infallibly");
        writeln!(w, "{line}").map_err(|source| CorpusError::Io { path: display.clone(), source })?;
    }
    w.flush().map_err(|source| CorpusError::Io { path: display, source })
}

/// Expands each state into one datapoint per ground-truth premise,
/// deduplicated per (state, premise, source), preserving first-seen order.
pub fn extract_pairs(corpus: &Corpus) -> Vec<Datapoint> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for state in &corpus.states {
        for name in &state.gt_premises {
            let dp = Datapoint {
                state_id: state.id,
                premise_id: corpus.premise_by_name[name],
                source: state.source,
            };
            if seen.insert(dp) {
                out.push(dp);
            }
        }
    }
    out
}

/// SplitMix64 finalizer; a pure, well-mixed integer hash.
pub fn splitmix64(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Unit-interval hash of (state id, seed): the pure function behind split
/// assignment.
fn split_point(state_id: u32, seed: u64) -> f64 {
    let h = splitmix64(seed ^ splitmix64(u64::from(state_id)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Assigns every state a train/valid/test label by hashing its id with the
/// seed; deterministic and independent of state order.
pub fn split_corpus(
    mut corpus: Corpus,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<Corpus, CorpusError> {
    let (tr, va, te) = fractions;
    if tr < 0.0 || va < 0.0 || te < 0.0 || ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(CorpusError::InvalidFractions(fractions));
    }
    for state in &mut corpus.states {
        let u = split_point(state.id, seed);
        state.split = Some(if u < tr {
            Split::Train
        } else if u < tr + va {
            Split::Valid
        } else {
            Split::Test
        });
    }
    Ok(corpus)
}

/// Keeps a uniform random subset of the training datapoints, of size
/// `round(fraction * count)`. States and premises are left untouched: the
/// retrieval pool and evaluation queries stay fixed while the supervision
/// shrinks. Datapoints of non-train states are always kept.
pub fn sample_fraction(
    mut corpus: Corpus,
    fraction: f64,
    seed: u64,
) -> Result<Corpus, CorpusError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CorpusError::InvalidSampleFraction(fraction));
    }
    let is_train = |dp: &Datapoint| {
        corpus
            .state(dp.state_id)
            .map_or(true, |s| s.split.is_none() || s.split == Some(Split::Train))
    };
    let eligible: Vec<usize> =
        (0..corpus.datapoints.len()).filter(|&i| is_train(&corpus.datapoints[i])).collect();
    let keep = (fraction * eligible.len() as f64).round() as usize;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let chosen = rand::seq::index::sample(&mut rng, eligible.len(), keep);
    let mut kept: BTreeSet<usize> = chosen.iter().map(|i| eligible[i]).collect();
    for i in 0..corpus.datapoints.len() {
        if !is_train(&corpus.datapoints[i]) {
            kept.insert(i);
        }
    }
    corpus.datapoints =
        kept.into_iter().map(|i| corpus.datapoints[i]).collect();
    Ok(corpus)
}

/// Counts for one partition of the datapoint table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PartitionStats {
    pub datapoints: usize,
    pub unique_states: usize,
    pub unique_premises: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusStats {
    pub hpl: PartitionStats,
    pub sh: PartitionStats,
    pub total: PartitionStats,
    pub premise_table: usize,
    pub state_table: usize,
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>12} {:>14} {:>16}", "partition", "datapoints", "unique states", "unique premises")?;
        for (name, s) in [("HPL", &self.hpl), ("SH", &self.sh), ("total", &self.total)] {
            writeln!(
                f,
                "{:<10} {:>12} {:>14} {:>16}",
                name, s.datapoints, s.unique_states, s.unique_premises
            )?;
        }
        write!(f, "premise table: {}, state table: {}", self.premise_table, self.state_table)
    }
}

/// Exact datapoint/state/premise counts per source and overall.
pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let part = |source: Option<Source>| {
        let mut states = HashSet::new();
        let mut premises = HashSet::new();
        let mut n = 0;
        for dp in &corpus.datapoints {
            if source.is_none() || source == Some(dp.source) {
                states.insert(dp.state_id);
                premises.insert(dp.premise_id);
                n += 1;
            }
        }
        PartitionStats { datapoints: n, unique_states: states.len(), unique_premises: premises.len() }
    };
    CorpusStats {
        hpl: part(Some(Source::HPL)),
        sh: part(Some(Source::SH)),
        total: part(None),
        premise_table: corpus.premises.len(),
        state_table: corpus.states.len(),
    }
}
