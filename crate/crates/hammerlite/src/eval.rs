//! Proof-step evaluation: enumerate tactic × top-k premise steps, try them
//! against a pluggable prover oracle, and report proof rates, budgets,
//! accumulated curves, and ensemble unions.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::model::ModelParams;
use crate::nn::Real;
use crate::retrieval::{
    bm25_topk, retrieve, Bm25Index, PremiseIndex, RetrievalResult, RetrieveMode,
};
use crate::text;

/// The tactic names the published evaluation sweeps over.
pub const DEFAULT_TACTICS: [&str; 10] =
    ["smt", "metis", "auto", "simp", "blast", "meson", "force", "eval", "presburger", "linarith"];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid eval config: {0}")]
    InvalidConfig(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed oracle {path} line {line}: {message}")]
    MalformedOracle { path: String, line: usize, message: String },
    #[error("duplicate theorem id {0} in oracle")]
    DuplicateTheorem(u32),
    #[error("theorem {0} is unknown to the oracle")]
    UnknownTheorem(u32),
    #[error("theorem {0} has no state in the corpus")]
    UnknownState(u32),
    #[error("oracle for theorem {theorem} references unknown premise {name:?}")]
    UnknownPremise { theorem: u32, name: String },
    #[error("ensemble reports cover different theorem sets")]
    MismatchedTheoremSets,
}

/// What to evaluate: the tactic sweep, the k sweep, the per-step timeout
/// (bookkeeping only under the mock oracle), and the retrieval settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub tactics: Vec<String>,
    pub k_list: Vec<usize>,
    /// Per-step timeout in seconds; enters the budget formula only.
    pub timeout: f64,
    pub k_select: usize,
    pub k_rerank: usize,
    pub mode: RetrieveMode,
    /// Retrieve once per tactic with the tactic name prompted into the state.
    pub tactic_prompt: bool,
}

impl EvalConfig {
    pub fn desk() -> Self {
        EvalConfig {
            tactics: vec!["metis".into(), "auto".into()],
            k_list: vec![1, 2, 4, 8, 16, 32],
            timeout: 2.0,
            k_select: 64,
            k_rerank: 64,
            mode: RetrieveMode::Full,
            tactic_prompt: false,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.tactics.is_empty() {
            return Err(EvalError::InvalidConfig("tactic list is empty".into()));
        }
        if self.tactics.iter().any(String::is_empty) {
            return Err(EvalError::InvalidConfig("tactic names must be non-empty".into()));
        }
        if self.k_list.is_empty() {
            return Err(EvalError::InvalidConfig("k list is empty".into()));
        }
        if self.k_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EvalError::InvalidConfig("k list must be strictly increasing".into()));
        }
        if self.timeout <= 0.0 {
            return Err(EvalError::InvalidConfig("timeout must be positive".into()));
        }
        if self.k_select == 0 || self.k_rerank == 0 {
            return Err(EvalError::InvalidConfig("K_S and K_R must be positive".into()));
        }
        if self.k_rerank > self.k_select {
            return Err(EvalError::InvalidConfig("K_R must not exceed K_S".into()));
        }
        Ok(())
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// The computational budget C = |tactics| × |k values| × timeout.
pub fn compute_budget(config: &EvalConfig) -> f64 {
    config.tactics.len() as f64 * config.k_list.len() as f64 * config.timeout
}

/// One attempted proof step: a tactic applied to an ordered premise list.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProofStep {
    pub tactic: String,
    pub premises: Vec<String>,
}

/// Steps with the k that produced them, in try order: increasing k, then
/// tactic order. k is clipped to the retrieved length and duplicate steps
/// keep their first (smallest-k) occurrence.
fn enumerate_steps(names: &[String], tactics: &[String], k_list: &[usize]) -> Vec<(usize, ProofStep)> {
    let mut seen = HashSet::new();
    let mut steps = Vec::new();
    for &k in k_list {
        let prefix = &names[..k.min(names.len())];
        for tactic in tactics {
            let step = ProofStep { tactic: tactic.clone(), premises: prefix.to_vec() };
            if seen.insert(step.clone()) {
                steps.push((k, step));
            }
        }
    }
    steps
}

/// Tactic × top-k enumeration over one retrieval list of premise names.
pub fn generate_steps(names: &[String], config: &EvalConfig) -> Vec<ProofStep> {
    enumerate_steps(names, &config.tactics, &config.k_list).into_iter().map(|(_, s)| s).collect()
}

/// One theorem's ground truth for the mock prover: which tactics can close
/// it, and which premise sets suffice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleEntry {
    pub theorem_id: u32,
    pub tactics: Vec<String>,
    pub sufficient_sets: Vec<Vec<String>>,
}

/// A deterministic stand-in for prover execution: a step succeeds iff its
/// tactic is admissible and its premises cover some sufficient set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProverOracle {
    entries: BTreeMap<u32, OracleEntry>,
}

impl ProverOracle {
    pub fn new(entries: Vec<OracleEntry>) -> Result<Self, EvalError> {
        let mut map = BTreeMap::new();
        for entry in entries {
            let id = entry.theorem_id;
            if map.insert(id, entry).is_some() {
                return Err(EvalError::DuplicateTheorem(id));
            }
        }
        Ok(ProverOracle { entries: map })
    }

    pub fn theorem(&self, id: u32) -> Option<&OracleEntry> {
        self.entries.get(&id)
    }

    pub fn ids(&self) -> Vec<u32> {
        self.entries.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &OracleEntry> {
        self.entries.values()
    }
}

pub fn load_oracle(path: impl AsRef<Path>) -> Result<ProverOracle, EvalError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| EvalError::Io { path: display.clone(), source })?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| EvalError::Io { path: display.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: OracleEntry = serde_json::from_str(&line).map_err(|e| {
            EvalError::MalformedOracle { path: display.clone(), line: i + 1, message: e.to_string() }
        })?;
        entries.push(entry);
    }
    ProverOracle::new(entries)
}

pub fn save_oracle(oracle: &ProverOracle, path: impl AsRef<Path>) -> Result<(), EvalError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = File::create(path).map_err(|source| EvalError::Io { path: display.clone(), source })?;
    let mut out = BufWriter::new(file);
    for entry in oracle.entries.values() {
        serde_json::to_writer(&mut out, entry)
            .map_err(|e| EvalError::MalformedOracle { path: display.clone(), line: 0, message: e.to_string() })?;
        out.write_all(b"\n").map_err(|source| EvalError::Io { path: display.clone(), source })?;
    }
    out.flush().map_err(|source| EvalError::Io { path: display, source })
}

/// Checks that every premise named by the oracle exists in the corpus.
pub fn validate_oracle(oracle: &ProverOracle, corpus: &Corpus) -> Result<(), EvalError> {
    for entry in oracle.entries.values() {
        for set in &entry.sufficient_sets {
            for name in set {
                if corpus.premise_id(name).is_none() {
                    return Err(EvalError::UnknownPremise {
                        theorem: entry.theorem_id,
                        name: name.clone(),
                    });
                }
            }
        }
    }
    Ok(())
}

/// Success iff the step's tactic is admissible for the theorem and some
/// sufficient set is contained in the step's premises.
pub fn oracle_try_step(
    oracle: &ProverOracle,
    theorem_id: u32,
    step: &ProofStep,
) -> Result<bool, EvalError> {
    let entry = oracle.theorem(theorem_id).ok_or(EvalError::UnknownTheorem(theorem_id))?;
    if !entry.tactics.iter().any(|t| t == &step.tactic) {
        return Ok(false);
    }
    let have: HashSet<&str> = step.premises.iter().map(String::as_str).collect();
    Ok(entry.sufficient_sets.iter().any(|set| set.iter().all(|p| have.contains(p.as_str()))))
}

/// Anything that can produce a ranked premise list for a state text.
pub trait Retriever: Sync {
    fn retrieve(&self, state_text: &str) -> RetrievalResult;
}

impl<F: Fn(&str) -> RetrievalResult + Sync> Retriever for F {
    fn retrieve(&self, state_text: &str) -> RetrievalResult {
        self(state_text)
    }
}

/// The trained two-stage pipeline as a [`Retriever`].
pub struct ModelRetriever<'a, R: Real> {
    pub params: &'a ModelParams<R>,
    pub index: &'a PremiseIndex<R>,
    pub corpus: &'a Corpus,
    pub k_select: usize,
    pub k_rerank: usize,
    pub mode: RetrieveMode,
}

impl<R: Real> Retriever for ModelRetriever<'_, R> {
    fn retrieve(&self, state_text: &str) -> RetrievalResult {
        retrieve(
            state_text,
            self.index,
            self.corpus,
            self.params,
            self.k_select,
            self.k_rerank,
            self.mode,
        )
    }
}

/// The BM25 baseline as a [`Retriever`].
pub struct Bm25Retriever<'a> {
    pub index: &'a Bm25Index,
    pub k: usize,
}

impl Retriever for Bm25Retriever<'_> {
    fn retrieve(&self, state_text: &str) -> RetrievalResult {
        bm25_topk(state_text, self.index, self.k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremResult {
    pub theorem_id: u32,
    pub solved: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub first_success: Option<ProofStep>,
    /// k of the first successful step; None when unsolved.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub first_success_k: Option<usize>,
    pub steps_tried: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub theorems: Vec<TheoremResult>,
    /// Fraction of theorems solved, in [0, 1].
    pub proof_rate: f64,
    pub budget: f64,
    pub curve: Vec<CurvePoint>,
}

impl EvalReport {
    pub fn solved_ids(&self) -> BTreeSet<u32> {
        self.theorems.iter().filter(|t| t.solved).map(|t| t.theorem_id).collect()
    }
}

/// Evaluates every theorem: retrieve, enumerate steps (increasing k, then
/// tactic order), and try them against the oracle until the first success.
/// Theorems run in parallel; results assemble in input order.
pub fn evaluate_suite<Rt: Retriever>(
    corpus: &Corpus,
    theorem_ids: &[u32],
    retriever: &Rt,
    oracle: &ProverOracle,
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    config.validate()?;
    for &id in theorem_ids {
        if corpus.state(id).is_none() {
            return Err(EvalError::UnknownState(id));
        }
        if oracle.theorem(id).is_none() {
            return Err(EvalError::UnknownTheorem(id));
        }
    }

    let names_of = |result: &RetrievalResult| -> Vec<String> {
        result
            .ranked
            .iter()
            .map(|&(id, _)| corpus.premise(id).expect("retrieved premise exists").name.clone())
            .collect()
    };

    let results: Vec<Result<TheoremResult, EvalError>> = theorem_ids
        .par_iter()
        .map(|&id| {
            let state = corpus.state(id).expect("checked above");
            let steps: Vec<(usize, ProofStep)> = if config.tactic_prompt {
                // One retrieval per tactic, then the usual (k, tactic) order.
                let per_tactic: Vec<Vec<String>> = config
                    .tactics
                    .iter()
                    .map(|t| names_of(&retriever.retrieve(&text::tactic_prompt(&state.text, t))))
                    .collect();
                let mut seen = HashSet::new();
                let mut steps = Vec::new();
                for &k in &config.k_list {
                    for (tactic, names) in config.tactics.iter().zip(&per_tactic) {
                        let prefix = &names[..k.min(names.len())];
                        let step =
                            ProofStep { tactic: tactic.clone(), premises: prefix.to_vec() };
                        if seen.insert(step.clone()) {
                            steps.push((k, step));
                        }
                    }
                }
                steps
            } else {
                let names = names_of(&retriever.retrieve(&state.text));
                enumerate_steps(&names, &config.tactics, &config.k_list)
            };

            let mut result = TheoremResult {
                theorem_id: id,
                solved: false,
                first_success: None,
                first_success_k: None,
                steps_tried: 0,
            };
            for (k, step) in steps {
                result.steps_tried += 1;
                if oracle_try_step(oracle, id, &step)? {
                    result.solved = true;
                    result.first_success = Some(step);
                    result.first_success_k = Some(k);
                    break;
                }
            }
            Ok(result)
        })
        .collect();

    let theorems: Vec<TheoremResult> = results.into_iter().collect::<Result<_, _>>()?;
    let solved = theorems.iter().filter(|t| t.solved).count();
    let proof_rate = if theorems.is_empty() { 0.0 } else { solved as f64 / theorems.len() as f64 };
    let mut report = EvalReport {
        config: config.clone(),
        theorems,
        proof_rate,
        budget: compute_budget(config),
        curve: Vec::new(),
    };
    report.curve = accumulated_proof_rate(&report);
    Ok(report)
}

/// Fraction of theorems solved using some k' ≤ k, for each k in the sweep.
/// Non-decreasing, and its last point equals the overall proof rate.
pub fn accumulated_proof_rate(report: &EvalReport) -> Vec<CurvePoint> {
    let total = report.theorems.len().max(1);
    report
        .config
        .k_list
        .iter()
        .map(|&k| {
            let solved = report
                .theorems
                .iter()
                .filter(|t| t.first_success_k.is_some_and(|fk| fk <= k))
                .count();
            CurvePoint { k, rate: solved as f64 / total as f64 }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub total: usize,
    pub solved: BTreeSet<u32>,
    pub proof_rate: f64,
}

/// Union of solved theorems over reports of the same theorem set.
pub fn ensemble_union(reports: &[&EvalReport]) -> Result<EnsembleReport, EvalError> {
    assert!(!reports.is_empty(), "ensemble of zero reports");
    let id_set = |r: &EvalReport| -> BTreeSet<u32> {
        r.theorems.iter().map(|t| t.theorem_id).collect()
    };
    let theorems = id_set(reports[0]);
    if reports.iter().any(|r| id_set(r) != theorems) {
        return Err(EvalError::MismatchedTheoremSets);
    }
    let mut solved = BTreeSet::new();
    for r in reports {
        solved.extend(r.solved_ids());
    }
    let proof_rate =
        if theorems.is_empty() { 0.0 } else { solved.len() as f64 / theorems.len() as f64 };
    Ok(EnsembleReport { total: theorems.len(), solved, proof_rate })
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let solved = self.theorems.iter().filter(|t| t.solved).count();
        writeln!(f, "theorems   {}", self.theorems.len())?;
        writeln!(f, "solved     {}", solved)?;
        writeln!(f, "proof rate {:.2}%", self.proof_rate * 100.0)?;
        writeln!(f, "budget C   {}", self.budget)?;
        writeln!(f, "mode       {:?}, K_S={}, K_R={}", self.config.mode, self.config.k_select, self.config.k_rerank)?;
        writeln!(f, "curve (accumulated proof rate by k):")?;
        for point in &self.curve {
            writeln!(f, "  k={:<5} {:.2}%", point.k, point.rate * 100.0)?;
        }
        Ok(())
    }
}

pub fn write_report_json(report: &EvalReport, path: impl AsRef<Path>) -> Result<(), EvalError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = File::create(path).map_err(|source| EvalError::Io { path: display.clone(), source })?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut out, report)
        .map_err(|e| EvalError::MalformedOracle { path: display.clone(), line: 0, message: e.to_string() })?;
    out.write_all(b"\n").map_err(|source| EvalError::Io { path: display.clone(), source })?;
    out.flush().map_err(|source| EvalError::Io { path: display, source })
}

/// CSV of the accumulated curve: `k,proof_rate` rows.
pub fn write_curve_csv(report: &EvalReport, path: impl AsRef<Path>) -> Result<(), EvalError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = File::create(path).map_err(|source| EvalError::Io { path: display.clone(), source })?;
    let mut out = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        writeln!(out, "k,proof_rate")?;
        for point in &report.curve {
            writeln!(out, "{},{}", point.k, point.rate)?;
        }
        out.flush()
    })()
    .map_err(|source| EvalError::Io { path: display, source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Premise, ProofState, Source};
    use crate::retrieval::Stage;

    fn config(tactics: &[&str], k_list: &[usize]) -> EvalConfig {
        EvalConfig {
            tactics: tactics.iter().map(|t| t.to_string()).collect(),
            k_list: k_list.to_vec(),
            timeout: 2.0,
            k_select: 64,
            k_rerank: 64,
            mode: RetrieveMode::Full,
            tactic_prompt: false,
        }
    }

    fn corpus_with(premise_names: &[&str], states: usize) -> Corpus {
        let premises: Vec<Premise> = premise_names
            .iter()
            .enumerate()
            .map(|(i, name)| Premise {
                id: i as u32,
                name: name.to_string(),
                statement: format!("stmt {name}"),
            })
            .collect();
        let states: Vec<ProofState> = (0..states as u32)
            .map(|i| ProofState {
                id: i,
                text: format!("goal {i}"),
                gt_premises: vec![premise_names[0].to_string()],
                source: Source::HPL,
                split: None,
                candidates: None,
            })
            .collect();
        Corpus::new(premises, states).unwrap()
    }

    fn fixed_retriever(ids: Vec<u32>) -> impl Retriever {
        move |_: &str| RetrievalResult {
            stage: Stage::Rerank,
            ranked: ids.iter().enumerate().map(|(i, &id)| (id, 1.0 - i as f64 * 0.1)).collect(),
        }
    }

    #[test]
    fn budget_examples_are_exact() {
        let c1 = config(&["metis"], &[128]);
        assert_eq!(compute_budget(&c1), 2.0);

        let mut c2 = config(&["t"], &[128]);
        c2.tactics = (0..36).map(|i| format!("t{i}")).collect();
        c2.k_list = (1..=11).collect();
        assert_eq!(compute_budget(&c2), 792.0);

        c2.k_list = (1..=14).collect();
        assert_eq!(compute_budget(&c2), 1008.0);
    }

    #[test]
    fn config_validation() {
        assert!(config(&["metis"], &[1, 2, 4]).validate().is_ok());
        assert!(config(&[], &[1]).validate().is_err());
        assert!(config(&["metis"], &[]).validate().is_err());
        assert!(config(&["metis"], &[1, 1]).validate().is_err());
        assert!(config(&["metis"], &[4, 2]).validate().is_err());
        let mut c = config(&["metis"], &[1]);
        c.timeout = 0.0;
        assert!(c.validate().is_err());
        let mut c = config(&["metis"], &[1]);
        c.k_rerank = 128;
        assert!(c.validate().is_err());
    }

    #[test]
    fn generate_steps_enumerates_k_outer_tactic_inner() {
        let names = vec!["p2".to_string(), "p3".to_string()];
        let steps = generate_steps(&names, &config(&["metis"], &[1, 2]));
        assert_eq!(
            steps,
            vec![
                ProofStep { tactic: "metis".into(), premises: vec!["p2".into()] },
                ProofStep { tactic: "metis".into(), premises: vec!["p2".into(), "p3".into()] },
            ]
        );
    }

    #[test]
    fn generate_steps_k_zero_is_premise_free() {
        let names = vec!["p".to_string()];
        let steps = generate_steps(&names, &config(&["metis", "auto"], &[0]));
        assert_eq!(steps.len(), 2);
        assert!(steps.iter().all(|s| s.premises.is_empty()));
        assert_eq!(steps[0].tactic, "metis");
        assert_eq!(steps[1].tactic, "auto");
    }

    #[test]
    fn generate_steps_clips_and_dedups() {
        // Ten tactics, eleven k values, but only 1 retrieved premise: k > 1
        // all clip to the same list, so each tactic contributes 1 step.
        let names = vec!["p".to_string()];
        let tactics: Vec<&str> = DEFAULT_TACTICS.to_vec();
        let ks: Vec<usize> = (1..=11).collect();
        let steps = generate_steps(&names, &config(&tactics, &ks));
        assert_eq!(steps.len(), 10);

        // Bound: |tactics| × |k|.
        let names: Vec<String> = (0..20).map(|i| format!("p{i}")).collect();
        let steps = generate_steps(&names, &config(&tactics, &ks));
        assert!(steps.len() <= 110);
    }

    fn oracle_one(theorem_id: u32, tactics: &[&str], sets: &[&[&str]]) -> ProverOracle {
        ProverOracle::new(vec![OracleEntry {
            theorem_id,
            tactics: tactics.iter().map(|t| t.to_string()).collect(),
            sufficient_sets: sets
                .iter()
                .map(|s| s.iter().map(|p| p.to_string()).collect())
                .collect(),
        }])
        .unwrap()
    }

    #[test]
    fn oracle_subset_rule() {
        let oracle = oracle_one(7, &["metis"], &[&["p3"]]);
        let hit = ProofStep { tactic: "metis".into(), premises: vec!["p2".into(), "p3".into()] };
        assert!(oracle_try_step(&oracle, 7, &hit).unwrap());

        let wrong_tactic = ProofStep { tactic: "auto".into(), premises: vec!["p3".into()] };
        assert!(!oracle_try_step(&oracle, 7, &wrong_tactic).unwrap());

        let missing = ProofStep { tactic: "metis".into(), premises: vec!["p2".into()] };
        assert!(!oracle_try_step(&oracle, 7, &missing).unwrap());

        assert!(matches!(
            oracle_try_step(&oracle, 8, &hit),
            Err(EvalError::UnknownTheorem(8))
        ));
    }

    #[test]
    fn oracle_empty_sufficient_set_matches_premise_free() {
        let oracle = oracle_one(0, &["simp"], &[&[]]);
        let step = ProofStep { tactic: "simp".into(), premises: vec![] };
        assert!(oracle_try_step(&oracle, 0, &step).unwrap());
    }

    #[test]
    fn suite_solves_at_the_k_where_gt_appears() {
        // Retrieval ranks the sufficient premise second: k=1 fails, k=2 hits.
        let corpus = corpus_with(&["right", "wrong"], 1);
        let retriever = fixed_retriever(vec![1, 0]);
        let oracle = oracle_one(0, &["metis"], &[&["right"]]);
        let cfg = config(&["metis"], &[1, 2]);
        let report = evaluate_suite(&corpus, &[0], &retriever, &oracle, &cfg).unwrap();
        assert_eq!(report.theorems.len(), 1);
        let t = &report.theorems[0];
        assert!(t.solved);
        assert_eq!(t.first_success_k, Some(2));
        assert_eq!(t.steps_tried, 2);
        assert_eq!(report.proof_rate, 1.0);
        assert_eq!(report.curve, vec![CurvePoint { k: 1, rate: 0.0 }, CurvePoint { k: 2, rate: 1.0 }]);
    }

    #[test]
    fn suite_unprovable_gives_zero_rate() {
        let corpus = corpus_with(&["a", "b"], 2);
        let retriever = fixed_retriever(vec![0, 1]);
        let oracle = ProverOracle::new(vec![
            OracleEntry { theorem_id: 0, tactics: vec![], sufficient_sets: vec![] },
            OracleEntry { theorem_id: 1, tactics: vec![], sufficient_sets: vec![] },
        ])
        .unwrap();
        let cfg = config(&["metis"], &[1, 2]);
        let report = evaluate_suite(&corpus, &[0, 1], &retriever, &oracle, &cfg).unwrap();
        assert_eq!(report.proof_rate, 0.0);
        assert!(report.curve.iter().all(|p| p.rate == 0.0));
        assert!(report.theorems.iter().all(|t| t.steps_tried == 2 && !t.solved));
    }

    #[test]
    fn suite_is_deterministic_and_serializes_identically() {
        let corpus = corpus_with(&["a", "b", "c"], 3);
        let retriever = fixed_retriever(vec![2, 0, 1]);
        let oracle = ProverOracle::new(
            (0..3)
                .map(|i| OracleEntry {
                    theorem_id: i,
                    tactics: vec!["metis".into()],
                    sufficient_sets: vec![vec!["a".into()]],
                })
                .collect(),
        )
        .unwrap();
        let cfg = config(&["metis", "auto"], &[1, 2]);
        let a = evaluate_suite(&corpus, &[0, 1, 2], &retriever, &oracle, &cfg).unwrap();
        let b = evaluate_suite(&corpus, &[0, 1, 2], &retriever, &oracle, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn suite_success_is_monotone_in_retrieval_quality() {
        let corpus = corpus_with(&["gt", "x", "y"], 4);
        let oracle = ProverOracle::new(
            (0..4)
                .map(|i| OracleEntry {
                    theorem_id: i,
                    tactics: vec!["metis".into()],
                    sufficient_sets: vec![vec!["gt".into()]],
                })
                .collect(),
        )
        .unwrap();
        let cfg = config(&["metis"], &[1, 2]);
        let weak = fixed_retriever(vec![1, 2]);
        let strong = fixed_retriever(vec![0, 1, 2]);
        let weak_report = evaluate_suite(&corpus, &[0, 1, 2, 3], &weak, &oracle, &cfg).unwrap();
        let strong_report = evaluate_suite(&corpus, &[0, 1, 2, 3], &strong, &oracle, &cfg).unwrap();
        assert!(weak_report.solved_ids().is_subset(&strong_report.solved_ids()));
    }

    #[test]
    fn tactic_prompt_retrieves_per_tactic() {
        let corpus = corpus_with(&["gt", "x"], 1);
        // Only the metis-prompted query surfaces the sufficient premise.
        let retriever = |state_text: &str| {
            let ids = if state_text.starts_with("metis:") { vec![0, 1] } else { vec![1, 0] };
            RetrievalResult {
                stage: Stage::Rerank,
                ranked: ids.into_iter().enumerate().map(|(i, id)| (id, 1.0 - i as f64)).collect(),
            }
        };
        let oracle = oracle_one(0, &["metis", "auto"], &[&["gt"]]);
        let mut cfg = config(&["auto", "metis"], &[1]);
        cfg.tactic_prompt = true;
        let report = evaluate_suite(&corpus, &[0], &retriever, &oracle, &cfg).unwrap();
        let t = &report.theorems[0];
        assert!(t.solved);
        assert_eq!(t.first_success.as_ref().unwrap().tactic, "metis");

        cfg.tactic_prompt = false;
        let unprompted = evaluate_suite(&corpus, &[0], &retriever, &oracle, &cfg).unwrap();
        assert!(!unprompted.theorems[0].solved, "plain query ranks gt below k=1");
    }

    #[test]
    fn accumulated_curve_examples() {
        // Theorem A solved at k=1, theorem B at k=2: curve [0.5, 1.0].
        let cfg = config(&["metis"], &[1, 2]);
        let report = EvalReport {
            config: cfg.clone(),
            theorems: vec![
                TheoremResult {
                    theorem_id: 0,
                    solved: true,
                    first_success: None,
                    first_success_k: Some(1),
                    steps_tried: 1,
                },
                TheoremResult {
                    theorem_id: 1,
                    solved: true,
                    first_success: None,
                    first_success_k: Some(2),
                    steps_tried: 2,
                },
            ],
            proof_rate: 1.0,
            budget: compute_budget(&cfg),
            curve: Vec::new(),
        };
        let curve = accumulated_proof_rate(&report);
        assert_eq!(curve, vec![CurvePoint { k: 1, rate: 0.5 }, CurvePoint { k: 2, rate: 1.0 }]);
        assert_eq!(curve.last().unwrap().rate, report.proof_rate);
        assert!(curve.windows(2).all(|w| w[0].rate <= w[1].rate));
    }

    fn report_solving(ids: &[u32], solved: &[u32]) -> EvalReport {
        let cfg = config(&["metis"], &[1]);
        EvalReport {
            config: cfg.clone(),
            theorems: ids
                .iter()
                .map(|&id| TheoremResult {
                    theorem_id: id,
                    solved: solved.contains(&id),
                    first_success: None,
                    first_success_k: solved.contains(&id).then_some(1),
                    steps_tried: 1,
                })
                .collect(),
            proof_rate: solved.len() as f64 / ids.len() as f64,
            budget: 2.0,
            curve: Vec::new(),
        }
    }

    #[test]
    fn ensemble_union_semantics() {
        let a = report_solving(&[1, 2, 3, 4], &[1, 2]);
        let b = report_solving(&[1, 2, 3, 4], &[2, 3]);
        let union = ensemble_union(&[&a, &b]).unwrap();
        assert_eq!(union.proof_rate, 0.75);
        assert_eq!(union.solved, [1, 2, 3].into_iter().collect());

        let self_union = ensemble_union(&[&a, &a]).unwrap();
        assert_eq!(self_union.proof_rate, a.proof_rate);

        assert!(union.proof_rate >= a.proof_rate.max(b.proof_rate));

        let mismatched = report_solving(&[1, 2], &[1]);
        assert!(matches!(
            ensemble_union(&[&a, &mismatched]),
            Err(EvalError::MismatchedTheoremSets)
        ));
    }

    #[test]
    fn oracle_file_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("oracle.jsonl");
        let oracle = ProverOracle::new(vec![
            OracleEntry {
                theorem_id: 3,
                tactics: vec!["metis".into()],
                sufficient_sets: vec![vec!["a".into(), "b".into()]],
            },
            OracleEntry { theorem_id: 1, tactics: vec!["auto".into()], sufficient_sets: vec![] },
        ])
        .unwrap();
        save_oracle(&oracle, &path).unwrap();
        let loaded = load_oracle(&path).unwrap();
        assert_eq!(loaded, oracle);

        let dup = ProverOracle::new(vec![
            OracleEntry { theorem_id: 1, tactics: vec![], sufficient_sets: vec![] },
            OracleEntry { theorem_id: 1, tactics: vec![], sufficient_sets: vec![] },
        ]);
        assert!(matches!(dup, Err(EvalError::DuplicateTheorem(1))));

        std::fs::write(&path, "not json\n").unwrap();
        assert!(matches!(load_oracle(&path), Err(EvalError::MalformedOracle { line: 1, .. })));
    }

    #[test]
    fn oracle_validation_catches_unknown_premises() {
        let corpus = corpus_with(&["a"], 1);
        let good = oracle_one(0, &["metis"], &[&["a"]]);
        assert!(validate_oracle(&good, &corpus).is_ok());
        let bad = oracle_one(0, &["metis"], &[&["ghost"]]);
        assert!(matches!(
            validate_oracle(&bad, &corpus),
            Err(EvalError::UnknownPremise { theorem: 0, .. })
        ));
    }

    #[test]
    fn report_display_and_csv() {
        let corpus = corpus_with(&["a", "b"], 2);
        let retriever = fixed_retriever(vec![0, 1]);
        let oracle = ProverOracle::new(
            (0..2)
                .map(|i| OracleEntry {
                    theorem_id: i,
                    tactics: vec!["metis".into()],
                    sufficient_sets: vec![vec!["a".into()]],
                })
                .collect(),
        )
        .unwrap();
        let cfg = config(&["metis"], &[1, 2]);
        let report = evaluate_suite(&corpus, &[0, 1], &retriever, &oracle, &cfg).unwrap();
        let text = report.to_string();
        assert!(text.contains("proof rate 100.00%"));
        assert!(text.contains("budget C   4"));

        let dir = tempfile::tempdir().unwrap();
        let json_path = dir.path().join("report.json");
        let csv_path = dir.path().join("curve.csv");
        write_report_json(&report, &json_path).unwrap();
        write_curve_csv(&report, &csv_path).unwrap();
        let parsed: EvalReport =
            serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
        assert_eq!(parsed, report);
        let csv = std::fs::read_to_string(&csv_path).unwrap();
        assert_eq!(csv, "k,proof_rate\n1,1\n2,1\n");
    }
}
