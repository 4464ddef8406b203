//! SELECT contrastive training, RERANK binary-classification training with
//! mined hard negatives, and the alternating loop that interleaves them.
//!
//! Gradient accumulation over a batch is chunked: sequences are split into
//! fixed-size chunks, chunks are processed in parallel, and the per-chunk
//! gradients are folded in chunk order. The result is bit-identical for any
//! worker count.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{splitmix64, Corpus, Datapoint, ProofState, Split};
use crate::model::ModelParams;
use crate::nn::{adam_step, lr_at, AdamState, Grads, Graph, LrSchedule, NodeId, Real, Tensor};
use crate::retrieval::{build_index, recall_at_k, select_topk, PremiseIndex, RetrievalError};
use crate::text::{self, Token, BOS};

/// Sequences per gradient chunk; fixed so that the fold order (and therefore
/// the accumulated floating-point sum) never depends on thread count.
pub const GRAD_CHUNK: usize = 8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("need {needed} train datapoints but only {available} are available")]
    NotEnoughData { needed: usize, available: usize },
    #[error("cannot draw {needed} extra negatives: only {available} premises are non-gt for the whole batch")]
    CannotSatisfyNegatives { needed: usize, available: usize },
    #[error("every sampled positive had an empty mined pool")]
    EmptyMinedPools,
    #[error("training diverged at step {step}: {message}")]
    Diverged { step: usize, message: String },
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

/// Hyperparameters for the alternating trainer. `paper()` holds the
/// published values; `desk()` is sized for a single CPU core.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// N: proof states (and aligned positives) per SELECT batch.
    pub select_batch: usize,
    /// M: extra negatives shared by every row of the SELECT batch.
    pub extra_negatives: usize,
    /// Contrastive temperature, fixed (not trained).
    pub temperature: f64,
    /// Positive pairs per RERANK batch.
    pub rerank_positives: usize,
    /// Mined negatives drawn per positive.
    pub negatives_per_positive: usize,
    /// Cap on each state's mined hard-negative pool.
    pub mined_pool: usize,
    /// Steps between re-mining the negative pools (and probing recall).
    pub refresh_interval: usize,
    pub lr: f64,
    pub warmup: usize,
    pub dropout: f64,
    pub weight_decay: f64,
    /// Held-out states probed for recall@10 at every refresh.
    pub probe_size: usize,
    /// Stop once probe recall@10 reaches this value.
    pub early_stop_recall: Option<f64>,
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            select_batch: 256,
            extra_negatives: 768,
            temperature: 0.07,
            rerank_positives: 16,
            negatives_per_positive: 15,
            mined_pool: 1024,
            refresh_interval: 1000,
            lr: 2e-4,
            warmup: 1000,
            dropout: 0.1,
            weight_decay: 0.02,
            probe_size: 64,
            early_stop_recall: None,
        }
    }

    /// Sized for a single CPU core against the default synthetic corpus.
    /// Dropout off and a long warmup: at this scale dropout noise swamps the
    /// contrastive signal, and the two-layer model diverges from cold starts.
    /// The probe covers the whole corpus, so early stopping fires on the
    /// training-pair recall itself.
    pub fn desk() -> Self {
        TrainConfig {
            select_batch: 64,
            extra_negatives: 96,
            refresh_interval: 25,
            lr: 7e-4,
            warmup: 100,
            dropout: 0.0,
            probe_size: 512,
            early_stop_recall: Some(0.9),
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("select_batch", self.select_batch),
            ("rerank_positives", self.rerank_positives),
            ("negatives_per_positive", self.negatives_per_positive),
            ("mined_pool", self.mined_pool),
            ("refresh_interval", self.refresh_interval),
            ("probe_size", self.probe_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(TrainError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.temperature <= 0.0 {
            return Err(TrainError::InvalidConfig("temperature must be positive".into()));
        }
        if self.lr <= 0.0 {
            return Err(TrainError::InvalidConfig("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TrainError::InvalidConfig("dropout must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(TrainError::InvalidConfig("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

fn mix(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

fn mix3(seed: u64, a: u64, b: u64) -> u64 {
    mix(mix(seed, a), b)
}

const TAG_SELECT_BATCH: u64 = 1;
const TAG_SELECT_DROP: u64 = 2;
const TAG_RERANK_BATCH: u64 = 3;
const TAG_RERANK_DROP: u64 = 4;
const TAG_LM: u64 = 5;

/// Datapoints whose state belongs to the train split (or is unsplit).
pub fn train_datapoints(corpus: &Corpus) -> Vec<Datapoint> {
    corpus
        .datapoints
        .iter()
        .filter(|dp| {
            let state = corpus.state(dp.state_id).expect("datapoint references a known state");
            matches!(state.split, None | Some(Split::Train))
        })
        .copied()
        .collect()
}

/// One contrastive batch: N states, N aligned positives, and M extra
/// negatives shared across the whole batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectBatch {
    pub state_ids: Vec<u32>,
    pub positive_ids: Vec<u32>,
    pub negative_ids: Vec<u32>,
    pub states: Vec<Vec<Token>>,
    pub positives: Vec<Vec<Token>>,
    pub negatives: Vec<Vec<Token>>,
}

/// Samples N (state, positive) pairs without replacement, then M extra
/// negatives that are not ground truth for any state in the batch.
///
/// Rows are drawn with pairwise disjoint ground-truth sets when the corpus
/// allows it: with few premises, an unconstrained draw routinely places one
/// row's ground truth in another row's positive column, and the loss then
/// trains the model to push its own labels down. Corpora too small for a
/// disjoint batch fall back to the unconstrained leftovers.
pub fn build_select_batch(
    corpus: &Corpus,
    cfg: &TrainConfig,
    ctx: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SelectBatch, TrainError> {
    let dps = train_datapoints(corpus);
    if dps.len() < cfg.select_batch {
        return Err(TrainError::NotEnoughData {
            needed: cfg.select_batch,
            available: dps.len(),
        });
    }
    let order = rand::seq::index::sample(rng, dps.len(), dps.len());
    let mut chosen: Vec<Datapoint> = Vec::with_capacity(cfg.select_batch);
    let mut covered: HashSet<u32> = HashSet::new();
    let mut skipped: Vec<Datapoint> = Vec::new();
    for i in order {
        if chosen.len() == cfg.select_batch {
            break;
        }
        let dp = dps[i];
        let state = corpus.state(dp.state_id).expect("known state");
        let gts = corpus.gt_ids(state);
        if gts.iter().any(|id| covered.contains(id)) {
            skipped.push(dp);
        } else {
            covered.extend(gts);
            chosen.push(dp);
        }
    }
    let mut skipped = skipped.into_iter();
    while chosen.len() < cfg.select_batch {
        chosen.push(skipped.next().expect("enough datapoints were checked above"));
    }

    let mut banned: HashSet<u32> = HashSet::new();
    for dp in &chosen {
        let state = corpus.state(dp.state_id).expect("known state");
        banned.extend(corpus.gt_ids(state));
    }
    let mut eligible: Vec<u32> =
        corpus.premises.iter().map(|p| p.id).filter(|id| !banned.contains(id)).collect();
    eligible.sort_unstable();
    if eligible.len() < cfg.extra_negatives {
        return Err(TrainError::CannotSatisfyNegatives {
            needed: cfg.extra_negatives,
            available: eligible.len(),
        });
    }
    let negative_ids: Vec<u32> = rand::seq::index::sample(rng, eligible.len(), cfg.extra_negatives)
        .iter()
        .map(|i| eligible[i])
        .collect();
    assert!(
        negative_ids.iter().all(|id| !banned.contains(id)),
        "extra negatives must not be ground truth for any batch state"
    );

    let mut batch = SelectBatch {
        state_ids: Vec::with_capacity(chosen.len()),
        positive_ids: Vec::with_capacity(chosen.len()),
        negative_ids,
        states: Vec::with_capacity(chosen.len()),
        positives: Vec::with_capacity(chosen.len()),
        negatives: Vec::new(),
    };
    for dp in &chosen {
        let state = corpus.state(dp.state_id).expect("known state");
        let premise = corpus.premise(dp.premise_id).expect("known premise");
        batch.state_ids.push(dp.state_id);
        batch.positive_ids.push(dp.premise_id);
        batch.states.push(text::encode_state(&state.text, ctx));
        batch.positives.push(text::encode_premise(&premise.text(), ctx));
    }
    for &id in &batch.negative_ids {
        let premise = corpus.premise(id).expect("known premise");
        batch.negatives.push(text::encode_premise(&premise.text(), ctx));
    }
    Ok(batch)
}

/// Mean over rows of the softmax cross-entropy where row `i`'s positive sits
/// in column `i`; similarities are divided by `tau` first.
pub fn info_nce_loss<R: Real>(sims: &Tensor<R>, tau: f64) -> f64 {
    assert!(tau > 0.0, "temperature must be positive");
    let n = sims.rows();
    assert!(sims.cols() >= n, "each row needs its aligned positive column");
    let mut total = 0.0;
    for i in 0..n {
        let row: Vec<f64> = sims.row(i).iter().map(|v| v.to_f64() / tau).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - row[i];
    }
    total / n as f64
}

/// Mean binary cross-entropy over probability scores in (0, 1).
pub fn rerank_bce_loss(scores: &[f64], labels: &[f64]) -> f64 {
    assert_eq!(scores.len(), labels.len(), "one label per score");
    assert!(!scores.is_empty(), "BCE over an empty batch");
    let mut total = 0.0;
    for (&s, &y) in scores.iter().zip(labels) {
        assert!(s > 0.0 && s < 1.0, "scores must lie strictly inside (0, 1), got {s}");
        assert!(y == 0.0 || y == 1.0, "labels must be 0 or 1");
        total -= y * s.ln() + (1.0 - y) * (1.0 - s).ln();
    }
    total / scores.len() as f64
}

/// Per-state hard-negative pools: the top non-gt premises under the current
/// SELECT model, best first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MinedTable {
    pub pools: BTreeMap<u32, Vec<u32>>,
}

/// Ranks every premise for every train state and keeps the top
/// `min(cap, available)` non-gt ids per state.
pub fn mine_pools<R: Real>(
    params: &ModelParams<R>,
    corpus: &Corpus,
    index: &PremiseIndex<R>,
    cap: usize,
) -> MinedTable {
    let state_ids: BTreeSet<u32> = train_datapoints(corpus).iter().map(|dp| dp.state_id).collect();
    let pools: Vec<(u32, Vec<u32>)> = state_ids
        .into_iter()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&sid| {
            let state = corpus.state(sid).expect("known state");
            let gt: HashSet<u32> = corpus.gt_ids(state).into_iter().collect();
            let ranked = select_topk(&state.text, index, index.len(), params);
            let pool: Vec<u32> = ranked
                .ranked
                .iter()
                .map(|&(id, _)| id)
                .filter(|id| !gt.contains(id))
                .take(cap)
                .collect();
            (sid, pool)
        })
        .collect();
    MinedTable { pools: pools.into_iter().collect() }
}

/// Convenience wrapper: embed all premises, then mine per-state pools.
pub fn recompute_negatives_for_rerank<R: Real>(
    params: &ModelParams<R>,
    corpus: &Corpus,
    cap: usize,
) -> Result<MinedTable, TrainError> {
    let index = build_index(params, &corpus.premises, None)?;
    Ok(mine_pools(params, corpus, &index, cap))
}

/// Labeled pair sequences, grouped as positive followed by its negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct RerankBatch {
    pub pairs: Vec<(Vec<Token>, f64)>,
    pub positives: usize,
}

/// Samples positives, then `negatives_per_positive` draws from each state's
/// mined pool (without replacement unless the pool is too small). Positives
/// whose pool is empty are skipped with a warning.
pub fn build_rerank_batch(
    corpus: &Corpus,
    mined: &MinedTable,
    cfg: &TrainConfig,
    ctx: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RerankBatch, TrainError> {
    let dps = train_datapoints(corpus);
    if dps.len() < cfg.rerank_positives {
        return Err(TrainError::NotEnoughData {
            needed: cfg.rerank_positives,
            available: dps.len(),
        });
    }
    let picks = rand::seq::index::sample(rng, dps.len(), cfg.rerank_positives);

    let mut batch = RerankBatch { pairs: Vec::new(), positives: 0 };
    for dp in picks.iter().map(|i| dps[i]) {
        let pool = mined.pools.get(&dp.state_id).map(Vec::as_slice).unwrap_or(&[]);
        if pool.is_empty() {
            log::warn!("state {} has an empty mined pool; skipping positive", dp.state_id);
            continue;
        }
        let state = corpus.state(dp.state_id).expect("known state");
        let positive = corpus.premise(dp.premise_id).expect("known premise");
        batch.pairs.push((text::encode_pair(&state.text, &positive.text(), ctx), 1.0));
        let n = cfg.negatives_per_positive;
        let neg_ids: Vec<u32> = if pool.len() >= n {
            rand::seq::index::sample(rng, pool.len(), n).iter().map(|i| pool[i]).collect()
        } else {
            (0..n).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
        };
        for id in neg_ids {
            let negative = corpus.premise(id).expect("known premise");
            batch.pairs.push((text::encode_pair(&state.text, &negative.text(), ctx), 0.0));
        }
        batch.positives += 1;
    }
    if batch.positives == 0 {
        return Err(TrainError::EmptyMinedPools);
    }
    Ok(batch)
}

/// Forward + backward for one SELECT batch. Each sequence runs on its own
/// tape; the contrastive loss couples their embeddings on a small second
/// tape whose input gradients seed the per-sequence backward passes.
pub fn select_grads<R: Real>(
    params: &ModelParams<R>,
    batch: &SelectBatch,
    temperature: f64,
    dropout: f64,
    seed: u64,
) -> (f64, Grads<R>) {
    let n = batch.states.len();
    let d = params.config.dim;
    assert_eq!(batch.positives.len(), n, "positives aligned with states");

    let seqs: Vec<(&[Token], bool)> = batch
        .states
        .iter()
        .map(|t| (t.as_slice(), true))
        .chain(batch.positives.iter().map(|t| (t.as_slice(), false)))
        .chain(batch.negatives.iter().map(|t| (t.as_slice(), false)))
        .collect();

    let tapes: Vec<(Graph<'_, R>, NodeId)> = seqs
        .par_iter()
        .enumerate()
        .map(|(i, (tokens, is_state))| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, i as u64));
            let mut g = Graph::new(&params.set);
            let node = if *is_state {
                params.state_embedding_graph(&mut g, tokens, dropout, &mut rng)
            } else {
                params.premise_embedding_graph(&mut g, tokens, dropout, &mut rng)
            };
            (g, node)
        })
        .collect();

    let total_k = seqs.len() - n;
    let mut q = Tensor::zeros(n, d);
    let mut k = Tensor::zeros(total_k, d);
    for (i, (g, node)) in tapes.iter().enumerate() {
        let row = g.value(*node).data();
        if i < n {
            q.row_mut(i).copy_from_slice(row);
        } else {
            k.row_mut(i - n).copy_from_slice(row);
        }
    }

    let mut loss_graph = Graph::new(&params.set);
    let qn = loss_graph.input(q, true);
    let kn = loss_graph.input(k, true);
    let sims = loss_graph.matmul_bt(qn, kn);
    let scaled = loss_graph.scale(sims, R::from_f64(1.0 / temperature));
    let loss = loss_graph.softmax_cross_entropy(scaled, (0..n).collect());
    let loss_value = loss_graph.value(loss).item().to_f64();

    let mut grads = Grads::zeros_like(&params.set);
    let mut node_grads = loss_graph.backward(loss, Tensor::scalar(R::ONE), &mut grads);
    let dq = node_grads.take(qn).expect("tracked input");
    let dk = node_grads.take(kn).expect("tracked input");

    let chunk_grads: Vec<Grads<R>> = tapes
        .par_chunks(GRAD_CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut cg = Grads::zeros_like(&params.set);
            for (off, (g, node)) in chunk.iter().enumerate() {
                let i = ci * GRAD_CHUNK + off;
                let row = if i < n { dq.row(i) } else { dk.row(i - n) };
                g.backward(*node, Tensor::new(1, d, row.to_vec()), &mut cg);
            }
            cg
        })
        .collect();
    for cg in &chunk_grads {
        grads.add_from(cg);
    }
    (loss_value, grads)
}

/// Forward + backward for one RERANK batch: independent per-pair tapes, each
/// ending in binary cross-entropy on the rerank logit, seeded with `1/pairs`
/// so the accumulated gradient is that of the mean loss.
pub fn rerank_grads<R: Real>(
    params: &ModelParams<R>,
    batch: &RerankBatch,
    dropout: f64,
    seed: u64,
) -> (f64, Grads<R>) {
    let npairs = batch.pairs.len();
    assert!(npairs > 0, "rerank batch is empty");
    let inv = R::from_f64(1.0 / npairs as f64);

    let chunks: Vec<(f64, Grads<R>)> = batch
        .pairs
        .par_chunks(GRAD_CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut cg = Grads::zeros_like(&params.set);
            let mut loss_sum = 0.0;
            for (off, (tokens, label)) in chunk.iter().enumerate() {
                let i = ci * GRAD_CHUNK + off;
                let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, i as u64));
                let mut g = Graph::new(&params.set);
                let logit = params.rerank_logit_graph(&mut g, tokens, dropout, &mut rng);
                let loss = g.bce_with_logits(logit, Tensor::from_f64(1, 1, &[*label]));
                loss_sum += g.value(loss).item().to_f64();
                g.backward(loss, Tensor::scalar(inv), &mut cg);
            }
            (loss_sum, cg)
        })
        .collect();

    let mut grads = Grads::zeros_like(&params.set);
    let mut loss_total = 0.0;
    for (ls, cg) in &chunks {
        loss_total += ls;
        grads.add_from(cg);
    }
    (loss_total / npairs as f64, grads)
}

/// One line of the training metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub select_loss: f64,
    pub rerank_loss: f64,
    #[serde(rename = "probe_recall@10", skip_serializing_if = "Option::is_none", default)]
    pub probe_recall_at_10: Option<f64>,
    pub lr: f64,
}

/// Pair-weighted recall@10 of SELECT over a deterministic probe: validation
/// states if the corpus has any, otherwise train states, ordered by id. Each
/// (state, gt premise) pair counts once, so states with more ground truth
/// weigh proportionally more.
pub fn probe_recall<R: Real>(
    params: &ModelParams<R>,
    corpus: &Corpus,
    index: &PremiseIndex<R>,
    probe_size: usize,
) -> f64 {
    let pick = |want_valid: bool| -> Vec<&ProofState> {
        let mut states: Vec<&ProofState> = corpus
            .states
            .iter()
            .filter(|s| !s.gt_premises.is_empty())
            .filter(|s| {
                if want_valid {
                    s.split == Some(Split::Valid)
                } else {
                    matches!(s.split, None | Some(Split::Train))
                }
            })
            .collect();
        states.sort_unstable_by_key(|s| s.id);
        states.truncate(probe_size);
        states
    };
    let mut states = pick(true);
    if states.is_empty() {
        states = pick(false);
    }
    if states.is_empty() {
        return 0.0;
    }
    // Collect per state, then fold in state order: a parallel reduction would
    // combine the sums in a scheduler-dependent order and the metric would
    // wobble in the last ulp between runs.
    let per_state: Vec<(f64, f64)> = states
        .par_iter()
        .map(|s| {
            let result = select_topk(&s.text, index, 10, params);
            let gt: HashSet<u32> = corpus.gt_ids(s).into_iter().collect();
            (recall_at_k(&result, &gt, 10) * gt.len() as f64, gt.len() as f64)
        })
        .collect();
    let (hits, pairs) =
        per_state.into_iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    hits / pairs
}

/// The alternating loop: every iteration takes one SELECT step then one
/// RERANK step; mined pools (and the recall probe) refresh every
/// `refresh_interval` steps. Non-finite losses or gradients abort.
pub fn train_alternating<R: Real>(
    mut params: ModelParams<R>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    steps: usize,
    seed: u64,
) -> Result<(ModelParams<R>, Vec<MetricsRecord>), TrainError> {
    cfg.validate()?;
    let ctx = params.config.ctx;
    let mut adam = AdamState::new(&params.set, cfg.weight_decay);
    let schedule = LrSchedule::new(cfg.lr, cfg.warmup.min(steps), steps.max(1));
    let mut metrics = Vec::new();
    let mut mined = MinedTable::default();

    for step in 0..steps {
        let mut probe = None;
        if step % cfg.refresh_interval == 0 {
            let index = build_index(&params, &corpus.premises, None)?;
            mined = mine_pools(&params, corpus, &index, cfg.mined_pool);
            let r = probe_recall(&params, corpus, &index, cfg.probe_size);
            probe = Some(r);
            log::info!("step {step}: refreshed mined pools, probe recall@10 = {r:.4}");
            if cfg.early_stop_recall.is_some_and(|target| r >= target) {
                log::info!("early stop at step {step}: probe recall@10 {r:.4} reached target");
                break;
            }
        }
        let lr = lr_at(&schedule, step);

        let mut rng = ChaCha8Rng::seed_from_u64(mix3(seed, step as u64, TAG_SELECT_BATCH));
        let sbatch = build_select_batch(corpus, cfg, ctx, &mut rng)?;
        let (select_loss, sgrads) = select_grads(
            &params,
            &sbatch,
            cfg.temperature,
            cfg.dropout,
            mix3(seed, step as u64, TAG_SELECT_DROP),
        );
        if !select_loss.is_finite() {
            return Err(TrainError::Diverged {
                step,
                message: format!("select loss is {select_loss}"),
            });
        }
        adam_step(&mut params.set, &sgrads, &mut adam, lr)
            .map_err(|e| TrainError::Diverged { step, message: e.to_string() })?;

        let mut rng = ChaCha8Rng::seed_from_u64(mix3(seed, step as u64, TAG_RERANK_BATCH));
        let rbatch = build_rerank_batch(corpus, &mined, cfg, ctx, &mut rng)?;
        let (rerank_loss, rgrads) =
            rerank_grads(&params, &rbatch, cfg.dropout, mix3(seed, step as u64, TAG_RERANK_DROP));
        if !rerank_loss.is_finite() {
            return Err(TrainError::Diverged {
                step,
                message: format!("rerank loss is {rerank_loss}"),
            });
        }
        adam_step(&mut params.set, &rgrads, &mut adam, lr)
            .map_err(|e| TrainError::Diverged { step, message: e.to_string() })?;

        metrics.push(MetricsRecord {
            step,
            select_loss,
            rerank_loss,
            probe_recall_at_10: probe,
            lr,
        });
    }
    Ok((params, metrics))
}

/// Byte language-model pretraining: linear warmup to 3e-4 over the first
/// tenth of the run, cosine decay after, dropout disabled. Returns the
/// trained params and the per-step mean loss.
pub fn pretrain_lm<R: Real>(
    mut params: ModelParams<R>,
    texts: &[String],
    steps: usize,
    seed: u64,
) -> Result<(ModelParams<R>, Vec<f64>), TrainError> {
    let texts: Vec<&String> = texts.iter().filter(|t| !t.is_empty()).collect();
    if texts.is_empty() {
        return Err(TrainError::InvalidConfig("pretraining needs non-empty text".into()));
    }
    let ctx = params.config.ctx;
    let batch = 4.min(texts.len());
    let schedule = LrSchedule::new(3e-4, (steps / 10).min(steps), steps.max(1));
    let mut adam = AdamState::new(&params.set, 0.02);
    let mut losses = Vec::with_capacity(steps);

    for step in 0..steps {
        let mut rng = ChaCha8Rng::seed_from_u64(mix3(seed, step as u64, TAG_LM));
        let seqs: Vec<Vec<Token>> = (0..batch)
            .map(|_| {
                let t = texts[rng.gen_range(0..texts.len())];
                let mut tokens = vec![BOS];
                tokens.extend(text::encode(t));
                tokens.truncate(ctx);
                tokens
            })
            .collect();
        let inv = R::from_f64(1.0 / batch as f64);

        let chunks: Vec<(f64, Grads<R>)> = seqs
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut cg = Grads::zeros_like(&params.set);
                let mut loss_sum = 0.0;
                for tokens in chunk {
                    let mut unused = ChaCha8Rng::seed_from_u64(0);
                    let mut g = Graph::new(&params.set);
                    let loss = params.lm_loss_graph(&mut g, tokens, 0.0, &mut unused);
                    loss_sum += g.value(loss).item().to_f64();
                    g.backward(loss, Tensor::scalar(inv), &mut cg);
                }
                (loss_sum, cg)
            })
            .collect();
        let mut grads = Grads::zeros_like(&params.set);
        let mut loss_total = 0.0;
        for (ls, cg) in &chunks {
            loss_total += ls;
            grads.add_from(cg);
        }
        let loss = loss_total / batch as f64;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { step, message: format!("lm loss is {loss}") });
        }
        adam_step(&mut params.set, &grads, &mut adam, lr_at(&schedule, step))
            .map_err(|e| TrainError::Diverged { step, message: e.to_string() })?;
        losses.push(loss);
    }
    Ok((params, losses))
}

/// Writes metrics as newline-delimited JSON.
pub fn write_metrics(path: impl AsRef<Path>, metrics: &[MetricsRecord]) -> std::io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for m in metrics {
        serde_json::to_writer(&mut out, m)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_metrics(path: impl AsRef<Path>) -> std::io::Result<Vec<MetricsRecord>> {
    let file = BufReader::new(File::open(path)?);
    let mut metrics = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        metrics.push(serde_json::from_str(&line)?);
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{extract_pairs, Premise, Source};
    use crate::model::{init_params, ModelConfig};

    /// Tiny corpus: `n_prem` premises, `n_states` states, each state's gt =
    /// {i mod n_prem, (i+1) mod n_prem}.
    fn tiny_corpus(n_prem: usize, n_states: usize) -> Corpus {
        let premises: Vec<Premise> = (0..n_prem as u32)
            .map(|i| Premise { id: i, name: format!("p{i}"), statement: format!("s{i} t{i}") })
            .collect();
        let states: Vec<ProofState> = (0..n_states as u32)
            .map(|i| ProofState {
                id: i,
                text: format!("goal g{i}"),
                gt_premises: vec![
                    format!("p{}", i as usize % n_prem),
                    format!("p{}", (i as usize + 1) % n_prem),
                ],
                source: Source::HPL,
                split: None,
                candidates: None,
            })
            .collect();
        let mut corpus = Corpus::new(premises, states).unwrap();
        corpus.datapoints = extract_pairs(&corpus);
        corpus
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            select_batch: 2,
            extra_negatives: 6,
            temperature: 0.07,
            rerank_positives: 2,
            negatives_per_positive: 3,
            mined_pool: 8,
            refresh_interval: 2,
            lr: 1e-3,
            warmup: 1,
            dropout: 0.1,
            weight_decay: 0.02,
            probe_size: 4,
            early_stop_recall: None,
        }
    }

    fn tiny_model(seed: u64) -> ModelParams<f32> {
        init_params(&ModelConfig::with_heads(1, 16, 2, 48), seed).unwrap()
    }

    #[test]
    fn select_batch_sizes_and_negative_constraint() {
        let corpus = tiny_corpus(20, 10);
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = build_select_batch(&corpus, &cfg, 48, &mut rng).unwrap();
        assert_eq!(batch.states.len(), 2);
        assert_eq!(batch.positives.len(), 2);
        assert_eq!(batch.negatives.len(), 6);
        for &sid in &batch.state_ids {
            let gt = corpus.gt_ids(corpus.state(sid).unwrap());
            for nid in &batch.negative_ids {
                assert!(!gt.contains(nid), "negative {nid} is gt of state {sid}");
            }
        }
        // Positives really are gt of their aligned states.
        for (sid, pid) in batch.state_ids.iter().zip(&batch.positive_ids) {
            assert!(corpus.gt_ids(corpus.state(*sid).unwrap()).contains(pid));
        }
    }

    #[test]
    fn select_batch_m_zero_degenerates_to_in_batch() {
        let corpus = tiny_corpus(20, 10);
        let cfg = TrainConfig { extra_negatives: 0, ..tiny_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = build_select_batch(&corpus, &cfg, 48, &mut rng).unwrap();
        assert!(batch.negatives.is_empty());
    }

    #[test]
    fn select_batch_is_seed_deterministic() {
        let corpus = tiny_corpus(20, 10);
        let cfg = tiny_cfg();
        let a = build_select_batch(&corpus, &cfg, 48, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = build_select_batch(&corpus, &cfg, 48, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let c = build_select_batch(&corpus, &cfg, 48, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        assert_ne!(a.state_ids, c.state_ids);
    }

    #[test]
    fn select_batch_errors() {
        let corpus = tiny_corpus(20, 1);
        let cfg = TrainConfig { select_batch: 10, ..tiny_cfg() };
        assert!(matches!(
            build_select_batch(&corpus, &cfg, 48, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(TrainError::NotEnoughData { .. })
        ));

        // 4 premises, every one gt of some batch state: no negatives left.
        let corpus = tiny_corpus(4, 8);
        let cfg = TrainConfig { select_batch: 4, extra_negatives: 2, ..tiny_cfg() };
        assert!(matches!(
            build_select_batch(&corpus, &cfg, 48, &mut ChaCha8Rng::seed_from_u64(1)),
            Err(TrainError::CannotSatisfyNegatives { .. })
        ));
    }

    #[test]
    fn info_nce_uniform_similarities_is_ln_n_plus_m() {
        // Row count 3, column count 3 + 5: uniform scores give ln(8).
        let sims = Tensor::<f64>::new(3, 8, vec![0.37; 24]);
        for tau in [0.07, 0.5, 1.0, 3.0] {
            assert!((info_nce_loss(&sims, tau) - (8.0f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn info_nce_worked_example() {
        let sims = Tensor::<f64>::new(1, 3, vec![0.9, 0.1, -0.3]);
        let loss = info_nce_loss(&sims, 1.0);
        let expected = -((0.9f64).exp() / ((0.9f64).exp() + (0.1f64).exp() + (-0.3f64).exp())).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.5599147009875639).abs() < 1e-12);
    }

    #[test]
    fn info_nce_decreases_as_positive_grows() {
        let mut prev = f64::INFINITY;
        for s in [-0.5, 0.0, 0.4, 0.8, 0.99] {
            let sims = Tensor::<f64>::new(1, 3, vec![s, 0.2, -0.1]);
            let loss = info_nce_loss(&sims, 0.3);
            assert!(loss < prev);
            prev = loss;
        }
    }

    #[test]
    fn bce_worked_examples() {
        let loss = rerank_bce_loss(&[0.9, 0.2], &[1.0, 0.0]);
        let expected = -((0.9f64).ln() + (0.8f64).ln()) / 2.0;
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.164252).abs() < 5e-7);

        assert!((rerank_bce_loss(&[0.5, 0.5], &[1.0, 0.0]) - (2.0f64).ln()).abs() < 1e-12);
        // Confident correct scores drive the loss toward zero.
        assert!(rerank_bce_loss(&[1.0 - 1e-9, 1e-9], &[1.0, 0.0]) < 1e-6);
    }

    #[test]
    #[should_panic(expected = "strictly inside")]
    fn bce_rejects_boundary_scores() {
        rerank_bce_loss(&[1.0], &[1.0]);
    }

    #[test]
    fn mined_pools_exclude_gt_and_respect_cap() {
        let corpus = tiny_corpus(12, 6);
        let params = tiny_model(1);
        let mined = recompute_negatives_for_rerank(&params, &corpus, 4).unwrap();
        assert_eq!(mined.pools.len(), 6);
        for (&sid, pool) in &mined.pools {
            assert_eq!(pool.len(), 4, "cap applies: 10 non-gt available");
            let gt = corpus.gt_ids(corpus.state(sid).unwrap());
            assert!(pool.iter().all(|id| !gt.contains(id)));
        }
    }

    #[test]
    fn mined_pool_with_one_non_gt_premise() {
        // 3 premises; state 0's gt = {p0, p1}, leaving only p2.
        let corpus = tiny_corpus(3, 1);
        let params = tiny_model(2);
        let mined = recompute_negatives_for_rerank(&params, &corpus, 1024).unwrap();
        assert_eq!(mined.pools[&0], vec![2]);
    }

    #[test]
    fn rerank_batch_grouping_and_pool_containment() {
        let corpus = tiny_corpus(20, 10);
        let params = tiny_model(3);
        let mined = recompute_negatives_for_rerank(&params, &corpus, 8).unwrap();
        let cfg = TrainConfig { rerank_positives: 1, negatives_per_positive: 15, ..tiny_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = build_rerank_batch(&corpus, &mined, &cfg, 48, &mut rng).unwrap();
        assert_eq!(batch.pairs.len(), 16);
        assert_eq!(batch.positives, 1);
        assert_eq!(batch.pairs.iter().filter(|(_, y)| *y == 1.0).count(), 1);
        assert_eq!(batch.pairs[0].1, 1.0, "group starts with its positive");
    }

    #[test]
    fn rerank_batch_uses_whole_pool_of_exactly_n() {
        let corpus = tiny_corpus(20, 10);
        let mut mined = MinedTable::default();
        for s in &corpus.states {
            // Hand a pool of exactly 3 (= negatives_per_positive below).
            let gt = corpus.gt_ids(s);
            let pool: Vec<u32> =
                (0..20u32).filter(|id| !gt.contains(id)).take(3).collect();
            mined.pools.insert(s.id, pool);
        }
        let cfg = TrainConfig { rerank_positives: 1, negatives_per_positive: 3, ..tiny_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let batch = build_rerank_batch(&corpus, &mined, &cfg, 48, &mut rng).unwrap();
        assert_eq!(batch.pairs.len(), 4);
        // All three pool members appear: encode each and compare as a set.
        let negs: HashSet<Vec<Token>> =
            batch.pairs.iter().filter(|(_, y)| *y == 0.0).map(|(t, _)| t.clone()).collect();
        assert_eq!(negs.len(), 3);
    }

    #[test]
    fn rerank_batch_skips_empty_pools_and_errors_when_all_empty() {
        let corpus = tiny_corpus(20, 10);
        let mined = MinedTable::default();
        let cfg = tiny_cfg();
        assert!(matches!(
            build_rerank_batch(&corpus, &mined, &cfg, 48, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(TrainError::EmptyMinedPools)
        ));
    }

    #[test]
    fn rerank_batch_is_seed_deterministic() {
        let corpus = tiny_corpus(20, 10);
        let params = tiny_model(6);
        let mined = recompute_negatives_for_rerank(&params, &corpus, 8).unwrap();
        let cfg = tiny_cfg();
        let a = build_rerank_batch(&corpus, &mined, &cfg, 48, &mut ChaCha8Rng::seed_from_u64(7))
            .unwrap();
        let b = build_rerank_batch(&corpus, &mined, &cfg, 48, &mut ChaCha8Rng::seed_from_u64(7))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_steps_leaves_params_untouched() {
        let corpus = tiny_corpus(20, 10);
        let params = tiny_model(8);
        let before: Vec<Vec<f32>> =
            params.set.iter().map(|(_, _, t)| t.data().to_vec()).collect();
        let (after, metrics) = train_alternating(params, &corpus, &tiny_cfg(), 0, 1).unwrap();
        let after_data: Vec<Vec<f32>> =
            after.set.iter().map(|(_, _, t)| t.data().to_vec()).collect();
        assert_eq!(before, after_data);
        assert!(metrics.is_empty());
    }

    #[test]
    fn training_is_seed_deterministic_and_alternates() {
        let corpus = tiny_corpus(20, 10);
        let (pa, ma) = train_alternating(tiny_model(8), &corpus, &tiny_cfg(), 3, 42).unwrap();
        let (pb, mb) = train_alternating(tiny_model(8), &corpus, &tiny_cfg(), 3, 42).unwrap();
        assert_eq!(ma, mb, "metrics identical under one seed");
        assert_eq!(pa.fingerprint(), pb.fingerprint(), "weights identical too");

        assert_eq!(ma.len(), 3);
        for (i, m) in ma.iter().enumerate() {
            assert_eq!(m.step, i);
            assert!(m.select_loss.is_finite() && m.rerank_loss.is_finite());
            // refresh_interval = 2: probes at steps 0 and 2.
            assert_eq!(m.probe_recall_at_10.is_some(), i % 2 == 0);
        }

        let (_, mc) = train_alternating(tiny_model(8), &corpus, &tiny_cfg(), 3, 43).unwrap();
        assert_ne!(ma, mc, "different seed, different trajectory");
    }

    #[test]
    fn gradient_accumulation_is_worker_count_invariant() {
        let corpus = tiny_corpus(20, 10);
        let params = tiny_model(12);
        let cfg = TrainConfig { select_batch: 4, extra_negatives: 9, ..tiny_cfg() };
        let batch =
            build_select_batch(&corpus, &cfg, 48, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();

        let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let threaded = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let (l1, g1) = serial.install(|| select_grads(&params, &batch, 0.07, 0.1, 99));
        let (l4, g4) = threaded.install(|| select_grads(&params, &batch, 0.07, 0.1, 99));
        assert_eq!(l1, l4);
        for ((id1, t1), (id4, t4)) in g1.iter().zip(g4.iter()) {
            assert_eq!(id1, id4);
            assert_eq!(t1.data(), t4.data(), "gradients must not depend on thread count");
        }
    }

    #[test]
    fn select_loss_matches_public_op() {
        // The graph loss (matmul_bt + scale + cross-entropy) must agree with
        // the standalone info_nce_loss on the same similarity matrix.
        let corpus = tiny_corpus(20, 10);
        let params = tiny_model(21);
        let cfg = tiny_cfg();
        let batch =
            build_select_batch(&corpus, &cfg, 48, &mut ChaCha8Rng::seed_from_u64(17)).unwrap();
        let (loss, _) = select_grads(&params, &batch, cfg.temperature, 0.0, 0);

        let embed_s = |t: &Vec<Token>| crate::model::embed_state(&params, t);
        let embed_p = |t: &Vec<Token>| crate::model::embed_premise(&params, t);
        let q: Vec<Vec<f32>> = batch.states.iter().map(embed_s).collect();
        let mut k: Vec<Vec<f32>> = batch.positives.iter().map(embed_p).collect();
        k.extend(batch.negatives.iter().map(embed_p));
        let mut sims = Tensor::<f64>::zeros(q.len(), k.len());
        for (i, qi) in q.iter().enumerate() {
            for (j, kj) in k.iter().enumerate() {
                let dot: f64 = qi.iter().zip(kj).map(|(&a, &b)| a as f64 * b as f64).sum();
                sims.set(i, j, dot);
            }
        }
        assert!((loss - info_nce_loss(&sims, cfg.temperature)).abs() < 1e-5);
    }

    #[test]
    fn training_reduces_select_loss_on_tiny_overfit() {
        let corpus = tiny_corpus(12, 6);
        let cfg = TrainConfig {
            select_batch: 4,
            extra_negatives: 4,
            rerank_positives: 2,
            negatives_per_positive: 3,
            refresh_interval: 10,
            lr: 3e-3,
            warmup: 2,
            dropout: 0.0,
            ..tiny_cfg()
        };
        let (_, metrics) = train_alternating(tiny_model(30), &corpus, &cfg, 30, 7).unwrap();
        let first: f64 = metrics[..5].iter().map(|m| m.select_loss).sum::<f64>() / 5.0;
        let last: f64 = metrics[25..].iter().map(|m| m.select_loss).sum::<f64>() / 5.0;
        assert!(
            last < first,
            "select loss should fall while overfitting: first {first:.4}, last {last:.4}"
        );
    }

    #[test]
    fn pretrain_lm_starts_near_ln_vocab_and_improves() {
        let texts: Vec<String> = vec!["abcabcabcabcabcabc".into(), "xyzxyzxyzxyzxyz".into()];
        let params = init_params::<f32>(&ModelConfig::with_heads(1, 16, 2, 32), 5).unwrap();
        let (_, losses) = pretrain_lm(params, &texts, 500, 3).unwrap();
        assert!((losses[0] - (261.0f64).ln()).abs() < 0.3, "step-0 loss {:.3}", losses[0]);
        assert!(losses[499] < losses[0], "loss should drop on repetitive text");
    }

    #[test]
    fn pretrain_rejects_empty_texts() {
        let params = tiny_model(1);
        assert!(matches!(
            pretrain_lm(params, &[String::new()], 1, 0),
            Err(TrainError::InvalidConfig(_))
        ));
    }

    #[test]
    fn metrics_roundtrip_as_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let metrics = vec![
            MetricsRecord {
                step: 0,
                select_loss: 1.5,
                rerank_loss: 0.7,
                probe_recall_at_10: Some(0.25),
                lr: 1e-3,
            },
            MetricsRecord {
                step: 1,
                select_loss: 1.4,
                rerank_loss: 0.6,
                probe_recall_at_10: None,
                lr: 1e-3,
            },
        ];
        write_metrics(&path, &metrics).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().contains("probe_recall@10"));
        assert!(!text.lines().nth(1).unwrap().contains("probe_recall@10"));
        assert_eq!(read_metrics(&path).unwrap(), metrics);
    }

    #[test]
    fn config_validation_catches_bad_values() {
        assert!(TrainConfig { temperature: 0.0, ..tiny_cfg() }.validate().is_err());
        assert!(TrainConfig { select_batch: 0, ..tiny_cfg() }.validate().is_err());
        assert!(TrainConfig { dropout: 1.0, ..tiny_cfg() }.validate().is_err());
        assert!(tiny_cfg().validate().is_ok());
        assert!(TrainConfig::paper().validate().is_ok());
        assert!(TrainConfig::desk().validate().is_ok());
    }
}
