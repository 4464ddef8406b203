//! Decoder-only transformer backbone with rotary attention, shared by three
//! heads: a proof-state projection, a premise projection (both feeding
//! unit-norm embeddings for cosine retrieval), and a scalar re-ranking head.
//!
//! The backbone is pre-norm: each block is `x + Drop(Attn(LN(x)))` followed
//! by `x + Drop(MLP(LN(x)))`, with a final layer norm. Projection heads are
//! bias-free matrices, which is what makes the non-embedding parameter count
//! come out to `12 L D^2 + 2 D^2` plus the rerank column and norm gains.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nn::func::sigmoid;
use crate::nn::{Graph, NodeId, ParamId, ParamSet, Real, Tensor};
use crate::text::{Token, EOS_PREMISE, EOS_STATE, VOCAB_SIZE};

pub const CHECKPOINT_FORMAT: &str = "hammerlite-checkpoint-v1";

/// Keeps sigmoid outputs strictly inside (0,1) even when the logit saturates
/// the floating-point range.
const SCORE_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint {path}: {message}")]
    MalformedCheckpoint { path: String, message: String },
}

/// Architecture hyperparameters. [`ModelConfig::scaled`] follows the paper
/// family rule `H = D/64`; [`ModelConfig::with_heads`] admits narrower desk
/// models where that rule would give zero heads.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff: usize,
    pub vocab: usize,
    pub ctx: usize,
}

impl ModelConfig {
    /// Config in the scaled family: `H = D/64`, `FF = 4D`.
    pub fn scaled(layers: usize, dim: usize, ctx: usize) -> Self {
        assert!(dim % 64 == 0, "scaled-family width must be a multiple of 64");
        ModelConfig { layers, dim, heads: dim / 64, ff: 4 * dim, vocab: VOCAB_SIZE, ctx }
    }

    /// Config with an explicit head count (head dim must stay even for
    /// rotary pairs).
    pub fn with_heads(layers: usize, dim: usize, heads: usize, ctx: usize) -> Self {
        ModelConfig { layers, dim, heads, ff: 4 * dim, vocab: VOCAB_SIZE, ctx }
    }

    /// Default desk-scale model: small enough to train on one CPU core in
    /// minutes.
    pub fn desk() -> Self {
        Self::scaled(2, 64, 128)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::InvalidConfig(m));
        if self.layers == 0 {
            return fail("layer count must be positive".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!("heads {} must divide dim {}", self.heads, self.dim));
        }
        if (self.dim / self.heads) % 2 != 0 {
            return fail(format!("head dim {} must be even for rotary pairs", self.dim / self.heads));
        }
        if self.ff != 4 * self.dim {
            return fail(format!("ff {} must equal 4*dim ({})", self.ff, 4 * self.dim));
        }
        if self.vocab == 0 || self.ctx < 2 {
            return fail("vocab must be positive and ctx at least 2".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Non-embedding parameter count: `12 L D^2` per-layer weights, `2 D^2` for
/// the two embedding projections, `D` for the rerank column, and the norm
/// gains/biases (`4 L D + 2 D`).
pub fn param_count(config: &ModelConfig) -> usize {
    let (l, d) = (config.layers, config.dim);
    12 * l * d * d + 2 * d * d + d + 4 * l * d + 2 * d
}

#[derive(Clone, Debug)]
struct LayerIds {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    w_up: ParamId,
    w_down: ParamId,
}

#[derive(Clone, Debug)]
struct ParamIds {
    tok_embed: ParamId,
    layers: Vec<LayerIds>,
    final_gain: ParamId,
    final_bias: ParamId,
    state_proj: ParamId,
    premise_proj: ParamId,
    rerank_proj: ParamId,
}

/// Model weights: a [`ParamSet`] plus the config and typed ids into it.
#[derive(Clone, Debug)]
pub struct ModelParams<R: Real> {
    pub config: ModelConfig,
    pub set: ParamSet<R>,
    ids: ParamIds,
}

/// Allocates all tensors as zeros, in the fixed declaration order that both
/// initialization and checkpoint loading rely on.
fn allocate<R: Real>(config: &ModelConfig) -> (ParamSet<R>, ParamIds) {
    let d = config.dim;
    let mut set = ParamSet::new();
    let tok_embed = set.add("tok_embed", Tensor::zeros(config.vocab, d));
    let mut layers = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        layers.push(LayerIds {
            ln1_gain: set.add(format!("layer{l}.ln1.gain"), Tensor::zeros(1, d)),
            ln1_bias: set.add(format!("layer{l}.ln1.bias"), Tensor::zeros(1, d)),
            wq: set.add(format!("layer{l}.attn.wq"), Tensor::zeros(d, d)),
            wk: set.add(format!("layer{l}.attn.wk"), Tensor::zeros(d, d)),
            wv: set.add(format!("layer{l}.attn.wv"), Tensor::zeros(d, d)),
            wo: set.add(format!("layer{l}.attn.wo"), Tensor::zeros(d, d)),
            ln2_gain: set.add(format!("layer{l}.ln2.gain"), Tensor::zeros(1, d)),
            ln2_bias: set.add(format!("layer{l}.ln2.bias"), Tensor::zeros(1, d)),
            w_up: set.add(format!("layer{l}.mlp.w_up"), Tensor::zeros(d, config.ff)),
            w_down: set.add(format!("layer{l}.mlp.w_down"), Tensor::zeros(config.ff, d)),
        });
    }
    let final_gain = set.add("final_ln.gain", Tensor::zeros(1, d));
    let final_bias = set.add("final_ln.bias", Tensor::zeros(1, d));
    let state_proj = set.add("state_proj", Tensor::zeros(d, d));
    let premise_proj = set.add("premise_proj", Tensor::zeros(d, d));
    let rerank_proj = set.add("rerank_proj", Tensor::zeros(d, 1));
    (
        set,
        ParamIds { tok_embed, layers, final_gain, final_bias, state_proj, premise_proj, rerank_proj },
    )
}

/// Initializes weights from a scaled normal (std 0.02; residual output
/// projections shrunk by `1/sqrt(2L)`), layer norms to gain 1 / bias 0.
/// Deterministic per seed.
pub fn init_params<R: Real>(config: &ModelConfig, seed: u64) -> Result<ModelParams<R>, ModelError> {
    config.validate()?;
    let (mut set, ids) = allocate::<R>(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = Normal::new(0.0, 0.02).expect("valid std");
    let residual = Normal::new(0.0, 0.02 / (2.0 * config.layers as f64).sqrt()).expect("valid std");

    let fill = |set: &mut ParamSet<R>, id: ParamId, dist: &Normal<f64>, rng: &mut ChaCha8Rng| {
        for v in set.tensor_mut(id).data_mut() {
            *v = R::from_f64(dist.sample(rng));
        }
    };
    let ones = |set: &mut ParamSet<R>, id: ParamId| {
        for v in set.tensor_mut(id).data_mut() {
            *v = R::ONE;
        }
    };

    fill(&mut set, ids.tok_embed, &base, &mut rng);
    for layer in &ids.layers {
        ones(&mut set, layer.ln1_gain);
        fill(&mut set, layer.wq, &base, &mut rng);
        fill(&mut set, layer.wk, &base, &mut rng);
        fill(&mut set, layer.wv, &base, &mut rng);
        fill(&mut set, layer.wo, &residual, &mut rng);
        ones(&mut set, layer.ln2_gain);
        fill(&mut set, layer.w_up, &base, &mut rng);
        fill(&mut set, layer.w_down, &residual, &mut rng);
    }
    ones(&mut set, ids.final_gain);
    fill(&mut set, ids.state_proj, &base, &mut rng);
    fill(&mut set, ids.premise_proj, &base, &mut rng);
    fill(&mut set, ids.rerank_proj, &base, &mut rng);

    Ok(ModelParams { config: *config, set, ids })
}

impl<R: Real> ModelParams<R> {
    /// Converts scalar width (e.g. a trained `f32` model to `f64` for
    /// verification).
    pub fn convert<S: Real>(&self) -> ModelParams<S> {
        ModelParams { config: self.config, set: self.set.convert(), ids: self.ids.clone() }
    }

    fn check_tokens(&self, tokens: &[Token]) {
        assert!(!tokens.is_empty(), "empty token sequence");
        assert!(
            tokens.len() <= self.config.ctx,
            "sequence length {} exceeds context {}",
            tokens.len(),
            self.config.ctx
        );
        for &t in tokens {
            assert!((t as usize) < self.config.vocab, "token {t} outside vocabulary");
        }
    }

    /// Builds the backbone onto an existing graph; returns the `[seq, D]`
    /// hidden-state node after the final layer norm. `dropout` is the
    /// training-time rate (0 for inference).
    pub fn backbone_graph(
        &self,
        g: &mut Graph<'_, R>,
        tokens: &[Token],
        dropout: f64,
        rng: &mut impl Rng,
    ) -> NodeId {
        self.check_tokens(tokens);
        let tab = g.param(self.ids.tok_embed);
        let mut h = g.gather(tab, tokens);
        for layer in &self.ids.layers {
            let g1 = g.param(layer.ln1_gain);
            let b1 = g.param(layer.ln1_bias);
            let normed = g.layer_norm(h, g1, b1);
            let wq = g.param(layer.wq);
            let wk = g.param(layer.wk);
            let wv = g.param(layer.wv);
            let q = g.matmul(normed, wq);
            let k = g.matmul(normed, wk);
            let v = g.matmul(normed, wv);
            let attn = g.attention(q, k, v, self.config.heads);
            let wo = g.param(layer.wo);
            let proj = g.matmul(attn, wo);
            let proj = g.dropout(proj, dropout, rng);
            h = g.add(h, proj);

            let g2 = g.param(layer.ln2_gain);
            let b2 = g.param(layer.ln2_bias);
            let normed = g.layer_norm(h, g2, b2);
            let w_up = g.param(layer.w_up);
            let up = g.matmul(normed, w_up);
            let act = g.gelu(up);
            let w_down = g.param(layer.w_down);
            let down = g.matmul(act, w_down);
            let down = g.dropout(down, dropout, rng);
            h = g.add(h, down);
        }
        let fg = g.param(self.ids.final_gain);
        let fb = g.param(self.ids.final_bias);
        g.layer_norm(h, fg, fb)
    }

    /// Unit-norm embedding node (`[1, D]`) of the final position through the
    /// given projection head.
    fn embedding_graph(
        &self,
        g: &mut Graph<'_, R>,
        tokens: &[Token],
        proj: ParamId,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> NodeId {
        let h = self.backbone_graph(g, tokens, dropout, rng);
        let last = g.last_row(h);
        let w = g.param(proj);
        let projected = g.matmul(last, w);
        g.l2_normalize(projected)
    }

    pub fn state_embedding_graph(
        &self,
        g: &mut Graph<'_, R>,
        tokens: &[Token],
        dropout: f64,
        rng: &mut impl Rng,
    ) -> NodeId {
        assert_eq!(tokens.last(), Some(&EOS_STATE), "state sequence must end in EOS_STATE");
        self.embedding_graph(g, tokens, self.ids.state_proj, dropout, rng)
    }

    pub fn premise_embedding_graph(
        &self,
        g: &mut Graph<'_, R>,
        tokens: &[Token],
        dropout: f64,
        rng: &mut impl Rng,
    ) -> NodeId {
        assert_eq!(tokens.last(), Some(&EOS_PREMISE), "premise sequence must end in EOS_PREMISE");
        self.embedding_graph(g, tokens, self.ids.premise_proj, dropout, rng)
    }

    /// Scalar logit node (`[1, 1]`) of the rerank head on a pair encoding.
    pub fn rerank_logit_graph(
        &self,
        g: &mut Graph<'_, R>,
        tokens: &[Token],
        dropout: f64,
        rng: &mut impl Rng,
    ) -> NodeId {
        assert_eq!(tokens.last(), Some(&EOS_PREMISE), "pair sequence must end in EOS_PREMISE");
        let h = self.backbone_graph(g, tokens, dropout, rng);
        let last = g.last_row(h);
        let w = g.param(self.ids.rerank_proj);
        g.matmul(last, w)
    }

    /// Next-token logits node (`[seq-1, vocab]`, predicting `tokens[1..]`)
    /// through the tied embedding.
    fn lm_logits_graph(
        &self,
        g: &mut Graph<'_, R>,
        tokens: &[Token],
        dropout: f64,
        rng: &mut impl Rng,
    ) -> NodeId {
        assert!(tokens.len() >= 2, "language modeling needs at least two tokens");
        let h = self.backbone_graph(g, tokens, dropout, rng);
        let prefix = g.rows(h, 0, tokens.len() - 1);
        let tab = g.param(self.ids.tok_embed);
        g.matmul_bt(prefix, tab)
    }

    /// Mean next-token cross-entropy of one sequence, as a scalar node.
    pub fn lm_loss_graph(
        &self,
        g: &mut Graph<'_, R>,
        tokens: &[Token],
        dropout: f64,
        rng: &mut impl Rng,
    ) -> NodeId {
        let logits = self.lm_logits_graph(g, tokens, dropout, rng);
        let targets = tokens[1..].iter().map(|&t| t as usize).collect();
        g.softmax_cross_entropy(logits, targets)
    }

    /// SHA-256 over config and all weights; pins a trained model's identity
    /// so indexes and reports can verify they match it.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_string(&self.config).expect("config serializes").as_bytes());
        for (_, name, tensor) in self.set.iter() {
            hasher.update(name.as_bytes());
            hasher.update((tensor.rows() as u64).to_le_bytes());
            hasher.update((tensor.cols() as u64).to_le_bytes());
            for v in tensor.data() {
                hasher.update(v.to_f64().to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hidden states `[seq, D]` after the full backbone (inference path, no
/// dropout).
pub fn backbone_forward<R: Real>(params: &ModelParams<R>, tokens: &[Token]) -> Tensor<R> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new(&params.set);
    let h = params.backbone_graph(&mut g, tokens, 0.0, &mut rng);
    g.value(h).clone()
}

/// Unit-norm proof-state embedding (length D).
pub fn embed_state<R: Real>(params: &ModelParams<R>, tokens: &[Token]) -> Vec<R> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new(&params.set);
    let e = params.state_embedding_graph(&mut g, tokens, 0.0, &mut rng);
    g.value(e).data().to_vec()
}

/// Unit-norm premise embedding (length D).
pub fn embed_premise<R: Real>(params: &ModelParams<R>, tokens: &[Token]) -> Vec<R> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new(&params.set);
    let e = params.premise_embedding_graph(&mut g, tokens, 0.0, &mut rng);
    g.value(e).data().to_vec()
}

/// Relevance score of a (state, premise) pair encoding, strictly in (0,1).
pub fn rerank_score<R: Real>(params: &ModelParams<R>, pair_tokens: &[Token]) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new(&params.set);
    let logit = params.rerank_logit_graph(&mut g, pair_tokens, 0.0, &mut rng);
    let s = sigmoid(g.value(logit).item().to_f64());
    s.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

/// Next-token logits `[seq, vocab]` through the tied embedding.
pub fn lm_logits<R: Real>(params: &ModelParams<R>, tokens: &[Token]) -> Tensor<R> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new(&params.set);
    let h = params.backbone_graph(&mut g, tokens, 0.0, &mut rng);
    let tab = g.param(params.ids.tok_embed);
    let logits = g.matmul_bt(h, tab);
    g.value(logits).clone()
}

#[derive(Serialize, Deserialize)]
struct CheckpointTensor {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    config: ModelConfig,
    tensors: Vec<CheckpointTensor>,
}

/// Writes weights as JSON with `f64` arrays; lossless for `f32` models, so
/// save/load round-trips bit-exactly.
pub fn save_checkpoint<R: Real>(params: &ModelParams<R>, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        config: params.config,
        tensors: params
            .set
            .iter()
            .map(|(_, name, t)| CheckpointTensor {
                name: name.to_string(),
                rows: t.rows(),
                cols: t.cols(),
                data: t.to_f64_vec(),
            })
            .collect(),
    };
    let out = File::create(path)
        .map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
    serde_json::to_writer(BufWriter::new(out), &file)
        .map_err(|e| ModelError::MalformedCheckpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        })
}

pub fn load_checkpoint<R: Real>(path: impl AsRef<Path>) -> Result<ModelParams<R>, ModelError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| ModelError::Io { path: display.clone(), source })?;
    let parsed: CheckpointFile = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| ModelError::MalformedCheckpoint { path: display.clone(), message: e.to_string() })?;
    if parsed.format != CHECKPOINT_FORMAT {
        return Err(ModelError::MalformedCheckpoint {
            path: display,
            message: format!("unsupported format {:?}", parsed.format),
        });
    }
    parsed.config.validate()?;
    let (mut set, ids) = allocate::<R>(&parsed.config);
    let mut filled = vec![false; set.len()];
    for t in &parsed.tensors {
        let Some((pid, _, existing)) = set.iter().find(|(_, name, _)| *name == t.name) else {
            return Err(ModelError::MalformedCheckpoint {
                path: display,
                message: format!("unexpected tensor {:?}", t.name),
            });
        };
        if existing.shape() != (t.rows, t.cols) || t.data.len() != t.rows * t.cols {
            return Err(ModelError::MalformedCheckpoint {
                path: display,
                message: format!("tensor {:?} has wrong shape", t.name),
            });
        }
        filled[pid.0] = true;
        let pid = pid;
        *set.tensor_mut(pid) = Tensor::from_f64(t.rows, t.cols, &t.data);
    }
    if let Some(missing) = filled.iter().position(|&f| !f) {
        return Err(ModelError::MalformedCheckpoint {
            path: display,
            message: format!("missing tensor {:?}", set.name(ParamId(missing))),
        });
    }
    Ok(ModelParams { config: parsed.config, set, ids })
}
