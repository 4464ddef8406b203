//! Command-line front end: wires the corpus, training, retrieval, and
//! evaluation modules together and records a manifest for every run.

use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use hammerlite::corpus::{
    corpus_stats, extract_pairs, load_corpus, sample_fraction, save_corpus, split_corpus, Corpus,
};
use hammerlite::eval::{
    ensemble_union, evaluate_suite, load_oracle, save_oracle, validate_oracle, write_curve_csv,
    write_report_json, Bm25Retriever, EvalConfig, EvalReport, ModelRetriever,
};
use hammerlite::model::{
    init_params, load_checkpoint, param_count, save_checkpoint, ModelConfig, ModelParams,
    CHECKPOINT_FORMAT,
};
use hammerlite::retrieval::{
    bm25_build, build_index, load_index, retrieve, save_index, RetrieveMode, INDEX_FORMAT,
};
use hammerlite::synth::{generate, SynthSpec};
use hammerlite::training::{
    build_rerank_batch, build_select_batch, pretrain_lm, recompute_negatives_for_rerank,
    rerank_grads, select_grads, train_alternating, write_metrics, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "hammerlite",
    version,
    about = "Two-stage neural premise selection with a BM25 baseline and a mock-prover evaluation harness"
)]
struct Cli {
    /// Master seed for anything stochastic in the subcommand.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads. Results are identical for any value.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    /// JSON config file; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for artifacts and the run manifest.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus plus a matching prover oracle.
    Synth(SynthArgs),
    /// Load, split, subsample, and re-emit a corpus.
    Ingest(IngestArgs),
    /// Print datapoint/state/premise counts per source.
    Stats(CorpusPaths),
    /// Alternating SELECT/RERANK training.
    Train(TrainArgs),
    /// Next-byte language-model pretraining over corpus texts.
    PretrainLm(PretrainArgs),
    /// Embed every premise with a trained model and save the index.
    Index(IndexArgs),
    /// Retrieve premises for one proof state.
    Query(QueryArgs),
    /// Run the tactic × top-k harness with the neural pipeline.
    Evaluate(EvaluateArgs),
    /// Run the same harness with the BM25 baseline.
    Bm25Eval(Bm25EvalArgs),
    /// Compare autodiff gradients against finite differences.
    GradCheck(GradCheckArgs),
    /// Print the non-embedding parameter count for an (L, D) pair.
    ParamCount(ParamCountArgs),
    /// Union several evaluation reports over the same theorem set.
    Ensemble(EnsembleArgs),
}

#[derive(Args)]
struct CorpusPaths {
    /// Premise JSONL file.
    #[arg(long)]
    premises: PathBuf,
    /// Proof-state JSONL file.
    #[arg(long)]
    states: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Premise count.
    #[arg(long)]
    premises: Option<usize>,
    /// Proof-state count.
    #[arg(long)]
    states: Option<usize>,
    /// Shared-symbol vocabulary size.
    #[arg(long)]
    vocab: Option<usize>,
    /// Probability that a ground-truth symbol appears in the state text.
    #[arg(long)]
    overlap: Option<f64>,
    /// Rate of misleading signature symbols injected into state texts.
    #[arg(long)]
    distractors: Option<f64>,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    paths: CorpusPaths,
    /// Train/valid/test fractions, e.g. 0.8,0.1,0.1.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    split: Option<Vec<f64>>,
    /// Keep this fraction of training datapoints.
    #[arg(long)]
    fraction: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    paths: CorpusPaths,
    /// Optimization steps (each one SELECT plus one RERANK update).
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    /// Start from an existing checkpoint instead of fresh weights.
    #[arg(long)]
    init: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    paths: CorpusPaths,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct IndexArgs {
    #[command(flatten)]
    paths: CorpusPaths,
    /// Trained model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct QueryArgs {
    #[command(flatten)]
    paths: CorpusPaths,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Saved premise index; rebuilt from the checkpoint when omitted.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Query this state id from the corpus...
    #[arg(long, conflicts_with = "state_text")]
    state_id: Option<u32>,
    /// ...or this literal proof-state text.
    #[arg(long)]
    state_text: Option<String>,
    #[arg(long)]
    select_k: Option<usize>,
    #[arg(long)]
    rerank_k: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeFlag>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    paths: CorpusPaths,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prover oracle JSONL file.
    #[arg(long)]
    oracle: PathBuf,
    /// Theorem ids to attempt; default is every oracle entry.
    #[arg(long, value_delimiter = ',')]
    theorems: Option<Vec<u32>>,
    #[command(flatten)]
    eval: EvalFlags,
}

#[derive(Args)]
struct Bm25EvalArgs {
    #[command(flatten)]
    paths: CorpusPaths,
    #[arg(long)]
    oracle: PathBuf,
    #[arg(long, value_delimiter = ',')]
    theorems: Option<Vec<u32>>,
    /// Retrieved-list length; defaults to the rerank depth K_R.
    #[arg(long)]
    k: Option<usize>,
    #[command(flatten)]
    eval: EvalFlags,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Parameter coordinates to sample.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    /// Maximum tolerated relative error.
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

#[derive(Args)]
struct ParamCountArgs {
    #[arg(long)]
    layers: usize,
    #[arg(long)]
    dim: usize,
}

#[derive(Args)]
struct EnsembleArgs {
    /// Evaluation report JSON files to union.
    #[arg(long, num_args = 1.., required = true)]
    reports: Vec<PathBuf>,
}

/// Model-shape overrides; unset fields come from the config file or desk
/// defaults. Changing `dim` without `heads` keeps the `H = D/64` family rule
/// (minimum one head).
#[derive(Args)]
struct ModelFlags {
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ctx: Option<usize>,
}

impl ModelFlags {
    fn apply(&self, mut config: ModelConfig) -> ModelConfig {
        if let Some(l) = self.layers {
            config.layers = l;
        }
        if let Some(d) = self.dim {
            config.dim = d;
            config.ff = 4 * d;
            config.heads = (d / 64).max(1);
        }
        if let Some(h) = self.heads {
            config.heads = h;
        }
        if let Some(c) = self.ctx {
            config.ctx = c;
        }
        config
    }
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    select_batch: Option<usize>,
    #[arg(long)]
    extra_negatives: Option<usize>,
    #[arg(long)]
    refresh_interval: Option<usize>,
    #[arg(long)]
    early_stop_recall: Option<f64>,
}

impl TrainFlags {
    fn apply(&self, mut config: TrainConfig) -> TrainConfig {
        if let Some(v) = self.lr {
            config.lr = v;
        }
        if let Some(v) = self.warmup {
            config.warmup = v;
        }
        if let Some(v) = self.dropout {
            config.dropout = v;
        }
        if let Some(v) = self.select_batch {
            config.select_batch = v;
        }
        if let Some(v) = self.extra_negatives {
            config.extra_negatives = v;
        }
        if let Some(v) = self.refresh_interval {
            config.refresh_interval = v;
        }
        if let Some(v) = self.early_stop_recall {
            config.early_stop_recall = Some(v);
        }
        config
    }
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ModeFlag {
    Full,
    SelectOnly,
}

impl From<ModeFlag> for RetrieveMode {
    fn from(m: ModeFlag) -> Self {
        match m {
            ModeFlag::Full => RetrieveMode::Full,
            ModeFlag::SelectOnly => RetrieveMode::SelectOnly,
        }
    }
}

#[derive(Args)]
struct EvalFlags {
    /// Comma-separated tactic names.
    #[arg(long, value_delimiter = ',')]
    tactics: Option<Vec<String>>,
    /// Strictly increasing premise-count sweep, e.g. 1,2,4,8.
    #[arg(long, value_delimiter = ',')]
    k_list: Option<Vec<usize>>,
    /// Per-step timeout in seconds (budget bookkeeping only).
    #[arg(long)]
    timeout: Option<f64>,
    #[arg(long)]
    select_k: Option<usize>,
    #[arg(long)]
    rerank_k: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeFlag>,
    /// Retrieve once per tactic with the tactic name prompted in.
    #[arg(long)]
    tactic_prompt: bool,
}

impl EvalFlags {
    fn apply(&self, mut config: EvalConfig) -> EvalConfig {
        if let Some(t) = &self.tactics {
            config.tactics = t.clone();
        }
        if let Some(k) = &self.k_list {
            config.k_list = k.clone();
        }
        if let Some(v) = self.timeout {
            config.timeout = v;
        }
        if let Some(v) = self.select_k {
            config.k_select = v;
        }
        if let Some(v) = self.rerank_k {
            config.k_rerank = v;
        }
        if let Some(m) = self.mode {
            config.mode = m.into();
        }
        if self.tactic_prompt {
            config.tactic_prompt = true;
        }
        config
    }
}

/// The on-disk config document: any subset of these sections, each a full
/// or partial override of the desk defaults.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    model: ModelConfig,
    train: TrainConfig,
    eval: EvalConfig,
    synth: SynthSpec,
}

type AppError = Box<dyn Error + Send + Sync>;
type AppResult = Result<(), AppError>;

fn load_file_config(path: Option<&Path>) -> Result<FileConfig, AppError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| format!("reading config {}: {e}", p.display()))?;
            Ok(serde_json::from_str(&text)
                .map_err(|e| format!("parsing config {}: {e}", p.display()))?)
        }
    }
}

/// Every run drops a manifest next to its artifacts: the resolved config,
/// seed, and format versions pin down how to reproduce the outputs.
fn write_manifest(
    out: &Path,
    command: &str,
    seed: u64,
    workers: usize,
    inputs: &[(&str, &Path)],
    outputs: &[(&str, &Path)],
    config: Value,
) -> AppResult {
    let display =
        |pairs: &[(&str, &Path)]| -> Value {
            Value::Object(pairs.iter().map(|(k, p)| ((*k).to_string(), json!(p.display().to_string()))).collect())
        };
    let manifest = json!({
        "command": command,
        "seed": seed,
        "workers": workers,
        "versions": {
            "hammerlite": env!("CARGO_PKG_VERSION"),
            "checkpoint_format": CHECKPOINT_FORMAT,
            "index_format": INDEX_FORMAT,
        },
        "inputs": display(inputs),
        "outputs": display(outputs),
        "config": config,
    });
    let path = out.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .map_err(|e| format!("writing {}: {e}", path.display()))?;
    Ok(())
}

/// Input files are never rewritten; catch an `--out` that aliases one.
fn guard_output(out_file: &Path, inputs: &[&Path]) -> AppResult {
    for input in inputs {
        let same = match (fs::canonicalize(out_file), fs::canonicalize(input)) {
            (Ok(a), Ok(b)) => a == b,
            _ => false,
        };
        if same {
            return Err(format!(
                "refusing to overwrite input file {} (choose a different --out)",
                input.display()
            )
            .into());
        }
    }
    Ok(())
}

fn load_corpus_with_pairs(paths: &CorpusPaths) -> Result<Corpus, AppError> {
    let mut corpus = load_corpus(&paths.premises, &paths.states)?;
    corpus.datapoints = extract_pairs(&corpus);
    Ok(corpus)
}

fn theorem_ids(
    oracle: &hammerlite::eval::ProverOracle,
    explicit: &Option<Vec<u32>>,
) -> Vec<u32> {
    match explicit {
        Some(ids) => ids.clone(),
        None => oracle.ids(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if cli.workers == 0 {
        eprintln!("error: --workers must be at least 1");
        return ExitCode::FAILURE;
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: building worker pool: {e}");
            return ExitCode::FAILURE;
        }
    };
    match pool.install(|| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> AppResult {
    fs::create_dir_all(&cli.out)
        .map_err(|e| format!("creating output dir {}: {e}", cli.out.display()))?;
    let file_config = load_file_config(cli.config.as_deref())?;
    let seed = cli.seed.unwrap_or(0);
    let out = cli.out.as_path();

    match &cli.command {
        Command::Synth(args) => cmd_synth(cli, &file_config, args),
        Command::Ingest(args) => cmd_ingest(cli, seed, args),
        Command::Stats(paths) => cmd_stats(cli, paths),
        Command::Train(args) => cmd_train(cli, &file_config, seed, args),
        Command::PretrainLm(args) => cmd_pretrain(cli, &file_config, seed, args),
        Command::Index(args) => cmd_index(cli, args),
        Command::Query(args) => cmd_query(cli, &file_config, args),
        Command::Evaluate(args) => cmd_evaluate(cli, &file_config, args),
        Command::Bm25Eval(args) => cmd_bm25_eval(cli, &file_config, args),
        Command::GradCheck(args) => cmd_grad_check(cli, seed, args, out),
        Command::ParamCount(args) => cmd_param_count(cli, args),
        Command::Ensemble(args) => cmd_ensemble(cli, args),
    }
}

fn cmd_synth(cli: &Cli, file_config: &FileConfig, args: &SynthArgs) -> AppResult {
    let mut spec = file_config.synth.clone();
    if let Some(v) = args.premises {
        spec.premises = v;
    }
    if let Some(v) = args.states {
        spec.states = v;
    }
    if let Some(v) = args.vocab {
        spec.vocab = v;
    }
    if let Some(v) = args.overlap {
        spec.overlap = v;
    }
    if let Some(v) = args.distractors {
        spec.distractors = v;
    }
    if let Some(s) = cli.seed {
        spec.seed = s;
    }

    let (corpus, oracle) = generate(&spec)?;
    let premises_path = cli.out.join("premises.jsonl");
    let states_path = cli.out.join("states.jsonl");
    let oracle_path = cli.out.join("oracle.jsonl");
    save_corpus(&corpus, &premises_path, &states_path)?;
    save_oracle(&oracle, &oracle_path)?;

    println!("{}", corpus_stats(&corpus));
    println!(
        "wrote {} premises, {} states, {} oracle entries under {}",
        corpus.premises.len(),
        corpus.states.len(),
        oracle.len(),
        cli.out.display()
    );
    write_manifest(
        &cli.out,
        "synth",
        spec.seed,
        cli.workers,
        &[],
        &[
            ("premises", &premises_path),
            ("states", &states_path),
            ("oracle", &oracle_path),
        ],
        json!({ "synth": spec }),
    )
}

fn cmd_ingest(cli: &Cli, seed: u64, args: &IngestArgs) -> AppResult {
    let mut corpus = load_corpus_with_pairs(&args.paths)?;
    if let Some(f) = &args.split {
        corpus = split_corpus(corpus, (f[0], f[1], f[2]), seed)?;
    }
    if let Some(fraction) = args.fraction {
        corpus = sample_fraction(corpus, fraction, seed)?;
    }

    let premises_path = cli.out.join("premises.jsonl");
    let states_path = cli.out.join("states.jsonl");
    guard_output(&premises_path, &[&args.paths.premises])?;
    guard_output(&states_path, &[&args.paths.states])?;
    save_corpus(&corpus, &premises_path, &states_path)?;

    println!("{}", corpus_stats(&corpus));
    write_manifest(
        &cli.out,
        "ingest",
        seed,
        cli.workers,
        &[("premises", &args.paths.premises), ("states", &args.paths.states)],
        &[("premises", &premises_path), ("states", &states_path)],
        json!({ "split": args.split, "fraction": args.fraction }),
    )
}

fn cmd_stats(cli: &Cli, paths: &CorpusPaths) -> AppResult {
    let corpus = load_corpus_with_pairs(paths)?;
    println!("{}", corpus_stats(&corpus));
    write_manifest(
        &cli.out,
        "stats",
        0,
        cli.workers,
        &[("premises", &paths.premises), ("states", &paths.states)],
        &[],
        json!({}),
    )
}

fn cmd_train(cli: &Cli, file_config: &FileConfig, seed: u64, args: &TrainArgs) -> AppResult {
    let corpus = load_corpus_with_pairs(&args.paths)?;
    let train_config = args.train.apply(file_config.train.clone());

    let params: ModelParams<f32> = match &args.init {
        Some(path) => load_checkpoint(path)?,
        None => {
            let model_config = args.model.apply(file_config.model);
            init_params(&model_config, seed)?
        }
    };
    let model_config = params.config;

    let (params, metrics) = train_alternating(params, &corpus, &train_config, args.steps, seed)?;

    let checkpoint_path = cli.out.join("checkpoint.json");
    let metrics_path = cli.out.join("metrics.jsonl");
    save_checkpoint(&params, &checkpoint_path)?;
    write_metrics(&metrics_path, &metrics)?;

    if let Some(last) = metrics.last() {
        println!(
            "finished at step {}: select loss {:.4}, rerank loss {:.4}",
            last.step, last.select_loss, last.rerank_loss
        );
    }
    if let Some(recall) = metrics.iter().rev().find_map(|m| m.probe_recall_at_10) {
        println!("last probe recall@10: {recall:.4}");
    }
    println!("checkpoint: {}", checkpoint_path.display());

    let mut inputs: Vec<(&str, &Path)> =
        vec![("premises", args.paths.premises.as_path()), ("states", args.paths.states.as_path())];
    if let Some(init) = &args.init {
        inputs.push(("init", init.as_path()));
    }
    write_manifest(
        &cli.out,
        "train",
        seed,
        cli.workers,
        &inputs,
        &[("checkpoint", &checkpoint_path), ("metrics", &metrics_path)],
        json!({ "model": model_config, "train": train_config, "steps": args.steps }),
    )
}

fn cmd_pretrain(cli: &Cli, file_config: &FileConfig, seed: u64, args: &PretrainArgs) -> AppResult {
    let corpus = load_corpus_with_pairs(&args.paths)?;
    let model_config = args.model.apply(file_config.model);
    let params: ModelParams<f32> = init_params(&model_config, seed)?;

    let texts: Vec<String> = corpus
        .premises
        .iter()
        .map(|p| p.text())
        .chain(corpus.states.iter().map(|s| s.text.clone()))
        .collect();
    let (params, losses) = pretrain_lm(params, &texts, args.steps, seed)?;

    let checkpoint_path = cli.out.join("checkpoint.json");
    save_checkpoint(&params, &checkpoint_path)?;
    let losses_path = cli.out.join("lm_losses.jsonl");
    let mut body = String::new();
    for (step, loss) in losses.iter().enumerate() {
        body.push_str(&serde_json::to_string(&json!({ "step": step, "lm_loss": loss }))?);
        body.push('\n');
    }
    fs::write(&losses_path, body)?;

    println!(
        "pretrained {} steps: lm loss {:.4} -> {:.4}",
        losses.len(),
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    write_manifest(
        &cli.out,
        "pretrain-lm",
        seed,
        cli.workers,
        &[("premises", &args.paths.premises), ("states", &args.paths.states)],
        &[("checkpoint", &checkpoint_path), ("losses", &losses_path)],
        json!({ "model": model_config, "steps": args.steps }),
    )
}

fn cmd_index(cli: &Cli, args: &IndexArgs) -> AppResult {
    let corpus = load_corpus_with_pairs(&args.paths)?;
    let params: ModelParams<f32> = load_checkpoint(&args.checkpoint)?;
    let index = build_index(&params, &corpus.premises, None)?;
    let index_path = cli.out.join("index.json");
    save_index(&index, &index_path)?;
    println!(
        "indexed {} premises ({} dims) -> {}",
        index.len(),
        index.dim(),
        index_path.display()
    );
    write_manifest(
        &cli.out,
        "index",
        0,
        cli.workers,
        &[
            ("premises", &args.paths.premises),
            ("states", &args.paths.states),
            ("checkpoint", &args.checkpoint),
        ],
        &[("index", &index_path)],
        json!({ "fingerprint": index.fingerprint() }),
    )
}

fn cmd_query(cli: &Cli, file_config: &FileConfig, args: &QueryArgs) -> AppResult {
    let corpus = load_corpus_with_pairs(&args.paths)?;
    let params: ModelParams<f32> = load_checkpoint(&args.checkpoint)?;
    let index = match &args.index {
        Some(path) => load_index(path, Some(&params.fingerprint()))?,
        None => build_index(&params, &corpus.premises, None)?,
    };

    let state_text = match (&args.state_text, args.state_id) {
        (Some(text), _) => text.clone(),
        (None, Some(id)) => {
            corpus.state(id).ok_or_else(|| format!("state id {id} not in corpus"))?.text.clone()
        }
        (None, None) => return Err("pass --state-id or --state-text".into()),
    };

    let eval_config = file_config.eval.clone();
    let k_select = args.select_k.unwrap_or(eval_config.k_select);
    let k_rerank = args.rerank_k.unwrap_or(eval_config.k_rerank).min(k_select);
    let mode = args.mode.map_or(eval_config.mode, RetrieveMode::from);
    let result = retrieve(&state_text, &index, &corpus, &params, k_select, k_rerank, mode);

    let rows: Vec<Value> = result
        .ranked
        .iter()
        .enumerate()
        .map(|(rank, &(id, score))| {
            let name = corpus.premise(id).map_or("?", |p| p.name.as_str());
            json!({ "rank": rank + 1, "id": id, "name": name, "score": score })
        })
        .collect();
    let payload = json!({ "stage": result.stage, "state": state_text, "ranked": rows });
    println!("{}", serde_json::to_string_pretty(&payload)?);
    let result_path = cli.out.join("result.json");
    fs::write(&result_path, serde_json::to_string_pretty(&payload)? + "\n")?;

    let mut inputs: Vec<(&str, &Path)> = vec![
        ("premises", args.paths.premises.as_path()),
        ("states", args.paths.states.as_path()),
        ("checkpoint", args.checkpoint.as_path()),
    ];
    if let Some(index_path) = &args.index {
        inputs.push(("index", index_path.as_path()));
    }
    write_manifest(
        &cli.out,
        "query",
        0,
        cli.workers,
        &inputs,
        &[("result", &result_path)],
        json!({
            "state_text": state_text,
            "select_k": k_select,
            "rerank_k": k_rerank,
            "mode": mode,
        }),
    )
}

fn finish_eval_run(
    cli: &Cli,
    command: &str,
    seed: u64,
    report: &EvalReport,
    inputs: &[(&str, &Path)],
    config: Value,
) -> AppResult {
    let report_path = cli.out.join("report.json");
    let curve_path = cli.out.join("curve.csv");
    write_report_json(report, &report_path)?;
    write_curve_csv(report, &curve_path)?;
    println!("{report}");
    write_manifest(
        &cli.out,
        command,
        seed,
        cli.workers,
        inputs,
        &[("report", &report_path), ("curve", &curve_path)],
        config,
    )
}

fn cmd_evaluate(cli: &Cli, file_config: &FileConfig, args: &EvaluateArgs) -> AppResult {
    let corpus = load_corpus_with_pairs(&args.paths)?;
    let oracle = load_oracle(&args.oracle)?;
    validate_oracle(&oracle, &corpus)?;
    let config = args.eval.apply(file_config.eval.clone());
    let params: ModelParams<f32> = load_checkpoint(&args.checkpoint)?;
    let index = build_index(&params, &corpus.premises, None)?;
    let retriever = ModelRetriever {
        params: &params,
        index: &index,
        corpus: &corpus,
        k_select: config.k_select,
        k_rerank: config.k_rerank,
        mode: config.mode,
    };

    let ids = theorem_ids(&oracle, &args.theorems);
    let report = evaluate_suite(&corpus, &ids, &retriever, &oracle, &config)?;
    finish_eval_run(
        cli,
        "evaluate",
        0,
        &report,
        &[
            ("premises", &args.paths.premises),
            ("states", &args.paths.states),
            ("checkpoint", &args.checkpoint),
            ("oracle", &args.oracle),
        ],
        json!({ "eval": config, "theorems": ids }),
    )
}

fn cmd_bm25_eval(cli: &Cli, file_config: &FileConfig, args: &Bm25EvalArgs) -> AppResult {
    let corpus = load_corpus_with_pairs(&args.paths)?;
    let oracle = load_oracle(&args.oracle)?;
    validate_oracle(&oracle, &corpus)?;
    let config = args.eval.apply(file_config.eval.clone());

    let docs: Vec<(u32, String)> = corpus.premises.iter().map(|p| (p.id, p.text())).collect();
    let index = bm25_build(&docs)?;
    let retriever = Bm25Retriever { index: &index, k: args.k.unwrap_or(config.k_rerank) };

    let ids = theorem_ids(&oracle, &args.theorems);
    let report = evaluate_suite(&corpus, &ids, &retriever, &oracle, &config)?;
    finish_eval_run(
        cli,
        "bm25-eval",
        0,
        &report,
        &[
            ("premises", &args.paths.premises),
            ("states", &args.paths.states),
            ("oracle", &args.oracle),
        ],
        json!({ "eval": config, "k": retriever.k, "theorems": ids }),
    )
}

/// Autodiff vs central finite differences on a composite loss that runs all
/// three heads (state and premise embeddings through the contrastive loss,
/// the rerank head through its classification loss). Double precision, no
/// dropout; the batches come from a tiny generated corpus.
fn cmd_grad_check(cli: &Cli, seed: u64, args: &GradCheckArgs, out: &Path) -> AppResult {
    let spec = SynthSpec { premises: 8, states: 8, vocab: 6, seed, ..SynthSpec::default() };
    let (corpus, _) = generate(&spec)?;
    let config = ModelConfig::with_heads(args.layers, args.dim, (args.dim / 64).max(1), 64);
    let params: ModelParams<f64> = init_params(&config, seed ^ 1)?;

    let train_config = TrainConfig {
        select_batch: 3,
        extra_negatives: 2,
        rerank_positives: 2,
        negatives_per_positive: 2,
        mined_pool: 4,
        dropout: 0.0,
        ..TrainConfig::desk()
    };
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 2);
    let select_batch = build_select_batch(&corpus, &train_config, config.ctx, &mut rng)?;
    let mined = recompute_negatives_for_rerank(&params, &corpus, train_config.mined_pool)?;
    let rerank_batch = build_rerank_batch(&corpus, &mined, &train_config, config.ctx, &mut rng)?;

    let loss_of = |p: &ModelParams<f64>| {
        select_grads(p, &select_batch, train_config.temperature, 0.0, 9).0
            + rerank_grads(p, &rerank_batch, 0.0, 9).0
    };
    let (select_loss, select_g) =
        select_grads(&params, &select_batch, train_config.temperature, 0.0, 9);
    let (rerank_loss, rerank_g) = rerank_grads(&params, &rerank_batch, 0.0, 9);

    let mut coords: Vec<(hammerlite::nn::ParamId, usize)> = Vec::new();
    for (id, _, tensor) in params.set.iter() {
        for i in 0..tensor.len() {
            coords.push((id, i));
        }
    }
    use rand::seq::SliceRandom;
    coords.shuffle(&mut rng);
    coords.truncate(args.samples);

    let h = 1e-5;
    let mut max_rel = 0.0f64;
    for &(id, i) in &coords {
        let mut plus = params.clone();
        plus.set.tensor_mut(id).data_mut()[i] += h;
        let mut minus = params.clone();
        minus.set.tensor_mut(id).data_mut()[i] -= h;
        let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
        let analytic = select_g.tensor(id).data()[i] + rerank_g.tensor(id).data()[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }

    let pass = max_rel < args.tolerance;
    println!(
        "loss {:.6} (select {select_loss:.6}, rerank {rerank_loss:.6})",
        select_loss + rerank_loss
    );
    println!(
        "max relative gradient error over {} coordinates: {max_rel:.3e} ({})",
        coords.len(),
        if pass { "pass" } else { "FAIL" }
    );
    write_manifest(
        out,
        "grad-check",
        seed,
        cli.workers,
        &[],
        &[],
        json!({
            "layers": args.layers,
            "dim": args.dim,
            "samples": coords.len(),
            "tolerance": args.tolerance,
            "max_rel_error": max_rel,
        }),
    )?;
    if pass {
        Ok(())
    } else {
        Err(format!("gradient check failed: {max_rel:.3e} >= {:.1e}", args.tolerance).into())
    }
}

fn cmd_param_count(cli: &Cli, args: &ParamCountArgs) -> AppResult {
    let config = if args.dim % 64 == 0 {
        ModelConfig::scaled(args.layers, args.dim, 2048)
    } else {
        ModelConfig::with_heads(args.layers, args.dim, 1, 2048)
    };
    let count = param_count(&config);
    println!(
        "L={} D={} H={} FF={}: {} non-embedding parameters ({:.1}M)",
        config.layers,
        config.dim,
        config.heads,
        config.ff,
        group_thousands(count),
        count as f64 / 1e6
    );
    write_manifest(
        &cli.out,
        "param-count",
        0,
        cli.workers,
        &[],
        &[],
        json!({ "layers": args.layers, "dim": args.dim, "param_count": count }),
    )
}

fn group_thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut grouped = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            grouped.push(',');
        }
        grouped.push(c);
    }
    grouped
}

fn cmd_ensemble(cli: &Cli, args: &EnsembleArgs) -> AppResult {
    let mut reports = Vec::new();
    for path in &args.reports {
        let text = fs::read_to_string(path)
            .map_err(|e| format!("reading report {}: {e}", path.display()))?;
        let report: EvalReport = serde_json::from_str(&text)
            .map_err(|e| format!("parsing report {}: {e}", path.display()))?;
        reports.push(report);
    }
    let refs: Vec<&EvalReport> = reports.iter().collect();
    let ensemble = ensemble_union(&refs)?;

    println!(
        "ensemble of {}: proof rate {:.4} over {} theorems ({} solved)",
        args.reports.len(),
        ensemble.proof_rate,
        ensemble.total,
        ensemble.solved.len()
    );
    for (path, report) in args.reports.iter().zip(&reports) {
        println!("  {} solved {:.4}", path.display(), report.proof_rate);
    }
    let ensemble_path = cli.out.join("ensemble.json");
    fs::write(&ensemble_path, serde_json::to_string_pretty(&ensemble)? + "\n")?;

    let inputs: Vec<(&str, &Path)> =
        args.reports.iter().map(|p| ("report", p.as_path())).collect();
    write_manifest(
        &cli.out,
        "ensemble",
        0,
        cli.workers,
        &inputs,
        &[("ensemble", &ensemble_path)],
        json!({ "reports": args.reports }),
    )
}
