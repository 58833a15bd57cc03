//! `kvzap` — command-line front end for the KV-cache pruning laboratory.
//!
//! Orchestrates the pipeline: train the toy teacher, run the repeat-prompt
//! scoring oracles, build (hidden state, log-score) datasets, train surrogate
//! predictors, evaluate/sweep eviction policies, and print the closed-form
//! overhead tables.
//!
//! Exit codes: 0 success, 2 configuration error, 3 validation error,
//! 4 overhead self-test mismatch. Errors are emitted as JSON on stderr.
//! The environment variable `KVZAP_OUT` overrides every `--out` directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use kvzap_core::harness::{
    evaluate, gen_copy_task, gen_kv_lookup_task, sweep, sweep_csv, EvalResult, SweepPoint, Task,
    TaskMix,
};
use kvzap_core::model::{
    load_checkpoint, save_checkpoint, train_teacher, ModelConfig, Token, TrainHyper, Weights,
};
use kvzap_core::policies::{Policy, PolicyConfig, ScorerKind};
use kvzap_core::rng::SplitMix64;
use kvzap_core::scoring::{kvzip_plus_scores, kvzip_scores, ScoreTensor};
use kvzap_core::surrogate::{
    evaluate_r2, generate_dataset, train_linear, train_mlp, MlpHyper, PairDataset, Surrogate,
    DEFAULT_RIDGE_LAMBDA,
};
use kvzap_core::{overhead, Error};

const EXIT_CONFIG: i32 = 2;
const EXIT_VALIDATION: i32 = 3;
const EXIT_SELF_TEST: i32 = 4;

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "kvzap",
    about = "Desk-scale laboratory for KV-cache pruning",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy teacher transformer on the synthetic task mix.
    TrainTeacher(TrainTeacherArgs),
    /// Run a repeat-prompt scoring oracle over one prompt.
    Score(ScoreArgs),
    /// Build a (hidden state, log-score) dataset from oracle runs.
    GenDataset(GenDatasetArgs),
    /// Fit a linear or MLP surrogate to a dataset.
    TrainSurrogate(TrainSurrogateArgs),
    /// Evaluate one eviction policy on a task set.
    Eval(EvalArgs),
    /// Sweep a policy parameter and emit the accuracy/compression curve.
    Sweep(SweepArgs),
    /// Print the closed-form compute-overhead table.
    Overhead(OverheadArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum ModelSize {
    Toy,
    Tiny,
}

impl ModelSize {
    fn config(self, seed: u64) -> ModelConfig {
        match self {
            ModelSize::Toy => ModelConfig::toy(seed),
            ModelSize::Tiny => ModelConfig::tiny(seed),
        }
    }
}

#[derive(Args, Serialize)]
struct TrainTeacherArgs {
    /// Output directory (overridden by KVZAP_OUT).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "toy")]
    model: ModelSize,
    /// Weight-initialization seed.
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
    /// Optimizer/data seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3000)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Cosine-decay learning-rate floor.
    #[arg(long, default_value_t = 1e-4)]
    lr_min: f64,
    #[arg(long, default_value_t = 0.7)]
    copy_weight: f64,
    #[arg(long, default_value_t = 0.3)]
    kv_weight: f64,
    #[arg(long, default_value_t = 4)]
    copy_min: usize,
    #[arg(long, default_value_t = 40)]
    copy_max: usize,
    #[arg(long, default_value_t = 2)]
    pairs_min: usize,
    #[arg(long, default_value_t = 12)]
    pairs_max: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum ScorerFlag {
    Kvzip,
    KvzipPlus,
}

#[derive(Args, Serialize)]
struct ScoreArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "kvzip-plus")]
    scorer: ScorerFlag,
    /// Seed for a random data-alphabet prompt (ignored with --prompt-file).
    #[arg(long, default_value_t = 0)]
    prompt_seed: u64,
    #[arg(long, default_value_t = 64)]
    prompt_len: usize,
    /// JSON file holding an explicit token array instead of a seeded prompt.
    #[arg(long)]
    prompt_file: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct GenDatasetArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Training prompt seeds: comma list and/or `a..b` half-open ranges.
    #[arg(long, default_value = "0..24")]
    train_seeds: String,
    /// Validation prompt seeds, disjoint from the training seeds.
    #[arg(long, default_value = "100..108")]
    val_seeds: String,
    #[arg(long, default_value_t = 64)]
    tokens_per_prompt: usize,
    #[arg(long, default_value_t = 32)]
    positions_per_prompt: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum SurrogateFlag {
    Linear,
    Mlp,
}

#[derive(Args, Serialize)]
struct TrainSurrogateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum)]
    kind: SurrogateFlag,
    #[arg(long, default_value_t = DEFAULT_RIDGE_LAMBDA)]
    ridge_lambda: f64,
    /// MLP hidden width; defaults to hidden_dim/8.
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 200)]
    max_epochs: usize,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum TaskFlag {
    Copy,
    KvLookup,
    Mix,
}

#[derive(Args, Serialize, Clone)]
struct TaskSetArgs {
    #[arg(long, value_enum, default_value = "copy")]
    tasks: TaskFlag,
    #[arg(long, default_value_t = 20)]
    n_tasks: usize,
    #[arg(long, default_value_t = 0)]
    task_seed: u64,
    /// Data length for copy tasks.
    #[arg(long, default_value_t = 16)]
    copy_len: usize,
    /// Pair count for key-value lookup tasks.
    #[arg(long, default_value_t = 6)]
    pairs: usize,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Policy JSON file, e.g. {"policy":"kvzap","tau":-4.0,"window":128,"surrogate":"path"}.
    #[arg(long)]
    policy: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    task_set: TaskSetArgs,
    /// Worker threads for task evaluation; 0 = available parallelism.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum SweepPolicyFlag {
    Kvzap,
    Random,
    WindowOnly,
    TopkPerHead,
    TopkPerLayer,
    KvzipBudget,
}

#[derive(Args, Serialize)]
struct SweepArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Surrogate container; required for kvzap/topk policies.
    #[arg(long)]
    surrogate: Option<PathBuf>,
    #[arg(long, value_enum)]
    policy: SweepPolicyFlag,
    /// Comma-separated parameter grid: tau for kvzap, ratio for
    /// random/topk/kvzip-budget, window for window-only.
    #[arg(long, allow_hyphen_values = true)]
    values: String,
    /// Sliding window for kvzap/topk policies.
    #[arg(long, default_value_t = 16)]
    window: usize,
    /// Eviction seed for the random policy.
    #[arg(long, default_value_t = 0)]
    policy_seed: u64,
    /// Oracle scorer for kvzip-budget.
    #[arg(long, value_enum, default_value = "kvzip-plus")]
    scorer: ScorerFlag,
    #[command(flatten)]
    #[serde(flatten)]
    task_set: TaskSetArgs,
    /// Worker threads for task evaluation; 0 = available parallelism.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args, Serialize)]
struct OverheadArgs {
    /// Print the published three-model table and self-test against it
    /// (exit 4 on any mismatch).
    #[arg(long)]
    paper_table: bool,
    /// Custom architecture rows: name,query_heads,kv_heads,head_dim,hidden_dim,ffn_dim.
    #[arg(long = "spec")]
    specs: Vec<String>,
    /// Emit CSV instead of the aligned table.
    #[arg(long)]
    csv: bool,
    /// Optional directory for overhead.txt/overhead.csv copies.
    #[arg(long)]
    out: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Error plumbing
// ---------------------------------------------------------------------------

struct CliError {
    code: i32,
    kind: &'static str,
    message: String,
}

type CliResult<T> = Result<T, CliError>;

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            kind: "config",
            message: message.into(),
        }
    }

    fn validation(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_VALIDATION,
            kind: "validation",
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        let code = match err {
            Error::Config(_) => EXIT_CONFIG,
            _ => EXIT_VALIDATION,
        };
        CliError {
            code,
            kind: if code == EXIT_CONFIG { "config" } else { "validation" },
            message: err.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::validation(format!("io error: {err}"))
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let payload = serde_json::json!({
                "error": { "kind": e.kind, "message": e.message }
            });
            eprintln!("{payload}");
            e.code
        }
    };
    std::process::exit(code);
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::TrainTeacher(a) => cmd_train_teacher(a),
        Command::Score(a) => cmd_score(a),
        Command::GenDataset(a) => cmd_gen_dataset(a),
        Command::TrainSurrogate(a) => cmd_train_surrogate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Overhead(a) => cmd_overhead(a),
    }
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

/// Resolve the output directory, honoring the KVZAP_OUT override, and create it.
fn out_dir(flag: &Path) -> CliResult<PathBuf> {
    let dir = match std::env::var_os("KVZAP_OUT") {
        Some(v) => PathBuf::from(v),
        None => flag.to_path_buf(),
    };
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::validation(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

/// Echo the resolved run parameters next to the outputs (no timestamps here,
/// so repeated runs stay byte-identical).
fn write_config_echo<T: Serialize>(dir: &Path, subcommand: &str, args: &T) -> CliResult<()> {
    let echo = serde_json::json!({ "subcommand": subcommand, "args": args });
    write_json(&dir.join("config-echo.json"), &echo)
}

fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn unix_timestamp() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn load_weights(path: &Path) -> CliResult<Weights<f32>> {
    if !path.exists() {
        return Err(CliError::validation(format!(
            "checkpoint not found: {}",
            path.display()
        )));
    }
    Ok(load_checkpoint(path)?)
}

/// Parse `"1,3,5"` / `"0..8"` / mixtures thereof into a sorted seed list.
fn parse_seed_list(text: &str) -> CliResult<Vec<u64>> {
    let mut seeds = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a
                .trim()
                .parse()
                .map_err(|_| CliError::config(format!("bad range start in `{part}`")))?;
            let b: u64 = b
                .trim()
                .parse()
                .map_err(|_| CliError::config(format!("bad range end in `{part}`")))?;
            if b <= a {
                return Err(CliError::config(format!("empty range `{part}`")));
            }
            seeds.extend(a..b);
        } else {
            let v: u64 = part
                .parse()
                .map_err(|_| CliError::config(format!("bad seed `{part}`")))?;
            seeds.push(v);
        }
    }
    if seeds.is_empty() {
        return Err(CliError::config("no seeds given"));
    }
    seeds.sort_unstable();
    seeds.dedup();
    Ok(seeds)
}

fn parse_f64_list(text: &str) -> CliResult<Vec<f64>> {
    let mut out = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let v: f64 = part
            .parse()
            .map_err(|_| CliError::config(format!("bad number `{part}`")))?;
        out.push(v);
    }
    if out.is_empty() {
        return Err(CliError::config("no values given"));
    }
    Ok(out)
}

fn build_tasks(config: &ModelConfig, set: &TaskSetArgs) -> CliResult<Vec<Task>> {
    if set.n_tasks == 0 {
        return Err(CliError::config("--n-tasks must be positive"));
    }
    let mut tasks = Vec::with_capacity(set.n_tasks);
    let mut mix_rng = SplitMix64::new(set.task_seed).derive(0x7461_736b);
    for i in 0..set.n_tasks {
        let seed = set.task_seed.wrapping_add(i as u64);
        let task = match set.tasks {
            TaskFlag::Copy => gen_copy_task(config, seed, set.copy_len)?,
            TaskFlag::KvLookup => gen_kv_lookup_task(config, seed, set.pairs)?,
            TaskFlag::Mix => TaskMix::default_mix().sample(config, &mut mix_rng)?,
        };
        tasks.push(task);
    }
    Ok(tasks)
}

/// Load the policy file and, when the policy needs one, its surrogate
/// (resolved relative to the policy file's directory).
fn load_policy(path: &Path) -> CliResult<(Policy, Option<Surrogate>)> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read policy file {}: {e}", path.display())))?;
    let config: PolicyConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("bad policy JSON: {e}")))?;
    let policy = config.to_policy();
    policy.validate().map_err(|e| CliError::config(e.to_string()))?;
    let surrogate = match config.surrogate_path() {
        Some(rel) => {
            let sp = if Path::new(rel).is_absolute() {
                PathBuf::from(rel)
            } else {
                path.parent().unwrap_or(Path::new(".")).join(rel)
            };
            if !sp.exists() {
                return Err(CliError::validation(format!(
                    "surrogate not found: {}",
                    sp.display()
                )));
            }
            Some(Surrogate::load(&sp)?)
        }
        None => None,
    };
    Ok((policy, surrogate))
}

fn worker_count(flag: usize) -> usize {
    if flag > 0 {
        flag
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    }
}

/// `evaluate` with the task loop fanned out over a scoped thread pool.
/// Aggregation matches the sequential path, so results are identical.
fn evaluate_parallel(
    weights: &Weights<f32>,
    policy: &Policy,
    surrogate: Option<&Surrogate>,
    tasks: &[Task],
    workers: usize,
) -> CliResult<EvalResult> {
    let workers = workers.min(tasks.len()).max(1);
    if workers == 1 {
        return Ok(evaluate(weights, policy, surrogate, tasks)?);
    }
    policy.validate()?;
    let chunk = tasks.len().div_ceil(workers);
    let mut indexed = std::thread::scope(|scope| {
        let handles: Vec<_> = tasks
            .chunks(chunk)
            .enumerate()
            .map(|(ci, slice)| {
                scope.spawn(move || -> Result<_, Error> {
                    let mut rows = Vec::with_capacity(slice.len());
                    for (i, task) in slice.iter().enumerate() {
                        let record =
                            kvzap_core::harness::evaluate_task(weights, policy, surrogate, task)?;
                        rows.push((ci * chunk + i, record));
                    }
                    Ok(rows)
                })
            })
            .collect();
        let mut all = Vec::with_capacity(tasks.len());
        for h in handles {
            all.extend(h.join().expect("worker panicked")?);
        }
        Ok::<_, Error>(all)
    })?;
    indexed.sort_by_key(|(i, _)| *i);
    let per_task: Vec<_> = indexed.into_iter().map(|(_, r)| r).collect();
    let n = per_task.len().max(1) as f64;
    let accuracy = per_task.iter().map(|r| r.accuracy).sum::<f64>() / n;
    let mean = per_task.iter().map(|r| r.removed_fraction).sum::<f64>() / n;
    let var = per_task
        .iter()
        .map(|r| (r.removed_fraction - mean).powi(2))
        .sum::<f64>()
        / n;
    Ok(EvalResult {
        policy: policy.descriptor(),
        n_tasks: per_task.len(),
        accuracy,
        removed_fraction_mean: mean,
        removed_fraction_std: var.sqrt(),
        per_task,
    })
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_train_teacher(args: TrainTeacherArgs) -> CliResult<()> {
    if args.copy_min > args.copy_max || args.pairs_min > args.pairs_max {
        return Err(CliError::config("empty task-length range"));
    }
    let dir = out_dir(&args.out)?;
    write_config_echo(&dir, "train-teacher", &args)?;
    let config = args.model.config(args.model_seed);
    let mix = TaskMix {
        copy_weight: args.copy_weight,
        kv_lookup_weight: args.kv_weight,
        copy_len: args.copy_min..=args.copy_max,
        pairs: args.pairs_min..=args.pairs_max,
    };
    let hyper = TrainHyper {
        steps: args.steps,
        batch_size: args.batch,
        lr: args.lr,
        lr_min: args.lr_min,
        seed: args.seed,
        ..TrainHyper::default()
    };
    let (weights, curve) = train_teacher(&config, &mix, &hyper)?;
    let ckpt = dir.join("teacher.kvzl");
    save_checkpoint(&weights, &ckpt)?;
    let mut loss_csv = String::from("step,loss\n");
    for (i, l) in curve.iter().enumerate() {
        loss_csv.push_str(&format!("{i},{l}\n"));
    }
    write_text(&dir.join("loss.csv"), &loss_csv)?;
    let summary = serde_json::json!({
        "checkpoint": ckpt.file_name().and_then(|s| s.to_str()),
        "checkpoint_sha256": sha256_file(&ckpt)?,
        "final_loss": curve.last(),
        "steps": curve.len(),
        "unix_timestamp": unix_timestamp(),
    });
    write_json(&dir.join("summary.json"), &summary)?;
    println!(
        "trained teacher: {} steps, final loss {:.6} -> {}",
        curve.len(),
        curve.last().copied().unwrap_or(f64::NAN),
        ckpt.display()
    );
    Ok(())
}

fn cmd_score(args: ScoreArgs) -> CliResult<()> {
    let dir = out_dir(&args.out)?;
    write_config_echo(&dir, "score", &args)?;
    let weights = load_weights(&args.checkpoint)?;
    let prompt: Vec<Token> = match &args.prompt_file {
        Some(pf) => {
            let text = fs::read_to_string(pf)?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::config(format!("bad prompt file: {e}")))?
        }
        None => {
            if args.prompt_len == 0 {
                return Err(CliError::config("--prompt-len must be positive"));
            }
            let mut rng = SplitMix64::new(args.prompt_seed).derive(0x5c0e);
            (0..args.prompt_len)
                .map(|_| rng.below(weights.config.data_alphabet()) as Token)
                .collect()
        }
    };
    let scores: ScoreTensor = match args.scorer {
        ScorerFlag::Kvzip => kvzip_scores(&weights, &prompt)?,
        ScorerFlag::KvzipPlus => kvzip_plus_scores(&weights, &prompt)?,
    };
    scores.save(&dir.join("scores.kvzs"))?;
    write_text(&dir.join("scores.csv"), &scores.to_csv())?;
    println!(
        "scored {} positions x {} layers x {} kv-heads -> {}",
        prompt.len(),
        weights.config.layers,
        weights.config.kv_heads,
        dir.display()
    );
    Ok(())
}

fn cmd_gen_dataset(args: GenDatasetArgs) -> CliResult<()> {
    let dir = out_dir(&args.out)?;
    write_config_echo(&dir, "gen-dataset", &args)?;
    let weights = load_weights(&args.checkpoint)?;
    let train_seeds = parse_seed_list(&args.train_seeds)?;
    let val_seeds = parse_seed_list(&args.val_seeds)?;
    let dataset = generate_dataset(
        &weights,
        &train_seeds,
        &val_seeds,
        args.tokens_per_prompt,
        args.positions_per_prompt,
    )?;
    let path = dir.join("dataset.kvzd");
    dataset.save(&path)?;
    let summary = serde_json::json!({
        "dataset": path.file_name().and_then(|s| s.to_str()),
        "dataset_sha256": sha256_file(&path)?,
        "train_rows": train_seeds.len() * args.positions_per_prompt,
        "val_rows": val_seeds.len() * args.positions_per_prompt,
        "unix_timestamp": unix_timestamp(),
    });
    write_json(&dir.join("summary.json"), &summary)?;
    println!(
        "dataset: {} train rows, {} val rows -> {}",
        train_seeds.len() * args.positions_per_prompt,
        val_seeds.len() * args.positions_per_prompt,
        path.display()
    );
    Ok(())
}

fn cmd_train_surrogate(args: TrainSurrogateArgs) -> CliResult<()> {
    let dir = out_dir(&args.out)?;
    write_config_echo(&dir, "train-surrogate", &args)?;
    let dataset = PairDataset::load(&args.dataset)?;
    let surrogate = match args.kind {
        SurrogateFlag::Linear => train_linear(&dataset, args.ridge_lambda)?,
        SurrogateFlag::Mlp => {
            let hyper = MlpHyper {
                hidden: args.hidden,
                lr: args.lr,
                batch: args.batch,
                max_epochs: args.max_epochs,
                patience: args.patience,
                seed: args.seed,
            };
            train_mlp(&dataset, &hyper)?
        }
    };
    let path = dir.join("surrogate.kvzp");
    surrogate.save(&path)?;
    let report = evaluate_r2(&surrogate, &dataset)?;
    write_text(&dir.join("r2.csv"), &report.to_csv())?;
    let summary = serde_json::json!({
        "surrogate": path.file_name().and_then(|s| s.to_str()),
        "surrogate_sha256": sha256_file(&path)?,
        "r2_mean": report.mean,
        "unix_timestamp": unix_timestamp(),
    });
    write_json(&dir.join("summary.json"), &summary)?;
    println!("surrogate r2 mean {:.4} -> {}", report.mean, path.display());
    Ok(())
}

fn eval_task_csv(result: &EvalResult) -> String {
    let mut out = String::from(
        "task_kind,seed,accuracy,removed_fraction,compression_factor,live_bytes,resident_bytes,truncated\n",
    );
    for r in &result.per_task {
        let kind = match r.kind {
            kvzap_core::harness::TaskKind::Copy => "copy",
            kvzap_core::harness::TaskKind::KvLookup => "kv_lookup",
        };
        out.push_str(&format!(
            "{kind},{},{},{},{},{},{},{}\n",
            r.seed,
            r.accuracy,
            r.removed_fraction,
            r.compression_factor,
            r.live_bytes,
            r.resident_bytes,
            r.truncated
        ));
    }
    out
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    let dir = out_dir(&args.out)?;
    write_config_echo(&dir, "eval", &args)?;
    let weights = load_weights(&args.checkpoint)?;
    let (policy, surrogate) = load_policy(&args.policy)?;
    let tasks = build_tasks(&weights.config, &args.task_set)?;
    let result = evaluate_parallel(
        &weights,
        &policy,
        surrogate.as_ref(),
        &tasks,
        worker_count(args.workers),
    )?;
    write_json(&dir.join("eval.json"), &result)?;
    write_text(&dir.join("eval.csv"), &eval_task_csv(&result))?;
    println!(
        "policy {}: accuracy {:.4}, removed fraction {:.4} over {} tasks",
        result.policy, result.accuracy, result.removed_fraction_mean, result.n_tasks
    );
    Ok(())
}

fn sweep_grid(args: &SweepArgs) -> CliResult<Vec<SweepPoint>> {
    let values = parse_f64_list(&args.values)?;
    let scorer = match args.scorer {
        ScorerFlag::Kvzip => ScorerKind::Kvzip,
        ScorerFlag::KvzipPlus => ScorerKind::KvzipPlus,
    };
    let mut points = Vec::with_capacity(values.len());
    for &v in &values {
        let (name, policy) = match args.policy {
            SweepPolicyFlag::Kvzap => (
                "tau",
                Policy::Kvzap {
                    tau: v,
                    window: args.window,
                },
            ),
            SweepPolicyFlag::Random => (
                "ratio",
                Policy::Random {
                    ratio: v,
                    seed: args.policy_seed,
                },
            ),
            SweepPolicyFlag::WindowOnly => {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(CliError::config(format!(
                        "window value must be a non-negative integer, got {v}"
                    )));
                }
                ("window", Policy::WindowOnly { window: v as usize })
            }
            SweepPolicyFlag::TopkPerHead => (
                "ratio",
                Policy::TopKPerHead {
                    ratio: v,
                    window: args.window,
                },
            ),
            SweepPolicyFlag::TopkPerLayer => (
                "ratio",
                Policy::TopKPerLayer {
                    ratio: v,
                    window: args.window,
                },
            ),
            SweepPolicyFlag::KvzipBudget => ("ratio", Policy::KvzipBudget { ratio: v, scorer }),
        };
        policy.validate().map_err(|e| CliError::config(e.to_string()))?;
        points.push(SweepPoint {
            param_name: name.to_string(),
            param_value: v,
            policy,
        });
    }
    Ok(points)
}

fn cmd_sweep(args: SweepArgs) -> CliResult<()> {
    let dir = out_dir(&args.out)?;
    write_config_echo(&dir, "sweep", &args)?;
    let weights = load_weights(&args.checkpoint)?;
    let surrogate = match &args.surrogate {
        Some(p) => Some(Surrogate::load(p)?),
        None => None,
    };
    let points = sweep_grid(&args)?;
    let needs_surrogate = points.iter().any(|p| p.policy.needs_surrogate());
    if needs_surrogate && surrogate.is_none() {
        return Err(CliError::config(
            "this policy needs --surrogate <container>",
        ));
    }
    let tasks = build_tasks(&weights.config, &args.task_set)?;
    let workers = worker_count(args.workers);
    // Evaluate each grid point (parallelizing within), then order the curve
    // by compression exactly as the library sweep does.
    let outcomes = if workers == 1 {
        sweep(&weights, surrogate.as_ref(), &points, &tasks)?
    } else {
        let mut outcomes = Vec::with_capacity(points.len());
        for point in &points {
            let result =
                evaluate_parallel(&weights, &point.policy, surrogate.as_ref(), &tasks, workers)?;
            outcomes.push(kvzap_core::harness::SweepOutcome {
                point: point.clone(),
                result,
            });
        }
        outcomes.sort_by(|a, b| {
            a.result
                .removed_fraction_mean
                .partial_cmp(&b.result.removed_fraction_mean)
                .expect("finite fractions")
        });
        outcomes
    };
    write_text(&dir.join("sweep.csv"), &sweep_csv(&outcomes))?;
    let curve: Vec<_> = outcomes
        .iter()
        .map(|o| {
            serde_json::json!({
                "param_name": o.point.param_name,
                "param_value": o.point.param_value,
                "policy": o.result.policy,
                "accuracy": o.result.accuracy,
                "removed_fraction_mean": o.result.removed_fraction_mean,
                "compression_factor_mean": if o.result.removed_fraction_mean < 1.0 {
                    1.0 / (1.0 - o.result.removed_fraction_mean)
                } else {
                    f64::INFINITY
                },
            })
        })
        .collect();
    let summary = serde_json::json!({
        "checkpoint_sha256": sha256_file(&args.checkpoint)?,
        "n_points": outcomes.len(),
        "n_tasks": args.task_set.n_tasks,
        "curve": curve,
        "unix_timestamp": unix_timestamp(),
    });
    write_json(&dir.join("summary.json"), &summary)?;
    println!(
        "sweep: {} points x {} tasks -> {}",
        outcomes.len(),
        args.task_set.n_tasks,
        dir.join("sweep.csv").display()
    );
    Ok(())
}

fn parse_arch_spec(text: &str) -> CliResult<overhead::ArchSpec> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 6 {
        return Err(CliError::config(format!(
            "--spec wants name,query_heads,kv_heads,head_dim,hidden_dim,ffn_dim; got `{text}`"
        )));
    }
    let nums: Vec<u64> = parts[1..]
        .iter()
        .map(|p| {
            p.parse::<u64>()
                .map_err(|_| CliError::config(format!("bad integer `{p}` in --spec")))
        })
        .collect::<CliResult<_>>()?;
    let spec = overhead::ArchSpec::new(parts[0], nums[0], nums[1], nums[2], nums[3], nums[4]);
    spec.validate().map_err(|e| CliError::config(e.to_string()))?;
    Ok(spec)
}

fn cmd_overhead(args: OverheadArgs) -> CliResult<()> {
    if !args.paper_table && args.specs.is_empty() {
        return Err(CliError::config(
            "pass --paper-table and/or --spec <name,hq,h,d,dh,dint>",
        ));
    }
    let mut specs = Vec::new();
    if args.paper_table {
        let published: BTreeMap<&str, ()> = overhead::REFERENCE_PERCENTAGES
            .iter()
            .map(|(n, _, _)| (*n, ()))
            .collect();
        specs.extend(
            overhead::registry()
                .into_iter()
                .filter(|s| published.contains_key(s.name.as_str())),
        );
    }
    for s in &args.specs {
        specs.push(parse_arch_spec(s)?);
    }
    let reports: Vec<_> = specs
        .iter()
        .map(overhead::overhead_report)
        .collect::<Result<_, _>>()?;
    let table = overhead::format_table(&reports);
    let csv = overhead::to_csv(&reports);
    if args.csv {
        print!("{csv}");
    } else {
        print!("{table}");
    }
    if let Some(out) = &args.out {
        let dir = out_dir(out)?;
        write_config_echo(&dir, "overhead", &args)?;
        write_text(&dir.join("overhead.txt"), &table)?;
        write_text(&dir.join("overhead.csv"), &csv)?;
    }
    if args.paper_table {
        if let Err(e) = overhead::self_test() {
            let payload = serde_json::json!({
                "error": { "kind": "self_test", "message": e.to_string() }
            });
            eprintln!("{payload}");
            std::process::exit(EXIT_SELF_TEST);
        }
        println!("self-test: all published rows match at 2-decimal rounding");
    }
    Ok(())
}
