use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use cml_core::checkpoint::Checkpoint;
use cml_core::gradcheck::{run_suite, SuiteOptions, ToySize};
use cml_core::pipeline::{self, PrepareOptions, PreparedDataset};
use cml_core::synthetic::{generate, SyntheticConfig};
use cml_core::{Ablation, CmlError, InputFormat, Protocol, Similarity, SplitOptions, TrainConfig};
use log::info;
use serde_json::json;

/// Multi-behavior recommender with contrastive meta-learned loss weighting.
#[derive(Debug, Parser)]
#[command(name = "cml", version)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Filter, split and write a raw interaction log as a prepared dataset.
    Prepare(PrepareArgs),
    /// Train on a prepared dataset and write checkpoint, metrics and run manifest.
    Train(Box<TrainArgs>),
    /// Score the test split with a checkpoint.
    Evaluate(EvaluateArgs),
    /// Write per-user weights of every target/auxiliary pair as CSV.
    ExportWeights(ExportArgs),
    /// Write final and per-behavior embeddings as CSV.
    ExportEmbeddings(ExportArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic view/cart/buy log.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    /// One file of `user<TAB>item<TAB>behavior[<TAB>timestamp]`.
    Triples,
    /// A directory holding one `<behavior>.tsv` per behavior.
    PerBehavior,
}

#[derive(Debug, Args)]
struct PrepareArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "triples")]
    format: Format,
    /// Comma-separated behavior vocabulary, in index order.
    #[arg(long, value_delimiter = ',')]
    behaviors: Option<Vec<String>>,
    #[arg(long)]
    target: String,
    /// Drop users with fewer target interactions.
    #[arg(long, default_value_t = 3)]
    min_target: usize,
    /// Share of each user's remaining target items used for meta/validation.
    #[arg(long, default_value_t = 0.1)]
    meta_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also remove auxiliary edges on each held-out (user, item) pair.
    #[arg(long)]
    drop_auxiliary_of_test: bool,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Prepared dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// JSON config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    overrides: ConfigFlags,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SimilarityArg {
    Cosine,
    Dot,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AblationArg {
    Clf,
    Mcn,
    Mke,
}

#[derive(Debug, Default, Args)]
struct ConfigFlags {
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    negative_samples: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    meta_batch: Option<usize>,
    #[arg(long)]
    train_batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    max_lr: Option<f64>,
    #[arg(long)]
    lr_half_cycle: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    meta_lr: Option<f64>,
    #[arg(long)]
    lookahead_lr: Option<f64>,
    #[arg(long, value_enum)]
    similarity: Option<SimilarityArg>,
    /// Use unnormalised adjacency sums.
    #[arg(long)]
    raw_adjacency: bool,
    /// Add BPR terms for every behavior, not only the target.
    #[arg(long)]
    bpr_all_behaviors: bool,
    /// Disable a component; repeat for several.
    #[arg(long, value_enum)]
    ablate: Vec<AblationArg>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    eval_negatives: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Rank against every unobserved item instead of sampled negatives.
    #[arg(long)]
    full_rank: bool,
    #[arg(long)]
    eval_every: Option<usize>,
}

macro_rules! set {
    ($cfg:ident, $flags:ident, $($field:ident),*) => {
        $(if let Some(v) = $flags.$field { $cfg.$field = v; })*
    };
}

impl ConfigFlags {
    fn apply(&self, cfg: &mut TrainConfig) {
        set!(
            cfg, self, layers, dim, temperature, negative_samples, gamma, beta, l2, dropout, meta_batch,
            train_batch, epochs, seed, base_lr, max_lr, lr_half_cycle, weight_decay, meta_lr, patience,
            eval_negatives, top_k, eval_every
        );
        if self.lookahead_lr.is_some() {
            cfg.lookahead_lr = self.lookahead_lr;
        }
        if let Some(s) = self.similarity {
            cfg.similarity = match s {
                SimilarityArg::Cosine => Similarity::Cosine,
                SimilarityArg::Dot => Similarity::Dot,
            };
        }
        if self.raw_adjacency {
            cfg.normalize = false;
        }
        if self.bpr_all_behaviors {
            cfg.bpr_all_behaviors = true;
        }
        if self.full_rank {
            cfg.full_rank = true;
        }
        if !self.ablate.is_empty() {
            cfg.ablation = Ablation::default();
        }
        for a in &self.ablate {
            match a {
                AblationArg::Clf => cfg.ablation.clf = true,
                AblationArg::Mcn => cfg.ablation.mcn = true,
                AblationArg::Mke => cfg.ablation.mke = true,
            }
        }
    }
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Cut-off; defaults to the checkpoint config.
    #[arg(long)]
    k: Option<usize>,
    /// Sampled negatives per user; defaults to the checkpoint config.
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    full_rank: bool,
    /// Candidate sampling seed; defaults to the checkpoint config.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Also write `user,item,rank,candidates,hit,ndcg` rows.
    #[arg(long)]
    per_user: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Destination CSV; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Number of seeds, starting at `--first-seed`.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    items: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    /// Write every check result as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    users: usize,
    #[arg(long, default_value_t = 300)]
    items: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Probability that a purchase is drawn at random.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long)]
    output: PathBuf,
}

enum Failure {
    Core(CmlError),
    /// Artifacts were written but training or checking did not succeed.
    Numerical(String),
}

impl From<CmlError> for Failure {
    fn from(e: CmlError) -> Self {
        Failure::Core(e)
    }
}

fn exit_code(e: &CmlError) -> u8 {
    match e {
        CmlError::Config { .. } => 1,
        CmlError::Numerical(_) => 3,
        _ => 2,
    }
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<(), CmlError> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| CmlError::io(p, e)),
        None => match std::io::stdout().lock().write_all(text.as_bytes()) {
            Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CmlError::io("<stdout>", e)),
            _ => Ok(()),
        },
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig, CmlError> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CmlError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CmlError::config("config", format!("{}: {e}", path.display())))
}

fn prepare(a: PrepareArgs) -> Result<(), Failure> {
    let opts = PrepareOptions {
        input: a.input,
        format: match a.format {
            Format::Triples => InputFormat::TripleTsv,
            Format::PerBehavior => InputFormat::PerBehaviorFiles,
        },
        behaviors: a.behaviors,
        target: a.target,
        min_target: a.min_target,
        split: SplitOptions {
            meta_fraction: a.meta_fraction,
            seed: a.seed,
            drop_auxiliary_of_test: a.drop_auxiliary_of_test,
        },
    };
    let m = pipeline::prepare(&opts, &a.output)?;
    println!(
        "{} users, {} items, {} behaviors ({}), target {}, {} test users",
        m.num_users,
        m.num_items,
        m.behaviors.len(),
        m.behaviors.join(","),
        m.target,
        m.counts.test
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = load_config(a.config.as_deref())?;
    a.overrides.apply(&mut cfg);
    cfg.validate()?;
    let dataset = pipeline::load_prepared(&a.data)?;
    info!("config {}", serde_json::to_string(&cfg).map_err(CmlError::from)?);
    let outcome = pipeline::train(&dataset, &cfg, &a.output, |r| {
        println!(
            "epoch {:>3}  loss {:.5}  bpr {:.5}  lr {:.2e}  hr@10 {}  ndcg@10 {}",
            r.epoch,
            r.loss,
            r.l_bpr,
            r.lr,
            fmt_opt(r.hr10),
            fmt_opt(r.ndcg10)
        );
    })?;
    let r = &outcome.report;
    println!(
        "{}: best epoch {}, validation hr@10 {}{}",
        cfg.ablation.label(),
        r.best_epoch.map_or_else(|| "-".into(), |e| e.to_string()),
        fmt_opt(r.best_hr10),
        if r.stopped_early { " (stopped early)" } else { "" }
    );
    if r.diverged {
        return Err(Failure::Numerical("training diverged; the last finite parameters were saved".into()));
    }
    Ok(())
}

fn open(data: &Path, checkpoint: &Path) -> Result<(PreparedDataset, Checkpoint), CmlError> {
    Ok((pipeline::load_prepared(data)?, Checkpoint::load(checkpoint)?))
}

fn evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    let (dataset, ck) = open(&a.data, &a.checkpoint)?;
    let protocol = if a.full_rank || (ck.config.full_rank && a.negatives.is_none()) {
        Protocol::FullRank
    } else {
        Protocol::Sampled {
            negatives: a.negatives.unwrap_or(ck.config.eval_negatives),
        }
    };
    let k = a.k.unwrap_or(ck.config.top_k);
    let seed = a.seed.unwrap_or(ck.config.seed);
    let report = pipeline::evaluate_checkpoint(&dataset, &ck, protocol, k, seed)?;
    if let Some(p) = &a.per_user {
        write_or_print(Some(p), &pipeline::per_user_csv(&dataset, &report))?;
    }
    let summary = json!({
        "hr": report.hr,
        "ndcg": report.ndcg,
        "k": report.k,
        "protocol": report.protocol,
        "users_evaluated": report.users_evaluated,
        "users_skipped": report.users_skipped,
        "seed": seed,
        "checkpoint_epoch": ck.epoch,
        "manifest_hash": dataset.manifest_hash,
    });
    let text = serde_json::to_string_pretty(&summary).map_err(CmlError::from)? + "\n";
    write_or_print(a.output.as_deref(), &text)?;
    Ok(())
}

fn export_weights(a: ExportArgs) -> Result<(), Failure> {
    let (dataset, ck) = open(&a.data, &a.checkpoint)?;
    write_or_print(a.output.as_deref(), &pipeline::weights_csv(&dataset, &ck)?)?;
    Ok(())
}

fn export_embeddings(a: ExportArgs) -> Result<(), Failure> {
    let (dataset, ck) = open(&a.data, &a.checkpoint)?;
    write_or_print(a.output.as_deref(), &pipeline::embeddings_csv(&dataset, &ck)?)?;
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    let mut size = ToySize::default();
    size.users = a.users.unwrap_or(size.users);
    size.items = a.items.unwrap_or(size.items);
    size.dim = a.dim.unwrap_or(size.dim);
    let opts = SuiteOptions {
        seeds: (a.first_seed..a.first_seed + a.seeds).collect(),
        size,
        inject_fault: a.inject_fault,
    };
    let report = run_suite(&opts)?;
    if let Some(p) = &a.report {
        let text = serde_json::to_string_pretty(&report).map_err(CmlError::from)?;
        write_or_print(Some(p), &text)?;
    }
    for f in report.failures() {
        println!("FAIL {} seed {} rel err {:.3e}", f.name, f.seed, f.max_rel_err);
    }
    println!(
        "{} checks, {} failed, max rel err {:.3e} (tolerance {:.0e}), {:.2}s",
        report.results.len(),
        report.failures().count(),
        report.max_rel_err(),
        report.tolerance,
        report.seconds
    );
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Numerical("gradient check failed".into()))
    }
}

fn synth(a: SynthArgs) -> Result<(), Failure> {
    if !(0.0..=1.0).contains(&a.noise) {
        return Err(CmlError::config("noise", "must lie in [0, 1]").into());
    }
    let store = generate(&SyntheticConfig {
        users: a.users,
        items: a.items,
        seed: a.seed,
        noise: a.noise,
        ..SyntheticConfig::default()
    });
    store.write_tsv(&a.output)?;
    println!("{} interactions written to {}", store.triples.len(), a.output.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Prepare(a) => prepare(a),
        Command::Train(a) => train(*a),
        Command::Evaluate(a) => evaluate(a),
        Command::ExportWeights(a) => export_weights(a),
        Command::ExportEmbeddings(a) => export_embeddings(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
