//! `enrank` — generate the synthetic multi-domain benchmark, train the
//! energy-structure model on it, and inspect what the training did.
//!
//! Every run is a pure function of its inputs: configs and flags in,
//! artifacts out, byte-identical on reruns. Exit codes are a stable
//! contract: 0 success, 2 config or usage problem, 3 I/O failure,
//! 4 numeric divergence, 5 checkpoint version mismatch.

mod config;
mod data_io;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use enrank_core::gradcheck::grad_check;
use enrank_core::{
    evaluate, export_embeddings, generate, init_state, leave_one_domain_out, objective_probe,
    rank_violation_audit, train, write_embeddings_csv, write_metrics, BatchSampler, Checkpoint,
    Dataset, Error, EvalReport, ModelParams, Splits, Stream,
};

use config::ExperimentConfig;

/// A command failure: what to tell the user and which stable exit code to
/// die with.
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Failure {
        Failure { code, message: message.into() }
    }

    /// Bad config, flag, or other user input (exit 2).
    pub fn usage(message: impl Into<String>) -> Failure {
        Failure::new(2, message)
    }

    /// The environment failed us: missing file, failed write (exit 3).
    pub fn io(message: impl Into<String>) -> Failure {
        Failure::new(3, message)
    }

    /// A file exists and was read, but its contents are wrong (exit 3).
    pub fn malformed(message: impl Into<String>) -> Failure {
        Failure::new(3, message)
    }

    /// The numbers went bad: divergence or a failed numeric check (exit 4).
    pub fn numeric(message: impl Into<String>) -> Failure {
        Failure::new(4, message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        let code = match &e {
            Error::Io(_) | Error::Format(_) => 3,
            Error::Divergence { .. } | Error::NonFinite(_) => 4,
            Error::VersionMismatch { .. } => 5,
            _ => 2,
        };
        Failure::new(code, e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "enrank",
    version,
    about = "Synthetic domain-transfer experiments with an energy-ranking regularizer",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain dataset and its metadata
    Gen(GenArgs),
    /// Train on the source domains and write a checkpoint plus metrics
    Train(TrainArgs),
    /// Score a checkpoint on one split
    Eval(EvalArgs),
    /// Measure how often one block's features violate the energy ranking
    Audit(AuditArgs),
    /// Export a 2-D projection of one block's features as CSV
    Embed(EmbedArgs),
    /// Compare analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
}

/// Flags shared by every command. Precedence everywhere: flags > config
/// file > built-in defaults.
#[derive(Args)]
struct CommonArgs {
    /// Experiment config file (JSON; all fields optional, unknown keys
    /// rejected) [default: built-in defaults]
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Master seed; derives the dataset, split, and training seeds through
    /// named substreams, overriding all three [default: the per-subsystem
    /// seeds]
    #[arg(long, value_name = "N")]
    seed: Option<u64>,

    /// Dataset records file [default: dataset.jsonl]
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,

    /// Dataset metadata file [default: dataset.meta.json]
    #[arg(long, value_name = "FILE")]
    meta: Option<PathBuf>,
}

/// Leave-one-domain-out split flags for commands that need the split.
#[derive(Args)]
struct SplitArgs {
    /// Domain held out of training entirely [default: 0]
    #[arg(long, value_name = "D")]
    target_domain: Option<usize>,

    /// Fraction of each source cell held out for model selection
    /// [default: 0.1]
    #[arg(long, value_name = "F")]
    val_fraction: Option<f64>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    split: SplitArgs,

    /// Regularizer weight for both schedule phases (0 disables the
    /// regularizer) [default: the 0.1 -> 0.2 schedule]
    #[arg(long, value_name = "F")]
    alpha: Option<f64>,

    /// Training epochs [default: 30]
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,

    /// Prototypes per class [default: 3]
    #[arg(long, value_name = "N")]
    prototypes: Option<usize>,

    /// Checkpoint output file [default: model.ckpt]
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,

    /// Metrics output file [default: metrics.json]
    #[arg(long, value_name = "FILE")]
    metrics: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitChoice {
    Train,
    Val,
    Target,
}

impl SplitChoice {
    fn name(self) -> &'static str {
        match self {
            SplitChoice::Train => "train",
            SplitChoice::Val => "val",
            SplitChoice::Target => "target",
        }
    }

    fn indices(self, splits: &Splits) -> &[usize] {
        match self {
            SplitChoice::Train => &splits.train,
            SplitChoice::Val => &splits.val,
            SplitChoice::Target => &splits.target_test,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    split: SplitArgs,

    /// Checkpoint to score [default: model.ckpt]
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,

    /// Which split to score
    #[arg(long, value_enum, default_value_t = SplitChoice::Target)]
    on: SplitChoice,

    /// Report output file [default: eval.json]
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    split: SplitArgs,

    /// Checkpoint to audit [default: model.ckpt]
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,

    /// Which split to audit
    #[arg(long, value_enum, default_value_t = SplitChoice::Val)]
    on: SplitChoice,

    /// Block whose features are audited
    #[arg(long, value_name = "B", default_value_t = 0)]
    block: usize,

    /// Quadruples to check (enumeration is exhaustive when the budget
    /// covers every quadruple)
    #[arg(long, value_name = "N", default_value_t = 100_000)]
    budget: u64,

    /// Seed for quadruple sampling
    #[arg(long, value_name = "N", default_value_t = 0)]
    audit_seed: u64,

    /// Report output file [default: audit.json]
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    split: SplitArgs,

    /// Checkpoint to project [default: model.ckpt]
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,

    /// Which split to project
    #[arg(long, value_enum, default_value_t = SplitChoice::Target)]
    on: SplitChoice,

    /// Block whose features are projected [default: the last block]
    #[arg(long, value_name = "B")]
    block: Option<usize>,

    /// CSV output file [default: embeddings.csv]
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    split: SplitArgs,

    /// Checkpoint whose parameters are checked [default: a fresh random
    /// initialization from the training seed]
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,

    /// Regularizer weight in the probed objective [default: the
    /// late-schedule weight, 0.2]
    #[arg(long, value_name = "F")]
    alpha: Option<f64>,

    /// Finite-difference half-step
    #[arg(long, value_name = "F", default_value_t = 1e-5)]
    epsilon: f64,

    /// Elements probed per tensor
    #[arg(long, value_name = "N", default_value_t = 4)]
    max_per_tensor: usize,

    /// Largest acceptable relative error; exceeding it exits 4
    #[arg(long, value_name = "F", default_value_t = 1e-4)]
    tolerance: f64,

    /// Report output file [default: gradcheck.json]
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests travel this path too; only real
            // usage errors get the usage exit code.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Audit(args) => cmd_audit(args),
        Command::Embed(args) => cmd_embed(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    if let Err(failure) = result {
        eprintln!("error: {}", failure.message);
        std::process::exit(failure.code as i32);
    }
}

/// Load the config file and fold the shared flags into it.
fn load_config(common: &CommonArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.apply_master_seed(seed);
    }
    if let Some(data) = &common.data {
        cfg.paths.data = data.clone();
    }
    if let Some(meta) = &common.meta {
        cfg.paths.meta = meta.clone();
    }
    Ok(cfg)
}

fn apply_split_flags(cfg: &mut ExperimentConfig, split: &SplitArgs) {
    if let Some(target) = split.target_domain {
        cfg.split.target_domain = target;
    }
    if let Some(fraction) = split.val_fraction {
        cfg.split.val_fraction = fraction;
    }
}

fn resolve_splits(cfg: &ExperimentConfig, data: &Dataset) -> Result<Splits, Failure> {
    leave_one_domain_out(data, cfg.split.target_domain, cfg.split.val_fraction, cfg.split.seed)
        .map_err(Failure::from)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::io(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn cmd_gen(args: GenArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.common)?;
    let data = generate(&cfg.dataset)?;
    data_io::write_dataset(&data, &cfg.paths.data, &cfg.paths.meta)?;
    println!(
        "wrote {} records to {} (metadata {})",
        data.samples.len(),
        cfg.paths.data.display(),
        cfg.paths.meta.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&args.common)?;
    apply_split_flags(&mut cfg, &args.split);
    if let Some(alpha) = args.alpha {
        cfg.train.alpha_early = alpha;
        cfg.train.alpha_late = alpha;
    }
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(prototypes) = args.prototypes {
        cfg.train.prototypes_per_class = prototypes;
    }
    let checkpoint_path = args.checkpoint.unwrap_or(cfg.paths.checkpoint.clone());
    let metrics_path = args.metrics.unwrap_or(cfg.paths.metrics.clone());

    let data = data_io::read_dataset(&cfg.paths.data, &cfg.paths.meta)?;
    let splits = resolve_splits(&cfg, &data)?;
    let (checkpoint, report) = train(&cfg.train, &data, &splits)?;
    checkpoint.save(&checkpoint_path)?;
    write_metrics(&metrics_path, &report)?;
    println!(
        "selected epoch {}: val {:.4}, target {:.4}; checkpoint {}, metrics {}",
        report.selected_epoch,
        report.selected_val_accuracy,
        report.target_accuracy,
        checkpoint_path.display(),
        metrics_path.display()
    );
    Ok(())
}

/// What `eval` writes: the scored split alongside the accuracy breakdown.
#[derive(serde::Serialize)]
struct EvalDocument {
    split: &'static str,
    target_domain: usize,
    #[serde(flatten)]
    report: EvalReport,
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&args.common)?;
    apply_split_flags(&mut cfg, &args.split);
    let checkpoint_path = args.checkpoint.unwrap_or(cfg.paths.checkpoint.clone());
    let out = args.out.unwrap_or(cfg.paths.eval_report.clone());

    let checkpoint = Checkpoint::load(&checkpoint_path)?;
    let data = data_io::read_dataset(&cfg.paths.data, &cfg.paths.meta)?;
    let splits = resolve_splits(&cfg, &data)?;
    let report = evaluate(&checkpoint.state.params, &data, args.on.indices(&splits))?;
    let document = EvalDocument {
        split: args.on.name(),
        target_domain: splits.target_domain,
        report,
    };
    write_json(&out, &document)?;
    println!(
        "{} split: accuracy {:.4} ({}/{} samples); report {}",
        document.split,
        document.report.mean_accuracy,
        document.report.correct,
        document.report.total,
        out.display()
    );
    Ok(())
}

fn cmd_audit(args: AuditArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&args.common)?;
    apply_split_flags(&mut cfg, &args.split);
    let checkpoint_path = args.checkpoint.unwrap_or(cfg.paths.checkpoint.clone());
    let out = args.out.unwrap_or(cfg.paths.audit_report.clone());

    let checkpoint = Checkpoint::load(&checkpoint_path)?;
    let data = data_io::read_dataset(&cfg.paths.data, &cfg.paths.meta)?;
    let splits = resolve_splits(&cfg, &data)?;
    // The kernel the model was actually trained with, not whatever the local
    // config file currently says.
    let report = rank_violation_audit(
        &checkpoint.state.params,
        &data,
        args.on.indices(&splits),
        args.block,
        args.budget,
        args.audit_seed,
        &checkpoint.config.loss,
    )?;
    write_json(&out, &report)?;
    println!(
        "block {}: violation rate {:.4} over {} quadruples ({}); report {}",
        report.block,
        report.violation_rate,
        report.checked,
        if report.exhaustive { "exhaustive" } else { "sampled" },
        out.display()
    );
    Ok(())
}

fn cmd_embed(args: EmbedArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&args.common)?;
    apply_split_flags(&mut cfg, &args.split);
    let checkpoint_path = args.checkpoint.unwrap_or(cfg.paths.checkpoint.clone());
    let out = args.out.unwrap_or(cfg.paths.embeddings.clone());

    let checkpoint = Checkpoint::load(&checkpoint_path)?;
    let block = args
        .block
        .unwrap_or(checkpoint.config.extractor.block_dims.len().saturating_sub(1));
    let data = data_io::read_dataset(&cfg.paths.data, &cfg.paths.meta)?;
    let splits = resolve_splits(&cfg, &data)?;
    let rows = export_embeddings(&checkpoint.state.params, &data, args.on.indices(&splits), block)?;
    let file = std::fs::File::create(&out).map_err(|e| Failure::io(format!("{}: {e}", out.display())))?;
    write_embeddings_csv(std::io::BufWriter::new(file), &rows)?;
    println!("wrote {} points from block {} to {}", rows.len(), block, out.display());
    Ok(())
}

/// What `gradcheck` writes: the comparison outcome plus the knobs that
/// produced it.
#[derive(serde::Serialize)]
struct GradcheckDocument {
    max_rel_error: f64,
    tolerance: f64,
    passed: bool,
    worst_tensor: String,
    worst_element: usize,
    analytic_at_worst: f64,
    numeric_at_worst: f64,
    checked: usize,
    jitters: usize,
    epsilon: f64,
    epsilon_used: f64,
    alpha: f64,
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&args.common)?;
    apply_split_flags(&mut cfg, &args.split);
    let out = args.out.unwrap_or(cfg.paths.gradcheck_report.clone());

    let data = data_io::read_dataset(&cfg.paths.data, &cfg.paths.meta)?;
    let splits = resolve_splits(&cfg, &data)?;
    // Parameters to probe: a trained checkpoint when given one, otherwise a
    // fresh initialization — the loss config travels with whichever side is
    // chosen.
    let (params, loss_cfg, train_cfg_seed): (ModelParams, _, u64) = match &args.checkpoint {
        Some(path) => {
            let checkpoint = Checkpoint::load(path)?;
            (checkpoint.state.params, checkpoint.config.loss.clone(), checkpoint.config.seed)
        }
        None => {
            let state = init_state(&cfg.train, data.meta.spec.categories)?;
            (state.params, cfg.train.loss.clone(), cfg.train.seed)
        }
    };
    let alpha = args.alpha.unwrap_or(cfg.train.alpha_late);

    // One representative training batch: the first batch of epoch 0 under
    // the training seed, so the probed objective is the one training sees.
    let sampler = BatchSampler::new(&data.samples, &splits.train, cfg.train.batch_size, train_cfg_seed)?;
    let batch_indices = sampler.epoch_batches(0).into_iter().next().ok_or_else(|| {
        Failure::usage("training split produced no batches; nothing to probe".to_string())
    })?;
    let (inputs, cats, doms) = enrank_core::batch_from_indices(&data, &batch_indices)?;

    let mut probe_stream = Stream::from_seed(train_cfg_seed).child("gradcheck");
    let report = grad_check(
        &params,
        |p| objective_probe(p, &inputs, &cats, &doms, &loss_cfg, alpha),
        args.epsilon,
        Some(args.max_per_tensor),
        &mut probe_stream,
    )?;

    let document = GradcheckDocument {
        max_rel_error: report.max_rel_error,
        tolerance: args.tolerance,
        passed: report.max_rel_error <= args.tolerance,
        worst_tensor: report.worst_tensor,
        worst_element: report.worst_element,
        analytic_at_worst: report.analytic_at_worst,
        numeric_at_worst: report.numeric_at_worst,
        checked: report.checked,
        jitters: report.jitters,
        epsilon: args.epsilon,
        epsilon_used: report.epsilon_used,
        alpha,
    };
    write_json(&out, &document)?;
    println!(
        "max relative error {:.3e} over {} elements (tolerance {:.1e}); report {}",
        document.max_rel_error,
        document.checked,
        document.tolerance,
        out.display()
    );
    if !document.passed {
        return Err(Failure::numeric(format!(
            "gradient check failed: {:.3e} > {:.1e} in {} element {}",
            document.max_rel_error, document.tolerance, document.worst_tensor, document.worst_element
        )));
    }
    Ok(())
}
