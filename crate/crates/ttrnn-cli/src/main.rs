//! Command-line surface for the tensor-train RNN toolkit.
//!
//! Exit codes: 0 success, 2 validation failure (gradient check), 3 config
//! error, 4 I/O or data-format error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{parse_cell, parse_config_file, parse_param, RunConfig, Task};
use ttrnn_core::Error;

#[derive(Parser)]
#[command(
    name = "ttrnn",
    about = "Tensor-train recurrent cells: parameter accounting, benchmarking, training, and checkpoint tools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Overrides {
    /// Flat key=value config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cell kind: lstm or gru.
    #[arg(long)]
    cell: Option<String>,
    /// Parameterization: dense, tt-sep, or tt-fused.
    #[arg(long)]
    param: Option<String>,
    /// Hidden state size D.
    #[arg(long)]
    hidden: Option<usize>,
    /// Input feature size M (defaults from the task).
    #[arg(long)]
    input: Option<usize>,
    /// Number of inner TT cores n.
    #[arg(long)]
    cores: Option<usize>,
    /// Inner TT rank r.
    #[arg(long)]
    rank: Option<usize>,
    /// Gate-core rank r0 (defaults to rank).
    #[arg(long)]
    rank0: Option<usize>,
    /// Task: mnist, synth-speaker, or toy.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Output directory for CSV files and checkpoints.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Benchmark repetitions.
    #[arg(long)]
    repeats: Option<usize>,
    /// Worker threads for batch-parallel sections (values are identical for
    /// any worker count).
    #[arg(long)]
    workers: Option<usize>,
    /// Fraction of training data to keep (data-limited sweeps).
    #[arg(long)]
    data_fraction: Option<f64>,
    /// Dataset root; TTRNN_DATA_DIR is the fallback.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Embedding / projection size for the verification head.
    #[arg(long)]
    embed: Option<usize>,
    /// Include the two GE2E similarity scalars in the verification head.
    #[arg(long)]
    ge2e: Option<bool>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Corrupt one backward rule; the check must then fail (negative
    /// control).
    #[arg(long, hide = true)]
    inject_grad_bug: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Checkpoint produced by `ttrnn train`.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    /// Checkpoint to summarize.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter counts (formula and actual) plus compression ratio.
    Params(Overrides),
    /// Wall-time and FLOP report for one training and one eval step.
    Bench(Overrides),
    /// Reverse-mode gradients vs central finite differences.
    Gradcheck(GradcheckArgs),
    /// Train a classifier or speaker verifier.
    Train(Overrides),
    /// Recompute metrics from a checkpoint.
    Eval(EvalArgs),
    /// Human-readable checkpoint summary.
    Inspect(InspectArgs),
    /// Write synthetic digit IDX files for the mnist task.
    GenData(Overrides),
}

fn resolve(overrides: &Overrides) -> Result<RunConfig, Error> {
    let map = match &overrides.config {
        Some(path) => parse_config_file(path)?,
        None => Default::default(),
    };
    let mut c = RunConfig::from_map(&map)?;
    if let Some(v) = &overrides.cell {
        c.cell = parse_cell(v)?;
    }
    if let Some(v) = &overrides.param {
        c.param = parse_param(v)?;
    }
    if let Some(v) = &overrides.task {
        c.task = Task::parse(v)?;
    }
    if let Some(v) = overrides.hidden {
        c.hidden = v;
    }
    if let Some(v) = overrides.input {
        c.input = Some(v);
    }
    if let Some(v) = overrides.cores {
        c.cores = v;
    }
    if let Some(v) = overrides.rank {
        c.rank = v;
        if overrides.rank0.is_none() && !map.contains_key("rank0") {
            c.rank0 = v;
        }
    }
    if let Some(v) = overrides.rank0 {
        c.rank0 = v;
    }
    if let Some(v) = overrides.seed {
        c.seed = v;
    }
    if let Some(v) = overrides.epochs {
        c.epochs = v;
    }
    if let Some(v) = overrides.lr {
        c.lr = v;
    }
    if let Some(v) = overrides.batch {
        c.batch = v;
    }
    if let Some(v) = overrides.patience {
        c.patience = v;
    }
    if let Some(v) = &overrides.out {
        c.out = v.clone();
    }
    if let Some(v) = overrides.repeats {
        c.repeats = v;
    }
    if let Some(v) = overrides.workers {
        c.workers = v;
    }
    if let Some(v) = overrides.data_fraction {
        c.data_fraction = v;
    }
    if let Some(v) = &overrides.data_dir {
        c.data_dir = Some(v.clone());
    }
    if let Some(v) = overrides.embed {
        c.embed = v;
    }
    if let Some(v) = overrides.ge2e {
        c.ge2e = v;
    }
    if c.param == ttrnn_core::cells::Parameterization::Dense {
        let tt_flags_set = overrides.rank.is_some()
            || overrides.rank0.is_some()
            || overrides.cores.is_some()
            || map.contains_key("rank")
            || map.contains_key("rank0")
            || map.contains_key("cores");
        if tt_flags_set {
            c.warnings
                .push("rank/core settings are ignored for dense runs".to_string());
        }
    }
    c.validate()?;
    Ok(c)
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 3,
        Error::Io(_)
        | Error::Format(_)
        | Error::Checkpoint(_)
        | Error::CheckpointVersion { .. } => 4,
        _ => 1,
    }
}

fn run() -> Result<i32, Error> {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are not errors
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(0);
            }
            eprint!("{e}");
            return Ok(3);
        }
    };
    match &cli.command {
        Command::Params(o) => {
            let config = resolve(o)?;
            warn(&config);
            commands::cmd_params(&config)
        }
        Command::Bench(o) => {
            let config = resolve(o)?;
            warn(&config);
            commands::cmd_bench(&config)
        }
        Command::Gradcheck(args) => {
            let config = resolve(&args.overrides)?;
            warn(&config);
            commands::cmd_gradcheck(&config, args.inject_grad_bug)
        }
        Command::Train(o) => {
            let config = resolve(o)?;
            warn(&config);
            commands::cmd_train(&config)
        }
        Command::Eval(args) => {
            let config = resolve(&args.overrides)?;
            warn(&config);
            commands::cmd_eval(&config, &args.checkpoint)
        }
        Command::Inspect(args) => commands::cmd_inspect(&args.checkpoint),
        Command::GenData(o) => {
            let config = resolve(o)?;
            warn(&config);
            commands::cmd_gen_data(&config)
        }
    }
}

fn warn(config: &RunConfig) {
    for w in &config.warnings {
        eprintln!("warning: {w}");
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
