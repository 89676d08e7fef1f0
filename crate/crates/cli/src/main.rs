//! `mose`: generate instances, run the three training stages, evaluate,
//! validate tours, and gradient-check the numeric core.
//!
//! Exit codes: 0 success, 1 validation/check failure, 2 usage error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{GenCfgArgs, PolicyArgs, TrainArgs};

#[derive(Parser)]
#[command(name = "mose", version, about, disable_help_subcommand = true)]
struct Cli {
    /// Base directory; every path argument resolves against it.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,

    /// Worker threads for generation and evaluation.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Echo machine-readable JSON reports to stdout.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of instance files plus a manifest.
    Gen {
        #[arg(long)]
        n: usize,
        /// Variant name (e.g. CVRP, OVRPBLTW) or `all16` for a mixed set.
        #[arg(long)]
        variant: String,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        gen: GenCfgArgs,
    },
    /// Stage 1: train the backbone on CVRP.
    Pretrain {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        policy: PolicyArgs,
    },
    /// Stage 2: fine-tune one Gated-LoRA expert on a basis variant.
    Finetune {
        #[arg(long)]
        backbone: PathBuf,
        /// OVRP | VRPB | VRPL | VRPTW
        #[arg(long)]
        variant: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Stage 3: assemble the experts and train the unified gate.
    Aggregate {
        #[arg(long)]
        backbone: PathBuf,
        /// Four expert checkpoints (any order).
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        experts: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Gate activation override for the unified stage.
        #[arg(long)]
        activation: Option<String>,
        /// Routing override for the unified stage.
        #[arg(long)]
        routing: Option<String>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory (with manifest.json) or manifest path.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 20)]
        starts: usize,
        #[arg(long, default_value_t = 8)]
        aug: usize,
        /// auto | exhaustive | nearest | none
        #[arg(long, default_value = "auto")]
        reference: String,
        /// Report output file (.csv or .json by extension).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for per-instance tour files.
        #[arg(long)]
        tours: Option<PathBuf>,
        /// table | csv
        #[arg(long, default_value = "table")]
        format: String,
    },
    /// Check tour files against their instances.
    Validate {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        tour: PathBuf,
    },
    /// Finite-difference check of the full policy graph.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
    },
    /// Re-emit a stored JSON report as a table or CSV.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "table")]
        format: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = commands::Ctx {
        workdir: cli.workdir.clone(),
        jobs: cli.jobs.unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|v| v.get())
                .unwrap_or(1)
        }),
        json: cli.json,
    };
    let outcome = match cli.command {
        Command::Gen {
            n,
            variant,
            count,
            seed,
            out,
            gen,
        } => commands::gen::run(&ctx, n, &variant, count, seed, &out, &gen),
        Command::Pretrain { out, train, policy } => {
            commands::train::pretrain(&ctx, &out, &train, &policy)
        }
        Command::Finetune {
            backbone,
            variant,
            out,
            train,
        } => commands::train::finetune(&ctx, &backbone, &variant, &out, &train),
        Command::Aggregate {
            backbone,
            experts,
            out,
            activation,
            routing,
            train,
        } => commands::train::aggregate(
            &ctx,
            &backbone,
            &experts,
            &out,
            activation.as_deref(),
            routing.as_deref(),
            &train,
        ),
        Command::Eval {
            ckpt,
            data,
            starts,
            aug,
            reference,
            out,
            tours,
            format,
        } => commands::eval_cmd::run(
            &ctx,
            &ckpt,
            &data,
            starts,
            aug,
            &reference,
            out.as_deref(),
            tours.as_deref(),
            &format,
        ),
        Command::Validate { instance, tour } => commands::validate::run(&ctx, &instance, &tour),
        Command::Gradcheck { threshold } => commands::gradcheck::run(&ctx, threshold),
        Command::Report { input, format } => commands::report::run(&ctx, &input, &format),
    };
    match outcome {
        Ok(ok) => {
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
