//! `bundleflow` command-line driver.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error, 3 parse
//! error, 4 missing checkpoint or input file, 5 numeric divergence.

mod commands;
mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use bundleflow::eval::SweepParam;
use bundleflow::Error;
use clap::{Parser, Subcommand};

use commands::{BaselineKind, Ctx, Outcome, RunControl};
use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "bundleflow", version, about = "Train and evaluate flow-based auction menus")]
struct Cli {
    /// TOML run configuration; built-in defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Root directory for run outputs.
    #[arg(long, global = true, env = "BUNDLEFLOW_OUT", default_value = "runs")]
    out: PathBuf,

    /// Override a config value, e.g. `--set menu.k=16`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset or import CATS files, then split it.
    GenData,
    /// Stage one: fit the vector field.
    TrainFlow {
        #[arg(long)]
        resume: bool,
        /// Stop after this many iterations, leaving a resumable checkpoint.
        #[arg(long)]
        halt_at: Option<usize>,
    },
    /// Stage two: learn the menu against the frozen field.
    TrainMenu {
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        halt_at: Option<usize>,
    },
    /// Train or search one of the comparison mechanisms.
    TrainBaseline {
        #[arg(value_enum)]
        kind: BaselineKind,
    },
    /// Evaluate a checkpoint on the test split (defaults to the menu run).
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Retrain the menu over a range of D or K values.
    Sweep {
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Replay the finished menu run and export per-interval snapshots.
    ExportSnapshots {
        #[arg(long)]
        interval: usize,
        /// Lattice points per axis for the field export.
        #[arg(long, default_value_t = 21)]
        resolution: usize,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } => 2,
        Error::Parse { .. } | Error::Format(_) | Error::Json(_) => 3,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 4,
        Error::Training { .. } | Error::Numeric(_) => 5,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let ctx = Ctx::new(cfg, &cli.out);
    let report_halt = |what: &str, outcome: Outcome| match outcome {
        Outcome::Finished => println!("{what} finished in {}", ctx.run_dir.display()),
        Outcome::Halted(it) => println!("{what} halted at iteration {it}; resume with --resume"),
    };
    match cli.command {
        Command::GenData => {
            let meta = commands::gen_data(&ctx)?;
            println!(
                "{} data: {} train / {} test samples, m = {}",
                meta.source, meta.train, meta.test, meta.m
            );
        }
        Command::TrainFlow { resume, halt_at } => {
            let outcome = commands::train_flow(&ctx, RunControl { resume, halt_at })?;
            report_halt("flow training", outcome);
        }
        Command::TrainMenu { resume, halt_at } => {
            let outcome = commands::train_menu(&ctx, RunControl { resume, halt_at })?;
            report_halt("menu training", outcome);
        }
        Command::TrainBaseline { kind } => {
            let r = commands::train_baseline(&ctx, kind)?;
            println!(
                "{}: test revenue {:.4}, dsic pass {:.4}, certified {}",
                r.report.mechanism, r.report.test_revenue, r.report.dsic_pass_rate, r.certified_dsic
            );
        }
        Command::Evaluate { checkpoint } => {
            let (path, r) = commands::evaluate_checkpoint(&ctx, checkpoint)?;
            let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&r)?);
            eprintln!("report written to {}", path.display());
        }
        Command::Sweep { param, values, seeds } => {
            let path = commands::sweep(&ctx, param, &values, &seeds)?;
            let table = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let _ = write!(std::io::stdout(), "{table}");
        }
        Command::ExportSnapshots { interval, resolution } => {
            let n = commands::export_snapshots(&ctx, interval, resolution)?;
            println!("wrote {n} snapshots");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
