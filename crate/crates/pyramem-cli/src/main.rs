//! Command-line front end binding the library into reproducible runs.
//!
//! Every run is deterministic given its flags: all randomness flows from
//! `--seed`, and results are independent of `--threads`. Each command
//! echoes its effective configuration into the output directory.
//!
//! Exit codes: 0 success; 1 validation failure (bad arguments, domain
//! errors, refused guards); 2 I/O or file-format failure.

mod build;
mod cl_run;
mod eval;
mod io;
mod oracle_check;
mod predict;

use clap::{Parser, Subcommand};
use pyramem::Error;

#[derive(Debug, Parser)]
#[command(name = "pyramem", version, about = "Pyramid-memory search and transduction runs")]
struct Cli {
    /// Seed for every random draw in the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for search and oracle scoring; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Consolidate labeled samples into a store directory.
    BuildMemory(build::BuildArgs),
    /// Label a query grid against a store.
    Predict(predict::PredictArgs),
    /// Score a prediction file against ground truth.
    Eval(eval::EvalArgs),
    /// Compare searches against exhaustive chain scoring.
    OracleCheck(oracle_check::OracleArgs),
    /// Play a class-incremental scenario on synthetic scenes.
    ClRun(cl_run::ClArgs),
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = i32::from(e.use_stderr());
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn run(cli: Cli) -> pyramem::Result<()> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(Error::Domain("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Domain(format!("worker pool: {e}")))?;
    }
    match &cli.command {
        Command::BuildMemory(args) => build::run(cli.seed, cli.threads, args),
        Command::Predict(args) => predict::run(cli.seed, cli.threads, args),
        Command::Eval(args) => eval::run(cli.seed, cli.threads, args),
        Command::OracleCheck(args) => oracle_check::run(cli.seed, cli.threads, args),
        Command::ClRun(args) => cl_run::run(cli.seed, cli.threads, args),
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Domain(_) | Error::UnknownId(_) | Error::SizeGuard(_) => 1,
        Error::Io { .. } | Error::Format { .. } => 2,
    }
}
