//! memaudit command line: audit checkpoints, run seeded fine-tuning sweeps,
//! and turn run directories into plot-ready CSVs.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

mod audit;
mod report;
mod spec;
mod sweep;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "memaudit", version, about = "Memorisation auditing and mitigation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Measure extraction and n-gram memorisation of a checkpoint on a corpus
    Audit(AuditArgs),
    /// Run fine-tuning once per seed per loss mode and aggregate the results
    Sweep(SweepArgs),
    /// Emit plot-ready CSVs from a directory of run reports
    Report(ReportArgs),
}

#[derive(clap::Args, Debug)]
pub struct AuditArgs {
    /// Model checkpoint (JSON)
    #[arg(long)]
    ckpt: PathBuf,
    /// Corpus file (JSONL with a "text" field per line)
    #[arg(long)]
    corpus: PathBuf,
    /// Prefix lengths to test
    #[arg(long, value_delimiter = ',', default_values_t = vec![12usize, 16, 20])]
    k: Vec<usize>,
    /// Suffix length in tokens
    #[arg(long, default_value_t = 20)]
    suffix_len: usize,
    /// Gram sizes for the partial-memorisation score
    #[arg(long, value_delimiter = ',', default_values_t = vec![4usize, 5, 6])]
    ngrams: Vec<usize>,
    /// Extra generation budget beyond the suffix length
    #[arg(long, default_value_t = 0)]
    slack: usize,
    /// Seed for pair sampling
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cap on corpus samples
    #[arg(long, default_value_t = 5000)]
    max_samples: usize,
    /// Output directory for audit.csv / audit.json / pairs.jsonl
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
pub struct SweepArgs {
    /// Experiment spec file (flat key = value lines)
    #[arg(long)]
    spec: PathBuf,
    /// Override: run this many seeds, numbered 0..N
    #[arg(long)]
    seeds: Option<usize>,
}

#[derive(clap::Args, Debug)]
pub struct ReportArgs {
    /// Directory containing run reports (searched recursively)
    #[arg(long)]
    dir: PathBuf,
}

/// Failure classified by exit code.
#[derive(Debug)]
pub enum CmdError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CmdError {
    fn exit_code(&self) -> u8 {
        match self {
            CmdError::Usage(_) => 1,
            CmdError::Data(_) => 2,
            CmdError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CmdError::Usage(m) | CmdError::Data(m) | CmdError::Numeric(m) => m,
        }
    }
}

impl From<memaudit::Error> for CmdError {
    fn from(err: memaudit::Error) -> Self {
        match err {
            memaudit::Error::NonFiniteLoss { .. } | memaudit::Error::NonFiniteProbe { .. } => {
                CmdError::Numeric(err.to_string())
            }
            other => CmdError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CmdError {
    fn from(err: std::io::Error) -> Self {
        CmdError::Data(err.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // --help and --version are not failures
            if matches!(err.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = err.print();
                return ExitCode::SUCCESS;
            }
            let _ = err.print();
            return ExitCode::from(1);
        }
    };

    let result = match cli.command {
        Command::Audit(args) => audit::run(&args),
        Command::Sweep(args) => sweep::run(&args),
        Command::Report(args) => report::run(&args),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.exit_code())
        }
    }
}
