use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use truthqa_core::error::ErrorClass;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "truthqa", version, about = "Abstention-aware QA: retrieval, curriculum training and truthfulness evaluation")]
struct Cli {
    /// TOML run configuration. Built-in defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Fail instead of falling back when an external service errors.
    #[arg(long, global = true)]
    strict: bool,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Search the fixtures, extract and chunk pages, and build the lexical index.
    Ingest {
        /// Directory holding `queries.jsonl` and `hard_negatives.jsonl`.
        #[arg(long)]
        fixtures: Option<PathBuf>,
    },
    /// Rank chunks for a query and print the top-k with score breakdowns.
    Retrieve {
        #[arg(long, required_unless_present = "all")]
        query: Option<String>,
        /// Run the per-query search pipeline for every fixture query.
        #[arg(long, conflicts_with = "query")]
        all: bool,
        #[arg(long)]
        k: Option<usize>,
        /// Corpus directory written by `ingest` (default: `<out>/corpus`).
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Label samples easy/hard with the reference answerer and judge.
    Label,
    /// Run the curriculum schedule and write stage snapshots and the trace.
    Train {
        #[arg(long, value_enum, default_value_t = Variant::Curriculum)]
        variant: Variant,
        /// Overrides every stage's step count.
        #[arg(long)]
        steps_per_stage: Option<usize>,
    },
    /// Judge and score a responses file.
    Eval {
        #[arg(long)]
        responses: PathBuf,
    },
    /// Collect training traces and stage metrics into CSV/JSON tables.
    Report {
        /// Run directory (default: the output directory).
        #[arg(long)]
        run: Option<PathBuf>,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// The configured schedule.
    Curriculum,
    /// The configured schedule in reverse stage order.
    Reversed,
    /// One stage with the final stage's mix and the schedule's total steps.
    Mixed,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Curriculum => "curriculum",
            Variant::Reversed => "reversed",
            Variant::Mixed => "mixed",
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let class = err
        .chain()
        .find_map(|e| e.downcast_ref::<truthqa_core::Error>())
        .map(|e| e.class())
        .unwrap_or(ErrorClass::Data);
    match class {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Service => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
