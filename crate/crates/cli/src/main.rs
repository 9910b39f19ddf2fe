//! `amd`: generate a synthetic corpus, train the toy decoder, decode,
//! benchmark block schedules, score N-best lists and compare systems.

mod commands;
mod config;
mod corpus;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::Overrides;

const EXIT_CODES: &str = "Exit codes:
  0  success
  2  invalid configuration or usage
  3  missing input file
  4  malformed input file
  5  inputs inconsistent with each other
  6  training diverged
  7  other I/O failure";

#[derive(Parser, Debug)]
#[command(name = "amd", version, about, after_help = EXIT_CODES)]
struct Cli {
    /// TOML run configuration; flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// worker threads, 0 for all cores
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// output directory [default: $AMD_OUT_ROOT/<command>, AMD_OUT_ROOT defaults to "runs"]
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct SearchArgs {
    /// block schedule, "B" or "1-N-B"
    #[arg(long)]
    schedule: Option<String>,

    #[arg(long = "kmain")]
    k_main: Option<usize>,

    #[arg(long)]
    k1: Option<usize>,

    #[arg(long)]
    k2: Option<usize>,

    /// fusion weights "l1:l2:l3" for CTC, AR and AMD
    #[arg(long)]
    weights: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus
    Gen,
    /// Train the model in two stages (CTC + AR, then AMD)
    Train {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Decode one split into N-best lists
    Decode {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        split: Option<String>,
        /// "baseline" or "tripartite"
        #[arg(long)]
        decoder: Option<String>,
        #[command(flatten)]
        search: SearchArgs,
    },
    /// Sweep block schedules and report calls, WER and RTF
    Bench {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        split: Option<String>,
        #[command(flatten)]
        search: SearchArgs,
    },
    /// Score N-best lists against references
    Analyze {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        nbest: PathBuf,
        #[arg(long)]
        split: Option<String>,
        /// decode timing file, adds RTF to the report
        #[arg(long)]
        timing: Option<PathBuf>,
    },
    /// Matched-pairs significance test between two analyze reports
    Sig {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Train { .. } => "train",
            Command::Decode { .. } => "decode",
            Command::Bench { .. } => "bench",
            Command::Analyze { .. } => "analyze",
            Command::Sig { .. } => "sig",
        }
    }

    fn search(&self) -> Option<&SearchArgs> {
        match self {
            Command::Decode { search, .. } | Command::Bench { search, .. } => Some(search),
            _ => None,
        }
    }
}

fn overrides(cli: &Cli) -> error::Result<Overrides> {
    let mut ov = Overrides {
        seed: cli.seed,
        workers: cli.workers,
        ..Overrides::default()
    };
    if let Some(s) = cli.command.search() {
        ov.schedule = s.schedule.as_deref().map(str::parse).transpose()?;
        ov.weights = s.weights.as_deref().map(str::parse).transpose()?;
        ov.k_main = s.k_main;
        ov.k1 = s.k1;
        ov.k2 = s.k2;
    }
    Ok(ov)
}

fn run(cli: Cli) -> error::Result<()> {
    let ov = overrides(&cli)?;
    let cfg = config::RunConfig::load(cli.config.as_deref(), &ov)?;
    let out = cli.out.clone().unwrap_or_else(|| {
        let root =
            std::env::var_os("AMD_OUT_ROOT").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(cli.command.name())
    });
    commands::run(cli.command, cfg, &out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("amd: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
