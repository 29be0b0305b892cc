//! `clv`: train, sample from, score and probe persona dialogue models.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use clv::config::Ablation;
use clv::ClvError;

#[derive(Debug, Parser)]
#[command(name = "clv", version, about = "Persona dialogue model with self-separated latent groups")]
struct Cli {
    #[command(flatten)]
    common: Common,

    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

/// Options every subcommand understands.
#[derive(Debug, Clone, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// `key=value` applied after the configuration file; values are TOML.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Where run artifacts go.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// Disable a component; repeat or separate with commas.
    #[arg(long, value_delimiter = ',', global = true)]
    ablation: Vec<Ablation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LatentPath {
    Prior,
    Recognition,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes checkpoints, losses.csv and config.toml.
    Train,

    /// Sample responses for a JSONL file of queries.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSONL lines with `query` and optionally `persona` and `response`.
        #[arg(long)]
        input: PathBuf,
        /// Output JSONL (stdout if omitted).
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 1, value_parser = parse_samples)]
        samples: usize,
        #[arg(long, value_enum, default_value_t = LatentPath::Prior)]
        latent: LatentPath,
        /// Decode the arg-max token from mean latents.
        #[arg(long)]
        greedy: bool,
    },

    /// Score generations against references, or generate and score.
    Evaluate {
        /// Generation JSONL; if absent, `--checkpoint` generates them.
        #[arg(long)]
        generations: Option<PathBuf>,
        #[arg(long, required_unless_present = "generations")]
        checkpoint: Option<PathBuf>,
        /// Reference corpus JSONL, aligned line by line.
        #[arg(long)]
        references: PathBuf,
        #[command(flatten)]
        nli: NliArgs,
        /// Print the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },

    /// Train and evaluate once per group count; writes sweep.csv.
    Sweep {
        #[arg(long, value_delimiter = ',', default_values_t = [2usize, 4, 8, 16])]
        values: Vec<usize>,
        #[command(flatten)]
        nli: NliArgs,
    },

    /// Per-example decider weights, pseudo-labels and candidate losses.
    InspectDecider {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus JSONL with persona, query and response.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },

    /// Interactive loop: type a query, get a response and the decider weights.
    Chat {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
struct NliArgs {
    /// `auto` (remote if its endpoint variable is set), `none`, `rule`,
    /// `remote`, or `bow:PATH` for a saved bag-of-words classifier.
    #[arg(long, default_value = "auto")]
    nli: String,
}

fn parse_samples(s: &str) -> Result<usize, String> {
    match s {
        "1" => Ok(1),
        "5" => Ok(5),
        _ => Err(format!("samples must be 1 or 5, got `{s}`")),
    }
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<ClvError> for CliError {
    fn from(e: ClvError) -> Self {
        if e.is_usage() {
            CliError::Usage(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .init();

    let result = match cli.command {
        Command::Train => commands::train(&cli.common),
        Command::Generate {
            checkpoint,
            input,
            output,
            samples,
            latent,
            greedy,
        } => commands::generate(
            &cli.common,
            &checkpoint,
            &input,
            output.as_deref(),
            samples,
            latent == LatentPath::Recognition,
            greedy,
        ),
        Command::Evaluate {
            generations,
            checkpoint,
            references,
            nli,
            json,
        } => commands::evaluate(
            &cli.common,
            generations.as_deref(),
            checkpoint.as_deref(),
            &references,
            &nli.nli,
            json,
        ),
        Command::Sweep { values, nli } => commands::sweep(&cli.common, &values, &nli.nli),
        Command::InspectDecider {
            checkpoint,
            input,
            output,
        } => commands::inspect_decider(&cli.common, &checkpoint, &input, output.as_deref()),
        Command::Chat { checkpoint } => commands::chat(&cli.common, &checkpoint),
    };
    match result {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
