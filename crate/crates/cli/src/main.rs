use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use syntaxgen::config::KEYS;

mod commands;
mod error;

use error::CliError;

/// Grammar-rule code generation from natural-language descriptions.
#[derive(Debug, Parser)]
#[command(name = "syntaxgen", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on a JSONL corpus and write a model directory.
    Train(TrainArgs),
    /// Score predictions against references, or decode a test corpus.
    Evaluate(EvaluateArgs),
    /// Decode one description and print the beam with scores.
    Generate(GenerateArgs),
    /// Run the 64-bit finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic task directory (grammar.txt, corpus.jsonl).
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub grammar: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Model directory to create.
    #[arg(long)]
    pub out: PathBuf,
    /// Description tokenization: plain or structural.
    #[arg(long, default_value = "plain")]
    pub mode: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Model directory written by `train`.
    #[arg(long, requires = "test", conflicts_with_all = ["predictions", "references"])]
    pub model: Option<PathBuf>,
    /// JSONL corpus to decode.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// One whitespace-tokenized program per line.
    #[arg(long, requires = "references")]
    pub predictions: Option<PathBuf>,
    #[arg(long, requires = "predictions")]
    pub references: Option<PathBuf>,
    #[arg(long)]
    pub beam: Option<usize>,
    /// Override the model directory's tokenization mode.
    #[arg(long)]
    pub mode: Option<String>,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Description text; read from stdin when absent.
    #[arg(long)]
    pub description: Option<String>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub mode: Option<String>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub size: usize,
    #[arg(long, default_value_t = 3)]
    pub statement_kinds: usize,
    #[arg(long, default_value_t = 4)]
    pub operators: usize,
    #[arg(long, default_value_t = 2)]
    pub functions: usize,
    #[arg(long, default_value_t = 10)]
    pub numbers: usize,
    #[arg(long, default_value_t = 3)]
    pub predefined_names: usize,
    #[arg(long, default_value_t = 40)]
    pub identifier_pool: usize,
    #[arg(long, default_value_t = 2)]
    pub max_depth: usize,
    #[arg(long, default_value_t = 2)]
    pub max_statements: usize,
    #[arg(long, default_value_t = 25)]
    pub max_rules: usize,
    #[arg(long, default_value_t = 0.5)]
    pub copy_rate: f64,
}

fn config_help() -> String {
    let mut s = String::from("Configuration keys (config file or --set KEY=VALUE):\n");
    for (k, d) in KEYS {
        s.push_str(&format!("  {k:<24}{d}\n"));
    }
    s.push_str("\nExit codes: 0 ok, 2 usage, 3 data, 4 checkpoint, 5 gradient check failure.");
    s
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Generate(a) => commands::generate(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Synth(a) => commands::synth(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let help = config_help();
    let matches = Cli::command().after_long_help(help.clone()).after_help(help).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
