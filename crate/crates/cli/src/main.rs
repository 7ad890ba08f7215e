use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

use chairdpo::Aggregation;

/// CHAIR metrics, CHAIR-ranked preference data and DPO training for a toy
/// captioner.
#[derive(Debug, Parser)]
#[command(name = "chairdpo", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Seed for every random stream (overrides config files).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Synonym lexicon (JSON).
    #[arg(long, global = true, default_value = "data/lexicon.json")]
    pub lexicon: PathBuf,
    /// Output directory. Commands with a single result print it to stdout
    /// when omitted.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract object mentions from captions.
    Extract(ExtractArgs),
    /// Score responses against ground-truth detections.
    Score(ScoreArgs),
    /// Sample and rank preference pairs.
    BuildPrefs(BuildPrefsArgs),
    /// Fine-tune a policy with DPO on a preference file.
    Train(TrainArgs),
    /// Generate captions with a policy and score them.
    Eval(EvalArgs),
    /// Run the synthetic end-to-end experiment.
    Pipeline(PipelineArgs),
    /// Summarize a pipeline run directory as CSV.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InputFormat {
    /// One caption per line.
    Text,
    /// `{"sample_id", "text"}` per line.
    Jsonl,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    pub input: PathBuf,
    /// Input format; guessed from the extension when omitted.
    #[arg(long, value_enum)]
    pub format: Option<InputFormat>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// `{"sample_id", "image_id", "text"}` per line.
    #[arg(long)]
    pub responses: PathBuf,
    /// `{"image_id", "objects"}` per line.
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long, default_value_t = Aggregation::Micro)]
    pub aggregation: Aggregation,
    /// Include per-sample scores in the report.
    #[arg(long)]
    pub per_sample: bool,
}

#[derive(Debug, Args)]
pub struct BuildPrefsArgs {
    #[arg(long)]
    pub detections: PathBuf,
    /// Policy checkpoint that samples the completions.
    #[arg(long, requires = "dialogues", conflicts_with = "completions")]
    pub policy: Option<PathBuf>,
    /// Source dialogues, one JSON object per line.
    #[arg(long)]
    pub dialogues: Option<PathBuf>,
    /// Pre-sampled completion pairs to rank instead of sampling.
    #[arg(long, required_unless_present = "policy")]
    pub completions: Option<PathBuf>,
    #[arg(long, default_value_t = 0.7)]
    pub temperature: f64,
    #[arg(long, default_value_t = 24)]
    pub max_length: usize,
    /// Keep tied pairs, first completion as winner.
    #[arg(long)]
    pub no_filter: bool,
    #[arg(long, default_value_t = 1)]
    pub round: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Preference JSONL from `build-prefs`.
    #[arg(long)]
    pub prefs: PathBuf,
    /// Reference checkpoint; also the initial policy.
    #[arg(long)]
    pub policy: PathBuf,
    #[arg(long)]
    pub detections: PathBuf,
    /// TOML file with DPO settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Validation pairs, reduced automatically for small datasets.
    #[arg(long, default_value_t = 500)]
    pub holdout: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Decoding {
    Greedy,
    Sampled,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub policy: PathBuf,
    /// Scenes to caption.
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long, value_enum, default_value_t = Decoding::Sampled)]
    pub decoding: Decoding,
    #[arg(long, default_value_t = 0.7)]
    pub temperature: f64,
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
    #[arg(long, default_value_t = 24)]
    pub max_length: usize,
    #[arg(long, default_value_t = Aggregation::Micro)]
    pub aggregation: Aggregation,
    #[arg(long)]
    pub per_sample: bool,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Pipeline TOML (world, corpus, data, dpo).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub holdout: Option<usize>,
    /// Keep tied pairs (the filtering ablation).
    #[arg(long)]
    pub no_filter: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory written by `pipeline`.
    pub run: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(commands::EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
