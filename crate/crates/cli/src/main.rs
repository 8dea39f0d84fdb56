//! `phyreward` command-line entry point.
//!
//! Machine-readable output goes to stdout or to files; logs go to stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};

mod commands;
mod judge_args;

use judge_args::JudgeArgs;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] phyreward::Error),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "phyreward", version, about = "Reward scoring, attention grounding, toy GRPO and evaluation tools")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// More log output on stderr (repeatable).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score completions under a reward condition, one JSON line per completion.
    Score(ScoreArgs),
    /// Attention grounding scores and heatmaps for one rollout.
    Attn(AttnArgs),
    /// Run GRPO on a toy task and plot the reward curves.
    TrainToy(TrainToyArgs),
    /// Evaluate completions and print the accuracy table.
    Eval(EvalArgs),
    /// Label units or principles and normalize them onto an ontology.
    Label(LabelArgs),
    /// Mean and spread over several evaluation reports.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GroundingArgs {
    /// Pixels with every channel at or above this value count as background.
    #[arg(long, default_value_t = phyreward::attention::DEFAULT_WHITE_THRESHOLD)]
    pub white_threshold: u8,
    /// Fill enclosed background regions before scoring.
    #[arg(long)]
    pub fill_whitespace: bool,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub problems: PathBuf,
    /// JSONL of {problem_id, text, token_count?, captures?}.
    #[arg(long)]
    pub completions: PathBuf,
    /// Condition such as Fmt, Fmt+Acc, Rubric, ASM, Fmt+Acc+ASM or 0.5*fmt+asm.
    #[arg(long, default_value = "Fmt")]
    pub reward: String,
    /// Output JSONL (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory that problem image paths are relative to (default: the problems file's directory).
    #[arg(long)]
    pub image_root: Option<PathBuf>,
    #[command(flatten)]
    pub grounding: GroundingArgs,
    #[command(flatten)]
    pub judge: JudgeArgs,
}

#[derive(Debug, Args)]
pub struct AttnArgs {
    /// Capture manifest (repeat for per-step captures of one rollout).
    #[arg(long = "capture", required = true)]
    pub captures: Vec<PathBuf>,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Heatmap weight in the overlays.
    #[arg(long, default_value_t = 0.5)]
    pub opacity: f64,
    #[command(flatten)]
    pub grounding: GroundingArgs,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Offline,
    Judge,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub problems: PathBuf,
    #[arg(long)]
    pub completions: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Offline)]
    pub mode: ModeArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Unit alias table (JSON) used before matching units.
    #[arg(long, conflicts_with = "common_aliases")]
    pub aliases: Option<PathBuf>,
    /// Use the built-in unit alias table.
    #[arg(long)]
    pub common_aliases: bool,
    /// Also write a per-domain accuracy bar chart.
    #[arg(long)]
    pub chart: bool,
    #[command(flatten)]
    pub judge: JudgeArgs,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[arg(long)]
    pub problems: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// unit or principle.
    #[arg(long, default_value = "unit")]
    pub field: String,
    /// standard-v1, cluster, or a path to an ontology JSON file.
    #[arg(long, default_value = "cluster")]
    pub ontology: String,
    /// Labels per clustering call.
    #[arg(long, default_value_t = 50)]
    pub batch_size: usize,
    #[command(flatten)]
    pub judge: JudgeArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// report.json files written by `eval`.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    /// Write the mean report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write a bar chart of mean answer accuracy per domain.
    #[arg(long)]
    pub chart: Option<PathBuf>,
}

fn init_logging(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => "error",
        (false, 0) => "warn",
        (false, 1) => "info",
        (false, 2) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(CliError::Usage("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Score(a) => commands::score(&a),
        Command::Attn(a) => commands::attn(&a),
        Command::TrainToy(a) => commands::train_toy(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Label(a) => commands::label(&a),
        Command::Report(a) => commands::report(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose, cli.quiet);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
