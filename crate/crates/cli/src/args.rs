use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "dgrade",
    version,
    about = "Decision-tree chain-of-thought defect grading pipeline"
)]
pub struct Cli {
    /// Project configuration file [default: dgrade.toml].
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Print the execution plan and exit without doing any work.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Concurrent workers; overrides the configuration.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Seed for every randomised step; overrides the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a deterministic synthetic project with recorded fixtures.
    Synth(SynthArgs),
    /// Resize images, draw detector boxes and split each task.
    Prep(TaskFilter),
    /// Grade each task's test set with every configured model.
    Eval(EvalArgs),
    /// Pick the most accurate model per task.
    Select(SelectArgs),
    /// Generate step-by-step Q&A pairs with the selected model.
    Genqa(GenqaArgs),
    /// Review pending Q&A pairs.
    Review(ReviewArgs),
    /// Write approved pairs as a conversation JSONL dataset.
    Export(ExportArgs),
    /// Fine-tune the toy multimodal model with LoRA adapters.
    TrainToy(TrainToyArgs),
    /// Compare adapter gradients with central differences.
    Gradecheck(GradecheckArgs),
    /// Tabulate accuracy and macro-F1 of saved runs.
    Report(ReportArgs),
}

#[derive(Debug, Args, Clone, Default)]
pub struct TaskFilter {
    /// Restrict to these tasks (repeatable).
    #[arg(long = "task")]
    pub tasks: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Project directory to create.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long)]
    pub per_grade: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
    /// Share of wrong answers from the Q&A generator.
    #[arg(long)]
    pub qa_noise: Option<f64>,
    /// Also record fixtures for cases 1 to 3.
    #[arg(long)]
    pub all_cases: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub filter: TaskFilter,
    /// Prompt case 1-4; defaults to the configured case.
    #[arg(long)]
    pub case: Option<u8>,
    /// front, corresponding or end.
    #[arg(long)]
    pub placement: Option<String>,
    /// Restrict to these model ids (repeatable).
    #[arg(long = "model")]
    pub models: Vec<String>,
    #[command(flatten)]
    pub source: SourceArgs,
}

#[derive(Debug, Args, Clone, Copy, Default)]
pub struct SourceArgs {
    /// Answer from recorded fixtures only (the default).
    #[arg(long, conflicts_with = "record")]
    pub replay: bool,
    /// Call the live endpoints and record their answers as fixtures.
    #[arg(long)]
    pub record: bool,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub filter: TaskFilter,
    /// Case whose runs decide; defaults to the configured tournament case.
    #[arg(long)]
    pub case: Option<u8>,
}

#[derive(Debug, Args)]
pub struct GenqaArgs {
    #[command(flatten)]
    pub filter: TaskFilter,
    /// Replace existing pairs with new pending versions.
    #[arg(long)]
    pub regenerate: bool,
    #[command(flatten)]
    pub source: SourceArgs,
}

#[derive(Debug, Args)]
pub struct ReviewArgs {
    #[command(flatten)]
    pub filter: TaskFilter,
    /// Approve every pending pair that passes the machine check, without
    /// prompting.
    #[arg(long)]
    pub approve_verified: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub filter: TaskFilter,
    /// Output file; defaults to `<exports>/sft.jsonl`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    /// Trainable modules, comma separated: VE, MMA, LLM.
    #[arg(long, value_delimiter = ',')]
    pub modules: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Run directory; defaults to `<toy>/<modules>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradecheckArgs {
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
    /// Coordinates checked per adapter.
    #[arg(long, default_value_t = 32)]
    pub coords: usize,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// models-by-cases, placements or modules.
    #[arg(long, default_value = "models-by-cases")]
    pub layout: String,
    #[command(flatten)]
    pub filter: TaskFilter,
}
