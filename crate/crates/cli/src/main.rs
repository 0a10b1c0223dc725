mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use taskforest::config::CONFIG_ENV_VAR;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_INTERNAL: u8 = 3;

/// Extract task/subtask hierarchies from search query logs.
#[derive(Debug, Parser)]
#[command(name = "taskforest", version)]
pub struct Cli {
    /// Config file of `key = value` lines; flags override it
    #[arg(long, global = true, env = CONFIG_ENV_VAR)]
    pub config: Option<PathBuf>,

    /// Worker threads (0 = one per core)
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Log only warnings and errors
    #[arg(long, short, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse and sessionize a raw log into a normalized corpus file
    Ingest(IngestArgs),
    /// Build the task forest of a corpus
    Build(BuildArgs),
    /// Flatten coherent subtrees of a forest
    Prune(PruneArgs),
    /// Pairwise precision/recall/F1 of a forest against task labels
    Eval(EvalArgs),
    /// Held-out term prediction from matched tasks
    PredictTerms(PredictArgs),
    /// Write a forest as a Graphviz DOT graph
    ExportDot(DotArgs),
    /// Ingest, build, prune, export and evaluate in one go
    Run(RunArgs),
    /// Generate a synthetic log with planted tasks and subtasks
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InputFormat {
    Auto,
    Aol,
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GoldFormat {
    /// `query_id <TAB> task_label` lines
    Labels,
    /// Task-annotated AOL log with a header row (needs --corpus)
    Annotated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Coherence {
    PairMean,
    Literal,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Raw log (AOL TSV, optionally gzipped)
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Session inactivity timeout in minutes [default: 30]
    #[arg(long)]
    pub timeout_mins: Option<i64>,
    /// Drop stopwords from query terms
    #[arg(long)]
    pub remove_stopwords: bool,
    #[arg(long, value_enum, default_value = "auto")]
    pub format: InputFormat,
}

#[derive(Debug, Args, Default)]
pub struct ModelArgs {
    /// Mixing hyperparameter in (0, 1) [default: 0.5]
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub alpha_term: Option<f64>,
    #[arg(long)]
    pub alpha_url: Option<f64>,
    #[arg(long)]
    pub alpha_session: Option<f64>,
    #[arg(long)]
    pub alpha_embedding: Option<f64>,
    #[arg(long)]
    pub beta_term: Option<f64>,
    #[arg(long)]
    pub beta_url: Option<f64>,
    #[arg(long)]
    pub beta_session: Option<f64>,
    #[arg(long)]
    pub beta_embedding: Option<f64>,
    /// Scale applied to mean affinities before rounding to counts [default: 100]
    #[arg(long)]
    pub affinity_resolution: Option<u32>,
    /// Word vectors, one `term v1 .. vd` line per term
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Score every pair of trees instead of blocked candidates only
    #[arg(long)]
    pub no_blocking: bool,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Normalized corpus (or raw log, sessionized on the fly)
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub forest: PathBuf,
    /// Corpus the forest was built from
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Coherence threshold [default: 0.8]
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Session collection for co-occurrence counts [default: --corpus]
    #[arg(long)]
    pub reference_corpus: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub coherence: Option<Coherence>,
    /// Directory for the co-occurrence cache [default: next to --out]
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub forest: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long, value_enum, default_value = "labels")]
    pub gold_format: GoldFormat,
    /// Corpus of the forest (required for --gold-format annotated)
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Machine-readable `metric <TAB> value` output
    #[arg(long)]
    pub results: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub forest: PathBuf,
    /// Corpus the forest was built from
    #[arg(long)]
    pub corpus: PathBuf,
    /// Test sessions (normalized corpus or raw log)
    #[arg(long)]
    pub sessions: PathBuf,
    /// Comma-separated matching fractions [default: 0.2,0.4,0.6,0.8]
    #[arg(long)]
    pub fractions: Option<String>,
    /// Number of recommended terms [default: 10]
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub results: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DotArgs {
    #[arg(long)]
    pub forest: PathBuf,
    /// Label nodes with their top terms
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Output file [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Raw log or normalized corpus [default: `corpus` from the config]
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Artifact directory [default: `output_dir` from the config]
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub timeout_mins: Option<i64>,
    #[arg(long)]
    pub remove_stopwords: bool,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub reference_corpus: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub coherence: Option<Coherence>,
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "labels")]
    pub gold_format: GoldFormat,
    #[arg(long)]
    pub sessions: Option<PathBuf>,
    #[arg(long)]
    pub fractions: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub tasks: usize,
    #[arg(long, default_value_t = 3)]
    pub subtasks: usize,
    #[arg(long, default_value_t = 10)]
    pub queries: usize,
    /// Sessions per subtask in the reference collection
    #[arg(long, default_value_t = 100)]
    pub reference_sessions: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

/// One line per subcommand listing all of its flags.
fn flag_summary(cmd: &clap::Command) -> String {
    let mut out = String::from("Flags by command:\n");
    for sub in cmd.get_subcommands() {
        let flags: Vec<String> = sub
            .get_arguments()
            .filter_map(|a| a.get_long().map(|l| format!("--{l}")))
            .filter(|l| l != "--help")
            .collect();
        out.push_str(&format!("  {:<14}{}\n", sub.get_name(), flags.join(" ")));
    }
    out
}

fn main() -> ExitCode {
    let mut cmd = Cli::command();
    let summary = flag_summary(&cmd);
    cmd = cmd.after_help(summary);
    let matches = match cmd.try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_USAGE);
        }
    };

    let default_level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default_level))
        .format_timestamp(None)
        .init();

    match std::panic::catch_unwind(|| commands::dispatch(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
        Err(_) => {
            eprintln!("error: internal failure");
            ExitCode::from(EXIT_INTERNAL)
        }
    }
}
