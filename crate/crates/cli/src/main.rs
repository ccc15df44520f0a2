//! `rignn`: command-line pipeline for review-refined session recommendation.

mod commands;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "rignn",
    version,
    about = "Review-refined graph neural session recommender",
    after_help = "Configuration precedence: --set key=value flags override the --config file, \
                  which overrides built-in defaults.\n\
                  Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure."
)]
struct Cli {
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    /// Write the run manifest here instead of the default location.
    #[arg(long, global = true, value_name = "FILE")]
    manifest: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a review dump and build a session bundle.
    Ingest(IngestArgs),
    /// Fit LDA on item reviews and assign dominant topics.
    Topics(TopicsArgs),
    /// Build and export the graphs of one session.
    Graph(GraphArgs),
    /// Train a model on a bundle.
    Train(TrainArgs),
    /// Score a checkpoint and the baselines on the test split.
    Eval(EvalArgs),
    /// Train and test every ablation variant over several seeds.
    Ablate(AblateArgs),
    /// Generate a synthetic corpus with planted dependencies.
    Synth(SynthArgs),
    /// Print corpus statistics of a bundle.
    Stats(StatsArgs),
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Line-delimited JSON reviews, optionally gzip-compressed.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    min_count: usize,
    #[arg(long, default_value_t = 7)]
    window_days: i64,
    /// 1 keeps sessions longer than one item, 2 longer than five.
    #[arg(long, default_value_t = 1)]
    case: u32,
}

#[derive(Args, Debug)]
struct TopicsArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    topics: usize,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, default_value_t = 500)]
    sweeps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = rignn::topics::DEFAULT_MAX_TOKENS)]
    max_tokens: usize,
    /// Defaults to `<bundle>/topics.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Split {
    Train,
    Test,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Rule {
    SameTopic,
    AllPairs,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["bundle", "items"]))]
struct GraphArgs {
    #[arg(long)]
    bundle: Option<PathBuf>,
    /// Inline session instead of a bundle, e.g. `a,b,c`.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["split", "session", "truth"])]
    items: Option<Vec<String>>,
    /// Topics for the inline session, `-` for none, e.g. `0,1,0`.
    #[arg(long, value_delimiter = ',', requires = "items")]
    item_topics: Option<Vec<String>>,
    /// Topic model file; defaults to `<bundle>/topics.json`, then the bundle's oracle topics.
    #[arg(long, conflicts_with = "items")]
    topics: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::Train)]
    split: Split,
    #[arg(long, default_value_t = 0)]
    session: usize,
    #[arg(long, value_enum, default_value_t = Rule::SameTopic)]
    rule: Rule,
    /// Ground-truth file from `synth`; adds edge precision and recall over all its sessions.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Plain `key = value` model and training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set lr=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    topics: Option<PathBuf>,
    /// Text word vectors (`token v1 .. v_dw` per line) to initialize word embeddings.
    #[arg(long)]
    word_vectors: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to `config.txt` next to the checkpoint.
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    topics: Option<PathBuf>,
    /// Cutoffs for P@K and MRR@K.
    #[arg(long, value_delimiter = ',', default_value = "10,20")]
    k: Vec<usize>,
    #[arg(long, default_value_t = rignn::eval::DEFAULT_KNN)]
    k_nn: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    topics: Option<PathBuf>,
    /// Number of seeds, counting up from the configured seed.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Plain `key = value` generator specification.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    bundle: PathBuf,
}

/// Bad input or configuration, reported with exit code 1.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn exit_code(err: &anyhow::Error) -> u8 {
    let invalid = err.chain().any(|cause| {
        cause.is::<Invalid>() || matches!(cause.downcast_ref::<rignn::Error>(), Some(rignn::Error::Config(_)))
    });
    if invalid {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let manifest = cli.manifest.clone();
    let result = match cli.command {
        Command::Ingest(a) => commands::ingest(a, manifest),
        Command::Topics(a) => commands::topics(a, manifest),
        Command::Graph(a) => commands::graph(a, manifest),
        Command::Train(a) => commands::train(a, manifest),
        Command::Eval(a) => commands::eval(a, manifest),
        Command::Ablate(a) => commands::ablate(a, manifest),
        Command::Synth(a) => commands::synth(a, manifest),
        Command::Stats(a) => commands::stats(a, manifest),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
