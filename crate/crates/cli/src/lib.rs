//! Command-line front end for `sgc-core`.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 provider error.

pub mod commands;
pub mod config;
pub mod smoke;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use sgc_core::{ErrorClass, Interpolation};

use crate::config::{EncoderKind, FileConfig, Overrides, ProviderKind, RunConfig, UsageError};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_PROVIDER: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "sgc", version, about = "Layer-feature aggregation, hierarchical class descriptions, scoring and HOI evaluation")]
pub struct Cli {
    /// TOML config file; flags override its values, which override defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for every randomized step [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Aggregate a layer-feature stack into Z, optionally decoding HOI features X.
    Aggregate(AggregateArgs),
    /// Build the hierarchical class descriptions for a class list.
    BuildHierarchy(BuildArgs),
    /// Score query embeddings against a hierarchy; one JSON line per query.
    Score(ScoreArgs),
    /// Compute per-category AP and mAP for HOI detections.
    Eval(EvalArgs),
    /// Run a small synthetic end-to-end pipeline and report pass/fail.
    SelfTest(SelfTestArgs),
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    /// Layer-feature stack JSON
    #[arg(long, value_name = "FILE")]
    pub features: PathBuf,
    /// Output path for Z (tokens x dim)
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Decoder parameters JSON (queries, w_q, w_k, w_v)
    #[arg(long, value_name = "FILE", requires = "decoded_out")]
    pub decoder: Option<PathBuf>,
    /// Output path for the decoded HOI features X
    #[arg(long, value_name = "FILE", requires = "decoder")]
    pub decoded_out: Option<PathBuf>,
    /// Output path for the decoder attention matrix
    #[arg(long, value_name = "FILE", requires = "decoder")]
    pub attention_out: Option<PathBuf>,
    /// Gaussian width of the intra-block layer weights [default: 1]
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Layer blocks, 1-based inclusive ranges [default: 6-8,9-11,12]
    #[arg(long)]
    pub partition: Option<String>,
    /// Comma-separated block weights [default: 1 per block, 2 for the last]
    #[arg(long, value_delimiter = ',')]
    pub block_weights: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Class names: a JSON array of strings or one name per line
    #[arg(long, value_name = "FILE")]
    pub classes: PathBuf,
    /// Output path for the hierarchy JSON
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Grouping threshold N; K = ceil(classes / N) [default: 6]
    #[arg(short = 'N', long = "grouping-threshold")]
    pub grouping_threshold: Option<usize>,
    /// Maximum number of description levels per class [default: 3]
    #[arg(long)]
    pub max_depth: Option<usize>,
    /// LLM backend [default: fixture]
    #[arg(long, value_enum)]
    pub provider: Option<ProviderKind>,
    /// Prompt -> response JSON table for the fixture provider
    #[arg(long, value_name = "FILE")]
    pub fixture: Option<PathBuf>,
    /// Base URL of an OpenAI-compatible API (http provider)
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Model name sent to the endpoint [default: gpt-3.5-turbo]
    #[arg(long)]
    pub model: Option<String>,
    /// Per-request deadline in seconds [default: 60]
    #[arg(long)]
    pub timeout_secs: Option<f64>,
    /// Extra attempts after a timeout, 429 or 5xx [default: 0]
    #[arg(long)]
    pub retries: Option<u32>,
    /// Concurrent HTTP requests [default: 1]
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    /// Sampling temperature passed through to the endpoint [default: backend's]
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Nucleus sampling passed through to the endpoint [default: backend's]
    #[arg(long)]
    pub top_p: Option<f64>,
    /// Response token limit passed through to the endpoint [default: backend's]
    #[arg(long)]
    pub max_tokens: Option<u32>,
    /// Response cache directory [default: none]
    #[arg(long, env = config::CACHE_DIR_ENV, value_name = "DIR")]
    pub cache_dir: Option<PathBuf>,
    /// Text encoder [default: stub]
    #[arg(long, value_enum)]
    pub encoder: Option<EncoderKind>,
    /// Embedding dimension of the stub encoder [default: 512]
    #[arg(long)]
    pub encoder_dim: Option<usize>,
    /// Description -> vector JSON table for the file encoder
    #[arg(long, value_name = "FILE")]
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Hierarchy JSON from build-hierarchy
    #[arg(long, value_name = "FILE")]
    pub hierarchy: PathBuf,
    /// Query embeddings: a matrix file or a JSON array of rows
    #[arg(long, value_name = "FILE")]
    pub queries: PathBuf,
    /// Output JSON-lines path [default: stdout]
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Weight of the hierarchical running average [default: 0.5]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Margin a deeper level must beat to be accepted [default: 0]
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Detections, one JSON object per line
    #[arg(long, value_name = "FILE")]
    pub detections: PathBuf,
    /// Ground-truth JSON
    #[arg(long, value_name = "FILE")]
    pub gt: PathBuf,
    /// Output path for the report JSON [default: stdout]
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Exponent on the box score before ranking, must exceed 1 [default: 2]
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Human and object IoU must both exceed this [default: 0.5]
    #[arg(long)]
    pub iou_threshold: Option<f64>,
    /// AP integration [default: all-points]
    #[arg(long, value_enum)]
    pub interpolation: Option<InterpolationArg>,
    /// Categories each detection is emitted for, 0 = all [default: 1]
    #[arg(long)]
    pub top_k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SelfTestArgs {
    /// Keep the generated files in this directory instead of a temp dir
    #[arg(long, value_name = "DIR")]
    pub keep: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum InterpolationArg {
    AllPoints,
    ElevenPoint,
}

impl From<InterpolationArg> for Interpolation {
    fn from(a: InterpolationArg) -> Self {
        match a {
            InterpolationArg::AllPoints => Interpolation::AllPoints,
            InterpolationArg::ElevenPoint => Interpolation::ElevenPoint,
        }
    }
}

impl Cli {
    fn overrides(&self) -> Overrides {
        let mut o = Overrides {
            seed: self.seed,
            ..Overrides::default()
        };
        match &self.command {
            Command::Aggregate(a) => {
                o.sigma = a.sigma;
                o.partition = a.partition.clone();
                o.block_weights = a.block_weights.clone();
            }
            Command::BuildHierarchy(b) => {
                o.grouping_threshold = b.grouping_threshold;
                o.max_depth = b.max_depth;
                o.provider = b.provider;
                o.fixture = b.fixture.clone();
                o.endpoint = b.endpoint.clone();
                o.model = b.model.clone();
                o.timeout_secs = b.timeout_secs;
                o.retries = b.retries;
                o.max_in_flight = b.max_in_flight;
                o.temperature = b.temperature;
                o.top_p = b.top_p;
                o.max_tokens = b.max_tokens;
                o.cache_dir = b.cache_dir.clone();
                o.encoder = b.encoder;
                o.encoder_dim = b.encoder_dim;
                o.embeddings = b.embeddings.clone();
            }
            Command::Score(s) => {
                o.lambda = s.lambda;
                o.tau = s.tau;
            }
            Command::Eval(e) => {
                o.gamma = e.gamma;
                o.iou_threshold = e.iou_threshold;
                o.interpolation = e.interpolation.map(Into::into);
                o.top_k = e.top_k;
            }
            Command::SelfTest(_) => {}
        }
        o
    }
}

/// Parses `args` (program name first) and runs the command.
/// Help and version requests print and return `Ok`.
pub fn run<I, T>(args: I) -> anyhow::Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let text = e.render().to_string();
            let text = text.strip_prefix("error: ").unwrap_or(&text).trim_end();
            return Err(config::usage(text));
        }
    };
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let cfg = RunConfig::resolve(&file, cli.overrides())?;
    match &cli.command {
        Command::Aggregate(a) => commands::aggregate(a, &cfg),
        Command::BuildHierarchy(b) => commands::build(b, &cfg),
        Command::Score(s) => commands::score(s, &cfg),
        Command::Eval(e) => commands::eval(e, &cfg),
        Command::SelfTest(t) => commands::self_test(t, &cfg),
    }
}

/// Exit code for a failed run.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<sgc_core::Error>() {
            return match e.class() {
                ErrorClass::Usage => EXIT_USAGE,
                ErrorClass::Data => EXIT_DATA,
                ErrorClass::Provider => EXIT_PROVIDER,
            };
        }
    }
    EXIT_DATA
}

/// `err` and its causes joined with ": ", skipping causes whose text the
/// previous message already ends with.
pub fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if out.ends_with(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out
}
