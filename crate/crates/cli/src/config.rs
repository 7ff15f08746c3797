//! Run configuration: built-in defaults, overridden by a TOML file, overridden
//! by command-line flags.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use serde::Deserialize;
use sgc_core::eval::{DEFAULT_GAMMA, DEFAULT_IOU_THRESHOLD};
use sgc_core::hierarchy::{DEFAULT_GROUPING_THRESHOLD, DEFAULT_MAX_DEPTH};
use sgc_core::scorer::{DEFAULT_LAMBDA, DEFAULT_TAU};
use sgc_core::{
    BlockPartition, BuildConfig, EvalSettings, GsaParams, HttpConfig, Interpolation,
    MatchCostWeights, ScorerConfig,
};

pub const CACHE_DIR_ENV: &str = "SGC_CACHE_DIR";
pub const DEFAULT_ENCODER_DIM: usize = 512;
pub const DEFAULT_HTTP_TIMEOUT_SECS: f64 = 60.0;
pub const DEFAULT_MODEL: &str = "gpt-3.5-turbo";

/// Contents of a `--config` file. Every key is optional.
#[derive(Debug, Default, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub aggregate: AggregateSection,
    #[serde(default)]
    pub hierarchy: HierarchySection,
    #[serde(default)]
    pub provider: ProviderSection,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub score: ScoreSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub matching: MatchingSection,
}

#[derive(Debug, Default, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregateSection {
    pub sigma: Option<f64>,
    pub partition: Option<String>,
    pub block_weights: Option<Vec<f64>>,
}

#[derive(Debug, Default, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierarchySection {
    #[serde(alias = "N")]
    pub grouping_threshold: Option<usize>,
    pub max_depth: Option<usize>,
}

#[derive(Debug, Default, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderSection {
    pub kind: Option<ProviderKind>,
    pub fixture: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub timeout_secs: Option<f64>,
    pub retries: Option<u32>,
    pub max_in_flight: Option<usize>,
    pub temperature: Option<f64>,
    pub top_p: Option<f64>,
    pub max_tokens: Option<u32>,
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub kind: Option<EncoderKind>,
    pub dim: Option<usize>,
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Default, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreSection {
    pub lambda: Option<f64>,
    pub tau: Option<f64>,
}

#[derive(Debug, Default, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub gamma: Option<f64>,
    pub iou_threshold: Option<f64>,
    pub interpolation: Option<Interpolation>,
    pub top_k: Option<usize>,
}

#[derive(Debug, Default, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchingSection {
    pub lambda_b: Option<f64>,
    pub lambda_iou: Option<f64>,
    pub lambda_cls: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    /// Prompt -> response table loaded from a JSON file.
    Fixture,
    /// Seeded synthetic descriptions, no backend.
    Stub,
    /// OpenAI-compatible chat-completions endpoint.
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// Seeded hash-to-Gaussian embeddings.
    Stub,
    /// Description -> vector table loaded from a JSON file.
    File,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| {
            anyhow::Error::new(UsageError(format!("config {}: {e}", path.display())))
        })
    }
}

/// Marker for errors that should exit with the usage code.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderSettings {
    pub kind: ProviderKind,
    pub fixture: Option<PathBuf>,
    pub http: HttpConfig,
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSettings {
    pub kind: EncoderKind,
    pub dim: usize,
    pub embeddings: Option<PathBuf>,
}

/// Fully resolved settings for one invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub gsa: GsaParams,
    pub build: BuildConfig,
    pub scorer: ScorerConfig,
    pub eval: EvalSettings,
    pub cost_weights: MatchCostWeights,
    pub provider: ProviderSettings,
    pub encoder: EncoderSettings,
}

/// Flag values; `None` falls through to the file, then to the default.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub sigma: Option<f64>,
    pub partition: Option<String>,
    pub block_weights: Option<Vec<f64>>,
    pub grouping_threshold: Option<usize>,
    pub max_depth: Option<usize>,
    pub lambda: Option<f64>,
    pub tau: Option<f64>,
    pub gamma: Option<f64>,
    pub iou_threshold: Option<f64>,
    pub interpolation: Option<Interpolation>,
    pub top_k: Option<usize>,
    pub provider: Option<ProviderKind>,
    pub fixture: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub timeout_secs: Option<f64>,
    pub retries: Option<u32>,
    pub max_in_flight: Option<usize>,
    pub temperature: Option<f64>,
    pub top_p: Option<f64>,
    pub max_tokens: Option<u32>,
    pub cache_dir: Option<PathBuf>,
    pub encoder: Option<EncoderKind>,
    pub encoder_dim: Option<usize>,
    pub embeddings: Option<PathBuf>,
}

impl RunConfig {
    /// Merges flags over the file over defaults and validates the result.
    /// Nothing touches the filesystem here except the config file itself.
    pub fn resolve(file: &FileConfig, o: Overrides) -> anyhow::Result<Self> {
        let spec = o
            .partition
            .or_else(|| file.aggregate.partition.clone())
            .unwrap_or_else(|| BlockPartition::DEFAULT_SPEC.to_owned());
        let partition: BlockPartition = spec.parse().map_err(|e| usage(format!("{e}")))?;
        let sigma = o
            .sigma
            .or(file.aggregate.sigma)
            .unwrap_or(GsaParams::DEFAULT_SIGMA);
        let mut gsa = GsaParams::new(partition, sigma).map_err(|e| usage(e.to_string()))?;
        if let Some(w) = o.block_weights.or_else(|| file.aggregate.block_weights.clone()) {
            gsa = gsa.with_block_weights(w).map_err(|e| usage(e.to_string()))?;
        }

        let seed = o.seed.or(file.seed).unwrap_or(0);
        let build = BuildConfig {
            grouping_threshold: o
                .grouping_threshold
                .or(file.hierarchy.grouping_threshold)
                .unwrap_or(DEFAULT_GROUPING_THRESHOLD),
            max_depth: o
                .max_depth
                .or(file.hierarchy.max_depth)
                .unwrap_or(DEFAULT_MAX_DEPTH),
            seed,
        };
        build.validate().map_err(|e| usage(e.to_string()))?;

        let scorer = ScorerConfig::new(
            o.lambda.or(file.score.lambda).unwrap_or(DEFAULT_LAMBDA),
            o.tau.or(file.score.tau).unwrap_or(DEFAULT_TAU),
        )
        .map_err(|e| usage(e.to_string()))?;

        let eval = EvalSettings {
            iou_threshold: o
                .iou_threshold
                .or(file.eval.iou_threshold)
                .unwrap_or(DEFAULT_IOU_THRESHOLD),
            gamma: o.gamma.or(file.eval.gamma).unwrap_or(DEFAULT_GAMMA),
            interpolation: o
                .interpolation
                .or(file.eval.interpolation)
                .unwrap_or(Interpolation::AllPoints),
            top_k: o.top_k.or(file.eval.top_k).unwrap_or(1),
        };
        eval.validate().map_err(|e| usage(e.to_string()))?;

        let d = MatchCostWeights::default();
        let cost_weights = MatchCostWeights::new(
            file.matching.lambda_b.unwrap_or(d.lambda_b),
            file.matching.lambda_iou.unwrap_or(d.lambda_iou),
            file.matching.lambda_cls.unwrap_or(d.lambda_cls),
        )
        .map_err(|e| usage(e.to_string()))?;

        let p = &file.provider;
        let mut http = HttpConfig::new(
            o.endpoint.or_else(|| p.endpoint.clone()).unwrap_or_default(),
            o.model
                .or_else(|| p.model.clone())
                .unwrap_or_else(|| DEFAULT_MODEL.to_owned()),
        );
        let timeout = o
            .timeout_secs
            .or(p.timeout_secs)
            .unwrap_or(DEFAULT_HTTP_TIMEOUT_SECS);
        if !(timeout > 0.0 && timeout.is_finite()) {
            return Err(usage(format!("timeout must be positive, got {timeout}")));
        }
        http.timeout = Duration::from_secs_f64(timeout);
        http.retries = o.retries.or(p.retries).unwrap_or(0);
        http.max_in_flight = o.max_in_flight.or(p.max_in_flight).unwrap_or(1);
        if http.max_in_flight == 0 {
            return Err(usage("max-in-flight must be >= 1"));
        }
        http.temperature = o.temperature.or(p.temperature);
        http.top_p = o.top_p.or(p.top_p);
        http.max_tokens = o.max_tokens.or(p.max_tokens);
        let provider = ProviderSettings {
            kind: o.provider.or(p.kind).unwrap_or(ProviderKind::Fixture),
            fixture: o.fixture.or_else(|| p.fixture.clone()),
            http,
            cache_dir: o
                .cache_dir
                .or_else(|| p.cache_dir.clone())
                .or_else(|| std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from)),
        };

        let encoder = EncoderSettings {
            kind: o
                .encoder
                .or(file.encoder.kind)
                .unwrap_or(EncoderKind::Stub),
            dim: o
                .encoder_dim
                .or(file.encoder.dim)
                .unwrap_or(DEFAULT_ENCODER_DIM),
            embeddings: o.embeddings.or_else(|| file.encoder.embeddings.clone()),
        };
        if encoder.dim == 0 {
            return Err(usage("encoder dimension must be >= 1"));
        }

        Ok(RunConfig {
            seed,
            gsa,
            build,
            scorer,
            eval,
            cost_weights,
            provider,
            encoder,
        })
    }

    /// Checks the provider and encoder settings needed by `build-hierarchy`.
    pub fn validate_for_build(&self) -> anyhow::Result<()> {
        match self.provider.kind {
            ProviderKind::Fixture if self.provider.fixture.is_none() => {
                return Err(usage("--provider fixture requires --fixture"));
            }
            ProviderKind::Http if self.provider.http.endpoint.is_empty() => {
                return Err(usage("--provider http requires --endpoint"));
            }
            _ => {}
        }
        if self.encoder.kind == EncoderKind::File && self.encoder.embeddings.is_none() {
            return Err(usage("--encoder file requires --embeddings"));
        }
        Ok(())
    }
}
