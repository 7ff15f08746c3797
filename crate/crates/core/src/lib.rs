//! Multi-granularity feature aggregation and hierarchical group-comparison
//! classification for open-vocabulary HOI detection, together with the
//! matching and evaluation machinery around them.
//!
//! Everything operates on precomputed embeddings: encoder features arrive as
//! per-layer matrices, and class descriptions are embedded by a pluggable
//! [`TextEncoder`].

pub mod embedding;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gsa;
pub mod hierarchy;
pub mod io;
pub mod llm;
pub mod matching;
pub mod scorer;
pub mod synthetic;

pub use embedding::{cosine_sim, l2_normalize, matvec, Matrix, Vector};
pub use encoder::{encode_text, TextEncoder};
pub use error::{Error, ErrorClass, Result};
pub use eval::{evaluate_map, DetectionRecord, EvalReport, EvalSettings, GroundTruth, Interpolation};
pub use gsa::{
    aggregate, aggregate_grad, decode, dgw_weights, AggregateGrad, BlockPartition, DecoderParams,
    GsaParams, LayerFeatureStack,
};
pub use hierarchy::{
    build_hierarchy, choose_k, kmeans, select_strategy, BuildConfig, ClassEntry, ClassHierarchy,
    CompareStrategy, KMeansResult,
};
pub use llm::{
    render_prompt, CachedProvider, FixtureProvider, HttpConfig, HttpProvider, LlmProvider,
    LlmResponse, PromptKind,
};
pub use matching::{
    giou_loss, hungarian, inference_score, iou, match_cost, Assignment, BBox, GroundTruthInstance,
    HoiPrediction, ImageSize, MatchCostWeights,
};
pub use scorer::{
    classify, evaluator_bits, fused_score, level_scores, running_average, ScoreBreakdown,
    ScorerConfig,
};
