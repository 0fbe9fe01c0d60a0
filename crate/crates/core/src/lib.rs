//! Training-free composed image retrieval: caption-augmented query fusion,
//! exact cosine ranking, and single-pass multimodal reranking over an
//! annotated candidate grid.

pub mod annotations;
pub mod fusion;
pub mod grid;
pub mod metrics;
pub mod mllm;
pub mod pipeline;
pub mod ranker;
pub mod rerank;
pub mod store;

pub use fusion::{ComposedQuery, FusionParams};
pub use grid::{GridImage, GridSpec};
pub use metrics::{EvalReport, MetricSpec, Rankings};
pub use ranker::{CandidateList, ScoredCandidate};
pub use rerank::{RerankOutcome, RerankStatus};
pub use store::{Embedding, GalleryIndex};
pub use pipeline::{Pipeline, RunConfig, RunOutput};
