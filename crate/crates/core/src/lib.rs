//! Training-free NL2SQL inference engine: structured question decomposition,
//! ReAct+Reflect sub-query solving, multi-style SQL synthesis,
//! experience-bank-guided self-correction, and self-consistency selection,
//! with pluggable model/embedder backends so every control-flow, retrieval,
//! and selection rule is deterministically testable without model weights.

pub mod bench;
pub mod config;
pub mod decompose;
pub mod embed;
pub mod executor;
pub mod gateway;
pub mod generate;
pub mod memory;
pub mod model;
pub mod prompts;
pub mod refine;
pub mod schema;
pub mod skeleton;

#[cfg(test)]
pub(crate) mod testutil;

pub use bench::{compute_ex, load_dataset, DatasetFormat, DatasetItem, Pipeline, RunReport};
pub use config::PipelineConfig;
pub use embed::{Embedder, HashEmbedder};
pub use executor::DatabaseRegistry;
pub use gateway::{BackendSpec, ChatRequest, ChatResponse, LlmGateway, PurposeTag, ScriptRule};
pub use memory::{ExemplarStore, MemoryEntry, MemoryIndex};
pub use model::{
    CandidateSql, DecompositionStrategy, ErrorType, ErrorTypeSet, ExecutionOutcome, Question,
    ResultClass, SqlStyle, TokenUsage,
};
pub use refine::{EmptyPolicy, ExemplarMode, ExemplarPolicy};
pub use schema::{SchemaCatalog, SchemaIndex};
pub use skeleton::{make_key, skeletonize, RetrievalKey, Skeleton};
