//! Run configuration: one TOML or JSON document covering backend specs,
//! thresholds, exemplar policy, ablation switches, and the seed. Every value
//! defaults to the pipeline's standard operating point.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::BackendSpec;
use crate::generate::DecompositionMode;
use crate::model::{RowSemantics, SqlStyle};
use crate::refine::{EmptyPolicy, ExemplarMode};
use crate::schema::{LinkThresholds, MinHashParams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config read error: {0}")]
    Io(String),
    #[error("config parse error: {0}")]
    Parse(String),
}

fn default_seed() -> u64 {
    7
}
fn default_workers() -> usize {
    1
}
fn default_repeat() -> usize {
    1
}
fn default_true() -> bool {
    true
}
fn default_retrieve_k() -> usize {
    40
}
fn default_max_exemplars() -> usize {
    5
}
fn default_max_rounds() -> usize {
    3
}
fn default_policy_k() -> usize {
    4
}
fn default_timeout_s() -> f64 {
    30.0
}
fn default_icl_n() -> usize {
    5
}
fn default_embed_dim() -> usize {
    256
}
fn default_embed_ngram() -> usize {
    3
}
fn default_embed_seed() -> u64 {
    0x5eed
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedderConfig {
    #[serde(default = "default_embed_dim")]
    pub dim: usize,
    #[serde(default = "default_embed_ngram")]
    pub ngram: usize,
    #[serde(default = "default_embed_seed")]
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            dim: default_embed_dim(),
            ngram: default_embed_ngram(),
            seed: default_embed_seed(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemaLinkConfig {
    #[serde(flatten)]
    pub minhash: MinHashParams,
    #[serde(flatten)]
    pub thresholds: LinkThresholds,
}

impl Default for SchemaLinkConfig {
    fn default() -> Self {
        Self {
            minhash: MinHashParams::default(),
            thresholds: LinkThresholds::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalConfig {
    #[serde(default = "default_retrieve_k")]
    pub k: usize,
    #[serde(default = "default_max_exemplars")]
    pub max_exemplars: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: default_retrieve_k(),
            max_exemplars: default_max_exemplars(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefinementConfig {
    #[serde(default = "default_max_rounds")]
    pub max_rounds: usize,
    #[serde(default)]
    pub mode: ExemplarMode,
    #[serde(default = "default_policy_k")]
    pub k: usize,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            max_rounds: default_max_rounds(),
            mode: ExemplarMode::default(),
            k: default_policy_k(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExecutionConfig {
    #[serde(default = "default_timeout_s")]
    pub timeout_s: f64,
    #[serde(default)]
    pub row_semantics: RowSemantics,
    #[serde(default)]
    pub empty_policy: EmptyPolicy,
}

impl Default for ExecutionConfig {
    fn default() -> Self {
        Self {
            timeout_s: default_timeout_s(),
            row_semantics: RowSemantics::default(),
            empty_policy: EmptyPolicy::default(),
        }
    }
}

/// Component switches mirroring the ablation grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationConfig {
    #[serde(default = "default_true")]
    pub schema_linking: bool,
    #[serde(default)]
    pub decomposition: DecompositionMode,
    #[serde(default = "default_true")]
    pub react_reflect: bool,
    /// Set to restrict generation to one syntactic style.
    #[serde(default)]
    pub single_style: Option<SqlStyle>,
    #[serde(default = "default_true")]
    pub refinement: bool,
    #[serde(default = "default_true")]
    pub final_icl: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            schema_linking: true,
            decomposition: DecompositionMode::Structured,
            react_reflect: true,
            single_style: None,
            refinement: true,
            final_icl: true,
        }
    }
}

/// Filesystem inputs resolved by the CLI.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PathsConfig {
    /// JSON manifest mapping db_id -> sqlite file.
    #[serde(default)]
    pub db_manifest: Option<String>,
    /// Benchmark layout root: `<dir>/<db_id>/<db_id>.sqlite`.
    #[serde(default)]
    pub db_dir: Option<String>,
    /// Error-correction memory (JSON-lines plus sidecar).
    #[serde(default)]
    pub memory: Option<String>,
    /// Training corpus used to build the ICL exemplar store.
    #[serde(default)]
    pub icl_corpus: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_repeat")]
    pub repeat: usize,
    #[serde(default = "default_icl_n")]
    pub icl_n: usize,
    pub backend: BackendSpec,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    #[serde(default)]
    pub schema_linking: SchemaLinkConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub refinement: RefinementConfig,
    #[serde(default)]
    pub execution: ExecutionConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

impl PipelineConfig {
    /// Scripted-backend config with all defaults; the common test shape.
    pub fn scripted_default() -> Self {
        Self {
            seed: default_seed(),
            workers: default_workers(),
            repeat: default_repeat(),
            icl_n: default_icl_n(),
            backend: BackendSpec::Scripted {
                script_path: None,
                rules: Vec::new(),
            },
            embedder: EmbedderConfig::default(),
            schema_linking: SchemaLinkConfig::default(),
            retrieval: RetrievalConfig::default(),
            refinement: RefinementConfig::default(),
            execution: ExecutionConfig::default(),
            ablation: AblationConfig::default(),
            paths: PathsConfig::default(),
        }
    }

    /// Load from a `.toml` or `.json` file, decided by extension.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&raw).map_err(|e| ConfigError::Parse(e.to_string()))
        } else {
            toml::from_str(&raw).map_err(|e| ConfigError::Parse(e.to_string()))
        }
    }
}
