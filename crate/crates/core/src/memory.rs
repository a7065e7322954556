//! The error-correction memory: offline quintuple construction from a
//! training corpus, dense-vector retrieval, the two-stage subsumption
//! filter, and the in-context-learning exemplar store of correct pairs.
//!
//! Retrieval is an exhaustive cosine scan over a flat table. At memory-bank
//! scale (tens of thousands of entries) exactness beats ANN structures.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{cosine, Embedder, EmbeddingVector};
use crate::executor::DatabaseRegistry;
use crate::gateway::{ChatRequest, LlmGateway, Message, PurposeTag};
use crate::model::{parse_error_types, ErrorTypeSet, Question, SqlStyle};
use crate::prompts;
use crate::skeleton::{make_key, normalized_skeleton_distance, RetrievalKey};

pub const DEFAULT_RETRIEVE_K: usize = 40;
pub const DEFAULT_MAX_EXEMPLARS: usize = 5;
pub const DEFAULT_BUILD_CANDIDATES: usize = 4;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("embedder mismatch: index built with {expected:?}, got {actual:?}")]
    EmbedderMismatch { expected: String, actual: String },
    #[error("invalid entry: {0}")]
    InvalidEntry(String),
    #[error("persistence error: {0}")]
    Persist(String),
}

/// The quintuple linking a question to its gold SQL, an erroneous SQL, the
/// error-type set, and free-text correction suggestions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub q: String,
    pub s_plus: String,
    pub s_minus: String,
    pub error_types: ErrorTypeSet,
    pub suggestions: String,
    pub key: RetrievalKey,
    pub vector: EmbeddingVector,
}

/// Flat dense index over memory entries plus the fingerprint of the embedder
/// that produced the vectors. Queries embedded under a different embedder
/// are refused.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryIndex {
    pub embedder_fingerprint: String,
    pub dim: usize,
    entries: Vec<MemoryEntry>,
    #[serde(skip)]
    backing_path: Option<PathBuf>,
}

impl MemoryIndex {
    pub fn new(embedder: &dyn Embedder) -> Self {
        Self {
            embedder_fingerprint: embedder.fingerprint(),
            dim: embedder.dim(),
            entries: Vec::new(),
            backing_path: None,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    /// Add one entry; it is retrievable immediately. When the index is file
    /// backed, persistence is updated atomically (write-temp-then-rename).
    pub fn append(&mut self, entry: MemoryEntry) -> Result<(), MemoryError> {
        if entry.vector.dim != self.dim {
            return Err(MemoryError::EmbedderMismatch {
                expected: format!("dim {}", self.dim),
                actual: format!("dim {}", entry.vector.dim),
            });
        }
        if entry.error_types.is_empty() {
            return Err(MemoryError::InvalidEntry(
                "error_types must be non-empty".to_string(),
            ));
        }
        self.entries.push(entry);
        if let Some(path) = self.backing_path.clone() {
            self.persist_to(&path)?;
        }
        Ok(())
    }

    /// Top-k entries by cosine similarity to the key, descending; ties break
    /// by insertion order.
    pub fn retrieve(
        &self,
        key: &RetrievalKey,
        embedder: &dyn Embedder,
        k: usize,
    ) -> Result<Vec<(MemoryEntry, f64)>, MemoryError> {
        if embedder.fingerprint() != self.embedder_fingerprint {
            return Err(MemoryError::EmbedderMismatch {
                expected: self.embedder_fingerprint.clone(),
                actual: embedder.fingerprint(),
            });
        }
        if self.entries.is_empty() || k == 0 {
            return Ok(Vec::new());
        }
        let query = embedder.embed(&key.combined);
        let mut scored: Vec<(usize, f64)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (i, cosine(&query.values, &e.vector.values)))
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .map(|(i, sim)| (self.entries[i].clone(), sim))
            .collect())
    }

    /// Persist as JSON-lines plus a sidecar header carrying the embedder
    /// fingerprint. The index becomes file backed afterwards.
    pub fn save(&mut self, path: &Path) -> Result<(), MemoryError> {
        self.persist_to(path)?;
        self.backing_path = Some(path.to_path_buf());
        Ok(())
    }

    fn persist_to(&self, path: &Path) -> Result<(), MemoryError> {
        let dir = path.parent().unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)
            .map_err(|e| MemoryError::Persist(e.to_string()))?;
        for entry in &self.entries {
            let line = serde_json::to_string(entry)
                .map_err(|e| MemoryError::Persist(e.to_string()))?;
            writeln!(tmp, "{line}").map_err(|e| MemoryError::Persist(e.to_string()))?;
        }
        tmp.persist(path)
            .map_err(|e| MemoryError::Persist(e.to_string()))?;
        let header = serde_json::json!({
            "embedder_fingerprint": self.embedder_fingerprint,
            "dim": self.dim,
            "count": self.entries.len(),
        });
        std::fs::write(
            sidecar_path(path),
            serde_json::to_string_pretty(&header).unwrap(),
        )
        .map_err(|e| MemoryError::Persist(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, MemoryError> {
        let header_raw = std::fs::read_to_string(sidecar_path(path))
            .map_err(|e| MemoryError::Persist(format!("sidecar: {e}")))?;
        let header: serde_json::Value = serde_json::from_str(&header_raw)
            .map_err(|e| MemoryError::Persist(format!("sidecar: {e}")))?;
        let fingerprint = header["embedder_fingerprint"]
            .as_str()
            .ok_or_else(|| MemoryError::Persist("sidecar missing fingerprint".into()))?
            .to_string();
        let dim = header["dim"]
            .as_u64()
            .ok_or_else(|| MemoryError::Persist("sidecar missing dim".into()))?
            as usize;
        let raw = std::fs::read_to_string(path)
            .map_err(|e| MemoryError::Persist(e.to_string()))?;
        let mut entries = Vec::new();
        for (lineno, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: MemoryEntry = serde_json::from_str(line)
                .map_err(|e| MemoryError::Persist(format!("line {}: {e}", lineno + 1)))?;
            entries.push(entry);
        }
        Ok(Self {
            embedder_fingerprint: fingerprint,
            dim,
            entries,
            backing_path: Some(path.to_path_buf()),
        })
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".meta.json");
    PathBuf::from(os)
}

/// Greedy subsumption dedup: walk the similarity-ranked list and drop any
/// entry whose error-type set is fully subsumed by a previously retained
/// one; truncate to `max_exemplars`.
pub fn dedup_filter(ranked: &[MemoryEntry], max_exemplars: usize) -> Vec<MemoryEntry> {
    let mut kept: Vec<MemoryEntry> = Vec::new();
    for entry in ranked {
        if kept.len() >= max_exemplars {
            break;
        }
        let subsumed = kept
            .iter()
            .any(|k| k.error_types.subsumes(&entry.error_types));
        if !subsumed {
            kept.push(entry.clone());
        }
    }
    kept
}

/// Parse an annotation reply of the form `E2, E4 | suggestions`.
fn parse_annotation(reply: &str) -> Option<(ErrorTypeSet, String)> {
    let line = reply.lines().find(|l| !l.trim().is_empty())?.trim();
    let (codes_part, suggestion_part) = line.split_once('|')?;
    let labels: Vec<&str> = codes_part
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if labels.is_empty() {
        return None;
    }
    let set = parse_error_types(&labels).ok()?;
    if set.is_empty() {
        return None;
    }
    Some((set, suggestion_part.trim().to_string()))
}

/// Offline memory construction: elicit `k_candidates` diverse SQL candidates
/// per training question, retain semantic failures (parse-clean but wrong),
/// pick the representative near-miss, annotate it, embed its key.
/// Per-item failures are logged and skipped; the build never aborts.
pub fn build_offline(
    corpus: &[(Question, String)],
    gateway: &LlmGateway,
    registry: &DatabaseRegistry,
    embedder: &dyn Embedder,
    schema_context: impl Fn(&str) -> String,
    k_candidates: usize,
) -> MemoryIndex {
    let mut index = MemoryIndex::new(embedder);
    for (question, gold_sql) in corpus {
        match build_one(
            question,
            gold_sql,
            gateway,
            registry,
            embedder,
            &schema_context,
            k_candidates,
        ) {
            Ok(Some(entry)) => {
                if let Err(e) = index.append(entry) {
                    tracing::warn!(question = %question.id, error = %e, "entry rejected");
                }
            }
            Ok(None) => {}
            Err(e) => {
                tracing::warn!(question = %question.id, error = %e, "memory build item skipped");
            }
        }
    }
    index
}

fn build_one(
    question: &Question,
    gold_sql: &str,
    gateway: &LlmGateway,
    registry: &DatabaseRegistry,
    embedder: &dyn Embedder,
    schema_context: &impl Fn(&str) -> String,
    k_candidates: usize,
) -> Result<Option<MemoryEntry>, String> {
    let schema = schema_context(&question.db_id);
    let mut failures: Vec<String> = Vec::new();
    for i in 0..k_candidates {
        let style = SqlStyle::ALL[i % SqlStyle::ALL.len()];
        let prompt = prompts::SYNTHESIZE.render(&[
            ("style", style.label()),
            ("schema", schema.as_str()),
            ("question", question.text.as_str()),
            ("evidence", question.evidence.as_deref().unwrap_or("none")),
            ("strategy", "direct"),
            ("trace", "none"),
            ("exemplars", "none"),
        ]);
        let request = ChatRequest::new(PurposeTag::Synthesize, vec![Message::user(prompt)])
            .for_question(question.id.clone());
        let reply = gateway.complete(&request).map_err(|e| e.to_string())?;
        let sql = prompts::extract_fenced_sql(&reply.text).unwrap_or(reply.text);
        let outcome = registry
            .execute(&question.db_id, &sql)
            .map_err(|e| e.to_string())?;
        if outcome.status == crate::model::ExecStatus::ParseError {
            continue; // pure syntax failure, outside the taxonomy
        }
        let matches = registry
            .ex_match(&sql, gold_sql, &question.db_id)
            .map_err(|e| e.to_string())?;
        if !matches {
            failures.push(sql);
        }
    }
    if failures.is_empty() {
        return Ok(None);
    }

    // representative near-miss: failing candidate whose skeleton is closest
    // to the gold skeleton
    let s_minus = failures
        .iter()
        .min_by(|a, b| {
            let da = normalized_skeleton_distance(a, gold_sql);
            let db = normalized_skeleton_distance(b, gold_sql);
            da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal)
        })
        .cloned()
        .expect("non-empty failures");

    let prompt = prompts::ANNOTATE_MEMORY.render(&[
        ("question", question.text.as_str()),
        ("gold_sql", gold_sql),
        ("wrong_sql", s_minus.as_str()),
    ]);
    let request = ChatRequest::new(PurposeTag::AnnotateMemory, vec![Message::user(prompt)])
        .for_question(question.id.clone());
    let reply = gateway.complete(&request).map_err(|e| e.to_string())?;
    let (error_types, suggestions) = match parse_annotation(&reply.text) {
        Some(parsed) => parsed,
        None => return Err(format!("unparseable annotation: {:?}", reply.text)),
    };
    let key = make_key(question, &s_minus).map_err(|e| e.to_string())?;
    let vector = embedder.embed(&key.combined);
    Ok(Some(MemoryEntry {
        q: question.text.clone(),
        s_plus: gold_sql.to_string(),
        s_minus,
        error_types,
        suggestions,
        key,
        vector,
    }))
}

// ---------------------------------------------------------------------------
// ICL exemplar store (correct experiences)
// ---------------------------------------------------------------------------

/// One correct (question, gold SQL) pair, keyed by its combined
/// question+skeleton representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarEntry {
    pub question_id: String,
    pub question: String,
    pub gold_sql: String,
    pub vector: EmbeddingVector,
}

/// Store of correct experiences used for few-shot prompting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExemplarStore {
    pub embedder_fingerprint: String,
    entries: Vec<ExemplarEntry>,
}

impl ExemplarStore {
    pub fn new(embedder: &dyn Embedder) -> Self {
        Self {
            embedder_fingerprint: embedder.fingerprint(),
            entries: Vec::new(),
        }
    }

    /// Build from training (question, gold SQL) pairs; items whose gold SQL
    /// fails to lex are skipped.
    pub fn build(corpus: &[(Question, String)], embedder: &dyn Embedder) -> Self {
        let mut store = Self::new(embedder);
        for (question, gold_sql) in corpus {
            let _ = store.append(question, gold_sql, embedder);
        }
        store
    }

    /// Archive one correct experience.
    pub fn append(
        &mut self,
        question: &Question,
        gold_sql: &str,
        embedder: &dyn Embedder,
    ) -> Result<(), MemoryError> {
        if embedder.fingerprint() != self.embedder_fingerprint {
            return Err(MemoryError::EmbedderMismatch {
                expected: self.embedder_fingerprint.clone(),
                actual: embedder.fingerprint(),
            });
        }
        let key = make_key(question, gold_sql)
            .map_err(|e| MemoryError::InvalidEntry(e.to_string()))?;
        self.entries.push(ExemplarEntry {
            question_id: question.id.clone(),
            question: question.text.clone(),
            gold_sql: gold_sql.to_string(),
            vector: embedder.embed(&key.combined),
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Top-n by cosine over the combined key, excluding the querying
    /// question's own entries. An empty store yields an empty list.
    pub fn retrieve(
        &self,
        key: &RetrievalKey,
        exclude_question_id: &str,
        embedder: &dyn Embedder,
        n: usize,
    ) -> Vec<(String, String)> {
        if self.entries.is_empty() || n == 0 {
            return Vec::new();
        }
        let query = embedder.embed(&key.combined);
        let mut scored: Vec<(usize, f64)> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.question_id != exclude_question_id)
            .map(|(i, e)| (i, cosine(&query.values, &e.vector.values)))
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        scored.truncate(n);
        scored
            .into_iter()
            .map(|(i, _)| {
                (
                    self.entries[i].question.clone(),
                    self.entries[i].gold_sql.clone(),
                )
            })
            .collect()
    }
}
