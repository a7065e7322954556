//! Dataset loading, end-to-end runs, the execution-accuracy metric,
//! efficiency accounting, and report emission.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::decompose::FallbackDecision;
use crate::embed::{splitmix64, Embedder};
use crate::executor::DatabaseRegistry;
use crate::gateway::LlmGateway;
use crate::generate::{generate_all, GenerationConfig, ReasoningTrace};
use crate::memory::{ExemplarStore, MemoryIndex};
use crate::model::{Question, TokenUsage};
use crate::refine::{refine_loop, select, ExemplarPolicy, RefineOutcome, SelectionResult, VoteRecord};
use crate::schema::{extract_keywords, link, render_elements, SchemaCatalog, SchemaIndex};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("format error in record {record}: {message}")]
    Format { record: usize, message: String },
    #[error("io error: {0}")]
    Io(String),
    #[error("empty report")]
    EmptyReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    Bird,
    Spider,
}

/// One benchmark item: a question bound to its database and gold SQL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetItem {
    pub question_id: String,
    pub db_id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<String>,
    pub gold_sql: String,
}

impl DatasetItem {
    pub fn to_question(&self) -> Question {
        let mut q = Question::new(&self.question_id, &self.db_id, &self.question);
        if let Some(ev) = &self.evidence {
            if !ev.trim().is_empty() {
                q = q.with_evidence(ev.clone());
            }
        }
        q
    }
}

fn field_str(value: &serde_json::Value, names: &[&str]) -> Option<String> {
    for name in names {
        match value.get(*name) {
            Some(serde_json::Value::String(s)) => return Some(s.clone()),
            Some(serde_json::Value::Number(n)) => return Some(n.to_string()),
            _ => {}
        }
    }
    None
}

/// Load a BIRD- or Spider-layout JSON dataset. Records come back in stable
/// question_id order (numeric-aware).
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Vec<DatasetItem>, BenchError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| BenchError::Io(format!("{}: {e}", path.display())))?;
    let records: Vec<serde_json::Value> =
        serde_json::from_str(&raw).map_err(|e| BenchError::Io(e.to_string()))?;
    let mut items = Vec::with_capacity(records.len());
    for (i, record) in records.iter().enumerate() {
        let db_id = field_str(record, &["db_id"]).ok_or_else(|| BenchError::Format {
            record: i,
            message: "missing db_id".to_string(),
        })?;
        let question =
            field_str(record, &["question"]).ok_or_else(|| BenchError::Format {
                record: i,
                message: "missing question".to_string(),
            })?;
        let gold_sql = match format {
            DatasetFormat::Bird => field_str(record, &["SQL", "sql"]),
            DatasetFormat::Spider => field_str(record, &["query", "SQL", "sql"]),
        }
        .ok_or_else(|| BenchError::Format {
            record: i,
            message: "missing gold SQL".to_string(),
        })?;
        let question_id =
            field_str(record, &["question_id", "id"]).unwrap_or_else(|| i.to_string());
        let evidence = field_str(record, &["evidence"]).filter(|s| !s.trim().is_empty());
        items.push(DatasetItem {
            question_id,
            db_id,
            question,
            evidence,
            gold_sql,
        });
    }
    items.sort_by(|a, b| id_sort_key(&a.question_id).cmp(&id_sort_key(&b.question_id)));
    Ok(items)
}

fn id_sort_key(id: &str) -> (u8, u64, String) {
    match id.parse::<u64>() {
        Ok(n) => (0, n, String::new()),
        Err(_) => (1, 0, id.to_string()),
    }
}

/// A gold query that fails on its own database: reported, never dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldValidation {
    pub question_id: String,
    pub message: String,
}

pub fn validate_gold(items: &[DatasetItem], registry: &DatabaseRegistry) -> Vec<GoldValidation> {
    let mut flags = Vec::new();
    for item in items {
        match registry.execute(&item.db_id, &item.gold_sql) {
            Ok(outcome) if outcome.status.is_error() => flags.push(GoldValidation {
                question_id: item.question_id.clone(),
                message: outcome.message.unwrap_or_else(|| "execution failed".into()),
            }),
            Ok(_) => {}
            Err(e) => flags.push(GoldValidation {
                question_id: item.question_id.clone(),
                message: e.to_string(),
            }),
        }
    }
    flags
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub ex_percent: f64,
    pub tokens_per_query: f64,
    pub seconds_per_query: f64,
    pub questions: usize,
}

/// Everything recorded for one question: the decision trail, the refined
/// candidates, the vote, the verdict, and the cost.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuestionReport {
    pub question_id: String,
    pub db_id: String,
    pub final_sql: String,
    pub ex: bool,
    pub tokens: TokenUsage,
    /// End-to-end wall-clock seconds, execution and voting included.
    pub seconds: f64,
    /// Seconds spent inside backend calls (ledger view).
    pub backend_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback_decision: Option<FallbackDecision>,
    pub traces: Vec<ReasoningTrace>,
    pub refinements: Vec<RefineOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vote_record: Option<VoteRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_cause: Option<String>,
    #[serde(default)]
    pub all_failed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunPass {
    pub pass: usize,
    pub questions: Vec<QuestionReport>,
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config_snapshot: serde_json::Value,
    pub passes: Vec<RunPass>,
    /// Mean over all per-question rows across passes.
    pub aggregate: Aggregate,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gold_validation: Vec<GoldValidation>,
    /// Set when any token count was estimated rather than backend-reported.
    #[serde(default)]
    pub approximate_tokens: bool,
}

impl RunReport {
    pub fn all_rows(&self) -> impl Iterator<Item = &QuestionReport> {
        self.passes.iter().flat_map(|p| p.questions.iter())
    }

    /// Atomic write: temp file then rename.
    pub fn save(&self, path: &Path) -> Result<(), BenchError> {
        let dir = path.parent().unwrap_or(Path::new("."));
        let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| BenchError::Io(e.to_string()))?;
        serde_json::to_writer_pretty(&tmp, self).map_err(|e| BenchError::Io(e.to_string()))?;
        tmp.persist(path).map_err(|e| BenchError::Io(e.to_string()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| BenchError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&raw).map_err(|e| BenchError::Io(e.to_string()))
    }
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

pub fn aggregate_rows<'a, I: Iterator<Item = &'a QuestionReport>>(rows: I) -> Option<Aggregate> {
    let rows: Vec<&QuestionReport> = rows.collect();
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let correct = rows.iter().filter(|r| r.ex).count() as f64;
    let tokens: u64 = rows.iter().map(|r| r.tokens.total()).sum();
    let seconds: f64 = rows.iter().map(|r| r.seconds).sum();
    Some(Aggregate {
        ex_percent: round1(100.0 * correct / n),
        tokens_per_query: tokens as f64 / n,
        seconds_per_query: seconds / n,
        questions: rows.len(),
    })
}

/// EX%: 100 x correct / total over every row of the report, one decimal.
pub fn compute_ex(report: &RunReport) -> Result<f64, BenchError> {
    let rows: Vec<&QuestionReport> = report.all_rows().collect();
    if rows.is_empty() {
        return Err(BenchError::EmptyReport);
    }
    let correct = rows.iter().filter(|r| r.ex).count() as f64;
    Ok(round1(100.0 * correct as f64 / rows.len() as f64))
}

/// Human-readable summary table.
pub fn render_table(report: &RunReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:<14} {:<4} {:>10} {:>10}\n",
        "question", "db", "ex", "tokens", "seconds"
    ));
    for row in report.all_rows() {
        out.push_str(&format!(
            "{:<12} {:<14} {:<4} {:>10} {:>10.3}\n",
            row.question_id,
            row.db_id,
            if row.ex { "yes" } else { "no" },
            row.tokens.total(),
            row.seconds,
        ));
    }
    out.push_str(&format!(
        "\nEX: {:.1}%   tokens/query: {:.1}   seconds/query: {:.3}   ({} rows{})\n",
        report.aggregate.ex_percent,
        report.aggregate.tokens_per_query,
        report.aggregate.seconds_per_query,
        report.aggregate.questions,
        if report.approximate_tokens {
            ", token counts approximate"
        } else {
            ""
        }
    ));
    out
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

/// Ledger key for a question within a repeat pass; pass 0 uses the bare id.
pub fn ledger_key(question_id: &str, pass: usize) -> String {
    if pass == 0 {
        question_id.to_string()
    } else {
        format!("{question_id}#r{pass}")
    }
}

fn question_seed(run_seed: u64, question_id: &str) -> u64 {
    let mut h = run_seed;
    for b in question_id.bytes() {
        h = splitmix64(h ^ b as u64);
    }
    h
}

/// Wired-up run environment: backends, databases, stores, and config.
pub struct Pipeline<'a> {
    pub gateway: &'a LlmGateway,
    pub registry: &'a DatabaseRegistry,
    pub embedder: &'a dyn Embedder,
    pub memory: Option<&'a MemoryIndex>,
    pub exemplar_store: Option<&'a ExemplarStore>,
    pub schema_indices: &'a HashMap<String, SchemaIndex>,
    pub catalogs: &'a HashMap<String, SchemaCatalog>,
    pub config: &'a PipelineConfig,
}

impl<'a> Pipeline<'a> {
    /// Process the whole dataset `repeat` times with bounded parallelism.
    /// Per-question failures are recorded, never fatal.
    pub fn run(&self, dataset: &[DatasetItem]) -> RunReport {
        let mut passes = Vec::with_capacity(self.config.repeat.max(1));
        for pass in 0..self.config.repeat.max(1) {
            let slots: Mutex<Vec<Option<QuestionReport>>> =
                Mutex::new(vec![None; dataset.len()]);
            let cursor = AtomicUsize::new(0);
            let workers = self.config.workers.max(1).min(dataset.len().max(1));
            std::thread::scope(|scope| {
                for _ in 0..workers {
                    scope.spawn(|| loop {
                        let i = cursor.fetch_add(1, Ordering::SeqCst);
                        if i >= dataset.len() {
                            break;
                        }
                        let row = self.process_question(&dataset[i], pass);
                        slots.lock().unwrap()[i] = Some(row);
                    });
                }
            });
            let questions: Vec<QuestionReport> = slots
                .into_inner()
                .unwrap()
                .into_iter()
                .map(|r| r.expect("every slot filled"))
                .collect();
            let aggregate = aggregate_rows(questions.iter()).unwrap_or(Aggregate {
                ex_percent: 0.0,
                tokens_per_query: 0.0,
                seconds_per_query: 0.0,
                questions: 0,
            });
            passes.push(RunPass {
                pass,
                questions,
                aggregate,
            });
        }
        let aggregate = aggregate_rows(passes.iter().flat_map(|p| p.questions.iter()))
            .unwrap_or(Aggregate {
                ex_percent: 0.0,
                tokens_per_query: 0.0,
                seconds_per_query: 0.0,
                questions: 0,
            });
        RunReport {
            seed: self.config.seed,
            config_snapshot: serde_json::to_value(self.config).unwrap_or_default(),
            passes,
            aggregate,
            gold_validation: Vec::new(),
            approximate_tokens: self.gateway.has_approximate_usage(),
        }
    }

    fn schema_context(&self, question: &Question) -> String {
        let full = self
            .catalogs
            .get(&question.db_id)
            .map(SchemaCatalog::render_context)
            .unwrap_or_default();
        if !self.config.ablation.schema_linking {
            return full;
        }
        let Some(index) = self.schema_indices.get(&question.db_id) else {
            return full;
        };
        let keywords = match extract_keywords(question, self.gateway) {
            Ok(k) => k,
            Err(e) => {
                tracing::warn!(question = %question.id, error = %e, "keyword extraction failed");
                return full;
            }
        };
        let linked = link(
            &keywords,
            index,
            self.embedder,
            &self.config.schema_linking.thresholds,
        );
        if linked.is_empty() {
            full
        } else {
            render_elements(&linked)
        }
    }

    fn process_question(&self, item: &DatasetItem, pass: usize) -> QuestionReport {
        let started = Instant::now();
        let mut question = item.to_question();
        question.id = ledger_key(&item.question_id, pass);
        let seed = question_seed(self.config.seed, &item.question_id);

        let mut report = QuestionReport {
            question_id: item.question_id.clone(),
            db_id: item.db_id.clone(),
            final_sql: String::new(),
            ex: false,
            tokens: TokenUsage::default(),
            seconds: 0.0,
            backend_seconds: 0.0,
            fallback_decision: None,
            traces: Vec::new(),
            refinements: Vec::new(),
            vote_record: None,
            failure_cause: None,
            all_failed: false,
        };

        let schema_ctx = self.schema_context(&question);
        let gen_config = GenerationConfig {
            mode: self.config.ablation.decomposition,
            react_reflect: self.config.ablation.react_reflect,
            final_icl: self.config.ablation.final_icl,
            single_style: self.config.ablation.single_style,
            icl_n: self.config.icl_n,
            seed,
            exemplar_store: self.exemplar_store,
            embedder: self.embedder,
        };

        let generated = match generate_all(
            &question,
            &schema_ctx,
            self.gateway,
            self.registry,
            &gen_config,
        ) {
            Ok(g) => g,
            Err(e) => {
                report.failure_cause = Some(e.to_string());
                self.finish(&mut report, &question, started);
                return report;
            }
        };
        report.fallback_decision = generated.fallback_decision;
        report.traces = generated.traces;

        let policy = ExemplarPolicy {
            mode: self.config.refinement.mode,
            k: self.config.refinement.k,
        };
        report.refinements = if self.config.ablation.refinement {
            generated
                .candidates
                .into_iter()
                .map(|cand| {
                    refine_loop(
                        cand,
                        &question,
                        self.memory,
                        self.embedder,
                        self.gateway,
                        &policy,
                        self.config.retrieval.max_exemplars,
                        self.config.refinement.max_rounds,
                        splitmix64(seed),
                    )
                })
                .collect()
        } else {
            generated
                .candidates
                .into_iter()
                .map(|cand| RefineOutcome {
                    candidate: cand,
                    rounds: Vec::new(),
                })
                .collect()
        };
        // the report records the dataset's id; the pass-suffixed ledger key
        // is an accounting detail
        for outcome in &mut report.refinements {
            outcome.candidate.question_id = item.question_id.clone();
        }

        let finals: Vec<crate::model::CandidateSql> = report
            .refinements
            .iter()
            .map(|r| r.candidate.clone())
            .collect();
        match select(
            &finals,
            self.registry,
            &item.db_id,
            self.config.execution.empty_policy,
        ) {
            Ok(SelectionResult {
                final_candidate,
                vote_record,
                all_failed,
            }) => {
                report.final_sql = final_candidate.sql.clone();
                report.vote_record = Some(vote_record);
                report.all_failed = all_failed;
                match self
                    .registry
                    .ex_match(&report.final_sql, &item.gold_sql, &item.db_id)
                {
                    Ok(matched) => report.ex = matched,
                    Err(e) => {
                        report.failure_cause = Some(e.to_string());
                    }
                }
            }
            Err(e) => {
                report.failure_cause = Some(e.to_string());
            }
        }
        self.finish(&mut report, &question, started);
        report
    }

    fn finish(&self, report: &mut QuestionReport, question: &Question, started: Instant) {
        if let Ok((usage, backend_secs)) = self.gateway.usage_ledger(&question.id) {
            report.tokens = usage;
            report.backend_seconds = backend_secs;
        }
        report.seconds = started.elapsed().as_secs_f64();
    }
}
