//! Plan solving and candidate synthesis: the per-sub-question
//! reason/act/observe/reflect loop (one revision at most), ICL exemplar
//! retrieval, and multi-style final SQL generation.

use serde::{Deserialize, Serialize};

use crate::decompose::{
    decompose, fallback_check, random_decomposition, render_plan, FallbackDecision,
    SubQuestionPlan,
};
use crate::embed::Embedder;
use crate::executor::DatabaseRegistry;
use crate::gateway::{ChatRequest, GatewayError, LlmGateway, Message, PurposeTag};
use crate::memory::ExemplarStore;
use crate::model::{
    CandidateSql, DecompositionStrategy, ExecStatus, ExecutionOutcome, Question, SqlStyle,
};
use crate::prompts;
use crate::skeleton::{key_from_parts, make_key, Skeleton};

/// How plans are produced; `ForcedRandom` and `ForcedNone` are the ablation
/// controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecompositionMode {
    #[default]
    Structured,
    ForcedRandom,
    ForcedNone,
}

/// One solved step of a trace. At most one revision: the revised fields are
/// present together or absent together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyNote {
    pub sub_question: String,
    pub reasoning: String,
    pub sub_sql: String,
    pub outcome: ExecutionOutcome,
    pub reflected: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revised_sql: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revised_outcome: Option<ExecutionOutcome>,
}

impl StrategyNote {
    /// The step's current sub-SQL: the revision when one exists.
    pub fn effective_sql(&self) -> &str {
        self.revised_sql.as_deref().unwrap_or(&self.sub_sql)
    }
}

/// The full reasoning record of one strategy path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub strategy: DecompositionStrategy,
    pub plan: SubQuestionPlan,
    pub notes: Vec<StrategyNote>,
}

fn render_outcome(outcome: &ExecutionOutcome) -> String {
    match outcome.status {
        ExecStatus::Ok => {
            let rows = outcome.rows.as_deref().unwrap_or(&[]);
            format!("ok, {} row(s)", rows.len())
        }
        ExecStatus::Empty => "empty result set".to_string(),
        _ => format!(
            "{:?}: {}",
            outcome.status,
            outcome.message.as_deref().unwrap_or("")
        ),
    }
}

fn render_notes(notes: &[StrategyNote]) -> String {
    if notes.is_empty() {
        return "none".to_string();
    }
    notes
        .iter()
        .enumerate()
        .map(|(i, n)| {
            format!(
                "{}. {}\n   SQL: {}\n   result: {}",
                i + 1,
                n.sub_question,
                n.effective_sql(),
                render_outcome(n.revised_outcome.as_ref().unwrap_or(&n.outcome)),
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// One reason -> act -> observe cycle plus one reflect; when reflection
/// flags an issue, exactly one revise -> re-execute. Execution failures are
/// recorded in the note, never thrown.
pub fn react_reflect_step(
    question: &Question,
    sub_question: &str,
    prior_notes: &[StrategyNote],
    schema_ctx: &str,
    gateway: &LlmGateway,
    registry: &DatabaseRegistry,
) -> Result<StrategyNote, GatewayError> {
    let prompt = prompts::REACT_REASON.render(&[
        ("schema", schema_ctx),
        ("question", question.text.as_str()),
        ("sub_question", sub_question),
        ("prior_notes", render_notes(prior_notes).as_str()),
    ]);
    let request = ChatRequest::new(PurposeTag::ReactReason, vec![Message::user(prompt)])
        .for_question(question.id.clone());
    let reply = gateway.complete(&request)?;
    let sub_sql = prompts::extract_fenced_sql(&reply.text)
        .unwrap_or_else(|| reply.text.trim().to_string());
    let outcome = registry
        .execute(&question.db_id, &sub_sql)
        .unwrap_or_else(|e| ExecutionOutcome::error(ExecStatus::RuntimeError, e.to_string()));

    let reflect_prompt = prompts::REACT_REFLECT.render(&[
        ("sub_question", sub_question),
        ("sql", sub_sql.as_str()),
        ("outcome", render_outcome(&outcome).as_str()),
    ]);
    let reflect_request =
        ChatRequest::new(PurposeTag::ReactReflect, vec![Message::user(reflect_prompt)])
            .for_question(question.id.clone());
    let reflect_reply = gateway.complete(&reflect_request)?;

    let mut note = StrategyNote {
        sub_question: sub_question.to_string(),
        reasoning: reply.text.clone(),
        sub_sql,
        outcome,
        reflected: true,
        revised_sql: None,
        revised_outcome: None,
    };
    if let Some(revised) = prompts::extract_fenced_sql(&reflect_reply.text) {
        let revised_outcome = registry
            .execute(&question.db_id, &revised)
            .unwrap_or_else(|e| ExecutionOutcome::error(ExecStatus::RuntimeError, e.to_string()));
        note.revised_sql = Some(revised);
        note.revised_outcome = Some(revised_outcome);
    }
    Ok(note)
}

/// Top-n (question, gold SQL) exemplars keyed by question text combined with
/// the latest sub-SQL's skeleton. Entries for the querying question itself
/// are never returned.
pub fn retrieve_icl_exemplars(
    question: &Question,
    latest_sub_sql: Option<&str>,
    store: &ExemplarStore,
    embedder: &dyn Embedder,
    n: usize,
) -> Vec<(String, String)> {
    let key = match latest_sub_sql {
        Some(sql) => make_key(question, sql).unwrap_or_else(|_| {
            key_from_parts(
                &question.text,
                Skeleton {
                    text: String::new(),
                    keyword_sequence: Vec::new(),
                },
            )
        }),
        None => key_from_parts(
            &question.text,
            Skeleton {
                text: String::new(),
                keyword_sequence: Vec::new(),
            },
        ),
    };
    store.retrieve(&key, &question.id, embedder, n)
}

fn render_exemplars(exemplars: &[(String, String)]) -> String {
    if exemplars.is_empty() {
        return "none".to_string();
    }
    exemplars
        .iter()
        .map(|(q, sql)| format!("Q: {q}\nSQL: {sql}"))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Synthesize one candidate in the given style from a completed trace.
/// Extraction failure is retried once; a still-fenceless reply is carried
/// forward raw with the candidate flagged.
pub fn synthesize(
    question: &Question,
    trace: &ReasoningTrace,
    exemplars: &[(String, String)],
    style: SqlStyle,
    schema_ctx: &str,
    gateway: &LlmGateway,
) -> Result<CandidateSql, GatewayError> {
    let trace_text = if trace.notes.is_empty() {
        if trace.plan.sub_questions.is_empty() {
            "none (direct generation)".to_string()
        } else {
            render_plan(&trace.plan.sub_questions)
        }
    } else {
        render_notes(&trace.notes)
    };
    let strategy_label = format!("{:?}", trace.strategy);
    let prompt = prompts::SYNTHESIZE.render(&[
        ("style", style.label()),
        ("schema", schema_ctx),
        ("question", question.text.as_str()),
        ("evidence", question.evidence.as_deref().unwrap_or("none")),
        ("strategy", strategy_label.as_str()),
        ("trace", trace_text.as_str()),
        ("exemplars", render_exemplars(exemplars).as_str()),
    ]);
    let request = ChatRequest::new(PurposeTag::Synthesize, vec![Message::user(prompt)])
        .for_question(question.id.clone());

    let mut tokens = crate::model::TokenUsage::default();
    let mut raw_reply = String::new();
    for _attempt in 0..2 {
        let reply = gateway.complete(&request)?;
        tokens += reply.usage;
        raw_reply = reply.text;
        if let Some(sql) = prompts::extract_fenced_sql(&raw_reply) {
            let mut candidate = CandidateSql::new(&question.id, trace.strategy, style, sql);
            candidate.tokens = tokens;
            return Ok(candidate);
        }
    }
    let mut candidate =
        CandidateSql::new(&question.id, trace.strategy, style, raw_reply.trim());
    candidate.tokens = tokens;
    candidate.flagged = true;
    Ok(candidate)
}

/// Everything produced while generating candidates for one question.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationOutput {
    pub fallback_decision: Option<FallbackDecision>,
    pub traces: Vec<ReasoningTrace>,
    pub candidates: Vec<CandidateSql>,
    /// Per-candidate failures that did not abort the question.
    pub errors: Vec<String>,
}

pub struct GenerationConfig<'a> {
    pub mode: DecompositionMode,
    pub react_reflect: bool,
    pub final_icl: bool,
    pub single_style: Option<SqlStyle>,
    pub icl_n: usize,
    pub seed: u64,
    pub exemplar_store: Option<&'a ExemplarStore>,
    pub embedder: &'a dyn Embedder,
}

/// Produce the per-question candidate set: one candidate per effective
/// strategy path per style. A question fails only if zero candidates exist.
pub fn generate_all(
    question: &Question,
    schema_ctx: &str,
    gateway: &LlmGateway,
    registry: &DatabaseRegistry,
    config: &GenerationConfig,
) -> Result<GenerationOutput, GatewayError> {
    // 1. plans
    let mut fallback_decision = None;
    let plans: Vec<SubQuestionPlan> = match config.mode {
        DecompositionMode::ForcedRandom => vec![random_decomposition(question, config.seed)],
        DecompositionMode::ForcedNone => vec![SubQuestionPlan::no_decomposition()],
        DecompositionMode::Structured => {
            let decision = fallback_check(question, gateway)?;
            fallback_decision = Some(decision);
            match decision {
                FallbackDecision::Proceed => {
                    let mut plans = Vec::with_capacity(3);
                    for strategy in DecompositionStrategy::STRUCTURED {
                        plans.push(decompose(
                            question,
                            schema_ctx,
                            strategy,
                            gateway,
                            config.seed,
                        )?);
                    }
                    plans
                }
                FallbackDecision::RandomDecomposition => {
                    vec![random_decomposition(question, config.seed)]
                }
                FallbackDecision::NoDecomposition => vec![SubQuestionPlan::no_decomposition()],
            }
        }
    };

    // 2. traces: sequential within a path, each step seeing its prior notes
    let mut traces = Vec::with_capacity(plans.len());
    for plan in plans {
        let mut notes: Vec<StrategyNote> = Vec::new();
        if config.react_reflect {
            for sub_question in &plan.sub_questions {
                let note = react_reflect_step(
                    question,
                    sub_question,
                    &notes,
                    schema_ctx,
                    gateway,
                    registry,
                )?;
                notes.push(note);
            }
        }
        traces.push(ReasoningTrace {
            strategy: plan.strategy,
            plan,
            notes,
        });
    }

    // 3. synthesis across styles
    let styles: Vec<SqlStyle> = match config.single_style {
        Some(style) => vec![style],
        None => SqlStyle::ALL.to_vec(),
    };
    let mut candidates = Vec::with_capacity(traces.len() * styles.len());
    let mut errors = Vec::new();
    for trace in &traces {
        let exemplars = if config.final_icl {
            match config.exemplar_store {
                Some(store) => {
                    let latest = trace.notes.last().map(|n| n.effective_sql().to_string());
                    retrieve_icl_exemplars(
                        question,
                        latest.as_deref(),
                        store,
                        config.embedder,
                        config.icl_n,
                    )
                }
                None => Vec::new(),
            }
        } else {
            Vec::new()
        };
        for style in &styles {
            match synthesize(question, trace, &exemplars, *style, schema_ctx, gateway) {
                Ok(candidate) => candidates.push(candidate),
                Err(e) => errors.push(format!(
                    "{:?}/{}: {e}",
                    trace.strategy,
                    style.label()
                )),
            }
        }
    }
    if candidates.is_empty() {
        return Err(GatewayError::Backend {
            status: 0,
            message: format!(
                "no candidates produced for question {}: {}",
                question.id,
                errors.join("; ")
            ),
        });
    }
    Ok(GenerationOutput {
        fallback_decision,
        traces,
        candidates,
        errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::HashEmbedder;
    use crate::gateway::ScriptRule;
    use crate::testutil::toy_db;

    fn toy_registry(dir: &std::path::Path) -> DatabaseRegistry {
        let mut reg = DatabaseRegistry::new();
        reg.register("toy", toy_db(dir, "toy"));
        reg
    }

    fn base_rules() -> Vec<ScriptRule> {
        vec![
            ScriptRule::new(PurposeTag::Decompose, "PROCEED").matching("decomposed into"),
            ScriptRule::new(PurposeTag::Decompose, "1. step one\n2. step two"),
            ScriptRule::new(
                PurposeTag::ReactReason,
                "thinking\n```sql\nSELECT id FROM t\n```",
            ),
            ScriptRule::new(PurposeTag::ReactReflect, "OK"),
            ScriptRule::new(PurposeTag::Synthesize, "```sql\nSELECT id FROM t\n```"),
        ]
    }

    fn config<'a>(embedder: &'a HashEmbedder) -> GenerationConfig<'a> {
        GenerationConfig {
            mode: DecompositionMode::Structured,
            react_reflect: true,
            final_icl: true,
            single_style: None,
            icl_n: 5,
            seed: 7,
            exemplar_store: None,
            embedder,
        }
    }

    #[test]
    fn react_step_without_issue_has_no_revision() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = toy_registry(tmp.path());
        let gw = LlmGateway::scripted(base_rules());
        let q = Question::new("q1", "toy", "list ids");
        let note = react_reflect_step(&q, "get ids", &[], "", &gw, &reg).unwrap();
        assert!(note.reflected);
        assert!(note.revised_sql.is_none());
        assert!(note.revised_outcome.is_none());
        assert_eq!(note.outcome.status, ExecStatus::Ok);
        assert_eq!(gw.calls_by_purpose("q1", PurposeTag::ReactReason), 1);
        assert_eq!(gw.calls_by_purpose("q1", PurposeTag::ReactReflect), 1);
    }

    #[test]
    fn react_step_revision_is_executed_and_recorded() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = toy_registry(tmp.path());
        let rules = vec![
            ScriptRule::new(PurposeTag::ReactReason, "```sql\nSELECT frm t\n```"),
            ScriptRule::new(
                PurposeTag::ReactReflect,
                "bad column\n```sql\nSELECT id FROM t\n```",
            ),
        ];
        let gw = LlmGateway::scripted(rules);
        let q = Question::new("q1", "toy", "list ids");
        let note = react_reflect_step(&q, "get ids", &[], "", &gw, &reg).unwrap();
        assert_eq!(note.outcome.status, ExecStatus::ParseError);
        assert_eq!(note.revised_sql.as_deref(), Some("SELECT id FROM t"));
        assert_eq!(note.revised_outcome.as_ref().unwrap().status, ExecStatus::Ok);
    }

    #[test]
    fn react_step_failed_revision_keeps_both_outcomes() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = toy_registry(tmp.path());
        let rules = vec![
            ScriptRule::new(PurposeTag::ReactReason, "```sql\nSELECT frm t\n```"),
            ScriptRule::new(
                PurposeTag::ReactReflect,
                "try this\n```sql\nSELECT still_bad FROM t\n```",
            ),
        ];
        let gw = LlmGateway::scripted(rules);
        let q = Question::new("q1", "toy", "list ids");
        let note = react_reflect_step(&q, "get ids", &[], "", &gw, &reg).unwrap();
        assert!(note.outcome.status.is_error());
        assert!(note.revised_outcome.as_ref().unwrap().status.is_error());
    }

    #[test]
    fn full_run_yields_nine_candidates() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = toy_registry(tmp.path());
        let gw = LlmGateway::scripted(base_rules());
        let q = Question::new("q1", "toy", "list ids");
        let embedder = HashEmbedder::default();
        let out = generate_all(&q, "", &gw, &reg, &config(&embedder)).unwrap();
        assert_eq!(out.candidates.len(), 9);
        assert_eq!(out.traces.len(), 3);
        // one candidate per (strategy, style) slot
        let mut slots: Vec<usize> = out.candidates.iter().map(|c| c.slot_index()).collect();
        slots.sort_unstable();
        slots.dedup();
        assert_eq!(slots.len(), 9);
    }

    #[test]
    fn no_decomposition_yields_three_candidates() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = toy_registry(tmp.path());
        let mut rules = base_rules();
        rules[0] = ScriptRule::new(PurposeTag::Decompose, "TOO_SIMPLE").matching("decomposed into");
        let gw = LlmGateway::scripted(rules);
        let q = Question::new("q1", "toy", "list ids");
        let embedder = HashEmbedder::default();
        let out = generate_all(&q, "", &gw, &reg, &config(&embedder)).unwrap();
        assert_eq!(out.candidates.len(), 3);
        assert!(out
            .candidates
            .iter()
            .all(|c| c.strategy == DecompositionStrategy::NoDecomposition));
        assert_eq!(out.fallback_decision, Some(FallbackDecision::NoDecomposition));
    }

    #[test]
    fn style_failures_do_not_abort_the_question() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = toy_registry(tmp.path());
        let mut rules = base_rules();
        rules.pop(); // no blanket synthesize rule: CTE-style calls will fail
        rules.push(
            ScriptRule::new(PurposeTag::Synthesize, "```sql\nSELECT id FROM t\n```")
                .matching("in the FlatJoin style"),
        );
        rules.push(
            ScriptRule::new(PurposeTag::Synthesize, "```sql\nSELECT id FROM t\n```")
                .matching("in the Nested style"),
        );
        let gw = LlmGateway::scripted(rules);
        let q = Question::new("q1", "toy", "list ids");
        let embedder = HashEmbedder::default();
        let out = generate_all(&q, "", &gw, &reg, &config(&embedder)).unwrap();
        assert_eq!(out.candidates.len(), 6);
        assert_eq!(out.errors.len(), 3);
    }

    #[test]
    fn three_styles_differ_only_in_tag_and_sql() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = toy_registry(tmp.path());
        let mut rules = base_rules();
        rules[0] = ScriptRule::new(PurposeTag::Decompose, "TOO_SIMPLE").matching("decomposed into");
        rules.pop();
        rules.push(
            ScriptRule::new(PurposeTag::Synthesize, "```sql\nWITH x AS (SELECT id FROM t) SELECT * FROM x\n```")
                .matching("in the CTE style"),
        );
        rules.push(
            ScriptRule::new(PurposeTag::Synthesize, "```sql\nSELECT id FROM t\n```")
                .matching("in the FlatJoin style"),
        );
        rules.push(
            ScriptRule::new(PurposeTag::Synthesize, "```sql\nSELECT id FROM t WHERE id IN (SELECT id FROM t)\n```")
                .matching("in the Nested style"),
        );
        let gw = LlmGateway::scripted(rules);
        let q = Question::new("q1", "toy", "list ids");
        let embedder = HashEmbedder::default();
        let out = generate_all(&q, "", &gw, &reg, &config(&embedder)).unwrap();
        assert_eq!(out.candidates.len(), 3);
        let sqls: std::collections::HashSet<&str> =
            out.candidates.iter().map(|c| c.sql.as_str()).collect();
        assert_eq!(sqls.len(), 3);
        assert!(out.candidates.iter().all(|c| c.generation == 0));
    }

    #[test]
    fn fenceless_synthesis_reply_is_flagged_after_retry() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = toy_registry(tmp.path());
        let gw = LlmGateway::scripted(vec![ScriptRule::new(
            PurposeTag::Synthesize,
            "SELECT id FROM t but with no fence",
        )]);
        let q = Question::new("q1", "toy", "list ids");
        let trace = ReasoningTrace {
            strategy: DecompositionStrategy::NoDecomposition,
            plan: SubQuestionPlan::no_decomposition(),
            notes: vec![],
        };
        let cand = synthesize(&q, &trace, &[], SqlStyle::Cte, "", &gw).unwrap();
        assert!(cand.flagged);
        assert_eq!(cand.sql, "SELECT id FROM t but with no fence");
        assert_eq!(gw.calls_by_purpose("q1", PurposeTag::Synthesize), 2);
    }

    #[test]
    fn icl_exemplars_never_leak_own_question() {
        let embedder = HashEmbedder::default();
        let corpus: Vec<(Question, String)> = (0..10)
            .map(|i| {
                (
                    Question::new(format!("q{i}"), "toy", format!("count things in group {i}")),
                    "SELECT COUNT(*) FROM t".to_string(),
                )
            })
            .collect();
        let store = ExemplarStore::build(&corpus, &embedder);
        let me = Question::new("q3", "toy", "count things in group 3");
        let got = retrieve_icl_exemplars(&me, Some("SELECT COUNT(*) FROM t"), &store, &embedder, 5);
        assert_eq!(got.len(), 5);
        assert!(got.iter().all(|(q, _)| q != "count things in group 3"));
    }

    #[test]
    fn notes_and_revisions_appear_together() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = toy_registry(tmp.path());
        let gw = LlmGateway::scripted(base_rules());
        let q = Question::new("q1", "toy", "list ids");
        let embedder = HashEmbedder::default();
        let out = generate_all(&q, "", &gw, &reg, &config(&embedder)).unwrap();
        for trace in &out.traces {
            assert_eq!(trace.notes.len(), trace.plan.sub_questions.len());
            for note in &trace.notes {
                assert_eq!(note.revised_sql.is_some(), note.revised_outcome.is_some());
            }
        }
    }
}
