//! Question decomposition: the three structured strategies, the per-question
//! fallback decision, and the seeded random splitter used both as fallback
//! and as the ablation control.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gateway::{ChatRequest, GatewayError, LlmGateway, Message, PurposeTag};
use crate::model::{DecompositionStrategy, Question};
use crate::prompts;

/// Ordered sub-questions produced by one strategy. Later steps may reference
/// earlier results, so order is meaningful.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubQuestionPlan {
    pub strategy: DecompositionStrategy,
    pub sub_questions: Vec<String>,
    pub fallback_used: bool,
    /// Prompt template that produced the plan, for trace audit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_id: Option<String>,
}

impl SubQuestionPlan {
    pub fn no_decomposition() -> Self {
        Self {
            strategy: DecompositionStrategy::NoDecomposition,
            sub_questions: Vec::new(),
            fallback_used: true,
            template_id: None,
        }
    }
}

/// Once-per-question decomposability verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackDecision {
    Proceed,
    RandomDecomposition,
    NoDecomposition,
}

/// Ask the model whether the question admits a meaningful decomposition.
pub fn fallback_check(
    question: &Question,
    gateway: &LlmGateway,
) -> Result<FallbackDecision, GatewayError> {
    let prompt = prompts::FALLBACK_CHECK.render(&[("question", question.text.as_str())]);
    let request = ChatRequest::new(PurposeTag::Decompose, vec![Message::user(prompt)])
        .for_question(question.id.clone());
    let reply = gateway.complete(&request)?;
    let upper = reply.text.to_uppercase();
    let decision = if upper.contains("TOO_SIMPLE") {
        FallbackDecision::NoDecomposition
    } else if upper.contains("ILL_SPECIFIED") {
        FallbackDecision::RandomDecomposition
    } else if upper.contains("PROCEED") {
        FallbackDecision::Proceed
    } else {
        tracing::debug!(question = %question.id, reply = %reply.text, "unrecognized fallback verdict");
        FallbackDecision::Proceed
    };
    Ok(decision)
}

/// Parse a numbered-list reply; `1.`, `1)`, and `-` markers are accepted.
/// Returns None when no line carries a marker.
pub fn parse_plan_reply(reply: &str) -> Option<Vec<String>> {
    let mut steps = Vec::new();
    for line in reply.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(step) = strip_marker(trimmed) {
            if !step.is_empty() {
                steps.push(step.to_string());
            }
        }
    }
    if steps.is_empty() {
        None
    } else {
        Some(steps)
    }
}

fn strip_marker(line: &str) -> Option<&str> {
    if let Some(rest) = line.strip_prefix('-').or_else(|| line.strip_prefix('*')) {
        return Some(rest.trim());
    }
    let digits = line.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits == 0 {
        return None;
    }
    let rest = &line[digits..];
    rest.strip_prefix('.')
        .or_else(|| rest.strip_prefix(')'))
        .map(str::trim)
}

/// Canonical rendering of a plan: `1. <step>` per line.
pub fn render_plan(steps: &[String]) -> String {
    steps
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {}", i + 1, s))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Run one structured strategy. A malformed reply is retried once; if the
/// retry is also malformed the plan falls back to a seeded random split,
/// keeping the strategy tag and setting `fallback_used`.
pub fn decompose(
    question: &Question,
    schema_ctx: &str,
    strategy: DecompositionStrategy,
    gateway: &LlmGateway,
    seed: u64,
) -> Result<SubQuestionPlan, GatewayError> {
    debug_assert!(DecompositionStrategy::STRUCTURED.contains(&strategy));
    let template = prompts::decompose_template(strategy);
    let prompt = template.render(&[
        ("schema", schema_ctx),
        ("question", question.text.as_str()),
        ("evidence", question.evidence.as_deref().unwrap_or("none")),
    ]);
    let request = ChatRequest::new(PurposeTag::Decompose, vec![Message::user(prompt)])
        .for_question(question.id.clone());
    for _attempt in 0..2 {
        let reply = gateway.complete(&request)?;
        if let Some(steps) = parse_plan_reply(&reply.text) {
            return Ok(SubQuestionPlan {
                strategy,
                sub_questions: steps,
                fallback_used: false,
                template_id: Some(template.id.to_string()),
            });
        }
    }
    tracing::debug!(question = %question.id, ?strategy, "plan reply malformed twice; random fallback");
    let salt = strategy.order_index() as u64;
    let mut plan = random_decomposition(question, seed ^ salt.wrapping_mul(0x9e3779b9));
    plan.strategy = strategy;
    plan.template_id = Some(template.id.to_string());
    Ok(plan)
}

/// Clause-boundary words where a random split may cut.
const BOUNDARY_WORDS: &[&str] = &[
    "and", "or", "who", "whom", "which", "that", "where", "with", "then", "also", "while",
];

/// Split the question into 2-3 clause-boundary fragments chosen by seeded
/// randomness. Single-clause questions come back whole.
pub fn random_decomposition(question: &Question, rng_seed: u64) -> SubQuestionPlan {
    let words: Vec<&str> = question.text.split_whitespace().collect();
    let mut cut_points: Vec<usize> = Vec::new();
    for i in 1..words.len() {
        let lower = words[i].to_lowercase();
        let lower = lower.trim_matches(|c: char| !c.is_alphanumeric());
        if BOUNDARY_WORDS.contains(&lower) || words[i - 1].ends_with(',') {
            cut_points.push(i);
        }
    }
    cut_points.dedup();

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let fragments = if cut_points.is_empty() {
        vec![question.text.clone()]
    } else {
        let max_cuts = cut_points.len().min(2);
        let n_cuts = if max_cuts == 1 { 1 } else { rng.gen_range(1..=max_cuts) };
        let mut chosen: Vec<usize> = cut_points
            .choose_multiple(&mut rng, n_cuts)
            .copied()
            .collect();
        chosen.sort_unstable();
        let mut frags = Vec::with_capacity(chosen.len() + 1);
        let mut start = 0;
        for cut in chosen {
            frags.push(words[start..cut].join(" "));
            start = cut;
        }
        frags.push(words[start..].join(" "));
        frags
    };
    SubQuestionPlan {
        strategy: DecompositionStrategy::FallbackRandom,
        sub_questions: fragments,
        fallback_used: true,
        template_id: None,
    }
}
