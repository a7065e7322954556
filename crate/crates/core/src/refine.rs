//! Memory-augmented correction and selection: the critic/refine loop over
//! each candidate (capped rounds), the ablation exemplar policies, and
//! self-consistency majority voting over execution-result classes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::Embedder;
use crate::executor::{DatabaseRegistry, ExecError};
use crate::gateway::{ChatRequest, GatewayError, LlmGateway, Message, PurposeTag};
use crate::memory::{dedup_filter, MemoryEntry, MemoryIndex, DEFAULT_RETRIEVE_K};
use crate::model::{
    parse_error_types, result_class_with, CandidateSql, ErrorTypeSet, Question, ResultClass,
    ResultKind,
};
use crate::prompts;
use crate::skeleton::{key_from_parts, make_key, Skeleton};

/// Critic output: the error category set and revision suggestions.
/// `has_error` holds iff `error_types` is non-empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticVerdict {
    pub has_error: bool,
    pub error_types: ErrorTypeSet,
    pub suggestions: String,
}

impl CriticVerdict {
    pub fn clean() -> Self {
        Self {
            has_error: false,
            error_types: ErrorTypeSet::new(),
            suggestions: String::new(),
        }
    }

    pub fn flagged(error_types: ErrorTypeSet, suggestions: impl Into<String>) -> Self {
        debug_assert!(!error_types.is_empty());
        Self {
            has_error: true,
            error_types,
            suggestions: suggestions.into(),
        }
    }
}

/// Which exemplars the critic sees each round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExemplarMode {
    /// Retrieve top-40 then subsumption-dedup to at most `max_exemplars`.
    #[default]
    Filtered,
    /// Retrieve top-k, no filtering.
    TopKUnfiltered,
    /// k uniformly sampled entries, seeded.
    RandomK,
    /// No exemplars: direct correction.
    NoneDirect,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExemplarPolicy {
    pub mode: ExemplarMode,
    pub k: usize,
}

impl Default for ExemplarPolicy {
    fn default() -> Self {
        Self {
            mode: ExemplarMode::Filtered,
            k: 4,
        }
    }
}

fn parse_critic_reply(reply: &str) -> Option<CriticVerdict> {
    let line = reply.lines().find(|l| !l.trim().is_empty())?.trim();
    if line.to_uppercase().starts_with("NO_ERROR") {
        return Some(CriticVerdict::clean());
    }
    let (codes_part, rest) = line.split_once(':')?;
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
    Some(CriticVerdict::flagged(set, rest.trim()))
}

fn render_memory_exemplars(exemplars: &[MemoryEntry]) -> String {
    if exemplars.is_empty() {
        return "none".to_string();
    }
    exemplars
        .iter()
        .map(|e| {
            let codes: Vec<String> = e.error_types.iter().map(|t| t.code().to_string()).collect();
            format!(
                "Q: {}\nWrong SQL: {}\nErrors: {}\nSuggestions: {}\nCorrect SQL: {}",
                e.q,
                e.s_minus,
                codes.join(", "),
                e.suggestions,
                e.s_plus
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Ask the critic whether the candidate contains errors. An unparseable
/// reply is a conservative pass-through (logged), never a hard failure.
pub fn critic(
    candidate: &CandidateSql,
    exemplars: &[MemoryEntry],
    question: &Question,
    gateway: &LlmGateway,
) -> Result<CriticVerdict, GatewayError> {
    let prompt = prompts::CRITIC.render(&[
        ("question", question.text.as_str()),
        ("sql", candidate.sql.as_str()),
        ("exemplars", render_memory_exemplars(exemplars).as_str()),
    ]);
    let request = ChatRequest::new(PurposeTag::Critic, vec![Message::user(prompt)])
        .for_question(question.id.clone());
    let reply = gateway.complete(&request)?;
    match parse_critic_reply(&reply.text) {
        Some(verdict) => Ok(verdict),
        None => {
            tracing::warn!(
                question = %question.id,
                reply = %reply.text,
                "unparseable critic reply; passing candidate through"
            );
            Ok(CriticVerdict::clean())
        }
    }
}

/// Apply the critic's suggestions. Returns None when the model fails to
/// produce fenced SQL twice; the caller keeps the original candidate.
pub fn refine(
    candidate: &CandidateSql,
    verdict: &CriticVerdict,
    question: &Question,
    gateway: &LlmGateway,
) -> Result<Option<CandidateSql>, GatewayError> {
    debug_assert!(verdict.has_error);
    let codes: Vec<String> = verdict
        .error_types
        .iter()
        .map(|t| t.code().to_string())
        .collect();
    let verdict_text = format!("{}: {}", codes.join(", "), verdict.suggestions);
    let prompt = prompts::REFINE.render(&[
        ("question", question.text.as_str()),
        ("sql", candidate.sql.as_str()),
        ("verdict", verdict_text.as_str()),
    ]);
    let request = ChatRequest::new(PurposeTag::Refine, vec![Message::user(prompt)])
        .for_question(question.id.clone());
    let mut extra_tokens = crate::model::TokenUsage::default();
    for _attempt in 0..2 {
        let reply = gateway.complete(&request)?;
        extra_tokens += reply.usage;
        if let Some(sql) = prompts::extract_fenced_sql(&reply.text) {
            let mut next = candidate.clone();
            next.sql = sql;
            next.generation += 1;
            next.flagged = false;
            next.tokens += extra_tokens;
            return Ok(Some(next));
        }
    }
    Ok(None)
}

/// One critic round as persisted in run traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineRound {
    pub verdict: CriticVerdict,
    pub exemplar_count: usize,
    pub refined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineOutcome {
    pub candidate: CandidateSql,
    pub rounds: Vec<RefineRound>,
}

fn gather_exemplars(
    question: &Question,
    sql: &str,
    memory: Option<&MemoryIndex>,
    embedder: &dyn Embedder,
    policy: &ExemplarPolicy,
    max_exemplars: usize,
    rng_seed: u64,
) -> Vec<MemoryEntry> {
    let memory = match memory {
        Some(m) if policy.mode != ExemplarMode::NoneDirect => m,
        _ => return Vec::new(),
    };
    // the retrieval key refreshes every round from the CURRENT sql
    let key = make_key(question, sql).unwrap_or_else(|_| {
        key_from_parts(
            &question.text,
            Skeleton {
                text: String::new(),
                keyword_sequence: Vec::new(),
            },
        )
    });
    match policy.mode {
        ExemplarMode::Filtered => {
            let ranked = match memory.retrieve(&key, embedder, DEFAULT_RETRIEVE_K) {
                Ok(r) => r,
                Err(e) => {
                    tracing::warn!(error = %e, "memory retrieval failed; no exemplars");
                    return Vec::new();
                }
            };
            let entries: Vec<MemoryEntry> = ranked.into_iter().map(|(e, _)| e).collect();
            dedup_filter(&entries, max_exemplars)
        }
        ExemplarMode::TopKUnfiltered => memory
            .retrieve(&key, embedder, policy.k)
            .map(|r| r.into_iter().map(|(e, _)| e).collect())
            .unwrap_or_default(),
        ExemplarMode::RandomK => {
            let n = memory.len();
            if n == 0 {
                return Vec::new();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            let count = policy.k.min(n);
            rand::seq::index::sample(&mut rng, n, count)
                .into_iter()
                .map(|i| memory.entries()[i].clone())
                .collect()
        }
        ExemplarMode::NoneDirect => Vec::new(),
    }
}

/// The iterative correction loop: per round, fetch exemplars per policy,
/// critique, stop when clean, otherwise refine. At most `max_rounds` critic
/// calls and `max_rounds` refine calls. Backend failures keep the last good
/// version and end only this candidate's loop.
#[allow(clippy::too_many_arguments)]
pub fn refine_loop(
    candidate: CandidateSql,
    question: &Question,
    memory: Option<&MemoryIndex>,
    embedder: &dyn Embedder,
    gateway: &LlmGateway,
    policy: &ExemplarPolicy,
    max_exemplars: usize,
    max_rounds: usize,
    rng_seed: u64,
) -> RefineOutcome {
    let mut current = candidate;
    let mut rounds = Vec::new();
    for round in 0..max_rounds {
        let exemplars = gather_exemplars(
            question,
            &current.sql,
            memory,
            embedder,
            policy,
            max_exemplars,
            rng_seed ^ (round as u64).wrapping_mul(0x9e3779b97f4a7c15),
        );
        let verdict = match critic(&current, &exemplars, question, gateway) {
            Ok(v) => v,
            Err(e) => {
                tracing::warn!(question = %question.id, error = %e, "critic failed; keeping last good version");
                break;
            }
        };
        let has_error = verdict.has_error;
        let mut record = RefineRound {
            verdict,
            exemplar_count: exemplars.len(),
            refined: false,
        };
        if !has_error {
            rounds.push(record);
            break;
        }
        match refine(&current, &record.verdict, question, gateway) {
            Ok(Some(next)) => {
                current = next;
                record.refined = true;
                rounds.push(record);
            }
            Ok(None) => {
                rounds.push(record);
                break;
            }
            Err(e) => {
                tracing::warn!(question = %question.id, error = %e, "refine failed; keeping last good version");
                rounds.push(record);
                break;
            }
        }
    }
    RefineOutcome {
        candidate: current,
        rounds,
    }
}

// ---------------------------------------------------------------------------
// Selection
// ---------------------------------------------------------------------------

/// Appendix-style empty handling: the default retains empty-but-executable
/// results as first-class votes; `DiscardEmpty` reproduces the alternative
/// protocol that drops them whenever a non-empty class survives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyPolicy {
    #[default]
    RetainEmpty,
    DiscardEmpty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteClass {
    pub fingerprint: String,
    pub kind: ResultKind,
    pub count: usize,
    /// Canonical (strategy, style) slots of the members, ascending.
    pub member_slots: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub classes: Vec<VoteClass>,
    pub winner_fingerprint: String,
    pub empty_policy: EmptyPolicy,
    pub dropped_error_candidates: usize,
    /// Vote count of the winning class: the self-consistency score.
    pub winner_votes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub final_candidate: CandidateSql,
    pub vote_record: VoteRecord,
    /// Set when every candidate errored and the fallback emission was used.
    pub all_failed: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum SelectError {
    #[error("no candidates to select from")]
    NoCandidates,
    #[error(transparent)]
    Exec(#[from] ExecError),
}

/// Majority voting over execution-result classes. Error-class outcomes are
/// dropped from the vote; the winning class is chosen by count, ties by the
/// earliest canonical (strategy, style, generation) member, so the outcome
/// is invariant under permutations of the candidate list.
pub fn select(
    candidates: &[CandidateSql],
    registry: &DatabaseRegistry,
    db_id: &str,
    empty_policy: EmptyPolicy,
) -> Result<SelectionResult, SelectError> {
    if candidates.is_empty() {
        return Err(SelectError::NoCandidates);
    }
    let mut classed: Vec<(usize, ResultClass)> = Vec::with_capacity(candidates.len());
    for (i, cand) in candidates.iter().enumerate() {
        let outcome = registry.execute(db_id, &cand.sql)?;
        classed.push((i, result_class_with(&outcome, registry.row_semantics())));
    }

    let survivors: Vec<&(usize, ResultClass)> = classed
        .iter()
        .filter(|(_, rc)| rc.kind != ResultKind::Error)
        .collect();
    let dropped = candidates.len() - survivors.len();

    if survivors.is_empty() {
        // fallback emission: the syntactically longest surviving candidate
        let chosen = candidates
            .iter()
            .max_by(|a, b| {
                a.sql
                    .len()
                    .cmp(&b.sql.len())
                    .then(b.slot_index().cmp(&a.slot_index()))
                    .then(b.generation.cmp(&a.generation))
            })
            .expect("non-empty candidates");
        let record = VoteRecord {
            classes: class_summary(&classed, candidates),
            winner_fingerprint: String::new(),
            empty_policy,
            dropped_error_candidates: dropped,
            winner_votes: 0,
        };
        return Ok(SelectionResult {
            final_candidate: chosen.clone(),
            vote_record: record,
            all_failed: true,
        });
    }

    let has_rows_class = survivors.iter().any(|(_, rc)| rc.kind == ResultKind::Rows);
    let voteable: Vec<&(usize, ResultClass)> = survivors
        .iter()
        .copied()
        .filter(|(_, rc)| {
            !(empty_policy == EmptyPolicy::DiscardEmpty
                && has_rows_class
                && rc.kind == ResultKind::Empty)
        })
        .collect();

    // group by fingerprint
    let mut groups: Vec<(String, ResultKind, Vec<usize>)> = Vec::new();
    for (idx, rc) in &voteable {
        match groups.iter_mut().find(|(fp, _, _)| fp == &rc.fingerprint) {
            Some((_, _, members)) => members.push(*idx),
            None => groups.push((rc.fingerprint.clone(), rc.kind, vec![*idx])),
        }
    }

    // order-independent class key: the best (slot, generation) of any member
    let class_key = |members: &[usize]| {
        members
            .iter()
            .map(|i| (candidates[*i].slot_index(), candidates[*i].generation))
            .min()
            .expect("non-empty class")
    };
    let winner = groups
        .iter()
        .max_by(|a, b| {
            a.2.len()
                .cmp(&b.2.len())
                .then_with(|| class_key(&b.2).cmp(&class_key(&a.2)))
                .then_with(|| b.0.cmp(&a.0))
        })
        .expect("non-empty groups");

    // representative: lowest generation, then earliest (strategy, style)
    let rep_idx = winner
        .2
        .iter()
        .copied()
        .min_by_key(|i| {
            (
                candidates[*i].generation,
                candidates[*i].slot_index(),
            )
        })
        .expect("non-empty winner");

    let record = VoteRecord {
        classes: class_summary(&classed, candidates),
        winner_fingerprint: winner.0.clone(),
        empty_policy,
        dropped_error_candidates: dropped,
        winner_votes: winner.2.len(),
    };
    Ok(SelectionResult {
        final_candidate: candidates[rep_idx].clone(),
        vote_record: record,
        all_failed: false,
    })
}

fn class_summary(
    classed: &[(usize, ResultClass)],
    candidates: &[CandidateSql],
) -> Vec<VoteClass> {
    let mut classes: Vec<VoteClass> = Vec::new();
    for (idx, rc) in classed {
        match classes.iter_mut().find(|c| c.fingerprint == rc.fingerprint) {
            Some(c) => {
                c.count += 1;
                c.member_slots.push(candidates[*idx].slot_index());
            }
            None => classes.push(VoteClass {
                fingerprint: rc.fingerprint.clone(),
                kind: rc.kind,
                count: 1,
                member_slots: vec![candidates[*idx].slot_index()],
            }),
        }
    }
    for c in &mut classes {
        c.member_slots.sort_unstable();
    }
    classes.sort_by(|a, b| b.count.cmp(&a.count).then(a.fingerprint.cmp(&b.fingerprint)));
    classes
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::HashEmbedder;
    use crate::gateway::ScriptRule;
    use crate::memory::DEFAULT_MAX_EXEMPLARS;
    use crate::model::{DecompositionStrategy, ErrorType, SqlStyle};
    use crate::testutil::toy_db;

    fn cand(slot: usize, sql: &str) -> CandidateSql {
        let strategy = DecompositionStrategy::STRUCTURED[slot / 3];
        let style = SqlStyle::ALL[slot % 3];
        CandidateSql::new("q1", strategy, style, sql)
    }

    fn toy_registry(dir: &std::path::Path) -> DatabaseRegistry {
        let mut reg = DatabaseRegistry::new();
        reg.register("toy", toy_db(dir, "toy"));
        reg
    }

    #[test]
    fn critic_parses_no_error() {
        let gw = LlmGateway::scripted(vec![ScriptRule::new(PurposeTag::Critic, "NO_ERROR")]);
        let q = Question::new("q1", "toy", "list");
        let verdict = critic(&cand(0, "SELECT 1"), &[], &q, &gw).unwrap();
        assert!(!verdict.has_error);
        assert!(verdict.error_types.is_empty());
    }

    #[test]
    fn critic_parses_codes_and_suggestions() {
        let gw = LlmGateway::scripted(vec![ScriptRule::new(
            PurposeTag::Critic,
            "E2: filter uses wrong year | fix: WHERE year=2024",
        )]);
        let q = Question::new("q1", "toy", "list");
        let verdict = critic(&cand(0, "SELECT 1"), &[], &q, &gw).unwrap();
        assert!(verdict.has_error);
        assert_eq!(
            verdict.error_types,
            ErrorTypeSet::from_iter([ErrorType::E2])
        );
        assert_eq!(verdict.suggestions, "filter uses wrong year | fix: WHERE year=2024");
    }

    #[test]
    fn critic_gibberish_passes_through() {
        let gw = LlmGateway::scripted(vec![ScriptRule::new(
            PurposeTag::Critic,
            "lorem ipsum dolor sit amet",
        )]);
        let q = Question::new("q1", "toy", "list");
        let verdict = critic(&cand(0, "SELECT 1"), &[], &q, &gw).unwrap();
        assert!(!verdict.has_error);
    }

    #[test]
    fn refine_bumps_generation_and_keeps_tags() {
        let gw = LlmGateway::scripted(vec![ScriptRule::new(
            PurposeTag::Refine,
            "```sql\nSELECT fixed FROM t\n```",
        )]);
        let q = Question::new("q1", "toy", "list");
        let original = cand(4, "SELECT broken FROM t");
        let verdict =
            CriticVerdict::flagged(ErrorTypeSet::from_iter([ErrorType::E4]), "select the fix");
        let next = refine(&original, &verdict, &q, &gw).unwrap().unwrap();
        assert_eq!(next.generation, 1);
        assert_eq!(next.sql, "SELECT fixed FROM t");
        assert_eq!(next.strategy, original.strategy);
        assert_eq!(next.style, original.style);
    }

    #[test]
    fn refine_without_fence_twice_returns_none() {
        let gw = LlmGateway::scripted(vec![ScriptRule::new(
            PurposeTag::Refine,
            "cannot produce sql right now",
        )]);
        let q = Question::new("q1", "toy", "list");
        let verdict = CriticVerdict::flagged(ErrorTypeSet::from_iter([ErrorType::E2]), "fix");
        let out = refine(&cand(0, "SELECT 1"), &verdict, &q, &gw).unwrap();
        assert!(out.is_none());
        assert_eq!(gw.calls_by_purpose("q1", PurposeTag::Refine), 2);
    }

    #[test]
    fn clean_first_round_costs_one_critic_zero_refines() {
        let embedder = HashEmbedder::default();
        let gw = LlmGateway::scripted(vec![ScriptRule::new(PurposeTag::Critic, "NO_ERROR")]);
        let q = Question::new("q1", "toy", "list");
        let out = refine_loop(
            cand(0, "SELECT 1"),
            &q,
            None,
            &embedder,
            &gw,
            &ExemplarPolicy::default(),
            DEFAULT_MAX_EXEMPLARS,
            3,
            7,
        );
        assert_eq!(out.candidate.generation, 0);
        assert_eq!(out.rounds.len(), 1);
        assert_eq!(gw.calls_by_purpose("q1", PurposeTag::Critic), 1);
        assert_eq!(gw.calls_by_purpose("q1", PurposeTag::Refine), 0);
    }

    #[test]
    fn adversarial_critic_hits_the_cap_exactly() {
        let embedder = HashEmbedder::default();
        let gw = LlmGateway::scripted(vec![
            ScriptRule::new(PurposeTag::Critic, "E2: always wrong | fix: anything"),
            ScriptRule::new(PurposeTag::Refine, "```sql\nSELECT 2\n```"),
        ]);
        let q = Question::new("q1", "toy", "list");
        let out = refine_loop(
            cand(0, "SELECT 1"),
            &q,
            None,
            &embedder,
            &gw,
            &ExemplarPolicy::default(),
            DEFAULT_MAX_EXEMPLARS,
            3,
            7,
        );
        assert_eq!(gw.calls_by_purpose("q1", PurposeTag::Critic), 3);
        assert_eq!(gw.calls_by_purpose("q1", PurposeTag::Refine), 3);
        assert_eq!(out.candidate.generation, 3);
        assert_eq!(out.rounds.len(), 3);
    }

    fn memory_with_types(types: &[&[ErrorType]]) -> (MemoryIndex, HashEmbedder) {
        let embedder = HashEmbedder::default();
        let mut index = MemoryIndex::new(&embedder);
        for (i, ts) in types.iter().enumerate() {
            // identical keys: cosine ties everywhere, so retrieval order is
            // the insertion order
            let text = "memory question".to_string();
            let key = key_from_parts(
                &text,
                crate::skeleton::skeletonize("SELECT x FROM y").unwrap(),
            );
            index
                .append(MemoryEntry {
                    q: text.clone(),
                    s_plus: "SELECT good".into(),
                    s_minus: "SELECT bad".into(),
                    error_types: ErrorTypeSet::from_iter(ts.iter().copied()),
                    suggestions: format!("suggestion {i}"),
                    key: key.clone(),
                    vector: embedder.embed(&key.combined),
                })
                .unwrap();
        }
        (index, embedder)
    }

    #[test]
    fn filtered_policy_dedups_exemplars_in_the_prompt() {
        // retrieval ranks by similarity (all tied here, so insertion order);
        // the subsumption pass must keep {E2}, {E1,E2}, {E4}
        let (index, embedder) = memory_with_types(&[
            &[ErrorType::E2],
            &[ErrorType::E2],
            &[ErrorType::E1, ErrorType::E2],
            &[ErrorType::E1],
            &[ErrorType::E4],
            &[ErrorType::E4],
        ]);
        let q = Question::new("q1", "toy", "memory question");
        let exemplars = gather_exemplars(
            &q,
            "SELECT x FROM y",
            Some(&index),
            &embedder,
            &ExemplarPolicy::default(),
            DEFAULT_MAX_EXEMPLARS,
            7,
        );
        let got: Vec<ErrorTypeSet> = exemplars.iter().map(|e| e.error_types.clone()).collect();
        assert_eq!(
            got,
            vec![
                ErrorTypeSet::from_iter([ErrorType::E2]),
                ErrorTypeSet::from_iter([ErrorType::E1, ErrorType::E2]),
                ErrorTypeSet::from_iter([ErrorType::E4]),
            ]
        );
    }

    #[test]
    fn random_k_policy_is_seed_reproducible() {
        let (index, embedder) = memory_with_types(&[
            &[ErrorType::E1],
            &[ErrorType::E2],
            &[ErrorType::E3],
            &[ErrorType::E4],
            &[ErrorType::E5],
        ]);
        let q = Question::new("q1", "toy", "anything");
        let policy = ExemplarPolicy {
            mode: ExemplarMode::RandomK,
            k: 2,
        };
        let a = gather_exemplars(&q, "SELECT 1", Some(&index), &embedder, &policy, 5, 42);
        let b = gather_exemplars(&q, "SELECT 1", Some(&index), &embedder, &policy, 5, 42);
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
    }

    #[test]
    fn none_direct_policy_passes_no_exemplars() {
        let (index, embedder) = memory_with_types(&[&[ErrorType::E1]]);
        let q = Question::new("q1", "toy", "anything");
        let policy = ExemplarPolicy {
            mode: ExemplarMode::NoneDirect,
            k: 4,
        };
        let got = gather_exemplars(&q, "SELECT 1", Some(&index), &embedder, &policy, 5, 7);
        assert!(got.is_empty());
    }

    #[test]
    fn plurality_class_wins() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = toy_registry(tmp.path());
        let candidates = vec![
            cand(0, "SELECT id FROM t WHERE id <= 2"),
            cand(1, "SELECT id FROM t WHERE id < 3"),
            cand(2, "SELECT id FROM t"),
        ];
        let out = select(&candidates, &reg, "toy", EmptyPolicy::RetainEmpty).unwrap();
        assert_eq!(out.final_candidate.sql, "SELECT id FROM t WHERE id <= 2");
        assert_eq!(out.vote_record.winner_votes, 2);
    }

    #[test]
    fn empty_results_vote_under_default_policy() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = toy_registry(tmp.path());
        let candidates = vec![
            cand(0, "SELECT id FROM t WHERE id <= 2"),
            cand(1, "SELECT id FROM t WHERE id < 3"),
            cand(2, "SELECT id FROM t WHERE 1=0"),
            cand(3, "SELECT id FROM t WHERE id > 99"),
            cand(4, "SELECT name FROM t WHERE id > 99"),
        ];
        let retained = select(&candidates, &reg, "toy", EmptyPolicy::RetainEmpty).unwrap();
        assert_eq!(retained.vote_record.winner_votes, 3);
        assert_eq!(retained.final_candidate.sql, "SELECT id FROM t WHERE 1=0");

        let discarded = select(&candidates, &reg, "toy", EmptyPolicy::DiscardEmpty).unwrap();
        assert_eq!(discarded.final_candidate.sql, "SELECT id FROM t WHERE id <= 2");
    }

    #[test]
    fn discard_empty_still_elects_empty_when_all_survivors_are_empty() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = toy_registry(tmp.path());
        let candidates = vec![
            cand(0, "SELECT id FROM t WHERE 1=0"),
            cand(1, "SELECT nosuch FROM t"),
        ];
        let out = select(&candidates, &reg, "toy", EmptyPolicy::DiscardEmpty).unwrap();
        assert!(!out.all_failed);
        assert_eq!(out.final_candidate.sql, "SELECT id FROM t WHERE 1=0");
    }

    #[test]
    fn tie_breaks_to_earlier_slot_and_lowest_generation() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = toy_registry(tmp.path());
        // two classes, two votes each; class B occupies earlier slots
        let mut c0 = cand(0, "SELECT id FROM t WHERE id >= 2");
        c0.generation = 1;
        let candidates = vec![
            c0,
            cand(1, "SELECT id FROM t WHERE id > 1"),
            cand(2, "SELECT id FROM t WHERE id <= 1"),
            cand(3, "SELECT id FROM t WHERE id < 2"),
        ];
        let out = select(&candidates, &reg, "toy", EmptyPolicy::RetainEmpty).unwrap();
        // winning class is the one containing slot 0; representative is the
        // lowest-generation member of that class (slot 1, generation 0)
        assert_eq!(out.final_candidate.sql, "SELECT id FROM t WHERE id > 1");
        assert_eq!(out.vote_record.winner_votes, 2);
    }

    #[test]
    fn all_failures_emit_longest_survivor_with_flag() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = toy_registry(tmp.path());
        let candidates = vec![
            cand(0, "SELECT broken FROM t"),
            cand(1, "SELECT also_broken_but_longer FROM t"),
        ];
        let out = select(&candidates, &reg, "toy", EmptyPolicy::RetainEmpty).unwrap();
        assert!(out.all_failed);
        assert_eq!(out.final_candidate.sql, "SELECT also_broken_but_longer FROM t");
    }

    #[test]
    fn no_candidates_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = toy_registry(tmp.path());
        assert!(matches!(
            select(&[], &reg, "toy", EmptyPolicy::RetainEmpty),
            Err(SelectError::NoCandidates)
        ));
    }

    #[test]
    fn winning_class_is_permutation_invariant() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = toy_registry(tmp.path());
        let mut candidates = vec![
            cand(0, "SELECT id FROM t WHERE id <= 2"),
            cand(1, "SELECT id FROM t WHERE id < 3"),
            cand(2, "SELECT id FROM t"),
            cand(3, "SELECT id FROM t WHERE id >= 1"),
            cand(4, "SELECT name FROM t"),
        ];
        let baseline = select(&candidates, &reg, "toy", EmptyPolicy::RetainEmpty)
            .unwrap()
            .vote_record
            .winner_fingerprint;
        let mut seed = 12345u64;
        for _ in 0..50 {
            // deterministic shuffle
            for i in (1..candidates.len()).rev() {
                seed = crate::embed::splitmix64(seed);
                candidates.swap(i, (seed % (i as u64 + 1)) as usize);
            }
            let got = select(&candidates, &reg, "toy", EmptyPolicy::RetainEmpty)
                .unwrap()
                .vote_record
                .winner_fingerprint;
            assert_eq!(got, baseline);
        }
    }
}
