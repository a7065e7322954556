//! Shared domain types: the semantic error taxonomy, error-type-set algebra,
//! question/candidate records, token accounting, and execution-result
//! fingerprinting used by every other module.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// The nine semantic error categories. Pure syntax failures are outside the
/// taxonomy; they are filtered before anything is classified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ErrorType {
    E1,
    E2,
    E3,
    E4,
    E5,
    E6,
    E7,
    E8,
    E9,
}

impl ErrorType {
    pub const ALL: [ErrorType; 9] = [
        ErrorType::E1,
        ErrorType::E2,
        ErrorType::E3,
        ErrorType::E4,
        ErrorType::E5,
        ErrorType::E6,
        ErrorType::E7,
        ErrorType::E8,
        ErrorType::E9,
    ];

    pub fn code(&self) -> &'static str {
        match self {
            ErrorType::E1 => "E1",
            ErrorType::E2 => "E2",
            ErrorType::E3 => "E3",
            ErrorType::E4 => "E4",
            ErrorType::E5 => "E5",
            ErrorType::E6 => "E6",
            ErrorType::E7 => "E7",
            ErrorType::E8 => "E8",
            ErrorType::E9 => "E9",
        }
    }

    pub fn display_name(&self) -> &'static str {
        match self {
            ErrorType::E1 => "Join Logic Error",
            ErrorType::E2 => "Filter Condition Error",
            ErrorType::E3 => "Aggregation and Grouping Error",
            ErrorType::E4 => "Select Output Error",
            ErrorType::E5 => "Ordering and Limit Error",
            ErrorType::E6 => "Subquery Logical Error",
            ErrorType::E7 => "Null Handling Error",
            ErrorType::E8 => "Temporal Semantics Error",
            ErrorType::E9 => "Quantifier Intent Error",
        }
    }

    /// Accepts either the short code ("E4") or the display name
    /// ("Select Output Error"), case-insensitively.
    pub fn parse(label: &str) -> Result<ErrorType, UnknownErrorType> {
        let trimmed = label.trim();
        for et in ErrorType::ALL {
            if trimmed.eq_ignore_ascii_case(et.code())
                || trimmed.eq_ignore_ascii_case(et.display_name())
            {
                return Ok(et);
            }
        }
        Err(UnknownErrorType(trimmed.to_string()))
    }
}

impl fmt::Display for ErrorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code(), self.display_name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown error type label: {0:?}")]
pub struct UnknownErrorType(pub String);

/// A set of semantic error types. Empty only for a "no error" verdict.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ErrorTypeSet {
    members: BTreeSet<ErrorType>,
}

impl ErrorTypeSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_iter<I: IntoIterator<Item = ErrorType>>(iter: I) -> Self {
        Self {
            members: iter.into_iter().collect(),
        }
    }

    pub fn insert(&mut self, et: ErrorType) {
        self.members.insert(et);
    }

    pub fn contains(&self, et: ErrorType) -> bool {
        self.members.contains(&et)
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = ErrorType> + '_ {
        self.members.iter().copied()
    }

    /// True iff `candidate` is fully contained in `self`.
    pub fn subsumes(&self, candidate: &ErrorTypeSet) -> bool {
        candidate.members.is_subset(&self.members)
    }
}

impl fmt::Display for ErrorTypeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let codes: Vec<&str> = self.members.iter().map(|e| e.code()).collect();
        write!(f, "{{{}}}", codes.join(","))
    }
}

/// Parse a list of labels (codes or display names) into a set. Unknown labels
/// are rejected; duplicates collapse.
pub fn parse_error_types(labels: &[&str]) -> Result<ErrorTypeSet, UnknownErrorType> {
    let mut set = ErrorTypeSet::new();
    for label in labels {
        set.insert(ErrorType::parse(label)?);
    }
    Ok(set)
}

/// A benchmark question bound to a database.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub db_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<String>,
}

impl Question {
    pub fn new(id: impl Into<String>, db_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            db_id: db_id.into(),
            text: text.into(),
            evidence: None,
        }
    }

    pub fn with_evidence(mut self, evidence: impl Into<String>) -> Self {
        self.evidence = Some(evidence.into());
        self
    }
}

/// How a question was split before generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DecompositionStrategy {
    TableWise,
    Hierarchical,
    AtomicSequential,
    FallbackRandom,
    NoDecomposition,
}

impl DecompositionStrategy {
    /// The three structured strategies, in canonical enumeration order.
    pub const STRUCTURED: [DecompositionStrategy; 3] = [
        DecompositionStrategy::TableWise,
        DecompositionStrategy::Hierarchical,
        DecompositionStrategy::AtomicSequential,
    ];

    /// Canonical position used for deterministic tie-breaking.
    pub fn order_index(&self) -> usize {
        match self {
            DecompositionStrategy::TableWise => 0,
            DecompositionStrategy::Hierarchical => 1,
            DecompositionStrategy::AtomicSequential => 2,
            DecompositionStrategy::FallbackRandom => 3,
            DecompositionStrategy::NoDecomposition => 4,
        }
    }
}

/// Surface form requested at synthesis time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SqlStyle {
    #[serde(rename = "CTE")]
    Cte,
    FlatJoin,
    Nested,
}

impl SqlStyle {
    pub const ALL: [SqlStyle; 3] = [SqlStyle::Cte, SqlStyle::FlatJoin, SqlStyle::Nested];

    pub fn order_index(&self) -> usize {
        match self {
            SqlStyle::Cte => 0,
            SqlStyle::FlatJoin => 1,
            SqlStyle::Nested => 2,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            SqlStyle::Cte => "CTE",
            SqlStyle::FlatJoin => "FlatJoin",
            SqlStyle::Nested => "Nested",
        }
    }
}

/// Prompt plus completion token counts. Additive across calls.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl TokenUsage {
    pub fn new(prompt_tokens: u64, completion_tokens: u64) -> Self {
        Self {
            prompt_tokens,
            completion_tokens,
        }
    }

    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

impl Add for TokenUsage {
    type Output = TokenUsage;

    fn add(self, rhs: TokenUsage) -> TokenUsage {
        TokenUsage {
            prompt_tokens: self.prompt_tokens + rhs.prompt_tokens,
            completion_tokens: self.completion_tokens + rhs.completion_tokens,
        }
    }
}

impl AddAssign for TokenUsage {
    fn add_assign(&mut self, rhs: TokenUsage) {
        self.prompt_tokens += rhs.prompt_tokens;
        self.completion_tokens += rhs.completion_tokens;
    }
}

/// One of the per-question SQL candidates, tagged with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSql {
    pub question_id: String,
    pub strategy: DecompositionStrategy,
    pub style: SqlStyle,
    pub sql: String,
    /// Refinement round; 0 = as synthesized.
    pub generation: u32,
    pub tokens: TokenUsage,
    /// Set when SQL extraction from the model reply failed and the raw reply
    /// was carried forward instead.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub flagged: bool,
}

impl CandidateSql {
    pub fn new(
        question_id: impl Into<String>,
        strategy: DecompositionStrategy,
        style: SqlStyle,
        sql: impl Into<String>,
    ) -> Self {
        Self {
            question_id: question_id.into(),
            strategy,
            style,
            sql: sql.into(),
            generation: 0,
            tokens: TokenUsage::default(),
            flagged: false,
        }
    }

    /// Canonical (strategy, style) position for deterministic tie-breaking.
    pub fn slot_index(&self) -> usize {
        self.strategy.order_index() * SqlStyle::ALL.len() + self.style.order_index()
    }
}

/// Outcome of running one SQL statement against a database.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExecStatus {
    Ok,
    Empty,
    ParseError,
    RuntimeError,
    Timeout,
}

impl ExecStatus {
    pub fn is_error(&self) -> bool {
        matches!(
            self,
            ExecStatus::ParseError | ExecStatus::RuntimeError | ExecStatus::Timeout
        )
    }
}

/// A single cell after normalization: NULL becomes a sentinel, numerics are
/// rounded to 6 decimal places, text stays byte-exact, blobs are hex-encoded.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CellValue {
    Null,
    Num(String),
    Text(String),
    Blob(String),
}

impl CellValue {
    pub fn from_i64(v: i64) -> Self {
        CellValue::Num(format!("{v}.000000"))
    }

    pub fn from_f64(v: f64) -> Self {
        if !v.is_finite() {
            // NaN / infinities cannot round-trip through rounding; keep a
            // stable textual class for them.
            return CellValue::Num(format!("{v}"));
        }
        let rounded = (v * 1e6).round() / 1e6;
        CellValue::Num(format!("{rounded:.6}"))
    }

    pub fn from_text(v: impl Into<String>) -> Self {
        CellValue::Text(v.into())
    }

    pub fn from_blob(v: &[u8]) -> Self {
        let mut s = String::with_capacity(v.len() * 2);
        for b in v {
            s.push_str(&format!("{b:02x}"));
        }
        CellValue::Blob(s)
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            CellValue::Null => out.extend_from_slice(b"n:"),
            CellValue::Num(s) => {
                out.extend_from_slice(b"d:");
                out.extend_from_slice(s.as_bytes());
            }
            CellValue::Text(s) => {
                out.extend_from_slice(b"t:");
                out.extend_from_slice(&(s.len() as u64).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
            CellValue::Blob(s) => {
                out.extend_from_slice(b"b:");
                out.extend_from_slice(s.as_bytes());
            }
        }
        out.push(0x1f);
    }
}

/// Normalized result of a single execution. `rows` is present iff status=Ok.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub status: ExecStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<Vec<Vec<CellValue>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl ExecutionOutcome {
    pub fn ok(rows: Vec<Vec<CellValue>>) -> Self {
        debug_assert!(!rows.is_empty());
        Self {
            status: ExecStatus::Ok,
            rows: Some(rows),
            message: None,
        }
    }

    pub fn empty() -> Self {
        Self {
            status: ExecStatus::Empty,
            rows: None,
            message: None,
        }
    }

    pub fn error(status: ExecStatus, message: impl Into<String>) -> Self {
        debug_assert!(status.is_error());
        Self {
            status,
            rows: None,
            message: Some(message.into()),
        }
    }
}

/// Whether duplicate rows count once or per occurrence when results are
/// compared.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowSemantics {
    #[default]
    Multiset,
    Set,
}

/// Result-class kind. Error classes never vote together with row classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResultKind {
    Error,
    Empty,
    Rows,
}

/// Canonical fingerprint of an execution result. Two outcomes whose
/// normalized row sets agree share one fingerprint regardless of row order
/// or column labels/positions.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResultClass {
    pub fingerprint: String,
    pub kind: ResultKind,
}

/// Fingerprint an outcome under the default multiset row semantics.
pub fn result_class(outcome: &ExecutionOutcome) -> ResultClass {
    result_class_with(outcome, RowSemantics::Multiset)
}

/// Fingerprint an outcome. Cells are sorted within each row (column order
/// and labels are ignored), then rows are sorted; under `Set` semantics
/// duplicate rows collapse before hashing. Error outcomes map to one
/// distinguished class per coarse error category.
pub fn result_class_with(outcome: &ExecutionOutcome, semantics: RowSemantics) -> ResultClass {
    match outcome.status {
        ExecStatus::ParseError => ResultClass {
            fingerprint: "error:parse".to_string(),
            kind: ResultKind::Error,
        },
        ExecStatus::RuntimeError => ResultClass {
            fingerprint: "error:runtime".to_string(),
            kind: ResultKind::Error,
        },
        ExecStatus::Timeout => ResultClass {
            fingerprint: "error:timeout".to_string(),
            kind: ResultKind::Error,
        },
        ExecStatus::Empty => ResultClass {
            fingerprint: "empty".to_string(),
            kind: ResultKind::Empty,
        },
        ExecStatus::Ok => {
            let rows = outcome.rows.as_deref().unwrap_or(&[]);
            let mut canon: Vec<Vec<CellValue>> = rows
                .iter()
                .map(|row| {
                    let mut cells = row.clone();
                    cells.sort();
                    cells
                })
                .collect();
            canon.sort();
            if semantics == RowSemantics::Set {
                canon.dedup();
            }
            let mut buf = Vec::new();
            for row in &canon {
                for cell in row {
                    cell.encode_into(&mut buf);
                }
                buf.push(0x1e);
            }
            let digest = Sha256::digest(&buf);
            let mut hex = String::with_capacity(64);
            for b in digest {
                hex.push_str(&format!("{b:02x}"));
            }
            ResultClass {
                fingerprint: format!("rows:{hex}"),
                kind: ResultKind::Rows,
            }
        }
    }
}
