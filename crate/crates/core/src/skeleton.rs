//! SQL skeleton extraction and retrieval-key construction.
//!
//! A skeleton is the structure-only signature of a query: keywords and
//! operators survive, every literal and identifier is masked to `_`,
//! aliases are dropped, comments are stripped. The lexer is keyword-table
//! driven rather than a full grammar, so malformed-but-lexable candidates
//! (common mid-refinement) still produce keys.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Question;

/// Separator between the question text and the skeleton in a combined key.
pub const KEY_SEPARATOR: &str = " [SEP] ";

/// Reserved words retained (uppercased) in skeletons. Sorted for binary search.
static KEYWORDS: &[&str] = &[
    "ABS", "ALL", "AND", "ANY", "AS", "ASC", "AVG", "BETWEEN", "BLOB", "BOOLEAN", "BY", "CASE",
    "CAST", "CHAR", "COALESCE", "COUNT", "CROSS", "DATE", "DATETIME", "DECIMAL", "DESC",
    "DISTINCT", "DOUBLE", "ELSE", "END", "ESCAPE", "EXCEPT", "EXISTS", "FLOAT", "FROM", "FULL",
    "GLOB", "GROUP", "HAVING", "IFNULL", "IN", "INNER", "INT", "INTEGER", "INTERSECT", "IS",
    "JOIN", "JULIANDAY", "LEFT", "LENGTH", "LIKE", "LIMIT", "LOWER", "MAX", "MIN", "NATURAL",
    "NOT", "NULL", "NULLIF", "NUMERIC", "OFFSET", "ON", "OR", "ORDER", "OUTER", "REAL", "REPLACE",
    "RIGHT", "ROUND", "SELECT", "STRFTIME", "SUBSTR", "SUM", "TEXT", "THEN", "UNION", "UPPER",
    "USING", "VARCHAR", "WHEN", "WHERE", "WITH",
];

fn is_keyword(word: &str) -> Option<&'static str> {
    let upper = word.to_ascii_uppercase();
    KEYWORDS
        .binary_search(&upper.as_str())
        .ok()
        .map(|i| KEYWORDS[i])
}

/// Structure-only signature of a SQL string.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skeleton {
    pub text: String,
    pub keyword_sequence: Vec<String>,
}

/// Question text plus candidate skeleton, joined into one retrieval string.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalKey {
    pub question_text: String,
    pub skeleton: Skeleton,
    pub combined: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("lex error at byte {position}: {message}")]
pub struct LexError {
    pub position: usize,
    pub message: String,
}

impl LexError {
    fn new(position: usize, message: impl Into<String>) -> Self {
        Self {
            position,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Keyword(&'static str),
    Masked,
    Op(String),
}

fn lex(sql: &str) -> Result<Vec<Token>, LexError> {
    let bytes = sql.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            c if c.is_ascii_whitespace() => i += 1,
            '-' if bytes.get(i + 1) == Some(&b'-') => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            '/' if bytes.get(i + 1) == Some(&b'*') => {
                let start = i;
                i += 2;
                loop {
                    if i + 1 >= bytes.len() {
                        return Err(LexError::new(start, "unterminated block comment"));
                    }
                    if bytes[i] == b'*' && bytes[i + 1] == b'/' {
                        i += 2;
                        break;
                    }
                    i += 1;
                }
            }
            '\'' => {
                let start = i;
                i += 1;
                loop {
                    if i >= bytes.len() {
                        return Err(LexError::new(start, "unterminated string literal"));
                    }
                    if bytes[i] == b'\'' {
                        if bytes.get(i + 1) == Some(&b'\'') {
                            i += 2; // escaped quote
                        } else {
                            i += 1;
                            break;
                        }
                    } else {
                        i += 1;
                    }
                }
                tokens.push(Token::Masked);
            }
            '"' | '`' => {
                let quote = bytes[i];
                let start = i;
                i += 1;
                while i < bytes.len() && bytes[i] != quote {
                    i += 1;
                }
                if i >= bytes.len() {
                    return Err(LexError::new(start, "unterminated quoted identifier"));
                }
                i += 1;
                tokens.push(Token::Masked);
            }
            '[' => {
                let start = i;
                i += 1;
                while i < bytes.len() && bytes[i] != b']' {
                    i += 1;
                }
                if i >= bytes.len() {
                    return Err(LexError::new(start, "unterminated bracketed identifier"));
                }
                i += 1;
                tokens.push(Token::Masked);
            }
            c if c.is_ascii_digit()
                || (c == '.' && matches!(bytes.get(i + 1), Some(d) if d.is_ascii_digit())) =>
            {
                i += 1;
                while i < bytes.len()
                    && ((bytes[i] as char).is_ascii_digit() || bytes[i] == b'.')
                {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && (bytes[j] as char).is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                tokens.push(Token::Masked);
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < bytes.len()
                    && ((bytes[i] as char).is_ascii_alphanumeric()
                        || bytes[i] == b'_'
                        || bytes[i] == b'$')
                {
                    i += 1;
                }
                let word = &sql[start..i];
                match is_keyword(word) {
                    Some(kw) => tokens.push(Token::Keyword(kw)),
                    None => tokens.push(Token::Masked),
                }
            }
            '?' => {
                i += 1;
                tokens.push(Token::Masked);
            }
            _ => {
                // multi-char operators first
                let two = if i + 1 < bytes.len() { &sql[i..i + 2] } else { "" };
                let op = match two {
                    "<=" | ">=" | "<>" | "!=" | "||" | "::" => {
                        i += 2;
                        two.to_string()
                    }
                    _ => {
                        i += 1;
                        c.to_string()
                    }
                };
                tokens.push(Token::Op(op));
            }
        }
    }
    Ok(tokens)
}

/// Collapse qualified names (`_ . _` chains), drop `AS <identifier>` alias
/// pairs, merge adjacent masked tokens.
fn normalize(tokens: Vec<Token>) -> Vec<Token> {
    // qualified-name collapse: Masked (Dot Masked)+ -> Masked
    let mut collapsed: Vec<Token> = Vec::with_capacity(tokens.len());
    let mut i = 0;
    while i < tokens.len() {
        collapsed.push(tokens[i].clone());
        if tokens[i] == Token::Masked {
            while i + 2 < tokens.len()
                && tokens[i + 1] == Token::Op(".".to_string())
                && tokens[i + 2] == Token::Masked
            {
                i += 2;
            }
        }
        i += 1;
    }

    let mut out: Vec<Token> = Vec::with_capacity(collapsed.len());
    let mut i = 0;
    while i < collapsed.len() {
        match &collapsed[i] {
            Token::Op(op)
                if (op == "-" || op == "+")
                    && collapsed.get(i + 1) == Some(&Token::Masked)
                    && unary_context(out.last()) =>
            {
                i += 1; // sign folds into the masked literal
            }
            Token::Keyword("AS") if collapsed.get(i + 1) == Some(&Token::Masked) => {
                i += 2; // alias dropped
            }
            Token::Masked if out.last() == Some(&Token::Masked) => {
                i += 1; // merge masked runs (implicit aliases, adjacent literals)
            }
            tok => {
                out.push(tok.clone());
                i += 1;
            }
        }
    }
    out
}

/// A sign is unary (not subtraction/addition) when nothing value-like
/// precedes it.
fn unary_context(prev: Option<&Token>) -> bool {
    match prev {
        None | Some(Token::Keyword(_)) => true,
        Some(Token::Op(op)) => op != ")",
        Some(Token::Masked) => false,
    }
}

/// Extract the skeleton of a SQL string. Deterministic and idempotent;
/// rejects empty input and unterminated strings/comments with a `LexError`.
pub fn skeletonize(sql: &str) -> Result<Skeleton, LexError> {
    if sql.trim().is_empty() {
        return Err(LexError::new(0, "empty input"));
    }
    let tokens = normalize(lex(sql)?);
    let mut parts: Vec<&str> = Vec::with_capacity(tokens.len());
    let mut keyword_sequence = Vec::new();
    for tok in &tokens {
        match tok {
            Token::Keyword(kw) => {
                parts.push(kw);
                keyword_sequence.push((*kw).to_string());
            }
            Token::Masked => parts.push("_"),
            Token::Op(op) => parts.push(op),
        }
    }
    Ok(Skeleton {
        text: parts.join(" "),
        keyword_sequence,
    })
}

/// Build the retrieval key for a (question, sql) pair:
/// `question [SEP] skeleton`.
pub fn make_key(question: &Question, sql: &str) -> Result<RetrievalKey, LexError> {
    let skeleton = skeletonize(sql)?;
    Ok(key_from_parts(&question.text, skeleton))
}

/// Assemble a key from an already-computed skeleton.
pub fn key_from_parts(question_text: &str, skeleton: Skeleton) -> RetrievalKey {
    let combined = format!("{}{}{}", question_text, KEY_SEPARATOR, skeleton.text);
    RetrievalKey {
        question_text: question_text.to_string(),
        skeleton,
        combined,
    }
}

/// Levenshtein distance normalized by the longer string's char length.
pub fn normalized_edit_distance(a: &str, b: &str) -> f64 {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let max_len = a.len().max(b.len());
    if max_len == 0 {
        return 0.0;
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let cost = usize::from(ca != cb);
            curr[j + 1] = (prev[j + 1] + 1).min(curr[j] + 1).min(prev[j] + cost);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()] as f64 / max_len as f64
}

/// Edit distance between two queries' skeletons; unlexable inputs fall back
/// to their raw text.
pub fn normalized_skeleton_distance(a_sql: &str, b_sql: &str) -> f64 {
    let a = skeletonize(a_sql).map(|s| s.text).unwrap_or_else(|_| a_sql.to_string());
    let b = skeletonize(b_sql).map(|s| s.text).unwrap_or_else(|_| b_sql.to_string());
    normalized_edit_distance(&a, &b)
}
