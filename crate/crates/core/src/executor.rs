//! Sandboxed execution of candidate SQL against benchmark SQLite databases,
//! outcome normalization, and the execution-accuracy comparison.
//!
//! Candidates are model-generated, so writes are rejected twice: by
//! statement-class inspection before execution and by opening every
//! connection read-only with `query_only` set.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rusqlite::{Connection, OpenFlags};
use thiserror::Error;

use crate::model::{
    result_class_with, CellValue, ExecStatus, ExecutionOutcome, RowSemantics,
};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("unknown database: {0}")]
    UnknownDatabase(String),
    #[error("manifest error: {0}")]
    Manifest(String),
}

/// Maps db_id -> database file and owns the execution policy.
#[derive(Debug, Clone)]
pub struct DatabaseRegistry {
    databases: HashMap<String, PathBuf>,
    timeout: Duration,
    row_semantics: RowSemantics,
}

impl DatabaseRegistry {
    pub fn new() -> Self {
        Self {
            databases: HashMap::new(),
            timeout: DEFAULT_TIMEOUT,
            row_semantics: RowSemantics::Multiset,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_row_semantics(mut self, semantics: RowSemantics) -> Self {
        self.row_semantics = semantics;
        self
    }

    pub fn row_semantics(&self) -> RowSemantics {
        self.row_semantics
    }

    pub fn register(&mut self, db_id: impl Into<String>, path: impl Into<PathBuf>) {
        self.databases.insert(db_id.into(), path.into());
    }

    pub fn contains(&self, db_id: &str) -> bool {
        self.databases.contains_key(db_id)
    }

    pub fn db_ids(&self) -> impl Iterator<Item = &str> {
        self.databases.keys().map(String::as_str)
    }

    pub fn path(&self, db_id: &str) -> Result<&Path, ExecError> {
        self.databases
            .get(db_id)
            .map(PathBuf::as_path)
            .ok_or_else(|| ExecError::UnknownDatabase(db_id.to_string()))
    }

    /// Load a JSON manifest of `{ "db_id": "path/to/file.sqlite", ... }`.
    pub fn from_manifest(path: &Path) -> Result<Self, ExecError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| ExecError::Manifest(format!("{}: {e}", path.display())))?;
        let map: HashMap<String, String> = serde_json::from_str(&raw)
            .map_err(|e| ExecError::Manifest(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut registry = Self::new();
        for (db_id, rel) in map {
            let p = PathBuf::from(&rel);
            let resolved = if p.is_absolute() { p } else { base.join(p) };
            registry.register(db_id, resolved);
        }
        Ok(registry)
    }

    /// Scan the benchmark layout `<root>/<db_id>/<db_id>.sqlite`.
    pub fn from_benchmark_dir(root: &Path) -> Result<Self, ExecError> {
        let mut registry = Self::new();
        let entries = std::fs::read_dir(root)
            .map_err(|e| ExecError::Manifest(format!("{}: {e}", root.display())))?;
        for entry in entries.flatten() {
            if !entry.path().is_dir() {
                continue;
            }
            let db_id = entry.file_name().to_string_lossy().to_string();
            let file = entry.path().join(format!("{db_id}.sqlite"));
            if file.is_file() {
                registry.register(db_id, file);
            }
        }
        Ok(registry)
    }

    /// Run one read-only statement. All SQL failures are captured into the
    /// outcome; only an unregistered db_id is a hard error.
    pub fn execute(&self, db_id: &str, sql: &str) -> Result<ExecutionOutcome, ExecError> {
        let path = self.path(db_id)?;
        if let Some(reason) = refuse_reason(sql) {
            return Ok(ExecutionOutcome::error(ExecStatus::RuntimeError, reason));
        }
        Ok(run_readonly(path, sql, self.timeout))
    }

    /// Execution-accuracy match: both queries must run without error and
    /// land in the same result class. An empty prediction matching an empty
    /// gold counts as a match.
    pub fn ex_match(&self, pred_sql: &str, gold_sql: &str, db_id: &str) -> Result<bool, ExecError> {
        let pred = self.execute(db_id, pred_sql)?;
        let gold = self.execute(db_id, gold_sql)?;
        if pred.status.is_error() || gold.status.is_error() {
            return Ok(false);
        }
        Ok(result_class_with(&pred, self.row_semantics)
            == result_class_with(&gold, self.row_semantics))
    }
}

impl Default for DatabaseRegistry {
    fn default() -> Self {
        Self::new()
    }
}

/// Statement-class inspection: a candidate must be a single SELECT- or
/// WITH-rooted statement. Returns the refusal message when it is not.
fn refuse_reason(sql: &str) -> Option<String> {
    let mut first_word = None;
    let bytes = sql.as_bytes();
    let mut i = 0;
    let mut statement_ended = false;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c == '-' && bytes.get(i + 1) == Some(&b'-') {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
        } else if c == '/' && bytes.get(i + 1) == Some(&b'*') {
            i += 2;
            while i + 1 < bytes.len() && !(bytes[i] == b'*' && bytes[i + 1] == b'/') {
                i += 1;
            }
            i = (i + 2).min(bytes.len());
        } else if c == '\'' || c == '"' || c == '`' {
            let quote = bytes[i];
            i += 1;
            while i < bytes.len() {
                if bytes[i] == quote {
                    if quote == b'\'' && bytes.get(i + 1) == Some(&quote) {
                        i += 2;
                        continue;
                    }
                    i += 1;
                    break;
                }
                i += 1;
            }
            if statement_ended {
                return Some("multiple statements are not permitted".to_string());
            }
        } else if c == ';' {
            statement_ended = true;
            i += 1;
        } else {
            if statement_ended {
                return Some("multiple statements are not permitted".to_string());
            }
            if first_word.is_none() {
                let start = i;
                while i < bytes.len()
                    && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                if i == start {
                    i += 1;
                    continue;
                }
                first_word = Some(sql[start..i].to_ascii_uppercase());
            } else {
                i += 1;
            }
        }
    }
    match first_word.as_deref() {
        Some("SELECT") | Some("WITH") => None,
        Some(other) => Some(format!("refused non-query statement: {other}")),
        None => Some("empty statement".to_string()),
    }
}

fn run_readonly(path: &Path, sql: &str, timeout: Duration) -> ExecutionOutcome {
    let conn = match Connection::open_with_flags(
        path,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
    ) {
        Ok(c) => c,
        Err(e) => return ExecutionOutcome::error(ExecStatus::RuntimeError, e.to_string()),
    };
    if let Err(e) = conn.pragma_update(None, "query_only", true) {
        return ExecutionOutcome::error(ExecStatus::RuntimeError, e.to_string());
    }

    let timed_out = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&timed_out);
    let start = Instant::now();
    conn.progress_handler(
        4096,
        Some(move || {
            if start.elapsed() > timeout {
                flag.store(true, Ordering::Relaxed);
                true
            } else {
                false
            }
        }),
    );

    let mut stmt = match conn.prepare(sql) {
        Ok(s) => s,
        Err(e) => {
            let status = if timed_out.load(Ordering::Relaxed) {
                ExecStatus::Timeout
            } else {
                ExecStatus::ParseError
            };
            return ExecutionOutcome::error(status, e.to_string());
        }
    };
    let ncols = stmt.column_count();
    let mut rows = match stmt.query(()) {
        Ok(r) => r,
        Err(e) => return ExecutionOutcome::error(ExecStatus::RuntimeError, e.to_string()),
    };
    let mut collected: Vec<Vec<CellValue>> = Vec::new();
    loop {
        match rows.next() {
            Ok(Some(row)) => {
                let mut cells = Vec::with_capacity(ncols);
                for idx in 0..ncols {
                    let cell = match row.get_ref(idx) {
                        Ok(rusqlite::types::ValueRef::Null) => CellValue::Null,
                        Ok(rusqlite::types::ValueRef::Integer(v)) => CellValue::from_i64(v),
                        Ok(rusqlite::types::ValueRef::Real(v)) => CellValue::from_f64(v),
                        Ok(rusqlite::types::ValueRef::Text(t)) => {
                            CellValue::from_text(String::from_utf8_lossy(t).into_owned())
                        }
                        Ok(rusqlite::types::ValueRef::Blob(b)) => CellValue::from_blob(b),
                        Err(e) => {
                            return ExecutionOutcome::error(
                                ExecStatus::RuntimeError,
                                e.to_string(),
                            )
                        }
                    };
                    cells.push(cell);
                }
                collected.push(cells);
            }
            Ok(None) => break,
            Err(e) => {
                let status = if timed_out.load(Ordering::Relaxed) {
                    ExecStatus::Timeout
                } else {
                    ExecStatus::RuntimeError
                };
                return ExecutionOutcome::error(status, e.to_string());
            }
        }
    }
    if collected.is_empty() {
        ExecutionOutcome::empty()
    } else {
        ExecutionOutcome::ok(collected)
    }
}
