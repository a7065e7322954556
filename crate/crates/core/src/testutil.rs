//! Shared fixtures for unit tests.

use std::path::{Path, PathBuf};

use rusqlite::Connection;

/// Three-row toy table `t(id, name, score)`.
pub(crate) fn toy_db(dir: &Path, name: &str) -> PathBuf {
    let path = dir.join(format!("{name}.sqlite"));
    let conn = Connection::open(&path).unwrap();
    conn.execute_batch(
        "CREATE TABLE t (id INTEGER PRIMARY KEY, name TEXT, score REAL);
         INSERT INTO t VALUES (1, 'a', 1.5), (2, 'b', 2.5), (3, 'c', 3.5);",
    )
    .unwrap();
    path
}
