//! Schema preprocessing and linking: MinHash fingerprints over schema
//! elements, LSH candidate retrieval for question keywords, and the
//! two-criterion (edit distance OR embedding similarity) filter that turns
//! collisions into grounded schema context.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{cosine, splitmix64, Embedder};
use crate::gateway::{ChatRequest, GatewayError, LlmGateway, Message, PurposeTag};
use crate::model::Question;
use crate::prompts;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("bad banding: {b} bands x {r} rows != {p} permutations")]
    BadBanding { p: usize, b: usize, r: usize },
    #[error("fingerprint length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("unknown database: {0}")]
    UnknownDatabase(String),
    #[error("schema read error: {0}")]
    Read(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Table,
    Column,
}

/// One table or column of a database schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaElement {
    pub db_id: String,
    pub kind: ElementKind,
    /// `table` for tables, `table.column` for columns.
    pub qualified_name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub foreign_key_links: Vec<String>,
}

impl SchemaElement {
    /// Bare name: the last dot component, lowercased.
    pub fn bare_name(&self) -> String {
        self.qualified_name
            .rsplit('.')
            .next()
            .unwrap_or(&self.qualified_name)
            .to_lowercase()
    }
}

/// All elements of one database, in deterministic order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemaCatalog {
    pub db_id: String,
    pub elements: Vec<SchemaElement>,
}

impl SchemaCatalog {
    /// Read table names, column names, and foreign-key relationships from a
    /// SQLite file.
    pub fn from_sqlite(db_id: &str, path: &Path) -> Result<Self, SchemaError> {
        let conn = rusqlite::Connection::open_with_flags(
            path,
            rusqlite::OpenFlags::SQLITE_OPEN_READ_ONLY,
        )
        .map_err(|e| SchemaError::Read(e.to_string()))?;
        let mut tables: Vec<String> = Vec::new();
        {
            let mut stmt = conn
                .prepare(
                    "SELECT name FROM sqlite_master WHERE type='table' \
                     AND name NOT LIKE 'sqlite_%' ORDER BY name",
                )
                .map_err(|e| SchemaError::Read(e.to_string()))?;
            let rows = stmt
                .query_map((), |r| r.get::<_, String>(0))
                .map_err(|e| SchemaError::Read(e.to_string()))?;
            for row in rows {
                tables.push(row.map_err(|e| SchemaError::Read(e.to_string()))?);
            }
        }
        let mut elements = Vec::new();
        for table in &tables {
            // foreign keys of this table: column -> referenced table.column
            let mut fk: HashMap<String, Vec<String>> = HashMap::new();
            let mut table_links: Vec<String> = Vec::new();
            {
                let mut stmt = conn
                    .prepare(&format!("PRAGMA foreign_key_list({})", quote_ident(table)))
                    .map_err(|e| SchemaError::Read(e.to_string()))?;
                let rows = stmt
                    .query_map((), |r| {
                        Ok((
                            r.get::<_, String>("from")?,
                            r.get::<_, String>("table")?,
                            r.get::<_, Option<String>>("to")?,
                        ))
                    })
                    .map_err(|e| SchemaError::Read(e.to_string()))?;
                for row in rows {
                    let (from, ref_table, to) =
                        row.map_err(|e| SchemaError::Read(e.to_string()))?;
                    let target = match to {
                        Some(col) => format!("{ref_table}.{col}"),
                        None => ref_table.clone(),
                    };
                    fk.entry(from).or_default().push(target.clone());
                    table_links.push(target);
                }
            }
            table_links.sort();
            table_links.dedup();
            elements.push(SchemaElement {
                db_id: db_id.to_string(),
                kind: ElementKind::Table,
                qualified_name: table.clone(),
                foreign_key_links: table_links,
            });
            let mut stmt = conn
                .prepare(&format!("PRAGMA table_info({})", quote_ident(table)))
                .map_err(|e| SchemaError::Read(e.to_string()))?;
            let rows = stmt
                .query_map((), |r| r.get::<_, String>("name"))
                .map_err(|e| SchemaError::Read(e.to_string()))?;
            for row in rows {
                let col = row.map_err(|e| SchemaError::Read(e.to_string()))?;
                elements.push(SchemaElement {
                    db_id: db_id.to_string(),
                    kind: ElementKind::Column,
                    qualified_name: format!("{table}.{col}"),
                    foreign_key_links: fk.get(&col).cloned().unwrap_or_default(),
                });
            }
        }
        Ok(Self {
            db_id: db_id.to_string(),
            elements,
        })
    }

    /// Render the full schema as prompt context.
    pub fn render_context(&self) -> String {
        render_elements(&self.elements)
    }
}

fn quote_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

/// Render linked elements as prompt context, grouped by table.
pub fn render_elements(elements: &[SchemaElement]) -> String {
    let mut by_table: Vec<(String, Vec<&SchemaElement>)> = Vec::new();
    for el in elements {
        let table = el
            .qualified_name
            .split('.')
            .next()
            .unwrap_or(&el.qualified_name)
            .to_string();
        match by_table.iter_mut().find(|(t, _)| *t == table) {
            Some((_, list)) => list.push(el),
            None => by_table.push((table, vec![el])),
        }
    }
    let mut out = String::new();
    for (table, list) in by_table {
        let cols: Vec<String> = list
            .iter()
            .filter(|e| e.kind == ElementKind::Column)
            .map(|e| {
                let name = e.qualified_name.split('.').nth(1).unwrap_or("").to_string();
                if e.foreign_key_links.is_empty() {
                    name
                } else {
                    format!("{name} -> {}", e.foreign_key_links.join(", "))
                }
            })
            .collect();
        out.push_str(&format!("table {table}({})\n", cols.join(", ")));
    }
    out
}

// ---------------------------------------------------------------------------
// MinHash
// ---------------------------------------------------------------------------

/// MinHash/LSH sizing: `p` permutations split into `b` bands of `r` rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinHashParams {
    pub p: usize,
    pub b: usize,
    pub r: usize,
    pub seed: u64,
}

impl Default for MinHashParams {
    fn default() -> Self {
        Self {
            p: 128,
            b: 32,
            r: 4,
            seed: 1,
        }
    }
}

impl MinHashParams {
    pub fn validate(&self) -> Result<(), SchemaError> {
        if self.b * self.r != self.p || self.p == 0 {
            return Err(SchemaError::BadBanding {
                p: self.p,
                b: self.b,
                r: self.r,
            });
        }
        Ok(())
    }

    fn salts(&self) -> Vec<u64> {
        let mut salts = Vec::with_capacity(self.p);
        let mut x = self.seed;
        for _ in 0..self.p {
            x = splitmix64(x);
            salts.push(x);
        }
        salts
    }
}

/// Signature of `p` minima under `p` salted hash functions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub signature: Vec<u64>,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// MinHash over an explicit shingle set.
pub fn fingerprint_shingles<S: AsRef<str>>(shingles: &[S], params: &MinHashParams) -> Fingerprint {
    let salts = params.salts();
    let mut signature = vec![u64::MAX; params.p];
    for shingle in shingles {
        let base = fnv1a64(shingle.as_ref().as_bytes());
        for (i, salt) in salts.iter().enumerate() {
            let h = splitmix64(base ^ *salt);
            if h < signature[i] {
                signature[i] = h;
            }
        }
    }
    Fingerprint { signature }
}

/// Fraction of matching signature positions; MinHash's Jaccard estimate.
pub fn jaccard_estimate(a: &Fingerprint, b: &Fingerprint) -> Result<f64, SchemaError> {
    if a.signature.len() != b.signature.len() {
        return Err(SchemaError::LengthMismatch {
            a: a.signature.len(),
            b: b.signature.len(),
        });
    }
    if a.signature.is_empty() {
        return Ok(0.0);
    }
    let matches = a
        .signature
        .iter()
        .zip(&b.signature)
        .filter(|(x, y)| x == y)
        .count();
    Ok(matches as f64 / a.signature.len() as f64)
}

/// Split on underscore / camel-case / dot boundaries, lowercase.
pub fn split_tokens(name: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut prev_lower = false;
    for c in name.chars() {
        if c == '_' || c == '.' || c == ' ' || c == '-' {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            prev_lower = false;
        } else if c.is_uppercase() && prev_lower {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            current.push(c.to_ascii_lowercase());
            prev_lower = false;
        } else {
            prev_lower = c.is_lowercase() || c.is_ascii_digit();
            current.push(c.to_ascii_lowercase());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Character 3-gram shingles over the space-joined token string; inputs
/// shorter than 3 chars shingle to themselves.
pub fn shingles_for(name: &str) -> Vec<String> {
    let joined = split_tokens(name).join(" ");
    let chars: Vec<char> = joined.chars().collect();
    if chars.is_empty() {
        return Vec::new();
    }
    if chars.len() < 3 {
        return vec![joined];
    }
    chars.windows(3).map(|w| w.iter().collect()).collect()
}

// ---------------------------------------------------------------------------
// Index
// ---------------------------------------------------------------------------

/// Persistable MinHash/LSH index over one database's schema. Buckets are
/// rebuilt from signatures on load, so the JSON artifact stays small.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemaIndex {
    pub db_id: String,
    pub params: MinHashParams,
    pub elements: Vec<SchemaElement>,
    pub fingerprints: Vec<Fingerprint>,
    #[serde(skip)]
    buckets: HashMap<(usize, u64), Vec<usize>>,
}

impl SchemaIndex {
    pub fn build(catalog: &SchemaCatalog, params: MinHashParams) -> Result<Self, SchemaError> {
        params.validate()?;
        let fingerprints: Vec<Fingerprint> = catalog
            .elements
            .iter()
            .map(|el| fingerprint_shingles(&shingles_for(&el.qualified_name), &params))
            .collect();
        let mut index = Self {
            db_id: catalog.db_id.clone(),
            params,
            elements: catalog.elements.clone(),
            fingerprints,
            buckets: HashMap::new(),
        };
        index.rebuild_buckets();
        Ok(index)
    }

    fn rebuild_buckets(&mut self) {
        self.buckets.clear();
        for (id, fp) in self.fingerprints.iter().enumerate() {
            for (band, key) in band_keys(fp, &self.params) {
                self.buckets.entry((band, key)).or_default().push(id);
            }
        }
    }

    /// Number of distinct buckets an element occupies (always `b`).
    pub fn bucket_count_for(&self, element_id: usize) -> usize {
        self.buckets
            .values()
            .filter(|ids| ids.contains(&element_id))
            .count()
    }

    /// Element ids colliding with the probe fingerprint in at least one band.
    pub fn probe(&self, fp: &Fingerprint) -> Vec<usize> {
        let mut hits: Vec<usize> = Vec::new();
        for (band, key) in band_keys(fp, &self.params) {
            if let Some(ids) = self.buckets.get(&(band, key)) {
                hits.extend_from_slice(ids);
            }
        }
        hits.sort_unstable();
        hits.dedup();
        hits
    }

    pub fn save(&self, path: &Path) -> Result<(), SchemaError> {
        let json = serde_json::to_string_pretty(self).map_err(|e| SchemaError::Read(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| SchemaError::Read(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, SchemaError> {
        let raw =
            std::fs::read_to_string(path).map_err(|e| SchemaError::Read(e.to_string()))?;
        let mut index: SchemaIndex =
            serde_json::from_str(&raw).map_err(|e| SchemaError::Read(e.to_string()))?;
        index.params.validate()?;
        index.rebuild_buckets();
        Ok(index)
    }
}

fn band_keys(fp: &Fingerprint, params: &MinHashParams) -> Vec<(usize, u64)> {
    (0..params.b)
        .map(|band| {
            let slice = &fp.signature[band * params.r..(band + 1) * params.r];
            let mut h = 0x9e3779b97f4a7c15u64 ^ band as u64;
            for v in slice {
                h = splitmix64(h ^ *v);
            }
            (band, h)
        })
        .collect()
}

/// Convenience wrapper mirroring the index constructor.
pub fn build_index(catalog: &SchemaCatalog, params: MinHashParams) -> Result<SchemaIndex, SchemaError> {
    SchemaIndex::build(catalog, params)
}

// ---------------------------------------------------------------------------
// Keyword extraction
// ---------------------------------------------------------------------------

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "any", "are", "as", "at", "be", "but", "by", "did", "do", "does", "each",
    "for", "from", "had", "has", "have", "how", "in", "into", "is", "it", "its", "of", "on",
    "or", "our", "per", "show", "than", "that", "the", "their", "them", "then", "there",
    "these", "they", "this", "those", "to", "was", "were", "what", "when", "where",
    "which", "who", "whose", "why", "will", "with",
];

fn is_stopword(word: &str) -> bool {
    STOPWORDS.contains(&word)
}

/// Heuristic used when the model reply carries no parseable keyword list:
/// keep question tokens of length >= 3 that are not stopwords.
pub fn heuristic_keywords(question_text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for raw in question_text.split(|c: char| !(c.is_alphanumeric() || c == '_')) {
        let token = raw.to_lowercase();
        if token.len() >= 3 && !is_stopword(&token) && !out.contains(&token) {
            out.push(token);
        }
    }
    out
}

fn parse_keyword_reply(reply: &str) -> Vec<String> {
    let line = match reply.lines().find(|l| !l.trim().is_empty()) {
        Some(l) => l.trim(),
        None => return Vec::new(),
    };
    let line = line
        .strip_prefix("KEYWORDS:")
        .or_else(|| line.strip_prefix("keywords:"))
        .unwrap_or(line)
        .trim();
    let mut out: Vec<String> = Vec::new();
    for entry in line.split(',') {
        let kw = entry.trim().trim_matches(|c| c == '"' || c == '\'').to_lowercase();
        let word_count = kw.split_whitespace().count();
        if !kw.is_empty() && kw.len() <= 64 && (1..=4).contains(&word_count) && !out.contains(&kw)
        {
            out.push(kw);
        }
    }
    out
}

/// Ask the model for entity/attribute keywords; falls back to the token
/// heuristic when the reply has no parseable list.
pub fn extract_keywords(
    question: &Question,
    gateway: &LlmGateway,
) -> Result<Vec<String>, GatewayError> {
    let prompt = prompts::KEYWORDS.render(&[
        ("question", question.text.as_str()),
        ("evidence", question.evidence.as_deref().unwrap_or("none")),
    ]);
    let request = ChatRequest::new(PurposeTag::Keywords, vec![Message::user(prompt)])
        .for_question(question.id.clone());
    let response = gateway.complete(&request)?;
    if response.text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let parsed = parse_keyword_reply(&response.text);
    if parsed.is_empty() {
        tracing::debug!(question = %question.id, "keyword reply unparseable; using heuristic");
        return Ok(heuristic_keywords(&question.text));
    }
    Ok(parsed)
}

// ---------------------------------------------------------------------------
// Linking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkThresholds {
    /// Keep a candidate when normalized edit distance is at or below this.
    pub edit_max: f64,
    /// ... or when cosine similarity is at or above this.
    pub sem_min: f64,
}

impl Default for LinkThresholds {
    fn default() -> Self {
        Self {
            edit_max: 0.25,
            sem_min: 0.60,
        }
    }
}

pub use crate::skeleton::normalized_edit_distance;

/// LSH-gather then filter: a candidate survives when its bare name is within
/// `edit_max` of the keyword or its embedding cosine reaches `sem_min`.
/// Output is ranked by best cosine, descending, ties by element order.
pub fn link(
    keywords: &[String],
    index: &SchemaIndex,
    embedder: &dyn Embedder,
    thresholds: &LinkThresholds,
) -> Vec<SchemaElement> {
    let mut best: HashMap<usize, f64> = HashMap::new();
    for keyword in keywords {
        let kw_lower = keyword.to_lowercase();
        let fp = fingerprint_shingles(&shingles_for(&kw_lower), &index.params);
        let kw_vec = embedder.embed(&kw_lower);
        for id in index.probe(&fp) {
            let element = &index.elements[id];
            let bare = element.bare_name();
            let edit = normalized_edit_distance(&kw_lower, &bare);
            let sim = cosine(&kw_vec.values, &embedder.embed(&bare).values);
            if edit <= thresholds.edit_max || sim >= thresholds.sem_min {
                let entry = best.entry(id).or_insert(f64::NEG_INFINITY);
                if sim > *entry {
                    *entry = sim;
                }
            }
        }
    }
    let mut ranked: Vec<(usize, f64)> = best.into_iter().collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    ranked
        .into_iter()
        .map(|(id, _)| index.elements[id].clone())
        .collect()
}
