//! Shared fixture: two toy databases, a ten-question suite, and the script
//! that drives the whole pipeline deterministically. Three questions carry
//! recoverable injected errors (wrong filter / wrong output column) whose
//! fixes only the critic/refine loop knows.

use std::collections::HashMap;
use std::path::Path;

use nl2sql_core::bench::DatasetItem;
use nl2sql_core::config::PipelineConfig;
use nl2sql_core::executor::DatabaseRegistry;
use nl2sql_core::gateway::{PurposeTag, ScriptRule};
use nl2sql_core::schema::{SchemaCatalog, SchemaIndex};

pub struct DeskSuite {
    pub registry: DatabaseRegistry,
    pub catalogs: HashMap<String, SchemaCatalog>,
    pub indices: HashMap<String, SchemaIndex>,
    pub dataset: Vec<DatasetItem>,
    pub rules: Vec<ScriptRule>,
    /// Question ids whose scripts inject a recoverable error.
    pub sabotaged: Vec<String>,
}

pub fn build_dbs(dir: &Path) -> DatabaseRegistry {
    let shop = dir.join("shop.sqlite");
    let conn = rusqlite::Connection::open(&shop).unwrap();
    conn.execute_batch(
        "CREATE TABLE customers (id INTEGER PRIMARY KEY, name TEXT, city TEXT);
         CREATE TABLE orders (id INTEGER PRIMARY KEY, customer_id INTEGER, total REAL,
             year INTEGER, FOREIGN KEY(customer_id) REFERENCES customers(id));
         INSERT INTO customers VALUES
             (1,'ann','austin'),(2,'bob','boston'),(3,'cat','austin'),(4,'dan','denver');
         INSERT INTO orders VALUES
             (1,1,120.0,2023),(2,1,80.0,2024),(3,2,200.0,2024),
             (4,3,50.0,2023),(5,3,300.0,2024),(6,4,20.0,2022);",
    )
    .unwrap();
    drop(conn);

    let library = dir.join("library.sqlite");
    let conn = rusqlite::Connection::open(&library).unwrap();
    conn.execute_batch(
        "CREATE TABLE books (id INTEGER PRIMARY KEY, title TEXT, author TEXT, year INTEGER);
         CREATE TABLE loans (id INTEGER PRIMARY KEY, book_id INTEGER, member TEXT,
             returned INTEGER, FOREIGN KEY(book_id) REFERENCES books(id));
         INSERT INTO books VALUES
             (1,'dune','herbert',1965),(2,'emma','austen',1815),
             (3,'hatchet','paulsen',1986),(4,'iliad','homer',-800);
         INSERT INTO loans VALUES
             (1,1,'pat',1),(2,1,'sam',0),(3,2,'pat',1),(4,3,'kim',0);",
    )
    .unwrap();
    drop(conn);

    let mut registry = DatabaseRegistry::new();
    registry.register("shop", shop);
    registry.register("library", library);
    registry
}

fn item(id: &str, db: &str, question: &str, gold: &str) -> DatasetItem {
    DatasetItem {
        question_id: id.to_string(),
        db_id: db.to_string(),
        question: question.to_string(),
        evidence: None,
        gold_sql: gold.to_string(),
    }
}

fn synth_rule(question: &str, sql: &str) -> ScriptRule {
    ScriptRule::new(PurposeTag::Synthesize, format!("```sql\n{sql}\n```"))
        .matching(format!("Question: {question}"))
}

/// Build the complete fixture in `dir`.
pub fn desk_suite(dir: &Path) -> DeskSuite {
    let registry = build_dbs(dir);
    let config = PipelineConfig::scripted_default();
    let mut catalogs = HashMap::new();
    let mut indices = HashMap::new();
    for db_id in ["shop", "library"] {
        let catalog = SchemaCatalog::from_sqlite(db_id, registry.path(db_id).unwrap()).unwrap();
        indices.insert(
            db_id.to_string(),
            SchemaIndex::build(&catalog, config.schema_linking.minhash).unwrap(),
        );
        catalogs.insert(db_id.to_string(), catalog);
    }

    let dataset = vec![
        item("1", "shop", "How many customers are there?", "SELECT COUNT(*) FROM customers"),
        item(
            "2",
            "shop",
            "List the names of customers in austin",
            "SELECT name FROM customers WHERE city = 'austin'",
        ),
        item(
            "3",
            "shop",
            "What is the total of orders placed in 2024?",
            "SELECT SUM(total) FROM orders WHERE year = 2024",
        ),
        item(
            "4",
            "shop",
            "Which customers placed orders in 2024?",
            "SELECT DISTINCT c.name FROM customers c JOIN orders o ON c.id = o.customer_id \
             WHERE o.year = 2024",
        ),
        item("5", "library", "How many books are there?", "SELECT COUNT(*) FROM books"),
        item(
            "6",
            "library",
            "Which titles are currently not returned?",
            "SELECT DISTINCT b.title FROM books b JOIN loans l ON b.id = l.book_id \
             WHERE l.returned = 0",
        ),
        item(
            "7",
            "library",
            "List titles of books written after 1900",
            "SELECT title FROM books WHERE year > 1900",
        ),
        // sabotaged: scripted synthesis is wrong, scripted critique knows the fix
        item(
            "8",
            "shop",
            "How many orders were placed in 2024?",
            "SELECT COUNT(*) FROM orders WHERE year = 2024",
        ),
        item(
            "9",
            "library",
            "Who are the authors of books published before 1900?",
            "SELECT author FROM books WHERE year < 1900",
        ),
        item(
            "10",
            "shop",
            "Which customers have an order over 150?",
            "SELECT DISTINCT c.name FROM customers c JOIN orders o ON c.id = o.customer_id \
             WHERE o.total > 150",
        ),
    ];

    let q4 = "Which customers placed orders in 2024?";
    let mut rules = vec![
        // keyword extraction: reply empty, the pipeline then prompts with the
        // full schema context
        ScriptRule::new(PurposeTag::Keywords, ""),
        // question 4 exercises the full three-strategy path
        ScriptRule::new(PurposeTag::Decompose, "PROCEED")
            .matching("decomposed into")
            .matching(q4),
        ScriptRule::new(PurposeTag::Decompose, "TOO_SIMPLE").matching("decomposed into"),
        ScriptRule::new(
            PurposeTag::Decompose,
            "1. find the orders placed in 2024\n2. find the customers of those orders",
        )
        .matching("Strategy: table-wise")
        .matching(q4),
        ScriptRule::new(
            PurposeTag::Decompose,
            "1. which orders are from 2024\n2. which customers placed them",
        )
        .matching("Strategy: hierarchical")
        .matching(q4),
        ScriptRule::new(
            PurposeTag::Decompose,
            "1. join customers with orders\n2. filter to year 2024\n3. project the names",
        )
        .matching("Strategy: atomic-sequential")
        .matching(q4),
        // sub-SQL per sub-question; the reflect step is satisfied everywhere
        ScriptRule::new(
            PurposeTag::ReactReason,
            "orders of 2024\n```sql\nSELECT customer_id FROM orders WHERE year = 2024\n```",
        )
        .matching("orders"),
        ScriptRule::new(
            PurposeTag::ReactReason,
            "customer lookup\n```sql\nSELECT name FROM customers\n```",
        ),
        ScriptRule::new(PurposeTag::ReactReflect, "OK"),
    ];

    // clean questions: every style synthesizes gold-equivalent SQL
    for (question, sql) in [
        ("How many customers are there?", "SELECT COUNT(*) FROM customers"),
        (
            "List the names of customers in austin",
            "SELECT name FROM customers WHERE city = 'austin'",
        ),
        (
            "What is the total of orders placed in 2024?",
            "SELECT SUM(total) FROM orders WHERE year = 2024",
        ),
        ("How many books are there?", "SELECT COUNT(*) FROM books"),
        (
            "Which titles are currently not returned?",
            "SELECT DISTINCT b.title FROM books b JOIN loans l ON b.id = l.book_id \
             WHERE l.returned = 0",
        ),
        (
            "List titles of books written after 1900",
            "SELECT title FROM books WHERE year > 1900",
        ),
    ] {
        rules.push(synth_rule(question, sql));
    }

    // question 4: three equivalent styles
    rules.push(
        ScriptRule::new(
            PurposeTag::Synthesize,
            "```sql\nWITH o24 AS (SELECT customer_id FROM orders WHERE year = 2024)\n\
             SELECT DISTINCT c.name FROM customers c JOIN o24 ON c.id = o24.customer_id\n```",
        )
        .matching(format!("Question: {q4}"))
        .matching("in the CTE style"),
    );
    rules.push(
        ScriptRule::new(
            PurposeTag::Synthesize,
            "```sql\nSELECT DISTINCT c.name FROM customers c JOIN orders o \
             ON c.id = o.customer_id WHERE o.year = 2024\n```",
        )
        .matching(format!("Question: {q4}"))
        .matching("in the FlatJoin style"),
    );
    rules.push(
        ScriptRule::new(
            PurposeTag::Synthesize,
            "```sql\nSELECT DISTINCT name FROM customers WHERE id IN \
             (SELECT customer_id FROM orders WHERE year = 2024)\n```",
        )
        .matching(format!("Question: {q4}"))
        .matching("in the Nested style"),
    );

    // sabotaged questions: wrong synthesis, critic knows the fix
    rules.push(synth_rule(
        "How many orders were placed in 2024?",
        "SELECT COUNT(*) FROM orders WHERE year = 2023",
    ));
    rules.push(synth_rule(
        "Who are the authors of books published before 1900?",
        "SELECT title FROM books WHERE year < 1900",
    ));
    rules.push(synth_rule(
        "Which customers have an order over 150?",
        "SELECT DISTINCT c.name FROM customers c JOIN orders o ON c.id = o.customer_id \
         WHERE o.total > 50",
    ));

    // critic: specific diagnoses first, clean fallback last
    rules.push(
        ScriptRule::new(
            PurposeTag::Critic,
            "E2: the filter uses the wrong year | fix: filter on year = 2024",
        )
        .matching("WHERE year = 2023"),
    );
    rules.push(
        ScriptRule::new(
            PurposeTag::Critic,
            "E4: wrong output column, the question asks for authors | fix: select author",
        )
        .matching("SELECT title FROM books WHERE year < 1900"),
    );
    rules.push(
        ScriptRule::new(
            PurposeTag::Critic,
            "E2: amount threshold is wrong | fix: require total > 150",
        )
        .matching("WHERE o.total > 50"),
    );
    rules.push(ScriptRule::new(PurposeTag::Critic, "NO_ERROR"));

    // refine: apply the known fixes
    rules.push(
        ScriptRule::new(
            PurposeTag::Refine,
            "```sql\nSELECT COUNT(*) FROM orders WHERE year = 2024\n```",
        )
        .matching("WHERE year = 2023"),
    );
    rules.push(
        ScriptRule::new(
            PurposeTag::Refine,
            "```sql\nSELECT author FROM books WHERE year < 1900\n```",
        )
        .matching("SELECT title FROM books WHERE year < 1900"),
    );
    rules.push(
        ScriptRule::new(
            PurposeTag::Refine,
            "```sql\nSELECT DISTINCT c.name FROM customers c JOIN orders o \
             ON c.id = o.customer_id WHERE o.total > 150\n```",
        )
        .matching("WHERE o.total > 50"),
    );

    DeskSuite {
        registry,
        catalogs,
        indices,
        dataset,
        rules,
        sabotaged: vec!["8".into(), "9".into(), "10".into()],
    }
}
