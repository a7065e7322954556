//! Operator surface: memory construction, schema-index construction,
//! end-to-end runs, metric recomputation, and report rendering.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use nl2sql_core::bench::{
    self, aggregate_rows, load_dataset, validate_gold, DatasetFormat, DatasetItem, Pipeline,
    RunReport,
};
use nl2sql_core::config::PipelineConfig;
use nl2sql_core::executor::DatabaseRegistry;
use nl2sql_core::gateway::LlmGateway;
use nl2sql_core::memory::{build_offline, ExemplarStore, MemoryIndex};
use nl2sql_core::schema::{SchemaCatalog, SchemaIndex};
use nl2sql_core::HashEmbedder;

#[derive(Parser)]
#[command(name = "nl2sql", about = "Training-free NL2SQL engine with experience-guided correction")]
struct Cli {
    /// Pipeline config (.toml or .json).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Bird,
    Spider,
}

impl From<FormatArg> for DatasetFormat {
    fn from(value: FormatArg) -> Self {
        match value {
            FormatArg::Bird => DatasetFormat::Bird,
            FormatArg::Spider => DatasetFormat::Spider,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build the error-correction memory from a training corpus.
    BuildMemory {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "bird")]
        format: FormatArg,
        #[arg(long)]
        out: PathBuf,
        /// Diverse candidates elicited per training question.
        #[arg(long, default_value_t = 4)]
        k_candidates: usize,
    },
    /// Precompute MinHash/LSH schema indices for every registered database.
    BuildSchemaIndex {
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the full pipeline over a dataset and write a report.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "bird")]
        format: FormatArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute metrics from a report and check aggregate consistency.
    Eval {
        #[arg(long)]
        report: PathBuf,
    },
    /// Render a report as a human-readable table.
    Report {
        #[arg(long)]
        report: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<PipelineConfig> {
    let path = path
        .as_deref()
        .context("--config is required for this command")?;
    PipelineConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn build_registry(config: &PipelineConfig) -> Result<DatabaseRegistry> {
    let mut registry = if let Some(manifest) = &config.paths.db_manifest {
        DatabaseRegistry::from_manifest(Path::new(manifest))?
    } else if let Some(dir) = &config.paths.db_dir {
        DatabaseRegistry::from_benchmark_dir(Path::new(dir))?
    } else {
        bail!("config must set paths.db_manifest or paths.db_dir");
    };
    registry = registry
        .with_timeout(Duration::from_secs_f64(config.execution.timeout_s))
        .with_row_semantics(config.execution.row_semantics);
    Ok(registry)
}

fn build_embedder(config: &PipelineConfig) -> HashEmbedder {
    HashEmbedder::new(config.embedder.dim, config.embedder.ngram, config.embedder.seed)
}

fn load_catalogs(registry: &DatabaseRegistry) -> Result<HashMap<String, SchemaCatalog>> {
    let mut catalogs = HashMap::new();
    for db_id in registry.db_ids() {
        let path = registry.path(db_id)?;
        let catalog = SchemaCatalog::from_sqlite(db_id, path)
            .with_context(|| format!("reading schema of {db_id}"))?;
        catalogs.insert(db_id.to_string(), catalog);
    }
    Ok(catalogs)
}

fn build_indices(
    catalogs: &HashMap<String, SchemaCatalog>,
    config: &PipelineConfig,
) -> Result<HashMap<String, SchemaIndex>> {
    let mut indices = HashMap::new();
    for (db_id, catalog) in catalogs {
        let index = SchemaIndex::build(catalog, config.schema_linking.minhash)?;
        indices.insert(db_id.clone(), index);
    }
    Ok(indices)
}

fn corpus_pairs(items: &[DatasetItem]) -> Vec<(nl2sql_core::Question, String)> {
    items
        .iter()
        .map(|i| (i.to_question(), i.gold_sql.clone()))
        .collect()
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_max_level(
            std::env::var("NL2SQL_LOG")
                .ok()
                .and_then(|v| v.parse::<tracing::Level>().ok())
                .unwrap_or(tracing::Level::WARN),
        )
        .init();
    let cli = Cli::parse();
    match cli.command {
        Command::BuildMemory {
            corpus,
            format,
            out,
            k_candidates,
        } => {
            let config = load_config(&cli.config)?;
            let registry = build_registry(&config)?;
            let catalogs = load_catalogs(&registry)?;
            let embedder = build_embedder(&config);
            let gateway = LlmGateway::new(config.backend.build()?);
            let items = load_dataset(&corpus, format.into())?;
            let pairs = corpus_pairs(&items);
            let mut index = build_offline(
                &pairs,
                &gateway,
                &registry,
                &embedder,
                |db_id| {
                    catalogs
                        .get(db_id)
                        .map(SchemaCatalog::render_context)
                        .unwrap_or_default()
                },
                k_candidates,
            );
            index.save(&out)?;
            println!(
                "memory built: {} entries from {} training items -> {}",
                index.len(),
                pairs.len(),
                out.display()
            );
        }
        Command::BuildSchemaIndex { out_dir } => {
            let config = load_config(&cli.config)?;
            let registry = build_registry(&config)?;
            let catalogs = load_catalogs(&registry)?;
            std::fs::create_dir_all(&out_dir)?;
            let indices = build_indices(&catalogs, &config)?;
            for (db_id, index) in &indices {
                let path = out_dir.join(format!(
                    "{db_id}.seed{}.index.json",
                    config.schema_linking.minhash.seed
                ));
                index.save(&path)?;
                println!("{db_id}: {} elements -> {}", index.elements.len(), path.display());
            }
        }
        Command::Run { dataset, format, out } => {
            let config = load_config(&cli.config)?;
            let registry = build_registry(&config)?;
            let catalogs = load_catalogs(&registry)?;
            let indices = build_indices(&catalogs, &config)?;
            let embedder = build_embedder(&config);
            let gateway = LlmGateway::new(config.backend.build()?);
            let items = load_dataset(&dataset, format.into())?;
            for item in &items {
                if !registry.contains(&item.db_id) {
                    bail!("dataset references unregistered database {}", item.db_id);
                }
            }
            let gold_validation = validate_gold(&items, &registry);
            for flag in &gold_validation {
                eprintln!(
                    "warning: gold SQL of question {} fails on its database: {}",
                    flag.question_id, flag.message
                );
            }
            let memory = match &config.paths.memory {
                Some(path) => Some(MemoryIndex::load(Path::new(path))?),
                None => None,
            };
            let store = match &config.paths.icl_corpus {
                Some(path) => {
                    let corpus = load_dataset(Path::new(path), DatasetFormat::Bird)?;
                    Some(ExemplarStore::build(&corpus_pairs(&corpus), &embedder))
                }
                None => None,
            };
            let pipeline = Pipeline {
                gateway: &gateway,
                registry: &registry,
                embedder: &embedder,
                memory: memory.as_ref(),
                exemplar_store: store.as_ref(),
                schema_indices: &indices,
                catalogs: &catalogs,
                config: &config,
            };
            let mut report = pipeline.run(&items);
            report.gold_validation = gold_validation;
            report.save(&out)?;
            println!("{}", bench::render_table(&report));
            println!("report written to {}", out.display());
            let zero_candidate_failures = report
                .all_rows()
                .filter(|r| r.final_sql.is_empty() && r.failure_cause.is_some())
                .count();
            if zero_candidate_failures > 0 {
                bail!("{zero_candidate_failures} question(s) produced zero candidates");
            }
        }
        Command::Eval { report } => {
            let report = RunReport::load(&report)?;
            let ex = bench::compute_ex(&report)?;
            let recomputed = aggregate_rows(report.all_rows())
                .context("report has no rows")?;
            println!(
                "EX: {ex:.1}%  tokens/query: {:.1}  seconds/query: {:.3}  questions: {}",
                recomputed.tokens_per_query, recomputed.seconds_per_query, recomputed.questions
            );
            if (recomputed.ex_percent - report.aggregate.ex_percent).abs() > 1e-9
                || (recomputed.tokens_per_query - report.aggregate.tokens_per_query).abs() > 1e-9
            {
                bail!("stored aggregate does not match recomputation from rows");
            }
            println!("stored aggregates match recomputation");
        }
        Command::Report { report } => {
            let report = RunReport::load(&report)?;
            print!("{}", bench::render_table(&report));
        }
    }
    Ok(())
}
