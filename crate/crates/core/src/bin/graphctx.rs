use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::{DateTime, Utc};
use clap::{Parser, Subcommand};
use serde_json::json;

use graphctx::corpus::{self, CorpusFormat, CorpusSplit, QaRecord};
use graphctx::generate::Mode;
use graphctx::pipeline::{ConfigError, Enhancement, Pipeline, PipelineConfig, PipelineError, Prepared, Retrieval, Stage};
use graphctx::qqgraph;

#[derive(Parser)]
#[command(name = "graphctx", version, about = "Graph-retrieval and knowledge-enhanced answer generation for community Q&A")]
struct Cli {
    /// JSON config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Rebuild a stage even if its inputs are unchanged (repeatable).
    #[arg(long = "force-stage", global = true, value_name = "STAGE")]
    force_stage: Vec<Stage>,
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read, validate and filter corpus files into one JSONL file.
    Ingest {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "jsonl")]
        format: String,
    },
    /// Write the instruction-tuning file from the train side of a corpus.
    ExportInstructions {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Split boundary (RFC 3339); the config value by default.
        #[arg(long)]
        boundary: Option<DateTime<Utc>>,
    },
    /// Embed the corpus and build the similarity graph.
    BuildGraph {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print size, density and connectivity of a graph file.
    GraphStats {
        #[arg(long)]
        graph: PathBuf,
    },
    /// Rank prior questions for one query.
    Retrieve {
        #[arg(long)]
        query_id: String,
        #[arg(long)]
        retrieval: Option<Retrieval>,
    },
    /// Show the enhanced context for one query.
    Enhance {
        #[arg(long)]
        query_id: String,
        #[arg(long)]
        retrieval: Option<Retrieval>,
    },
    /// Answer queries and write the results file.
    Generate {
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Corpus-format JSONL of query records; the test split by default.
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        backend_url: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a results file against gold accepted answers.
    Evaluate {
        #[arg(long)]
        results: PathBuf,
        /// Corpus-format JSONL whose records hold the gold answers.
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Full pipeline: ingest, embed, graph, generate, evaluate.
    Run {
        #[arg(long)]
        retrieval: Option<Retrieval>,
        #[arg(long)]
        enhancement: Option<Enhancement>,
        #[arg(long)]
        mode: Option<Mode>,
    },
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, PipelineError> {
    match path {
        Some(p) => Ok(PipelineConfig::load(p)?),
        None => {
            let mut cfg = PipelineConfig::default();
            cfg.apply_env(|k| std::env::var(k).ok());
            Ok(cfg)
        }
    }
}

fn data(stage: &str, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Data {
        stage: stage.into(),
        message: e.to_string(),
    }
}

fn print(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json output"));
}

fn find_query<'p>(p: &'p Prepared, id: &str) -> Result<&'p QaRecord, PipelineError> {
    p.split
        .find_test(id)
        .or_else(|| p.train_record(id))
        .ok_or_else(|| data("retrieve", format!("no question with id {id:?} in the corpus")))
}

fn pipeline(cli: &Cli, cfg: PipelineConfig) -> Result<Pipeline, PipelineError> {
    Ok(Pipeline::from_config(cfg)?.force(cli.force_stage.iter().copied()))
}

fn report_failures(outcome: &graphctx::generate::BatchOutcome) -> Result<(), PipelineError> {
    if outcome.failures.is_empty() {
        return Ok(());
    }
    for f in &outcome.failures {
        eprintln!("failed {} at {}: {}", f.query_id, f.stage, f.error);
    }
    Err(PipelineError::Backend {
        stage: "generate".into(),
        message: format!("{} of {} queries failed: {}", outcome.failures.len(), outcome.header.query_count, outcome.failed_ids().join(", ")),
    })
}

fn execute(cli: &Cli) -> Result<(), PipelineError> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::Ingest { input, out, format } => {
            let format: CorpusFormat = format.parse().map_err(|e| ConfigError::Invalid {
                key: "format".into(),
                message: format!("{e}"),
            })?;
            let ingested = corpus::ingest_many(input, format).map_err(|e| PipelineError::from_corpus("ingest", e))?;
            for r in &ingested.rejected {
                eprintln!("rejected: {r}");
            }
            let kept = corpus::filter(&ingested.records, &cfg.filter);
            corpus::write_jsonl(&kept, out).map_err(|e| PipelineError::from_corpus("ingest", e))?;
            print(&json!({"ingested": ingested.records.len(), "rejected": ingested.rejected.len(), "kept": kept.len()}));
        }
        Command::ExportInstructions { corpus: path, out, boundary } => {
            let records = corpus::ingest(path, CorpusFormat::Jsonl).map_err(|e| PipelineError::from_corpus("export", e))?;
            let split = corpus::temporal_split(&records.records, boundary.unwrap_or(cfg.split_boundary));
            for w in split.warnings() {
                eprintln!("warning: {w}");
            }
            let n = corpus::export_instructions(&split, out).map_err(|e| PipelineError::from_corpus("export", e))?;
            print(&json!({"written": n}));
        }
        Command::BuildGraph { out } => {
            cfg.modes.retrieval = Retrieval::Graph;
            if let Some(out) = out {
                cfg.paths.graph = Some(out.clone());
            }
            let mut p = pipeline(cli, cfg)?;
            let prepared = p.prepare()?;
            let g = prepared.graph.as_ref().expect("graph mode builds a graph");
            print(&serde_json::to_value(qqgraph::graph_stats(g)).expect("stats json"));
        }
        Command::GraphStats { graph } => {
            let g = qqgraph::load_graph(graph).map_err(|e| PipelineError::from_graph("graph", e))?;
            print(&serde_json::to_value(qqgraph::graph_stats(&g)).expect("stats json"));
        }
        Command::Retrieve { query_id, retrieval } | Command::Enhance { query_id, retrieval } => {
            if let Some(r) = retrieval {
                cfg.modes.retrieval = *r;
            }
            let enhance = matches!(cli.command, Command::Enhance { .. });
            if !enhance {
                cfg.modes.enhancement = Enhancement::Off;
            }
            let mut p = pipeline(cli, cfg)?;
            let prepared = p.prepare()?;
            let query = find_query(&prepared, query_id)?;
            if enhance {
                let trace = p.trace(&prepared, query)?;
                print(&json!({
                    "query_id": query_id,
                    "retrieved": trace.retrieval.items,
                    "sentences": trace.context.sentences,
                    "assembled": trace.context.assembled,
                    "diagnostics": trace.diagnostics,
                }));
            } else {
                let (set, _) = p.retrieve(&prepared, query)?;
                print(&json!({"query_id": query_id, "retrieved": set.items}));
            }
        }
        Command::Generate {
            graph,
            queries,
            mode,
            backend_url,
            out,
        } => {
            if let Some(m) = mode {
                cfg.modes.generation = *m;
            }
            if let Some(url) = backend_url {
                cfg.backends.generate = url.clone();
            }
            if let Some(out) = out {
                cfg.paths.results = Some(out.clone());
            }
            let mut p = pipeline(cli, cfg)?;
            if let Some(g) = graph {
                p = p.with_graph_file(g.clone());
            }
            let prepared = p.prepare()?;
            let queries = match queries {
                Some(path) => corpus::ingest(path, CorpusFormat::Jsonl)
                    .map_err(|e| PipelineError::from_corpus("generate", e))?
                    .records,
                None => p.queries(&prepared).to_vec(),
            };
            let outcome = p.generate_stage(&prepared, &queries)?;
            print(&json!({
                "results": p.config().paths.results_path(),
                "answers": outcome.answers.len(),
                "failures": outcome.failures.len(),
            }));
            report_failures(&outcome)?;
        }
        Command::Evaluate { results, gold, report } => {
            let gold = corpus::ingest(gold, CorpusFormat::Jsonl).map_err(|e| PipelineError::from_corpus("evaluate", e))?;
            let split = CorpusSplit {
                train: Vec::new(),
                test: gold.records,
                split_boundary: cfg.split_boundary,
            };
            let p = pipeline(cli, cfg)?;
            let r = p
                .evaluator()
                .evaluate_run(results, &split, report)
                .map_err(|e| PipelineError::from_eval("evaluate", e))?;
            print(&json!({"report": report, "scored": r.per_query.len(), "excluded": r.excluded_count, "macro": r.macro_scores}));
        }
        Command::Run {
            retrieval,
            enhancement,
            mode,
        } => {
            if let Some(r) = retrieval {
                cfg.modes.retrieval = *r;
            }
            if let Some(e) = enhancement {
                cfg.modes.enhancement = *e;
            }
            if let Some(m) = mode {
                cfg.modes.generation = *m;
            }
            let out = pipeline(cli, cfg)?.run()?;
            print(&json!({
                "results": out.manifest.config.paths.results_path(),
                "report": out.manifest.config.paths.report_path(),
                "manifest": out.manifest.config.paths.manifest_path(),
                "counts": out.manifest.counts,
                "macro": out.report.macro_scores,
            }));
            report_failures(&out.outcome)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log_level).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
