//! Configuration, orchestration and run manifests.
//!
//! A run goes ingest → embed → graph → generate (retrieve, enhance and
//! generate per query) → evaluate. Every stage has a content key derived from
//! its inputs; when the previous manifest in the work directory shows the
//! same key and the artifact is still there, the stage is reused.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{self, CorpusError, CorpusFormat, CorpusSplit, FilterConfig, QaRecord};
use crate::embedding::{
    BagOfWordsEmbedder, Embedder, EmbeddingBackend, EmbeddingCache, EmbeddingError, EmbeddingVector, HashEmbedder,
    HttpEmbedder, TokenCountEmbedder, DEFAULT_DIM,
};
use crate::evaluate::{CapitalizedNer, EvalError, Evaluator, HttpNer, HttpScorer, NerBackend, ScoreBackend, ScoreReport, DEFAULT_OVERLAP_BINS};
use crate::generate::{
    BatchOutcome, EchoGenerator, GenError, GenerateOptions, GeneratedAnswer, GenerationBackend, Generator, HttpGenerator,
    LeadGenerator, Mode, QueryFailure, ResultsHeader, RESULTS_FORMAT_VERSION,
};
use crate::kgenhance::{
    CachedKg, ContextPair, EnhanceConfig, EnhanceDiagnostics, EnhancedContext, Enhancer, FixtureKg, HttpExtractor, KgBackend,
    KgError, LlmExtractor, RetrievedContext, RuleExtractor, TripletExtractor, TripletSource, WikidataKg,
};
use crate::qqgraph::{
    self, GraphError, PprParams, QQGraph, RetrievalSet, DEFAULT_ALPHA, DEFAULT_K, DEFAULT_MAX_ITER, DEFAULT_THRESHOLD, DEFAULT_TOL,
};

pub const MANIFEST_VERSION: u32 = 1;

/// Environment variables that override backend URLs, by config key.
pub const ENV_OVERRIDES: &[(&str, &str)] = &[
    ("GRAPHCTX_EMBED_URL", "backends.embed"),
    ("GRAPHCTX_GENERATE_URL", "backends.generate"),
    ("GRAPHCTX_TRIPLETS_URL", "backends.triplets"),
    ("GRAPHCTX_NER_URL", "backends.ner"),
    ("GRAPHCTX_KG_URL", "backends.kg"),
    ("GRAPHCTX_SCORE_URL", "backends.score"),
];

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("config is not valid JSON: {0}")]
    Syntax(String),
    #[error("unknown config key \"{0}\"")]
    UnknownKey(String),
    #[error("config key \"{key}\" out of range: {message}")]
    Range { key: String, message: String },
    #[error("config key \"{key}\": {message}")]
    Invalid { key: String, message: String },
}

impl ConfigError {
    pub fn key(&self) -> Option<&str> {
        match self {
            Self::UnknownKey(k) | Self::Range { key: k, .. } | Self::Invalid { key: k, .. } => Some(k),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{stage}: backend error: {message}")]
    Backend { stage: String, message: String },
    #[error("{stage}: data error: {message}")]
    Data { stage: String, message: String },
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Backend { .. } => 3,
            Self::Data { .. } => 4,
        }
    }

    fn data(stage: &str, e: impl std::fmt::Display) -> Self {
        Self::Data {
            stage: stage.into(),
            message: e.to_string(),
        }
    }

    fn backend(stage: &str, e: impl std::fmt::Display) -> Self {
        Self::Backend {
            stage: stage.into(),
            message: e.to_string(),
        }
    }

    pub fn from_corpus(stage: &str, e: CorpusError) -> Self {
        Self::data(stage, e)
    }

    pub fn from_embedding(stage: &str, e: EmbeddingError) -> Self {
        match e {
            EmbeddingError::Unreachable { .. } | EmbeddingError::Protocol(_) | EmbeddingError::Partial { .. } => Self::backend(stage, e),
            _ => Self::data(stage, e),
        }
    }

    pub fn from_graph(stage: &str, e: GraphError) -> Self {
        match e {
            GraphError::Embedding(e) => Self::from_embedding(stage, e),
            GraphError::InvalidParameter(m) => ConfigError::Invalid {
                key: "graph".into(),
                message: m,
            }
            .into(),
            other => Self::data(stage, other),
        }
    }

    pub fn from_kg(stage: &str, e: KgError) -> Self {
        match e {
            KgError::File { .. } => Self::data(stage, e),
            other => Self::backend(stage, other),
        }
    }

    pub fn from_eval(stage: &str, e: EvalError) -> Self {
        match e {
            EvalError::Embedding(e) => Self::from_embedding(stage, e),
            EvalError::Io { .. } => Self::data(stage, e),
            other => Self::backend(stage, other),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Retrieval {
    #[default]
    Graph,
    Text,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Enhancement {
    #[default]
    On,
    Off,
}

impl FromStr for Retrieval {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        serde_json::from_value(Value::String(s.into())).map_err(|_| format!("unknown retrieval mode {s:?} (graph or text)"))
    }
}

impl FromStr for Enhancement {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        serde_json::from_value(Value::String(s.into())).map_err(|_| format!("unknown enhancement mode {s:?} (on or off)"))
    }
}

fn label<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(Value::String(s)) => s,
        other => format!("{other:?}"),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Modes {
    pub retrieval: Retrieval,
    pub enhancement: Enhancement,
    pub generation: Mode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: Vec<PathBuf>,
    pub work_dir: PathBuf,
    pub graph: Option<PathBuf>,
    pub embedding_cache: Option<PathBuf>,
    pub kg_cache: Option<PathBuf>,
    pub results: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: Vec::new(),
            work_dir: PathBuf::from("graphctx-work"),
            graph: None,
            embedding_cache: None,
            kg_cache: None,
            results: None,
            report: None,
        }
    }
}

impl Paths {
    fn or_work(&self, p: &Option<PathBuf>, name: &str) -> PathBuf {
        p.clone().unwrap_or_else(|| self.work_dir.join(name))
    }
    pub fn graph_path(&self) -> PathBuf {
        self.or_work(&self.graph, "graph.json")
    }
    pub fn embedding_cache_path(&self) -> PathBuf {
        self.or_work(&self.embedding_cache, "embeddings.bin")
    }
    pub fn kg_cache_path(&self) -> PathBuf {
        self.or_work(&self.kg_cache, "kg_cache.jsonl")
    }
    pub fn results_path(&self) -> PathBuf {
        self.or_work(&self.results, "results.jsonl")
    }
    pub fn report_path(&self) -> PathBuf {
        self.or_work(&self.report, "report.json")
    }
    pub fn corpus_artifact(&self) -> PathBuf {
        self.work_dir.join("corpus.jsonl")
    }
    pub fn manifest_path(&self) -> PathBuf {
        self.work_dir.join("manifest.json")
    }
}

/// Backend locators. `mock://…` selects a built-in deterministic mock,
/// `fixture:<path>` a local KG file, `llm` (triplets only) the generation
/// backend with the extraction prompt, anything else is an HTTP base URL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Backends {
    pub embed: String,
    pub embed_model: String,
    pub generate: String,
    pub model_id: String,
    pub finetuned_model_id: String,
    pub triplets: Vec<String>,
    pub ner: String,
    pub kg: String,
    pub score: Option<String>,
    pub timeout_ms: u64,
    pub kg_min_interval_ms: u64,
}

impl Default for Backends {
    fn default() -> Self {
        let sidecar = "http://127.0.0.1:8000".to_string();
        Self {
            embed: sidecar.clone(),
            embed_model: "bge-large-en".into(),
            generate: sidecar.clone(),
            model_id: "llama-2-13b".into(),
            finetuned_model_id: "llama-2-13b-instruct-tuned".into(),
            triplets: vec!["llm".into(), sidecar.clone()],
            ner: sidecar,
            kg: WikidataKg::DEFAULT_API.into(),
            score: None,
            timeout_ms: 60_000,
            kg_min_interval_ms: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub threshold: f64,
    pub alpha: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub k: usize,
    pub dim: usize,
    pub split_boundary: DateTime<Utc>,
    pub max_queries: Option<usize>,
    pub filter: FilterConfig,
    pub backends: Backends,
    pub modes: Modes,
    pub generation: GenerateOptions,
    pub enhance: EnhanceConfig,
    pub overlap_bins: Vec<usize>,
    pub parallelism: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            threshold: DEFAULT_THRESHOLD,
            alpha: DEFAULT_ALPHA,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            k: DEFAULT_K,
            dim: DEFAULT_DIM,
            split_boundary: Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap(),
            max_queries: None,
            filter: FilterConfig::default(),
            backends: Backends::default(),
            modes: Modes::default(),
            generation: GenerateOptions::default(),
            enhance: EnhanceConfig::default(),
            overlap_bins: DEFAULT_OVERLAP_BINS.to_vec(),
            parallelism: 4,
        }
    }
}

fn unknown_keys(raw: &Value, known: &Value, prefix: &str) -> Result<(), ConfigError> {
    let (Value::Object(raw), Value::Object(known)) = (raw, known) else {
        return Ok(());
    };
    for (k, v) in raw {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match known.get(k) {
            None => return Err(ConfigError::UnknownKey(path)),
            Some(d) => unknown_keys(v, d, &path)?,
        }
    }
    Ok(())
}

/// Parses and checks a config document. Missing keys take their defaults;
/// unknown keys and out-of-range values are rejected by name.
pub fn validate_config(raw: &str) -> Result<PipelineConfig, ConfigError> {
    let value: Value = serde_json::from_str(raw).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    if !value.is_object() {
        return Err(ConfigError::Syntax("top level must be an object".into()));
    }
    let known = serde_json::to_value(PipelineConfig::default()).expect("default config serializes");
    unknown_keys(&value, &known, "")?;
    let cfg: PipelineConfig = serde_path_to_error::deserialize(value).map_err(|e| ConfigError::Invalid {
        key: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    check_ranges(&cfg)?;
    Ok(cfg)
}

pub fn check_ranges(cfg: &PipelineConfig) -> Result<(), ConfigError> {
    let range = |key: &str, message: String| {
        Err(ConfigError::Range {
            key: key.into(),
            message,
        })
    };
    let open_unit = |x: f64| x > 0.0 && x < 1.0;
    if !open_unit(cfg.threshold) {
        return range("threshold", format!("{} not in (0, 1)", cfg.threshold));
    }
    if !open_unit(cfg.alpha) {
        return range("alpha", format!("{} not in (0, 1)", cfg.alpha));
    }
    if !(cfg.tol > 0.0 && cfg.tol.is_finite()) {
        return range("tol", format!("{} is not > 0", cfg.tol));
    }
    for (key, v) in [
        ("max_iter", cfg.max_iter),
        ("k", cfg.k),
        ("dim", cfg.dim),
        ("parallelism", cfg.parallelism),
        ("enhance.parallelism", cfg.enhance.parallelism),
        ("generation.max_new_tokens", cfg.generation.max_new_tokens),
    ] {
        if v < 1 {
            return range(key, "must be at least 1".into());
        }
    }
    if cfg.max_queries == Some(0) {
        return range("max_queries", "must be at least 1".into());
    }
    if !(cfg.generation.temperature >= 0.0 && cfg.generation.temperature.is_finite()) {
        return range("generation.temperature", format!("{} is not >= 0", cfg.generation.temperature));
    }
    if cfg.overlap_bins.is_empty() || cfg.overlap_bins.windows(2).any(|w| w[0] >= w[1]) {
        return range("overlap_bins", "must be non-empty and strictly ascending".into());
    }
    if cfg.modes.enhancement == Enhancement::On && cfg.backends.triplets.is_empty() {
        return Err(ConfigError::Invalid {
            key: "backends.triplets".into(),
            message: "at least one extractor is needed with enhancement on".into(),
        });
    }
    Ok(())
}

impl PipelineConfig {
    /// Reads, validates, applies environment overrides and resolves relative
    /// paths against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut cfg = validate_config(&raw)?;
        cfg.apply_env(|k| std::env::var(k).ok());
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_relative(&base);
        Ok(cfg)
    }

    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        let b = &mut self.backends;
        for (var, _) in ENV_OVERRIDES {
            let Some(v) = lookup(var).filter(|v| !v.is_empty()) else { continue };
            log::info!("{var} overrides config");
            match *var {
                "GRAPHCTX_EMBED_URL" => b.embed = v,
                "GRAPHCTX_GENERATE_URL" => b.generate = v,
                "GRAPHCTX_TRIPLETS_URL" => b.triplets = v.split(',').map(|s| s.trim().to_string()).collect(),
                "GRAPHCTX_NER_URL" => b.ner = v,
                "GRAPHCTX_KG_URL" => b.kg = v,
                "GRAPHCTX_SCORE_URL" => b.score = Some(v),
                _ => {}
            }
        }
    }

    pub fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        paths.corpus.iter_mut().for_each(fix);
        fix(&mut paths.work_dir);
        for p in [
            &mut paths.graph,
            &mut paths.embedding_cache,
            &mut paths.kg_cache,
            &mut paths.results,
            &mut paths.report,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        if let Some(rest) = self.backends.kg.strip_prefix("fixture:") {
            let mut p = PathBuf::from(rest);
            fix(&mut p);
            self.backends.kg = format!("fixture:{}", p.display());
        }
    }

    pub fn ppr_params(&self) -> PprParams {
        PprParams {
            alpha: self.alpha,
            max_iter: self.max_iter,
            tol: self.tol,
        }
    }

    pub fn model_id(&self) -> &str {
        match self.modes.generation {
            Mode::Pretrained => &self.backends.model_id,
            Mode::Finetuned => &self.backends.finetuned_model_id,
        }
    }
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        message: message.into(),
    }
}

fn is_http(url: &str) -> bool {
    url.starts_with("http://") || url.starts_with("https://")
}

/// Live or mocked backends for every model capability.
pub struct BackendSet {
    pub embedder: Arc<Embedder>,
    pub generator: Arc<dyn GenerationBackend>,
    pub extractors: Vec<Arc<dyn TripletExtractor>>,
    pub ner: Arc<dyn NerBackend>,
    pub kg: Arc<dyn KgBackend>,
    pub scorer: Option<Arc<dyn ScoreBackend>>,
}

pub fn embedding_backend(cfg: &PipelineConfig) -> Result<Box<dyn EmbeddingBackend>, ConfigError> {
    let b = &cfg.backends;
    let timeout = Duration::from_millis(b.timeout_ms);
    Ok(match b.embed.as_str() {
        "mock://hash" => Box::new(HashEmbedder { dim: cfg.dim }),
        "mock://bow" => Box::new(BagOfWordsEmbedder { dim: cfg.dim }),
        "mock://token-count" => Box::new(TokenCountEmbedder { dim: cfg.dim }),
        url if is_http(url) => Box::new(HttpEmbedder::new(url, &b.embed_model, timeout)),
        other => return Err(invalid("backends.embed", format!("unsupported backend {other:?}"))),
    })
}

impl BackendSet {
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        let b = &cfg.backends;
        let timeout = Duration::from_millis(b.timeout_ms);
        let cache = EmbeddingCache::open(&cfg.paths.embedding_cache_path()).map_err(|e| PipelineError::from_embedding("embed", e))?;
        let embedder = Embedder::new(embedding_backend(cfg)?, cache, cfg.dim).with_parallelism(cfg.parallelism);

        let generator: Arc<dyn GenerationBackend> = match b.generate.as_str() {
            "mock://echo" => Arc::new(EchoGenerator::default()),
            "mock://lead" => Arc::new(LeadGenerator::default()),
            url if is_http(url) => Arc::new(HttpGenerator::new(url, timeout)),
            other => return Err(invalid("backends.generate", format!("unsupported backend {other:?}")).into()),
        };

        let mut extractors: Vec<Arc<dyn TripletExtractor>> = Vec::new();
        for spec in &b.triplets {
            extractors.push(match spec.as_str() {
                "llm" => Arc::new(LlmExtractor::new(generator.clone(), cfg.model_id())),
                "mock://rules" => Arc::new(RuleExtractor::new(TripletSource::Rebel)),
                url if is_http(url) => Arc::new(HttpExtractor::new(url, TripletSource::Rebel, timeout)),
                other => return Err(invalid("backends.triplets", format!("unsupported extractor {other:?}")).into()),
            });
        }

        let ner: Arc<dyn NerBackend> = match b.ner.as_str() {
            "mock://capitalized" => Arc::new(CapitalizedNer),
            url if is_http(url) => Arc::new(HttpNer::new(url, timeout)),
            other => return Err(invalid("backends.ner", format!("unsupported backend {other:?}")).into()),
        };

        let inner: Arc<dyn KgBackend> = if let Some(path) = b.kg.strip_prefix("fixture:") {
            Arc::new(FixtureKg::load(Path::new(path)).map_err(|e| PipelineError::from_kg("enhance", e))?)
        } else if is_http(&b.kg) {
            Arc::new(WikidataKg::new(&b.kg, timeout, Duration::from_millis(b.kg_min_interval_ms)))
        } else {
            return Err(invalid("backends.kg", format!("unsupported backend {:?}", b.kg)).into());
        };
        let kg = Arc::new(CachedKg::new(inner, Some(&cfg.paths.kg_cache_path())).map_err(|e| PipelineError::from_kg("enhance", e))?);

        let scorer: Option<Arc<dyn ScoreBackend>> = match &b.score {
            None => None,
            Some(url) if is_http(url) => Some(Arc::new(HttpScorer::new(url, timeout))),
            Some(other) => return Err(invalid("backends.score", format!("unsupported backend {other:?}")).into()),
        };

        Ok(Self {
            embedder: Arc::new(embedder),
            generator,
            extractors,
            ner,
            kg,
            scorer,
        })
    }

    pub fn ids(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("embed".to_string(), self.embedder.backend_id()),
            ("generate".to_string(), self.generator.id()),
            ("triplets".to_string(), self.extractors.iter().map(|e| e.name()).collect::<Vec<_>>().join(",")),
            ("ner".to_string(), self.ner.name()),
            ("kg".to_string(), self.kg.id()),
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Embed,
    Graph,
    Generate,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Ingest, Stage::Embed, Stage::Graph, Stage::Generate, Stage::Evaluate];
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        serde_json::from_value(Value::String(s.into()))
            .map_err(|_| format!("unknown stage {s:?} (ingest, embed, graph, generate, evaluate)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Reused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub key: String,
    pub status: StageStatus,
    pub started_at: DateTime<Utc>,
    pub duration_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: PathBuf,
    pub bytes: u64,
    /// sha256 over `"blob {len}\0" + content`.
    pub blob_sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunCounts {
    pub ingested: usize,
    pub rejected_lines: usize,
    pub filtered: usize,
    pub train: usize,
    pub test: usize,
    pub queries: usize,
    pub answers: usize,
    pub failures: usize,
    pub excluded: usize,
    pub graph_nodes: usize,
    pub graph_edges: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub config: PipelineConfig,
    pub backends: BTreeMap<String, String>,
    pub inputs: Vec<InputHash>,
    pub started_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
    pub stages: Vec<StageRecord>,
    pub counts: RunCounts,
    pub completed: bool,
    pub error: Option<String>,
}

impl RunManifest {
    pub fn stage(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    pub fn read(path: &Path) -> Option<Self> {
        let text = std::fs::read_to_string(path).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self).map_err(std::io::Error::other)? + "\n")
    }
}

pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex::encode(h.finalize())
}

fn key_of(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

/// Everything per-query work needs once the corpus, vectors and graph exist.
pub struct Prepared {
    pub split: CorpusSplit,
    pub train_vectors: BTreeMap<String, EmbeddingVector>,
    pub query_vectors: BTreeMap<String, EmbeddingVector>,
    pub graph: Option<QQGraph>,
    train_index: HashMap<String, usize>,
    graph_key: String,
}

impl Prepared {
    pub fn train_record(&self, id: &str) -> Option<&QaRecord> {
        self.train_index.get(id).map(|&i| &self.split.train[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryTrace {
    pub retrieval: RetrievalSet,
    pub context: EnhancedContext,
    pub diagnostics: Option<EnhanceDiagnostics>,
}

pub struct RunOutput {
    pub manifest: RunManifest,
    pub outcome: BatchOutcome,
    pub report: ScoreReport,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    backends: BackendSet,
    force: BTreeSet<Stage>,
    previous: Option<RunManifest>,
    manifest: RunManifest,
    external_graph: Option<PathBuf>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, backends: BackendSet) -> Result<Self, PipelineError> {
        check_ranges(&cfg)?;
        let previous = RunManifest::read(&cfg.paths.manifest_path());
        let manifest = RunManifest {
            version: MANIFEST_VERSION,
            config: cfg.clone(),
            backends: backends.ids(),
            inputs: Vec::new(),
            started_at: Utc::now(),
            finished_at: None,
            stages: Vec::new(),
            counts: RunCounts::default(),
            completed: false,
            error: None,
        };
        Ok(Self {
            cfg,
            backends,
            force: BTreeSet::new(),
            previous,
            manifest,
            external_graph: None,
        })
    }

    pub fn from_config(cfg: PipelineConfig) -> Result<Self, PipelineError> {
        let backends = BackendSet::from_config(&cfg)?;
        Self::new(cfg, backends)
    }

    pub fn force(mut self, stages: impl IntoIterator<Item = Stage>) -> Self {
        self.force.extend(stages);
        self
    }

    /// Uses a prebuilt graph file instead of the graph stage.
    pub fn with_graph_file(mut self, path: PathBuf) -> Self {
        self.external_graph = Some(path);
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn backends(&self) -> &BackendSet {
        &self.backends
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn reusable(&self, stage: Stage, key: &str, artifact: &Path) -> bool {
        !self.force.contains(&stage)
            && artifact.exists()
            && self
                .previous
                .as_ref()
                .and_then(|m| m.stage(stage))
                .is_some_and(|s| s.key == key)
    }

    fn record(&mut self, stage: Stage, key: String, status: StageStatus, started_at: DateTime<Utc>, t: Instant) {
        log::info!("stage {:?} {:?} in {} ms", stage, status, t.elapsed().as_millis());
        self.manifest.stages.push(StageRecord {
            stage,
            key,
            status,
            started_at,
            duration_ms: t.elapsed().as_millis() as u64,
        });
    }

    fn persist_manifest(&self) {
        if let Err(e) = self.manifest.write(&self.cfg.paths.manifest_path()) {
            log::warn!("could not write manifest: {e}");
        }
    }

    fn fail(&mut self, e: PipelineError) -> PipelineError {
        self.manifest.error = Some(e.to_string());
        self.manifest.finished_at = Some(Utc::now());
        self.persist_manifest();
        e
    }

    fn ingest_stage(&mut self) -> Result<(Vec<QaRecord>, String), PipelineError> {
        let (started, t) = (Utc::now(), Instant::now());
        let paths = &self.cfg.paths;
        if paths.corpus.is_empty() {
            return Err(PipelineError::data("ingest", "paths.corpus lists no corpus file"));
        }
        let mut inputs = Vec::new();
        for p in &paths.corpus {
            let bytes = std::fs::read(p).map_err(|e| PipelineError::data("ingest", format!("{}: {e}", p.display())))?;
            inputs.push(InputHash {
                path: p.clone(),
                bytes: bytes.len() as u64,
                blob_sha256: blob_hash(&bytes),
            });
        }
        let hashes: Vec<&str> = inputs.iter().map(|i| i.blob_sha256.as_str()).collect();
        let key = key_of(&[&hashes.join(","), &json(&self.cfg.filter)]);
        self.manifest.inputs = inputs;
        let artifact = paths.corpus_artifact();

        if self.reusable(Stage::Ingest, &key, &artifact) {
            let records = corpus::ingest(&artifact, CorpusFormat::Jsonl)
                .map_err(|e| PipelineError::from_corpus("ingest", e))?
                .records;
            if let Some(prev) = &self.previous {
                self.manifest.counts.ingested = prev.counts.ingested;
                self.manifest.counts.rejected_lines = prev.counts.rejected_lines;
            }
            self.manifest.counts.filtered = records.len();
            self.record(Stage::Ingest, key.clone(), StageStatus::Reused, started, t);
            return Ok((records, key));
        }

        let ingested = corpus::ingest_many(&paths.corpus, CorpusFormat::Jsonl).map_err(|e| PipelineError::from_corpus("ingest", e))?;
        for r in &ingested.rejected {
            log::warn!("rejected: {r}");
        }
        let records = corpus::filter(&ingested.records, &self.cfg.filter);
        std::fs::create_dir_all(&paths.work_dir).map_err(|e| PipelineError::data("ingest", e))?;
        corpus::write_jsonl(&records, &artifact).map_err(|e| PipelineError::from_corpus("ingest", e))?;
        self.manifest.counts.ingested = ingested.records.len();
        self.manifest.counts.rejected_lines = ingested.rejected.len();
        self.manifest.counts.filtered = records.len();
        self.record(Stage::Ingest, key.clone(), StageStatus::Ran, started, t);
        Ok((records, key))
    }

    fn embed_stage(&mut self, records: &[QaRecord], ingest_key: &str) -> Result<(BTreeMap<String, EmbeddingVector>, String), PipelineError> {
        let (started, t) = (Utc::now(), Instant::now());
        let embedder = &self.backends.embedder;
        let key = key_of(&[ingest_key, &embedder.backend_id(), &embedder.dim().to_string()]);
        let status = if self.reusable(Stage::Embed, &key, &self.cfg.paths.embedding_cache_path()) {
            StageStatus::Reused
        } else {
            StageStatus::Ran
        };
        // Reuse still goes through the embedder; every lookup is a cache hit.
        let vectors = embedder.embed_corpus(records).map_err(|e| PipelineError::from_embedding("embed", e))?;
        self.record(Stage::Embed, key.clone(), status, started, t);
        Ok((vectors, key))
    }

    fn graph_stage(&mut self, vectors: &BTreeMap<String, EmbeddingVector>, embed_key: &str) -> Result<(QQGraph, String), PipelineError> {
        let (started, t) = (Utc::now(), Instant::now());
        let backend_id = self.backends.embedder.backend_id();
        if let Some(path) = self.external_graph.clone() {
            let g = qqgraph::load_graph(&path).map_err(|e| PipelineError::from_graph("graph", e))?;
            g.ensure_matches(self.cfg.threshold, &backend_id).map_err(|e| PipelineError::from_graph("graph", e))?;
            let bytes = std::fs::read(&path).map_err(|e| PipelineError::data("graph", e))?;
            let key = blob_hash(&bytes);
            self.record(Stage::Graph, key.clone(), StageStatus::Reused, started, t);
            return Ok((g, key));
        }
        let key = key_of(&[embed_key, &self.cfg.threshold.to_string(), &self.cfg.split_boundary.to_rfc3339()]);
        let path = self.cfg.paths.graph_path();
        if self.reusable(Stage::Graph, &key, &path) {
            let g = qqgraph::load_graph(&path).map_err(|e| PipelineError::from_graph("graph", e))?;
            g.ensure_matches(self.cfg.threshold, &backend_id).map_err(|e| PipelineError::from_graph("graph", e))?;
            self.record(Stage::Graph, key.clone(), StageStatus::Reused, started, t);
            return Ok((g, key));
        }
        let (g, diagnostics) = qqgraph::build_graph(vectors, self.cfg.threshold, &backend_id).map_err(|e| PipelineError::from_graph("graph", e))?;
        for d in diagnostics {
            log::warn!("graph node {}: {}", d.question_id, d.message);
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| PipelineError::data("graph", e))?;
        }
        qqgraph::save_graph(&g, &path).map_err(|e| PipelineError::from_graph("graph", e))?;
        self.record(Stage::Graph, key.clone(), StageStatus::Ran, started, t);
        Ok((g, key))
    }

    /// Runs ingest, embed and (in graph mode) graph, reusing what it can.
    pub fn prepare(&mut self) -> Result<Prepared, PipelineError> {
        self.prepare_inner().map_err(|e| self.fail(e))
    }

    fn prepare_inner(&mut self) -> Result<Prepared, PipelineError> {
        let (records, ingest_key) = self.ingest_stage()?;
        let split = corpus::temporal_split(&records, self.cfg.split_boundary);
        for w in split.warnings() {
            log::warn!("{w}");
        }
        self.manifest.counts.train = split.train.len();
        self.manifest.counts.test = split.test.len();
        let (mut vectors, embed_key) = self.embed_stage(&records, &ingest_key)?;
        let query_vectors: BTreeMap<String, EmbeddingVector> = split
            .test
            .iter()
            .filter_map(|r| vectors.remove(&r.question_id).map(|v| (r.question_id.clone(), v)))
            .collect();
        let train_vectors = vectors;
        let (graph, graph_key) = match self.cfg.modes.retrieval {
            Retrieval::Graph => {
                if train_vectors.is_empty() {
                    return Err(PipelineError::data("graph", "train split is empty"));
                }
                let (g, key) = self.graph_stage(&train_vectors, &embed_key)?;
                self.manifest.counts.graph_nodes = g.node_count();
                self.manifest.counts.graph_edges = g.edge_count();
                (Some(g), key)
            }
            Retrieval::Text => (None, key_of(&[&embed_key, "text"])),
        };
        let train_index = split.train.iter().enumerate().map(|(i, r)| (r.question_id.clone(), i)).collect();
        Ok(Prepared {
            split,
            train_vectors,
            query_vectors,
            graph,
            train_index,
            graph_key,
        })
    }

    fn query_vector(&self, p: &Prepared, query: &QaRecord) -> Result<EmbeddingVector, PipelineError> {
        match p.query_vectors.get(&query.question_id) {
            Some(v) => Ok(v.clone()),
            None => self
                .backends
                .embedder
                .embed_question(query)
                .map_err(|e| PipelineError::from_embedding("retrieve", e)),
        }
    }

    /// Ranks train questions for `query` and collects their accepted answers.
    pub fn retrieve(&self, p: &Prepared, query: &QaRecord) -> Result<(RetrievalSet, RetrievedContext), PipelineError> {
        let qv = self.query_vector(p, query)?;
        let set = match (&self.cfg.modes.retrieval, &p.graph) {
            (Retrieval::Graph, Some(g)) => {
                qqgraph::retrieve(g, &query.question_id, &qv, &p.train_vectors, self.cfg.ppr_params(), self.cfg.k)
                    .map_err(|e| PipelineError::from_graph("retrieve", e))?
                    .0
            }
            _ => qqgraph::cosine_top_k(&query.question_id, &qv, &p.train_vectors, self.cfg.k)
                .map_err(|e| PipelineError::from_graph("retrieve", e))?,
        };
        let pairs = set
            .ids()
            .into_iter()
            .filter_map(|id| p.train_record(id))
            .filter_map(|r| {
                r.accepted_answer().map(|a| ContextPair {
                    question: r.clone(),
                    answer: a.body.clone(),
                })
            })
            .collect();
        let ctx = RetrievedContext {
            query_id: query.question_id.clone(),
            pairs,
        };
        Ok((set, ctx))
    }

    pub fn enhance(&self, ctx: RetrievedContext) -> Result<(EnhancedContext, Option<EnhanceDiagnostics>), PipelineError> {
        match self.cfg.modes.enhancement {
            Enhancement::Off => Ok((EnhancedContext::passthrough(ctx), None)),
            Enhancement::On => {
                let enhancer = Enhancer::new(self.backends.extractors.clone(), self.backends.kg.clone(), self.cfg.enhance.clone());
                let (e, d) = enhancer.enhance(ctx).map_err(|e| PipelineError::from_kg("enhance", e))?;
                Ok((e, Some(d)))
            }
        }
    }

    pub fn trace(&self, p: &Prepared, query: &QaRecord) -> Result<QueryTrace, PipelineError> {
        let (retrieval, ctx) = self.retrieve(p, query)?;
        let (context, diagnostics) = self.enhance(ctx)?;
        Ok(QueryTrace {
            retrieval,
            context,
            diagnostics,
        })
    }

    fn generator(&self) -> Generator {
        Generator::new(self.backends.generator.clone(), self.cfg.model_id(), self.cfg.generation.clone())
    }

    pub fn answer(&self, p: &Prepared, query: &QaRecord) -> Result<GeneratedAnswer, QueryFailure> {
        let fail = |stage: &str, e: &dyn std::fmt::Display| QueryFailure {
            query_id: query.question_id.clone(),
            stage: stage.into(),
            error: e.to_string(),
        };
        let trace = self.trace(p, query).map_err(|e| match &e {
            PipelineError::Backend { stage, .. } | PipelineError::Data { stage, .. } => fail(stage, &e),
            PipelineError::Config(_) => fail("config", &e),
        })?;
        self.generator()
            .answer(query, trace.context, self.cfg.modes.generation)
            .map_err(|e: GenError| fail("generate", &e))
    }

    /// The test split, capped at `max_queries`.
    pub fn queries<'p>(&self, p: &'p Prepared) -> &'p [QaRecord] {
        let n = self.cfg.max_queries.unwrap_or(usize::MAX).min(p.split.test.len());
        &p.split.test[..n]
    }

    fn header(&self) -> ResultsHeader {
        ResultsHeader {
            version: RESULTS_FORMAT_VERSION,
            model_id: self.cfg.model_id().to_string(),
            mode: self.cfg.modes.generation,
            query_count: 0,
            labels: BTreeMap::from([
                ("retrieval".to_string(), label(&self.cfg.modes.retrieval)),
                ("enhancement".to_string(), label(&self.cfg.modes.enhancement)),
            ]),
        }
    }

    /// Answers `queries` and writes the results file.
    pub fn generate_stage(&mut self, p: &Prepared, queries: &[QaRecord]) -> Result<BatchOutcome, PipelineError> {
        self.generate_inner(p, queries).map_err(|e| self.fail(e))
    }

    fn generate_inner(&mut self, p: &Prepared, queries: &[QaRecord]) -> Result<BatchOutcome, PipelineError> {
        let (started, t) = (Utc::now(), Instant::now());
        let ids: Vec<&str> = queries.iter().map(|q| q.question_id.as_str()).collect();
        let b = &self.backends;
        let key = key_of(&[
            &p.graph_key,
            &json(&self.cfg.modes),
            &json(&self.cfg.ppr_params()),
            &self.cfg.k.to_string(),
            &json(&ids),
            &json(&b.ids()),
            self.cfg.model_id(),
            &json(&self.cfg.enhance),
            &json(&self.cfg.generation),
        ]);
        let path = self.cfg.paths.results_path();
        let outcome = if self.reusable(Stage::Generate, &key, &path) {
            let o = BatchOutcome::read(&path).map_err(|e| PipelineError::data("generate", e))?;
            self.record(Stage::Generate, key, StageStatus::Reused, started, t);
            o
        } else {
            let outcome = crate::generate::run_batch(queries, self.cfg.parallelism, self.header(), |q| self.answer(p, q));
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| PipelineError::data("generate", e))?;
            }
            outcome.write(&path).map_err(|e| PipelineError::data("generate", format!("{}: {e}", path.display())))?;
            self.record(Stage::Generate, key, StageStatus::Ran, started, t);
            outcome
        };
        self.manifest.counts.queries = queries.len();
        self.manifest.counts.answers = outcome.answers.len();
        self.manifest.counts.failures = outcome.failures.len();
        Ok(outcome)
    }

    pub fn evaluator(&self) -> Evaluator {
        Evaluator {
            embedder: self.backends.embedder.clone(),
            extractors: self.backends.extractors.clone(),
            ner: self.backends.ner.clone(),
            scorer: self.backends.scorer.clone(),
            bins: self.cfg.overlap_bins.clone(),
            parallelism: self.cfg.parallelism,
        }
    }

    pub fn evaluate_stage(&mut self, p: &Prepared, outcome: &BatchOutcome) -> Result<ScoreReport, PipelineError> {
        self.evaluate_inner(p, outcome).map_err(|e| self.fail(e))
    }

    fn evaluate_inner(&mut self, p: &Prepared, outcome: &BatchOutcome) -> Result<ScoreReport, PipelineError> {
        let (started, t) = (Utc::now(), Instant::now());
        let generate_key = self.manifest.stage(Stage::Generate).map(|s| s.key.clone()).unwrap_or_default();
        let key = key_of(&[
            &generate_key,
            &json(&self.backends.ids()),
            &json(&self.cfg.overlap_bins),
            &self.backends.scorer.is_some().to_string(),
        ]);
        let path = self.cfg.paths.report_path();
        let reused = self.reusable(Stage::Evaluate, &key, &path).then(|| {
            std::fs::read_to_string(&path)
                .ok()
                .and_then(|s| serde_json::from_str::<ScoreReport>(&s).ok())
        });
        let report = match reused.flatten() {
            Some(r) => {
                self.record(Stage::Evaluate, key, StageStatus::Reused, started, t);
                r
            }
            None => {
                let r = self
                    .evaluator()
                    .evaluate(&outcome.answers, &p.split)
                    .map_err(|e| PipelineError::from_eval("evaluate", e))?;
                std::fs::write(&path, r.to_json()).map_err(|e| PipelineError::data("evaluate", format!("{}: {e}", path.display())))?;
                self.record(Stage::Evaluate, key, StageStatus::Ran, started, t);
                r
            }
        };
        self.manifest.counts.excluded = report.excluded_count;
        Ok(report)
    }

    /// The whole flow; the manifest is written on success and on failure.
    pub fn run(mut self) -> Result<RunOutput, PipelineError> {
        let prepared = self.prepare()?;
        let queries = self.queries(&prepared).to_vec();
        let outcome = self.generate_stage(&prepared, &queries)?;
        let report = self.evaluate_stage(&prepared, &outcome)?;
        self.manifest.completed = true;
        self.manifest.finished_at = Some(Utc::now());
        self.persist_manifest();
        Ok(RunOutput {
            manifest: self.manifest,
            outcome,
            report,
        })
    }
}
