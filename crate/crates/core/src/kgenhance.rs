//! Context enhancement with knowledge-graph triplets.
//!
//! The retrieved Q&A pairs are run through one or more triplet extractors,
//! the entities they mention are expanded one hop through a knowledge graph,
//! expanded facts are kept only when they point back at a known entity, and
//! the surviving triplets are verbalized and appended to the context.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::QaRecord;
use crate::generate::{GenerationBackend, GenerationRequest, Mode};

/// Line the assembled context uses to introduce the verbalized facts.
pub const BRIDGE: &str = "Question: What could be the important context to answer this?\nAnswer:\n";

/// Prompt sent to a generation model when it is used as a triplet extractor.
pub const LLM_EXTRACTION_PROMPT: &str = "Extract (head, relation, tail) triplets from the following text. Output one per line as head | relation | tail.\n\n";

#[derive(Debug, Error)]
pub enum KgError {
    #[error("no triplet extractor configured")]
    NoExtractors,
    #[error("extractor {name} failed: {message}")]
    Extractor { name: String, message: String },
    #[error("all triplet extractors failed: {}", .0.join("; "))]
    AllExtractorsFailed(Vec<String>),
    #[error("knowledge graph backend unreachable: {0}")]
    Unreachable(String),
    #[error("knowledge graph protocol error: {0}")]
    Protocol(String),
    #[error("could not expand entities (backend down, cache cold): {}", .0.join(", "))]
    Unexpanded(Vec<String>),
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, KgError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TripletSource {
    Llm,
    Rebel,
    Wikidata,
}

/// Trims and collapses internal whitespace.
pub fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn fold(s: &str) -> String {
    normalize(s).to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub sources: BTreeSet<TripletSource>,
}

impl Triplet {
    /// Normalizes all three parts; `None` if any is empty afterwards.
    pub fn new(head: &str, relation: &str, tail: &str, source: TripletSource) -> Option<Self> {
        let (head, relation, tail) = (normalize(head), normalize(relation), normalize(tail));
        if head.is_empty() || relation.is_empty() || tail.is_empty() {
            return None;
        }
        Some(Self {
            head,
            relation,
            tail,
            sources: BTreeSet::from([source]),
        })
    }

    pub fn key(&self) -> (&str, &str, &str) {
        (&self.head, &self.relation, &self.tail)
    }
}

/// One item as produced by an extractor, before validation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawTriplet {
    #[serde(default)]
    pub head: Option<String>,
    #[serde(default)]
    pub relation: Option<String>,
    #[serde(default)]
    pub tail: Option<String>,
}

impl RawTriplet {
    pub fn new(head: &str, relation: &str, tail: &str) -> Self {
        Self {
            head: Some(head.into()),
            relation: Some(relation.into()),
            tail: Some(tail.into()),
        }
    }
}

pub trait TripletExtractor: Send + Sync {
    fn name(&self) -> String;
    fn source(&self) -> TripletSource;
    fn extract(&self, text: &str) -> Result<Vec<RawTriplet>>;
}

/// Extractor outputs merged across backends.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Extraction {
    pub triplets: Vec<Triplet>,
    /// Items missing a field (or blank after normalization).
    pub dropped: usize,
    /// Extractors that failed while at least one other succeeded.
    pub failed: Vec<String>,
}

/// Runs every extractor and unions the results, deduplicating on the
/// normalized `(head, relation, tail)` and recording every source.
pub fn extract_triplets(text: &str, extractors: &[Arc<dyn TripletExtractor>]) -> Result<Extraction> {
    if extractors.is_empty() {
        return Err(KgError::NoExtractors);
    }
    let mut out = Extraction::default();
    if text.trim().is_empty() {
        return Ok(out);
    }
    let mut position: HashMap<(String, String, String), usize> = HashMap::new();
    let mut errors = Vec::new();
    for ex in extractors {
        let items = match ex.extract(text) {
            Ok(items) => items,
            Err(e) => {
                log::warn!("triplet extractor {} failed: {e}", ex.name());
                errors.push(format!("{}: {e}", ex.name()));
                out.failed.push(ex.name());
                continue;
            }
        };
        for raw in items {
            let t = match (&raw.head, &raw.relation, &raw.tail) {
                (Some(h), Some(r), Some(t)) => Triplet::new(h, r, t, ex.source()),
                _ => None,
            };
            let Some(t) = t else {
                out.dropped += 1;
                continue;
            };
            let key = (t.head.clone(), t.relation.clone(), t.tail.clone());
            match position.get(&key) {
                Some(&i) => {
                    out.triplets[i].sources.insert(ex.source());
                }
                None => {
                    position.insert(key, out.triplets.len());
                    out.triplets.push(t);
                }
            }
        }
    }
    if errors.len() == extractors.len() {
        return Err(KgError::AllExtractorsFailed(errors));
    }
    Ok(out)
}

/// Parses `head | relation | tail` lines, ignoring anything else. Leading
/// list markers and surrounding brackets/quotes are tolerated.
pub fn parse_triplet_lines(text: &str) -> Vec<RawTriplet> {
    text.lines()
        .filter_map(|line| {
            let line = line
                .trim()
                .trim_start_matches(|c: char| c == '-' || c == '*' || c.is_ascii_digit() || c == '.' || c == ')')
                .trim()
                .trim_matches(|c| matches!(c, '(' | ')' | '"' | '\''));
            let parts: Vec<&str> = line.split('|').map(str::trim).collect();
            (parts.len() == 3).then(|| RawTriplet {
                head: Some(parts[0].to_string()).filter(|s| !s.is_empty()),
                relation: Some(parts[1].to_string()).filter(|s| !s.is_empty()),
                tail: Some(parts[2].to_string()).filter(|s| !s.is_empty()),
            })
        })
        .collect()
}

/// Uses a generation model with a fixed extraction prompt.
pub struct LlmExtractor {
    backend: Arc<dyn GenerationBackend>,
    model_id: String,
    max_new_tokens: usize,
}

impl LlmExtractor {
    pub fn new(backend: Arc<dyn GenerationBackend>, model_id: &str) -> Self {
        Self {
            backend,
            model_id: model_id.to_string(),
            max_new_tokens: 512,
        }
    }
}

impl TripletExtractor for LlmExtractor {
    fn name(&self) -> String {
        format!("llm:{}", self.model_id)
    }

    fn source(&self) -> TripletSource {
        TripletSource::Llm
    }

    fn extract(&self, text: &str) -> Result<Vec<RawTriplet>> {
        let req = GenerationRequest {
            prompt: format!("{LLM_EXTRACTION_PROMPT}{text}"),
            max_new_tokens: self.max_new_tokens,
            temperature: 0.0,
            model_id: self.model_id.clone(),
            mode: Mode::Pretrained,
        };
        let reply = self.backend.complete(&req).map_err(|e| KgError::Extractor {
            name: self.name(),
            message: e.to_string(),
        })?;
        Ok(parse_triplet_lines(&reply))
    }
}

#[derive(Serialize)]
struct TripletRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct TripletResponse {
    triplets: Vec<RawTriplet>,
}

/// Client for `POST {base}/v1/triplets`.
pub struct HttpExtractor {
    base_url: String,
    source: TripletSource,
    client: reqwest::blocking::Client,
}

impl HttpExtractor {
    pub fn new(base_url: &str, source: TripletSource, timeout: Duration) -> Self {
        Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            source,
            client: reqwest::blocking::Client::builder()
                .timeout(timeout)
                .build()
                .expect("http client"),
        }
    }
}

impl TripletExtractor for HttpExtractor {
    fn name(&self) -> String {
        format!("http:{}", self.base_url)
    }

    fn source(&self) -> TripletSource {
        self.source
    }

    fn extract(&self, text: &str) -> Result<Vec<RawTriplet>> {
        let err = |message: String| KgError::Extractor {
            name: self.name(),
            message,
        };
        let resp = self
            .client
            .post(format!("{}/v1/triplets", self.base_url))
            .json(&TripletRequest { text })
            .send()
            .map_err(|e| err(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(err(format!("status {}", resp.status())));
        }
        let body: TripletResponse = resp.json().map_err(|e| err(e.to_string()))?;
        Ok(body.triplets)
    }
}

/// Mock extractor returning the same items for every text.
#[derive(Debug, Clone)]
pub struct FixedExtractor {
    pub name: String,
    pub source: TripletSource,
    pub items: Vec<RawTriplet>,
}

impl TripletExtractor for FixedExtractor {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn source(&self) -> TripletSource {
        self.source
    }

    fn extract(&self, _text: &str) -> Result<Vec<RawTriplet>> {
        Ok(self.items.clone())
    }
}

/// Deterministic pattern extractor: in each sentence, the first relation
/// phrase found splits the sentence into head (up to 4 words before) and
/// tail (up to 5 words after). Good enough for offline fixtures.
#[derive(Debug, Clone)]
pub struct RuleExtractor {
    pub source: TripletSource,
    relations: Vec<String>,
}

impl RuleExtractor {
    pub const DEFAULT_RELATIONS: &'static [&'static str] = &[
        "is used to",
        "is used for",
        "is based on",
        "is part of",
        "depends on",
        "replaces",
        "requires",
        "provides",
        "manages",
        "supports",
        "uses",
        "is a",
        "is",
    ];

    pub fn new(source: TripletSource) -> Self {
        Self::with_relations(source, Self::DEFAULT_RELATIONS)
    }

    pub fn with_relations(source: TripletSource, relations: &[&str]) -> Self {
        let mut relations: Vec<String> = relations.iter().map(|r| r.to_lowercase()).collect();
        // longest phrase first so "is used to" wins over "is"
        relations.sort_by(|a, b| b.split(' ').count().cmp(&a.split(' ').count()).then(a.cmp(b)));
        Self { source, relations }
    }

    fn sentence_triplet(&self, sentence: &str) -> Option<RawTriplet> {
        let words: Vec<&str> = sentence
            .split_whitespace()
            .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric() && c != '-' && c != '_'))
            .filter(|w| !w.is_empty())
            .collect();
        let lower: Vec<String> = words.iter().map(|w| w.to_lowercase()).collect();
        let mut best: Option<(usize, usize, &str)> = None;
        for rel in &self.relations {
            let rel_words: Vec<&str> = rel.split(' ').collect();
            let hit = (1..lower.len().saturating_sub(rel_words.len()))
                .find(|&i| lower[i..i + rel_words.len()].iter().zip(&rel_words).all(|(a, b)| a == b));
            if let Some(i) = hit {
                if best.is_none_or(|(bi, _, _)| i < bi) {
                    best = Some((i, rel_words.len(), rel.as_str()));
                }
            }
        }
        let (i, len, rel) = best?;
        let head = words[i.saturating_sub(4)..i].join(" ");
        let tail_end = (i + len + 5).min(words.len());
        let tail = words[i + len..tail_end].join(" ");
        Some(RawTriplet::new(&head, rel, &tail))
    }
}

impl TripletExtractor for RuleExtractor {
    fn name(&self) -> String {
        "mock-rules".into()
    }

    fn source(&self) -> TripletSource {
        self.source
    }

    fn extract(&self, text: &str) -> Result<Vec<RawTriplet>> {
        Ok(text
            .split(['.', '!', '?', '\n', ';', ':'])
            .filter_map(|s| self.sentence_triplet(s))
            .collect())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySet {
    entities: BTreeSet<String>,
}

impl EntitySet {
    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.entities.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn contains(&self, entity: &str) -> bool {
        self.entities.contains(entity)
    }

    fn folded(&self) -> HashSet<String> {
        self.entities.iter().map(|e| fold(e)).collect()
    }
}

/// All heads and tails of the given triplets.
pub fn build_entity_set(triplets: &[Triplet]) -> EntitySet {
    EntitySet {
        entities: triplets
            .iter()
            .flat_map(|t| [t.head.clone(), t.tail.clone()])
            .collect(),
    }
}

/// A resolved knowledge-graph item with its outgoing statements as
/// human-readable `(relation label, tail label)` pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgEntity {
    pub id: String,
    pub label: String,
    pub statements: Vec<(String, String)>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub entity: Option<KgEntity>,
    /// How many items matched at the winning tier; above 1 means ambiguous.
    pub candidates: usize,
}

pub trait KgBackend: Send + Sync {
    fn id(&self) -> String;
    /// Resolves a label to an item: exact label first, then case-insensitive
    /// label or alias. The top match wins.
    fn lookup(&self, label: &str) -> Result<Resolution>;
}

#[derive(Debug, Clone, Deserialize, Serialize)]
struct FixtureEntity {
    id: String,
    #[serde(default)]
    aliases: Vec<String>,
    #[serde(default)]
    statements: Vec<(String, String)>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
struct FixtureFile {
    entities: BTreeMap<String, FixtureEntity>,
}

/// Knowledge graph loaded from a local JSON file.
#[derive(Debug, Clone)]
pub struct FixtureKg {
    name: String,
    entities: BTreeMap<String, FixtureEntity>,
}

impl FixtureKg {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| KgError::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        Self::from_json(&name, &text).map_err(|e| KgError::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn from_json(name: &str, text: &str) -> std::result::Result<Self, serde_json::Error> {
        let file: FixtureFile = serde_json::from_str(text)?;
        Ok(Self {
            name: name.to_string(),
            entities: file.entities,
        })
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entities.keys().map(String::as_str)
    }

    fn entity(&self, label: &str, e: &FixtureEntity) -> KgEntity {
        KgEntity {
            id: e.id.clone(),
            label: label.to_string(),
            statements: e.statements.clone(),
        }
    }
}

impl KgBackend for FixtureKg {
    fn id(&self) -> String {
        format!("fixture:{}", self.name)
    }

    fn lookup(&self, label: &str) -> Result<Resolution> {
        let label = normalize(label);
        if let Some(e) = self.entities.get(&label) {
            return Ok(Resolution {
                entity: Some(self.entity(&label, e)),
                candidates: 1,
            });
        }
        let folded = fold(&label);
        let matches: Vec<(&String, &FixtureEntity)> = self
            .entities
            .iter()
            .filter(|(l, e)| fold(l) == folded || e.aliases.iter().any(|a| fold(a) == folded))
            .collect();
        Ok(Resolution {
            entity: matches.first().map(|(l, e)| self.entity(l, e)),
            candidates: matches.len(),
        })
    }
}

/// Live Wikidata access through the MediaWiki action API (English labels).
pub struct WikidataKg {
    api_url: String,
    client: reqwest::blocking::Client,
    min_interval: Duration,
    last_request: Mutex<Option<Instant>>,
    search_limit: usize,
}

impl WikidataKg {
    pub const DEFAULT_API: &'static str = "https://www.wikidata.org/w/api.php";

    pub fn new(api_url: &str, timeout: Duration, min_interval: Duration) -> Self {
        Self {
            api_url: api_url.to_string(),
            client: reqwest::blocking::Client::builder()
                .timeout(timeout)
                .user_agent(concat!("graphctx/", env!("CARGO_PKG_VERSION")))
                .build()
                .expect("http client"),
            min_interval,
            last_request: Mutex::new(None),
            search_limit: 7,
        }
    }

    /// Blocks until the per-host interval has elapsed since the last call.
    fn throttle(&self) {
        let mut last = self.last_request.lock().expect("rate limiter lock");
        if let Some(t) = *last {
            let elapsed = t.elapsed();
            if elapsed < self.min_interval {
                std::thread::sleep(self.min_interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }

    fn get(&self, params: &[(&str, &str)]) -> Result<serde_json::Value> {
        self.throttle();
        let resp = self
            .client
            .get(&self.api_url)
            .query(params)
            .query(&[("format", "json")])
            .send()
            .map_err(|e| KgError::Unreachable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(KgError::Unreachable(format!("status {}", resp.status())));
        }
        resp.json().map_err(|e| KgError::Protocol(e.to_string()))
    }

    fn labels(&self, ids: &[String]) -> Result<HashMap<String, String>> {
        let mut out = HashMap::new();
        for chunk in ids.chunks(50) {
            let joined = chunk.join("|");
            let v = self.get(&[
                ("action", "wbgetentities"),
                ("ids", &joined),
                ("props", "labels"),
                ("languages", "en"),
            ])?;
            if let Some(entities) = v.get("entities").and_then(|e| e.as_object()) {
                for (id, e) in entities {
                    if let Some(l) = e.pointer("/labels/en/value").and_then(|l| l.as_str()) {
                        out.insert(id.clone(), l.to_string());
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum ClaimValue {
    Item(String),
    Text(String),
}

impl KgBackend for WikidataKg {
    fn id(&self) -> String {
        format!("wikidata:{}", self.api_url)
    }

    fn lookup(&self, label: &str) -> Result<Resolution> {
        let label = normalize(label);
        let limit = self.search_limit.to_string();
        let found = self.get(&[
            ("action", "wbsearchentities"),
            ("search", &label),
            ("language", "en"),
            ("uselang", "en"),
            ("type", "item"),
            ("limit", &limit),
        ])?;
        let hits = found
            .get("search")
            .and_then(|s| s.as_array())
            .ok_or_else(|| KgError::Protocol("search response without `search`".into()))?;
        let text_of = |h: &serde_json::Value, key: &str| h.get(key).and_then(|v| v.as_str()).map(str::to_string);
        let exact: Vec<&serde_json::Value> = hits.iter().filter(|h| text_of(h, "label").as_deref() == Some(label.as_str())).collect();
        let folded = fold(&label);
        let loose: Vec<&serde_json::Value> = hits
            .iter()
            .filter(|h| {
                text_of(h, "label").map(|l| fold(&l) == folded).unwrap_or(false)
                    || h.get("aliases")
                        .and_then(|a| a.as_array())
                        .map(|a| a.iter().filter_map(|x| x.as_str()).any(|x| fold(x) == folded))
                        .unwrap_or(false)
                    || h.pointer("/match/text").and_then(|t| t.as_str()).map(|t| fold(t) == folded).unwrap_or(false)
            })
            .collect();
        let tier = if exact.is_empty() { loose } else { exact };
        let Some(top) = tier.first() else {
            return Ok(Resolution::default());
        };
        let id = text_of(top, "id").ok_or_else(|| KgError::Protocol("search hit without id".into()))?;
        let item_label = text_of(top, "label").unwrap_or_else(|| label.clone());

        let data = self.get(&[("action", "wbgetentities"), ("ids", &id), ("props", "claims")])?;
        let claims = data
            .pointer(&format!("/entities/{id}/claims"))
            .and_then(|c| c.as_object())
            .cloned()
            .unwrap_or_default();
        let mut raw: Vec<(String, ClaimValue)> = Vec::new();
        let mut props: BTreeSet<String> = BTreeSet::new();
        let mut items: BTreeSet<String> = BTreeSet::new();
        let sorted: BTreeMap<_, _> = claims.into_iter().collect();
        for (prop, list) in sorted {
            for claim in list.as_array().into_iter().flatten() {
                let Some(dv) = claim.pointer("/mainsnak/datavalue") else { continue };
                let value = match dv.get("type").and_then(|t| t.as_str()) {
                    Some("wikibase-entityid") => dv.pointer("/value/id").and_then(|v| v.as_str()).map(|v| {
                        items.insert(v.to_string());
                        ClaimValue::Item(v.to_string())
                    }),
                    Some("string") => dv.get("value").and_then(|v| v.as_str()).map(|v| ClaimValue::Text(v.to_string())),
                    Some("monolingualtext") => dv.pointer("/value/text").and_then(|v| v.as_str()).map(|v| ClaimValue::Text(v.to_string())),
                    _ => None,
                };
                if let Some(v) = value {
                    props.insert(prop.clone());
                    raw.push((prop.clone(), v));
                }
            }
        }
        let ids: Vec<String> = props.into_iter().chain(items).collect();
        let names = self.labels(&ids)?;
        let statements = raw
            .into_iter()
            .filter_map(|(prop, v)| {
                let rel = names.get(&prop)?.clone();
                let tail = match v {
                    ClaimValue::Item(q) => names.get(&q)?.clone(),
                    ClaimValue::Text(t) => t,
                };
                Some((rel, tail))
            })
            .collect();
        Ok(Resolution {
            entity: Some(KgEntity {
                id,
                label: item_label,
                statements,
            }),
            candidates: tier.len(),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheLine {
    label: String,
    backend: String,
    resolution: Resolution,
}

/// Record/replay cache in front of a [`KgBackend`], persisted as JSONL keyed
/// by entity label and backend id. Reads are concurrent; writes serialized.
pub struct CachedKg {
    inner: Arc<dyn KgBackend>,
    path: Option<PathBuf>,
    entries: RwLock<HashMap<String, Resolution>>,
    writer: Mutex<()>,
}

impl CachedKg {
    pub fn new(inner: Arc<dyn KgBackend>, path: Option<&Path>) -> Result<Self> {
        let backend = inner.id();
        let mut entries = HashMap::new();
        if let Some(p) = path.filter(|p| p.exists()) {
            let file = File::open(p).map_err(|e| KgError::File {
                path: p.to_path_buf(),
                message: e.to_string(),
            })?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| KgError::File {
                    path: p.to_path_buf(),
                    message: e.to_string(),
                })?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheLine = serde_json::from_str(&line).map_err(|e| KgError::File {
                    path: p.to_path_buf(),
                    message: e.to_string(),
                })?;
                if entry.backend == backend {
                    entries.insert(entry.label, entry.resolution);
                }
            }
        }
        Ok(Self {
            inner,
            path: path.map(Path::to_path_buf),
            entries: RwLock::new(entries),
            writer: Mutex::new(()),
        })
    }

    pub fn cached(&self, label: &str) -> Option<Resolution> {
        self.entries.read().expect("kg cache lock").get(&normalize(label)).cloned()
    }
}

impl KgBackend for CachedKg {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn lookup(&self, label: &str) -> Result<Resolution> {
        let key = normalize(label);
        if let Some(hit) = self.cached(&key) {
            return Ok(hit);
        }
        let res = self.inner.lookup(&key)?;
        let _guard = self.writer.lock().expect("kg cache writer");
        if let Some(p) = &self.path {
            let line = serde_json::to_string(&CacheLine {
                label: key.clone(),
                backend: self.inner.id(),
                resolution: res.clone(),
            })
            .expect("cache line serializes");
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| KgError::File {
                    path: p.clone(),
                    message: e.to_string(),
                })?;
            writeln!(f, "{line}").map_err(|e| KgError::File {
                path: p.clone(),
                message: e.to_string(),
            })?;
        }
        self.entries.write().expect("kg cache lock").insert(key, res.clone());
        Ok(res)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KgBudget {
    pub max_entities: usize,
    pub max_candidates: usize,
}

impl Default for KgBudget {
    fn default() -> Self {
        Self {
            max_entities: 25,
            max_candidates: 200,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Expansion {
    pub triplets: Vec<Triplet>,
    /// Entities that resolved to no item.
    pub skipped: usize,
    /// Entities whose winning tier had more than one candidate.
    pub ambiguous: usize,
    /// Entities beyond the budget, not looked up.
    pub entities_over_budget: usize,
    /// Candidate triplets cut by the budget.
    pub triplets_over_budget: usize,
}

/// One-hop expansion: every statement of each resolvable entity becomes a
/// `wikidata` triplet headed by that entity. Lookups run concurrently,
/// results are merged in entity order.
pub fn expand_via_kg(entities: &EntitySet, kg: &dyn KgBackend, budget: KgBudget, parallelism: usize) -> Result<Expansion> {
    use rayon::prelude::*;
    let mut out = Expansion::default();
    let selected: Vec<&str> = entities.iter().take(budget.max_entities).collect();
    out.entities_over_budget = entities.len() - selected.len();
    if out.entities_over_budget > 0 {
        log::info!("kg expansion: {} entities over budget", out.entities_over_budget);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .expect("thread pool");
    let lookups: Vec<(&str, Result<Resolution>)> =
        pool.install(|| selected.par_iter().map(|&e| (e, kg.lookup(e))).collect());

    let mut unexpanded = Vec::new();
    let mut seen = HashSet::new();
    for (entity, res) in lookups {
        let res = match res {
            Ok(r) => r,
            Err(e) => {
                log::warn!("kg lookup for {entity:?} failed: {e}");
                unexpanded.push(entity.to_string());
                continue;
            }
        };
        if res.candidates > 1 {
            out.ambiguous += 1;
        }
        let Some(item) = res.entity else {
            out.skipped += 1;
            continue;
        };
        for (rel, tail) in &item.statements {
            let Some(t) = Triplet::new(entity, rel, tail, TripletSource::Wikidata) else { continue };
            if !seen.insert((t.head.clone(), t.relation.clone(), t.tail.clone())) {
                continue;
            }
            if out.triplets.len() >= budget.max_candidates {
                out.triplets_over_budget += 1;
                continue;
            }
            out.triplets.push(t);
        }
    }
    if out.triplets_over_budget > 0 {
        log::info!("kg expansion: {} candidate triplets over budget", out.triplets_over_budget);
    }
    if !unexpanded.is_empty() {
        return Err(KgError::Unexpanded(unexpanded));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    #[default]
    Tail,
    HeadAndTail,
}

/// Keeps expanded triplets whose tail (and, in `HeadAndTail` mode, head) is
/// a known entity, compared case-insensitively.
pub fn filter_kg_triplets(candidates: &[Triplet], entities: &EntitySet, mode: FilterMode) -> Vec<Triplet> {
    let known = entities.folded();
    candidates
        .iter()
        .filter(|t| known.contains(&fold(&t.tail)))
        .filter(|t| mode == FilterMode::Tail || known.contains(&fold(&t.head)))
        .cloned()
        .collect()
}

/// Union on `(head, relation, tail)`, initial triplets first; the first
/// occurrence wins, sources included.
pub fn merge_triplets(initial: &[Triplet], filtered_kg: &[Triplet]) -> Vec<Triplet> {
    let mut seen = HashSet::new();
    initial
        .iter()
        .chain(filtered_kg)
        .filter(|t| seen.insert((t.head.clone(), t.relation.clone(), t.tail.clone())))
        .cloned()
        .collect()
}

/// `"{head} {relation} {tail}"` per triplet, order kept, duplicates removed.
pub fn verbalize(triplets: &[Triplet]) -> Vec<String> {
    let mut seen = HashSet::new();
    triplets
        .iter()
        .map(|t| format!("{} {} {}", t.head, t.relation, t.tail))
        .filter(|s| seen.insert(s.clone()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextPair {
    pub question: QaRecord,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedContext {
    pub query_id: String,
    pub pairs: Vec<ContextPair>,
}

impl RetrievedContext {
    /// `Question: …\n\nAnswer: …\n\n` for every pair, in retrieval order.
    pub fn render(&self) -> String {
        self.pairs
            .iter()
            .map(|p| format!("Question: {}\n\nAnswer: {}\n\n", p.question.question_text(), p.answer))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhancedContext {
    pub base: RetrievedContext,
    pub sentences: Vec<String>,
    pub assembled: String,
    /// False for a passthrough context (no bridge line).
    pub enhanced: bool,
}

impl EnhancedContext {
    /// The retrieved context with no knowledge payload and no bridge line.
    pub fn passthrough(base: RetrievedContext) -> Self {
        let assembled = base.render();
        Self {
            base,
            sentences: Vec::new(),
            assembled,
            enhanced: false,
        }
    }

    /// Re-renders after `base` or `sentences` were edited.
    pub fn rebuild(self) -> Self {
        if self.enhanced {
            assemble_context(self.base, &self.sentences)
        } else {
            Self::passthrough(self.base)
        }
    }
}

/// Retrieved pairs, then the bridge line, then one sentence per line.
pub fn assemble_context(retrieved: RetrievedContext, sentences: &[String]) -> EnhancedContext {
    let mut seen = HashSet::new();
    let sentences: Vec<String> = sentences.iter().filter(|s| seen.insert(s.as_str())).cloned().collect();
    let mut assembled = retrieved.render();
    assembled.push_str(BRIDGE);
    for s in &sentences {
        assembled.push_str(s);
        assembled.push('\n');
    }
    EnhancedContext {
        base: retrieved,
        sentences,
        assembled,
        enhanced: true,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnhanceConfig {
    pub filter_mode: FilterMode,
    pub budget: KgBudget,
    pub parallelism: usize,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self {
            filter_mode: FilterMode::Tail,
            budget: KgBudget::default(),
            parallelism: 4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnhanceDiagnostics {
    pub initial_triplets: usize,
    pub dropped_items: usize,
    pub failed_extractors: Vec<String>,
    pub entities: usize,
    pub kg_candidates: usize,
    pub kg_kept: usize,
    pub skipped_entities: usize,
    pub ambiguous_entities: usize,
    pub entities_over_budget: usize,
    pub triplets_over_budget: usize,
}

/// Every intermediate of one enhancement, for inspection and testing.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhanceTrace {
    pub initial: Vec<Triplet>,
    pub entities: EntitySet,
    pub candidates: Vec<Triplet>,
    pub filtered: Vec<Triplet>,
    pub merged: Vec<Triplet>,
}

pub struct Enhancer {
    extractors: Vec<Arc<dyn TripletExtractor>>,
    kg: Arc<dyn KgBackend>,
    config: EnhanceConfig,
}

impl Enhancer {
    pub fn new(extractors: Vec<Arc<dyn TripletExtractor>>, kg: Arc<dyn KgBackend>, config: EnhanceConfig) -> Self {
        Self { extractors, kg, config }
    }

    pub fn enhance(&self, retrieved: RetrievedContext) -> Result<(EnhancedContext, EnhanceDiagnostics)> {
        let (ctx, diag, _) = self.enhance_traced(retrieved)?;
        Ok((ctx, diag))
    }

    pub fn enhance_traced(&self, retrieved: RetrievedContext) -> Result<(EnhancedContext, EnhanceDiagnostics, EnhanceTrace)> {
        let extraction = extract_triplets(&retrieved.render(), &self.extractors)?;
        let entities = build_entity_set(&extraction.triplets);
        let expansion = expand_via_kg(&entities, self.kg.as_ref(), self.config.budget, self.config.parallelism)?;
        let filtered = filter_kg_triplets(&expansion.triplets, &entities, self.config.filter_mode);
        let merged = merge_triplets(&extraction.triplets, &filtered);
        let sentences = verbalize(&merged);
        let diag = EnhanceDiagnostics {
            initial_triplets: extraction.triplets.len(),
            dropped_items: extraction.dropped,
            failed_extractors: extraction.failed.clone(),
            entities: entities.len(),
            kg_candidates: expansion.triplets.len(),
            kg_kept: filtered.len(),
            skipped_entities: expansion.skipped,
            ambiguous_entities: expansion.ambiguous,
            entities_over_budget: expansion.entities_over_budget,
            triplets_over_budget: expansion.triplets_over_budget,
        };
        let trace = EnhanceTrace {
            initial: extraction.triplets,
            entities,
            candidates: expansion.triplets,
            filtered,
            merged,
        };
        Ok((assemble_context(retrieved, &sentences), diag, trace))
    }
}
