//! Scoring generated answers against gold accepted answers.
//!
//! ROUGE tokenization: lowercase, delete Unicode punctuation (category P),
//! split on whitespace. Empty against empty scores 1.0, empty against
//! non-empty 0.0, for every metric.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusSplit;
use crate::embedding::{cosine, Embedder, EmbeddingError};
use crate::generate::{BatchOutcome, GeneratedAnswer};
use crate::kgenhance::{extract_triplets, KgError, TripletExtractor};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Extraction(#[from] KgError),
    #[error("ner backend: {0}")]
    Ner(String),
    #[error("score service: {0}")]
    Score(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn punctuation() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\p{P}").expect("punctuation regex"))
}

pub fn tokenize(text: &str) -> Vec<String> {
    punctuation()
        .replace_all(&text.to_lowercase(), "")
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn f1_from_counts(matched: usize, cand: usize, reference: usize) -> f64 {
    match (cand, reference) {
        (0, 0) => 1.0,
        _ if matched == 0 => 0.0,
        _ => 2.0 * matched as f64 / (cand + reference) as f64,
    }
}

/// Clipped unigram overlap: each token counts min(candidate, reference) times.
pub fn unigram_overlap<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in b {
        *counts.entry(t.as_ref()).or_default() += 1;
    }
    a.iter()
        .filter(|t| match counts.get_mut(t.as_ref()) {
            Some(c) if *c > 0 => {
                *c -= 1;
                true
            }
            _ => false,
        })
        .count()
}

pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge1_f(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (tokenize(candidate), tokenize(reference));
    f1_from_counts(unigram_overlap(&c, &r), c.len(), r.len())
}

#[allow(non_snake_case)]
pub fn rougeL_f(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (tokenize(candidate), tokenize(reference));
    f1_from_counts(lcs_len(&c, &r), c.len(), r.len())
}

/// Cosine of the two text embeddings, floored at 0. A text embedding to the
/// zero vector scores 1.0 against another such text and 0.0 otherwise.
pub fn embed_sim(candidate: &str, reference: &str, embedder: &Embedder) -> Result<f64> {
    let v = embedder.embed_texts(&[candidate.to_string(), reference.to_string()])?;
    match cosine(&v[0], &v[1]) {
        Ok(c) => Ok(c.max(0.0)),
        Err(EmbeddingError::ZeroNorm) => Ok(if v[0].norm() == 0.0 && v[1].norm() == 0.0 { 1.0 } else { 0.0 }),
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactScore {
    pub f: f64,
    pub overlap: usize,
    pub candidate: usize,
    pub reference: usize,
}

/// F1 between the normalized triplet sets of the two texts.
pub fn fact_score(candidate: &str, reference: &str, extractors: &[Arc<dyn TripletExtractor>]) -> Result<FactScore> {
    let set = |text: &str| -> Result<BTreeSet<(String, String, String)>> {
        Ok(extract_triplets(text, extractors)?
            .triplets
            .into_iter()
            .map(|t| (t.head, t.relation, t.tail))
            .collect())
    };
    let (c, r) = (set(candidate)?, set(reference)?);
    let overlap = c.intersection(&r).count();
    Ok(FactScore {
        f: f1_from_counts(overlap, c.len(), r.len()),
        overlap,
        candidate: c.len(),
        reference: r.len(),
    })
}

pub fn fact_f(candidate: &str, reference: &str, extractors: &[Arc<dyn TripletExtractor>]) -> Result<f64> {
    Ok(fact_score(candidate, reference, extractors)?.f)
}

pub trait NerBackend: Send + Sync {
    fn name(&self) -> String;
    fn entities(&self, text: &str) -> Result<Vec<String>>;
}

/// Mock NER: every token starting with an uppercase letter, punctuation trimmed.
#[derive(Debug, Clone, Default)]
pub struct CapitalizedNer;

impl NerBackend for CapitalizedNer {
    fn name(&self) -> String {
        "mock-capitalized".into()
    }

    fn entities(&self, text: &str) -> Result<Vec<String>> {
        Ok(text
            .split_whitespace()
            .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
            .filter(|w| w.chars().next().is_some_and(char::is_uppercase))
            .map(str::to_string)
            .collect())
    }
}

#[derive(Serialize)]
struct NerRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct NerResponse {
    entities: Vec<String>,
}

/// Client for `POST {base}/v1/ner`.
pub struct HttpNer {
    base_url: String,
    client: reqwest::blocking::Client,
}

impl HttpNer {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            client: reqwest::blocking::Client::builder()
                .timeout(timeout)
                .build()
                .expect("http client"),
        }
    }
}

impl NerBackend for HttpNer {
    fn name(&self) -> String {
        format!("http:{}", self.base_url)
    }

    fn entities(&self, text: &str) -> Result<Vec<String>> {
        let resp = self
            .client
            .post(format!("{}/v1/ner", self.base_url))
            .json(&NerRequest { text })
            .send()
            .map_err(|e| EvalError::Ner(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(EvalError::Ner(format!("status {}", resp.status())));
        }
        Ok(resp.json::<NerResponse>().map_err(|e| EvalError::Ner(e.to_string()))?.entities)
    }
}

fn entity_set(ner: &dyn NerBackend, text: &str) -> Result<BTreeSet<String>> {
    Ok(ner
        .entities(text)?
        .iter()
        .map(|e| e.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase())
        .filter(|e| !e.is_empty())
        .collect())
}

pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

pub fn entity_jaccard(candidate: &str, reference: &str, ner: &dyn NerBackend) -> Result<f64> {
    Ok(jaccard(&entity_set(ner, candidate)?, &entity_set(ner, reference)?))
}

/// Reserved external scorer, e.g. token-level BERTScore.
pub trait ScoreBackend: Send + Sync {
    fn score(&self, candidates: &[String], references: &[String]) -> Result<Vec<f64>>;
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    candidates: &'a [String],
    references: &'a [String],
}

#[derive(Deserialize)]
struct ScoreResponse {
    f1: Vec<f64>,
}

/// Client for `POST {base}/v1/score`.
pub struct HttpScorer {
    base_url: String,
    client: reqwest::blocking::Client,
}

impl HttpScorer {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            client: reqwest::blocking::Client::builder()
                .timeout(timeout)
                .build()
                .expect("http client"),
        }
    }
}

impl ScoreBackend for HttpScorer {
    fn score(&self, candidates: &[String], references: &[String]) -> Result<Vec<f64>> {
        let resp = self
            .client
            .post(format!("{}/v1/score", self.base_url))
            .json(&ScoreRequest { candidates, references })
            .send()
            .map_err(|e| EvalError::Score(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(EvalError::Score(format!("status {}", resp.status())));
        }
        let f1 = resp.json::<ScoreResponse>().map_err(|e| EvalError::Score(e.to_string()))?.f1;
        if f1.len() != candidates.len() {
            return Err(EvalError::Score(format!("expected {} scores, got {}", candidates.len(), f1.len())));
        }
        Ok(f1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: usize,
    /// Inclusive upper bound; `None` for the open last bin.
    pub hi: Option<usize>,
    pub count: usize,
}

/// Bins counts by ascending lower bounds: `[0, 1, 3]` gives `0`, `1-2`, `3+`.
/// Counts below the first bound land in the first bin.
pub fn triplet_overlap_histogram(counts: &[usize], lower_bounds: &[usize]) -> Vec<HistogramBin> {
    let mut bins: Vec<HistogramBin> = lower_bounds
        .iter()
        .enumerate()
        .map(|(i, &lo)| HistogramBin {
            lo,
            hi: lower_bounds.get(i + 1).map(|next| next - 1),
            count: 0,
        })
        .collect();
    for &c in counts {
        let i = lower_bounds.iter().rposition(|&lo| lo <= c).unwrap_or(0);
        if let Some(b) = bins.get_mut(i) {
            b.count += 1;
        }
    }
    bins
}

pub const DEFAULT_OVERLAP_BINS: &[usize] = &[0, 1, 2, 3, 5, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScores {
    pub rouge1_f: f64,
    #[serde(rename = "rougeL_f")]
    pub rouge_l_f: f64,
    pub embed_sim: f64,
    pub fact_f: f64,
    pub entity_jaccard: f64,
    pub triplet_overlap: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bertscore_f: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MacroScores {
    pub count: usize,
    pub rouge1_f: f64,
    #[serde(rename = "rougeL_f")]
    pub rouge_l_f: f64,
    pub embed_sim: f64,
    pub fact_f: f64,
    /// Mean of per-query F, when a score service was configured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bertscore_f: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grounding {
    pub entity_jaccard_mean: f64,
    pub triplet_overlap_histogram: Vec<HistogramBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedQuery {
    pub query_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub per_query: BTreeMap<String, QueryScores>,
    #[serde(rename = "macro")]
    pub macro_scores: MacroScores,
    pub grounding: Grounding,
    pub excluded_count: usize,
    pub excluded: Vec<ExcludedQuery>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl ScoreReport {
    /// Macro averages and grounding from `per_query`, in query-id order.
    pub fn assemble(per_query: BTreeMap<String, QueryScores>, excluded: Vec<ExcludedQuery>, bins: &[usize]) -> Self {
        let q = || per_query.values();
        let with_bert: Vec<f64> = q().filter_map(|s| s.bertscore_f).collect();
        let macro_scores = MacroScores {
            count: per_query.len(),
            rouge1_f: mean(q().map(|s| s.rouge1_f)),
            rouge_l_f: mean(q().map(|s| s.rouge_l_f)),
            embed_sim: mean(q().map(|s| s.embed_sim)),
            fact_f: mean(q().map(|s| s.fact_f)),
            bertscore_f: (!with_bert.is_empty()).then(|| mean(with_bert.iter().copied())),
        };
        let overlaps: Vec<usize> = q().map(|s| s.triplet_overlap).collect();
        let grounding = Grounding {
            entity_jaccard_mean: mean(q().map(|s| s.entity_jaccard)),
            triplet_overlap_histogram: triplet_overlap_histogram(&overlaps, bins),
        };
        Self {
            macro_scores,
            grounding,
            excluded_count: excluded.len(),
            excluded,
            per_query,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

pub struct Evaluator {
    pub embedder: Arc<Embedder>,
    pub extractors: Vec<Arc<dyn TripletExtractor>>,
    pub ner: Arc<dyn NerBackend>,
    pub scorer: Option<Arc<dyn ScoreBackend>>,
    pub bins: Vec<usize>,
    pub parallelism: usize,
}

impl Evaluator {
    pub fn score_pair(&self, candidate: &str, reference: &str) -> Result<QueryScores> {
        let fact = fact_score(candidate, reference, &self.extractors)?;
        Ok(QueryScores {
            rouge1_f: rouge1_f(candidate, reference),
            rouge_l_f: rougeL_f(candidate, reference),
            embed_sim: embed_sim(candidate, reference, &self.embedder)?,
            fact_f: fact.f,
            entity_jaccard: entity_jaccard(candidate, reference, self.ner.as_ref())?,
            triplet_overlap: fact.overlap,
            bertscore_f: None,
        })
    }

    /// Scores each answer against the accepted answer of its test record.
    /// Answers without gold are excluded and listed; backend errors abort.
    pub fn evaluate(&self, answers: &[GeneratedAnswer], gold: &CorpusSplit) -> Result<ScoreReport> {
        use rayon::prelude::*;
        let mut excluded = Vec::new();
        let mut pairs = Vec::new();
        for a in answers {
            match gold.find_test(&a.query_id).and_then(|r| r.accepted_answer()) {
                Some(ans) => pairs.push((a.query_id.clone(), a.text.clone(), ans.body.clone())),
                None => excluded.push(ExcludedQuery {
                    query_id: a.query_id.clone(),
                    error: "no accepted gold answer in the test split".into(),
                }),
            }
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.parallelism.max(1))
            .build()
            .expect("thread pool");
        let scored: Vec<Result<QueryScores>> = pool.install(|| pairs.par_iter().map(|(_, c, r)| self.score_pair(c, r)).collect());
        let mut scores = scored.into_iter().collect::<Result<Vec<_>>>()?;
        if let Some(scorer) = &self.scorer {
            let cands: Vec<String> = pairs.iter().map(|p| p.1.clone()).collect();
            let refs: Vec<String> = pairs.iter().map(|p| p.2.clone()).collect();
            for (s, f) in scores.iter_mut().zip(scorer.score(&cands, &refs)?) {
                s.bertscore_f = Some(f.clamp(0.0, 1.0));
            }
        }
        let per_query = pairs.into_iter().map(|p| p.0).zip(scores).collect();
        excluded.sort_by(|a, b| a.query_id.cmp(&b.query_id));
        Ok(ScoreReport::assemble(per_query, excluded, &self.bins))
    }

    /// Reads a results file, scores it, and writes the report as JSON.
    pub fn evaluate_run(&self, results: &Path, gold: &CorpusSplit, report: &Path) -> Result<ScoreReport> {
        let io = |path: &Path, e: std::io::Error| EvalError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let batch = BatchOutcome::read(results).map_err(|e| io(results, e))?;
        let out = self.evaluate(&batch.answers, gold)?;
        std::fs::write(report, out.to_json()).map_err(|e| io(report, e))?;
        Ok(out)
    }
}
