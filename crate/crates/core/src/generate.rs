//! Prompt assembly and answer generation.

use std::collections::{BTreeMap, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{token_count, QaRecord};
use crate::kgenhance::EnhancedContext;

pub const DEFAULT_MAX_NEW_TOKENS: usize = 512;
pub const DEFAULT_TEMPERATURE: f64 = 0.0;
pub const RESULTS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Pretrained,
    Finetuned,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pretrained" => Ok(Self::Pretrained),
            "finetuned" => Ok(Self::Finetuned),
            other => Err(format!("unknown generation mode {other:?} (expected pretrained or finetuned)")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Pretrained => "pretrained",
            Self::Finetuned => "finetuned",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenError {
    #[error("invalid generation request: {0}")]
    InvalidRequest(String),
    #[error("transient backend failure (status {status:?}): {message}")]
    Transient { status: Option<u16>, message: String },
    #[error("prompt of ~{estimate} tokens exceeds backend context limit {limit:?}")]
    ContextLength { limit: Option<usize>, estimate: usize },
    #[error("backend error: {0}")]
    Fatal(String),
    #[error("backend unreachable after {attempts} attempts: {last}")]
    Unreachable { attempts: u32, last: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub model_id: String,
    pub mode: Mode,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<(), GenError> {
        if self.prompt.is_empty() {
            return Err(GenError::InvalidRequest("empty prompt".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(GenError::InvalidRequest("max_new_tokens must be at least 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GenError::InvalidRequest(format!("temperature {} is not >= 0", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratedAnswer {
    pub query_id: String,
    pub text: String,
    pub model_id: String,
    pub mode: Mode,
    pub latency_ms: u64,
    pub prompt_hash: String,
    pub prompt: String,
    pub retries: u32,
}

pub trait GenerationBackend: Send + Sync {
    fn id(&self) -> String;
    fn complete(&self, req: &GenerationRequest) -> Result<String, GenError>;
}

pub fn build_prompt(query: &QaRecord, ctx: &EnhancedContext, mode: Mode) -> String {
    match mode {
        Mode::Pretrained => format!("{}\n\nQuestion: {}\n{}\nAnswer:", ctx.assembled, query.title, query.body),
        Mode::Finetuned => format!("{}\n\n[INST] {}\n{} [\\INST] Answer:", ctx.assembled, query.title, query.body),
    }
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 250,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let ms = self.base_delay_ms.saturating_mul(1u64 << attempt.min(20));
        Duration::from_millis(ms.min(self.max_delay_ms))
    }
}

/// Calls the backend, retrying transient failures with exponential backoff.
/// Returns the text verbatim along with the number of retries used.
pub fn complete_with_retry(backend: &dyn GenerationBackend, req: &GenerationRequest, policy: &RetryPolicy) -> Result<(String, u32), GenError> {
    req.validate()?;
    let mut attempt = 0;
    loop {
        match backend.complete(req) {
            Ok(text) => return Ok((text, attempt)),
            Err(GenError::Transient { status, message }) => {
                if attempt >= policy.max_retries {
                    return Err(GenError::Unreachable {
                        attempts: attempt + 1,
                        last: match status {
                            Some(s) => format!("status {s}: {message}"),
                            None => message,
                        },
                    });
                }
                log::debug!("generation attempt {} failed transiently: {message}", attempt + 1);
                std::thread::sleep(policy.delay(attempt));
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateOptions {
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub retry: RetryPolicy,
    /// Whitespace-token budget for the whole prompt; `None` disables shrinking.
    pub prompt_token_budget: Option<usize>,
    /// When false, latency is written as 0 so result files are reproducible.
    pub record_latency: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            temperature: DEFAULT_TEMPERATURE,
            retry: RetryPolicy::default(),
            prompt_token_budget: None,
            record_latency: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shrink {
    pub dropped_sentences: usize,
    pub dropped_pairs: usize,
}

/// Shrinks the context until the prompt fits `budget` tokens: knowledge
/// sentences go first (from the end), then the lowest-ranked pairs.
pub fn fit_to_budget(query: &QaRecord, ctx: EnhancedContext, mode: Mode, budget: usize) -> (EnhancedContext, Shrink) {
    let mut ctx = ctx;
    let mut shrink = Shrink::default();
    while token_count(&build_prompt(query, &ctx, mode)) > budget {
        if ctx.sentences.pop().is_some() {
            shrink.dropped_sentences += 1;
        } else if ctx.base.pairs.pop().is_some() {
            shrink.dropped_pairs += 1;
        } else {
            break;
        }
        ctx = ctx.rebuild();
    }
    (ctx, shrink)
}

pub struct Generator {
    backend: Arc<dyn GenerationBackend>,
    model_id: String,
    options: GenerateOptions,
}

impl Generator {
    pub fn new(backend: Arc<dyn GenerationBackend>, model_id: &str, options: GenerateOptions) -> Self {
        Self {
            backend,
            model_id: model_id.to_string(),
            options,
        }
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn generate(&self, query_id: &str, prompt: String, mode: Mode) -> Result<GeneratedAnswer, GenError> {
        let req = GenerationRequest {
            prompt,
            max_new_tokens: self.options.max_new_tokens,
            temperature: self.options.temperature,
            model_id: self.model_id.clone(),
            mode,
        };
        let start = Instant::now();
        let (text, retries) = complete_with_retry(self.backend.as_ref(), &req, &self.options.retry)?;
        let latency_ms = if self.options.record_latency {
            start.elapsed().as_millis() as u64
        } else {
            0
        };
        Ok(GeneratedAnswer {
            query_id: query_id.to_string(),
            text,
            model_id: self.model_id.clone(),
            mode,
            latency_ms,
            prompt_hash: prompt_hash(&req.prompt),
            prompt: req.prompt,
            retries,
        })
    }

    /// Builds the prompt (shrunk to the budget if one is set) and generates.
    pub fn answer(&self, query: &QaRecord, ctx: EnhancedContext, mode: Mode) -> Result<GeneratedAnswer, GenError> {
        let ctx = match self.options.prompt_token_budget {
            Some(budget) => {
                let (ctx, shrink) = fit_to_budget(query, ctx, mode, budget);
                if shrink != Shrink::default() {
                    log::info!("{}: shrank context {:?}", query.question_id, shrink);
                }
                ctx
            }
            None => ctx,
        };
        self.generate(&query.question_id, build_prompt(query, &ctx, mode), mode)
    }
}

#[derive(Serialize)]
struct HttpGenerateRequest<'a> {
    prompt: &'a str,
    max_new_tokens: usize,
    temperature: f64,
    model: &'a str,
}

#[derive(Deserialize)]
struct HttpGenerateResponse {
    text: String,
}

#[derive(Deserialize)]
struct HttpErrorBody {
    #[serde(default)]
    limit: Option<usize>,
}

/// Client for `POST {base}/v1/generate`. 429 and 5xx are transient; 413 is a
/// context-length rejection (an optional `limit` field in the body is kept).
pub struct HttpGenerator {
    base_url: String,
    client: reqwest::blocking::Client,
}

impl HttpGenerator {
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

impl GenerationBackend for HttpGenerator {
    fn id(&self) -> String {
        format!("http:{}", self.base_url)
    }

    fn complete(&self, req: &GenerationRequest) -> Result<String, GenError> {
        let resp = self
            .client
            .post(format!("{}/v1/generate", self.base_url))
            .json(&HttpGenerateRequest {
                prompt: &req.prompt,
                max_new_tokens: req.max_new_tokens,
                temperature: req.temperature,
                model: &req.model_id,
            })
            .send()
            .map_err(|e| GenError::Transient {
                status: None,
                message: e.to_string(),
            })?;
        let status = resp.status();
        if status.as_u16() == 413 {
            let limit = resp.json::<HttpErrorBody>().ok().and_then(|b| b.limit);
            return Err(GenError::ContextLength {
                limit,
                estimate: token_count(&req.prompt),
            });
        }
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(GenError::Transient {
                status: Some(status.as_u16()),
                message: resp.text().unwrap_or_default(),
            });
        }
        if !status.is_success() {
            return Err(GenError::Fatal(format!("status {status}: {}", resp.text().unwrap_or_default())));
        }
        resp.json::<HttpGenerateResponse>()
            .map(|r| r.text)
            .map_err(|e| GenError::Fatal(format!("bad response body: {e}")))
    }
}

fn check_limit(prompt: &str, limit: Option<usize>) -> Result<(), GenError> {
    let estimate = token_count(prompt);
    match limit {
        Some(l) if estimate > l => Err(GenError::ContextLength { limit, estimate }),
        _ => Ok(()),
    }
}

/// Mock returning the prompt suffix after the last `Answer:` cue, trimmed.
#[derive(Debug, Clone, Default)]
pub struct EchoGenerator {
    pub context_limit: Option<usize>,
}

impl GenerationBackend for EchoGenerator {
    fn id(&self) -> String {
        "mock-echo".into()
    }

    fn complete(&self, req: &GenerationRequest) -> Result<String, GenError> {
        check_limit(&req.prompt, self.context_limit)?;
        Ok(req
            .prompt
            .rfind("Answer:")
            .map(|i| req.prompt[i + "Answer:".len()..].trim().to_string())
            .unwrap_or_default())
    }
}

/// Mock answering with the first retrieved answer followed by the knowledge
/// sentences, so retrieval and enhancement both show up in the output.
#[derive(Debug, Clone, Default)]
pub struct LeadGenerator {
    pub context_limit: Option<usize>,
}

impl GenerationBackend for LeadGenerator {
    fn id(&self) -> String {
        "mock-lead".into()
    }

    fn complete(&self, req: &GenerationRequest) -> Result<String, GenError> {
        check_limit(&req.prompt, self.context_limit)?;
        let p = &req.prompt;
        let lead = p
            .find("\n\nAnswer: ")
            .map(|i| {
                let rest = &p[i + "\n\nAnswer: ".len()..];
                &rest[..rest.find("\n\n").unwrap_or(rest.len())]
            })
            .unwrap_or("");
        let bridge = crate::kgenhance::BRIDGE;
        let facts = p
            .find(bridge)
            .map(|i| {
                let rest = &p[i + bridge.len()..];
                rest[..rest.find("\n\n").unwrap_or(rest.len())].lines().collect::<Vec<_>>().join(". ")
            })
            .unwrap_or_default();
        Ok(match (lead.is_empty(), facts.is_empty()) {
            (_, true) => lead.to_string(),
            (true, false) => facts,
            (false, false) => format!("{lead} {facts}"),
        })
    }
}

/// Mock that replays a fixed sequence of outcomes, then a fallback text.
pub struct ScriptedGenerator {
    script: Mutex<VecDeque<Result<String, GenError>>>,
    fallback: String,
    calls: Mutex<usize>,
}

impl ScriptedGenerator {
    pub fn new(script: Vec<Result<String, GenError>>, fallback: &str) -> Self {
        Self {
            script: Mutex::new(script.into()),
            fallback: fallback.to_string(),
            calls: Mutex::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        *self.calls.lock().expect("calls lock")
    }
}

impl GenerationBackend for ScriptedGenerator {
    fn id(&self) -> String {
        "mock-scripted".into()
    }

    fn complete(&self, _req: &GenerationRequest) -> Result<String, GenError> {
        *self.calls.lock().expect("calls lock") += 1;
        self.script
            .lock()
            .expect("script lock")
            .pop_front()
            .unwrap_or_else(|| Ok(self.fallback.clone()))
    }
}

/// Wraps a backend and fails fatally on prompts containing `needle`.
pub struct FailOnGenerator {
    pub inner: Arc<dyn GenerationBackend>,
    pub needle: String,
}

impl GenerationBackend for FailOnGenerator {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn complete(&self, req: &GenerationRequest) -> Result<String, GenError> {
        if req.prompt.contains(&self.needle) {
            return Err(GenError::Fatal(format!("scripted failure on {:?}", self.needle)));
        }
        self.inner.complete(req)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultsHeader {
    pub version: u32,
    pub model_id: String,
    pub mode: Mode,
    pub query_count: usize,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryFailure {
    pub query_id: String,
    pub stage: String,
    pub error: String,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ResultLine {
    Header {
        header: ResultsHeader,
    },
    Failure {
        failure: QueryFailure,
    },
    Answer(GeneratedAnswer),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub header: ResultsHeader,
    pub answers: Vec<GeneratedAnswer>,
    pub failures: Vec<QueryFailure>,
}

impl BatchOutcome {
    pub fn failed_ids(&self) -> Vec<&str> {
        self.failures.iter().map(|f| f.query_id.as_str()).collect()
    }

    /// Header line, answers in input order, then failure lines.
    pub fn write(&self, out: &Path) -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(out)?);
        let line = |v: &ResultLine| serde_json::to_string(v).map_err(std::io::Error::other);
        writeln!(w, "{}", line(&ResultLine::Header { header: self.header.clone() })?)?;
        for a in &self.answers {
            writeln!(w, "{}", line(&ResultLine::Answer(a.clone()))?)?;
        }
        for f in &self.failures {
            writeln!(w, "{}", line(&ResultLine::Failure { failure: f.clone() })?)?;
        }
        w.flush()
    }

    pub fn read(path: &Path) -> std::io::Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut header = None;
        let mut answers = Vec::new();
        let mut failures = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ResultLine = serde_json::from_str(&line).map_err(|e| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}:{}: {e}", path.display(), i + 1))
            })?;
            match parsed {
                ResultLine::Header { header: h } => header = Some(h),
                ResultLine::Answer(a) => answers.push(a),
                ResultLine::Failure { failure } => failures.push(failure),
            }
        }
        let header = header.ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidData, "results file without header"))?;
        Ok(Self { header, answers, failures })
    }
}

/// Runs `per_query` over all queries on a bounded pool, isolating failures.
/// Output order follows the input regardless of scheduling.
pub fn run_batch<F>(queries: &[QaRecord], parallelism: usize, header: ResultsHeader, per_query: F) -> BatchOutcome
where
    F: Fn(&QaRecord) -> Result<GeneratedAnswer, QueryFailure> + Sync,
{
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .expect("thread pool");
    let results: Vec<_> = pool.install(|| queries.par_iter().map(&per_query).collect());
    let mut outcome = BatchOutcome {
        header: ResultsHeader {
            query_count: queries.len(),
            ..header
        },
        answers: Vec::new(),
        failures: Vec::new(),
    };
    for r in results {
        match r {
            Ok(a) => outcome.answers.push(a),
            Err(f) => {
                log::warn!("query {} failed at {}: {}", f.query_id, f.stage, f.error);
                outcome.failures.push(f);
            }
        }
    }
    outcome
}
