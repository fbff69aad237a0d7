//! Shared fixtures and independent oracles for integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use chrono::{TimeZone, Utc};
use graphctx::qqgraph::{ExtendedGraph, QQGraph};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Dense reference for query-personalized PageRank.
///
/// Builds the full transition matrix of the extended graph (query at index
/// `n`), sends dangling rows to the query, and solves
/// `(I - alpha * P^T) s = (1 - alpha) e_q` by LU decomposition.
pub fn dense_ppr_oracle(ext: &ExtendedGraph<'_>, alpha: f64) -> Vec<f64> {
    let base = ext.base;
    let n = base.node_count();
    let q = n;
    let pos: BTreeMap<&str, usize> = base.nodes().iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut w = DMatrix::<f64>::zeros(n + 1, n + 1);
    for (a, b, wt) in base.edges() {
        let (i, j) = (pos[a], pos[b]);
        w[(i, j)] += wt;
        w[(j, i)] += wt;
    }
    for (a, wt) in ext.query_edges() {
        let i = pos[a];
        w[(i, q)] += wt;
        w[(q, i)] += wt;
    }
    let mut p = DMatrix::<f64>::zeros(n + 1, n + 1);
    for i in 0..=n {
        let row_sum: f64 = w.row(i).iter().sum();
        if row_sum > 0.0 {
            for j in 0..=n {
                p[(i, j)] = w[(i, j)] / row_sum;
            }
        } else {
            p[(i, q)] = 1.0;
        }
    }
    let a = DMatrix::<f64>::identity(n + 1, n + 1) - p.transpose() * alpha;
    let mut rhs = DVector::<f64>::zeros(n + 1);
    rhs[q] = 1.0 - alpha;
    let s = a.lu().solve(&rhs).expect("oracle system is nonsingular");
    s.iter().copied().collect()
}

pub fn node_name(i: usize) -> String {
    format!("n{i:03}")
}

/// Random weighted graph: `n` nodes, each pair joined with probability
/// `p_edge`, weights uniform in `[threshold, 1]`.
pub fn random_graph<R: Rng>(rng: &mut R, n: usize, p_edge: f64, threshold: f64) -> QQGraph {
    let nodes: Vec<String> = (0..n).map(node_name).collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.gen_bool(p_edge) {
                edges.push((nodes[i].clone(), nodes[j].clone(), rng.gen_range(threshold..=1.0)));
            }
        }
    }
    QQGraph::from_parts(nodes, edges, threshold, "synthetic", Utc.timestamp_opt(0, 0).unwrap()).unwrap()
}

/// Random query attachment: each node joined with probability `p`.
pub fn random_query_edges<R: Rng>(rng: &mut R, g: &QQGraph, p: f64) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for id in g.nodes() {
        if rng.gen_bool(p) {
            out.push((id.clone(), rng.gen_range(g.threshold()..=1.0)));
        }
    }
    out
}

/// Random graph with exactly `e` distinct edges over `n` nodes.
pub fn random_graph_with_edges<R: Rng>(rng: &mut R, n: usize, e: usize, threshold: f64) -> QQGraph {
    let nodes: Vec<String> = (0..n).map(node_name).collect();
    let mut seen = std::collections::HashSet::new();
    let mut edges = Vec::with_capacity(e);
    while edges.len() < e {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a == b || !seen.insert((a.min(b), a.max(b))) {
            continue;
        }
        edges.push((nodes[a].clone(), nodes[b].clone(), rng.gen_range(threshold..=1.0)));
    }
    QQGraph::from_parts(nodes, edges, threshold, "synthetic", Utc.timestamp_opt(0, 0).unwrap()).unwrap()
}

/// LCS length by enumerating every subsequence of the shorter sequence.
pub fn brute_force_lcs(a: &[String], b: &[String]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    assert!(short.len() <= 16, "brute force limited to 16 tokens");
    let mut best = 0;
    for mask in 0u32..(1u32 << short.len()) {
        let len = mask.count_ones() as usize;
        if len <= best {
            continue;
        }
        let sub: Vec<&String> = (0..short.len()).filter(|i| mask & (1 << i) != 0).map(|i| &short[i]).collect();
        let mut it = long.iter();
        if sub.iter().all(|t| it.any(|x| x == *t)) {
            best = len;
        }
    }
    best
}

/// Clipped unigram overlap by counting each distinct token.
pub fn brute_force_overlap(a: &[String], b: &[String]) -> usize {
    let mut distinct: Vec<&String> = a.iter().chain(b.iter()).collect();
    distinct.sort();
    distinct.dedup();
    distinct
        .into_iter()
        .map(|t| a.iter().filter(|x| *x == t).count().min(b.iter().filter(|x| *x == t).count()))
        .sum()
}

pub fn f1(overlap: usize, cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 && ref_len == 0 {
        return 1.0;
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand_len as f64;
    let r = overlap as f64 / ref_len as f64;
    2.0 * p * r / (p + r)
}

/// One request as seen by [`MockServer`].
#[derive(Debug, Clone)]
pub struct Recorded {
    pub method: String,
    pub target: String,
    pub body: String,
}

/// Minimal HTTP/1.1 server on a loopback port. Each connection carries one
/// request; the handler returns `(status, json body)`.
pub struct MockServer {
    pub url: String,
    pub requests: std::sync::Arc<std::sync::Mutex<Vec<Recorded>>>,
}

impl MockServer {
    pub fn start<F>(handler: F) -> Self
    where
        F: Fn(&Recorded, usize) -> (u16, String) + Send + Sync + 'static,
    {
        use std::io::{BufRead, BufReader, Read, Write};
        use std::sync::{Arc, Mutex};
        let listener = std::net::TcpListener::bind("127.0.0.1:0").expect("bind loopback");
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = requests.clone();
        let handler = Arc::new(handler);
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let log = log.clone();
                let handler = handler.clone();
                std::thread::spawn(move || {
                    let mut reader = BufReader::new(stream.try_clone().unwrap());
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        return;
                    }
                    let mut parts = line.split_whitespace();
                    let method = parts.next().unwrap_or_default().to_string();
                    let target = parts.next().unwrap_or_default().to_string();
                    let mut length = 0usize;
                    loop {
                        let mut h = String::new();
                        reader.read_line(&mut h).unwrap();
                        if h == "\r\n" || h.is_empty() {
                            break;
                        }
                        if let Some((k, v)) = h.split_once(':') {
                            if k.eq_ignore_ascii_case("content-length") {
                                length = v.trim().parse().unwrap();
                            }
                        }
                    }
                    let mut body = vec![0u8; length];
                    reader.read_exact(&mut body).unwrap();
                    let req = Recorded {
                        method,
                        target,
                        body: String::from_utf8(body).unwrap(),
                    };
                    let n = {
                        let mut l = log.lock().unwrap();
                        l.push(req.clone());
                        l.len() - 1
                    };
                    let (status, out) = handler(&req, n);
                    let resp = format!(
                        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{out}",
                        out.len()
                    );
                    let _ = stream.write_all(resp.as_bytes());
                });
            }
        });
        Self { url, requests }
    }

    pub fn recorded(&self) -> Vec<Recorded> {
        self.requests.lock().unwrap().clone()
    }
}

pub fn data_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data")
}

/// The bundled toy config with its work directory moved under `work`.
pub fn toy_config(work: &std::path::Path) -> graphctx::pipeline::PipelineConfig {
    let mut cfg = graphctx::pipeline::PipelineConfig::load(&data_dir().join("toy_config.json")).expect("toy config");
    cfg.paths.work_dir = work.to_path_buf();
    cfg
}

pub type Key = (String, String, String);

const ENTITY_WORDS: &[&str] = &[
    "Ubuntu", "ubuntu", "Debian", "APT", "apt", "dpkg", "Linux", "GRUB", "Canonical", "OpenSSH", "7-Zip", "ISO file",
];
const KG_ONLY_WORDS: &[&str] = &["Unix", "free software", "C", "Windows"];
const RELATIONS: &[&str] = &["based on", "developer", "uses", "part of", "depends on"];

/// label -> (aliases, statements)
pub type KgTable = BTreeMap<String, (Vec<String>, Vec<(String, String)>)>;

/// A random enhancement fixture: up to 10 extracted triplets plus a small
/// knowledge graph over the same vocabulary.
pub struct EnhancerFixture {
    pub initial: Vec<Key>,
    pub kg: KgTable,
}

impl EnhancerFixture {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let pick = |rng: &mut R, xs: &[&str]| xs[rng.gen_range(0..xs.len())].to_string();
        let n = rng.gen_range(0..=10);
        let initial = (0..n)
            .map(|_| (pick(rng, ENTITY_WORDS), pick(rng, RELATIONS), pick(rng, ENTITY_WORDS)))
            .collect();
        let mut kg = BTreeMap::new();
        for label in ENTITY_WORDS {
            if !rng.gen_bool(0.6) {
                continue;
            }
            let aliases = if rng.gen_bool(0.3) {
                vec![pick(rng, ENTITY_WORDS).to_uppercase()]
            } else {
                Vec::new()
            };
            let statements = (0..rng.gen_range(0..5))
                .map(|_| {
                    let tail = if rng.gen_bool(0.7) { pick(rng, ENTITY_WORDS) } else { pick(rng, KG_ONLY_WORDS) };
                    (pick(rng, RELATIONS), tail)
                })
                .collect();
            kg.insert(label.to_string(), (aliases, statements));
        }
        Self { initial, kg }
    }

    pub fn kg_json(&self) -> String {
        let entities: serde_json::Map<String, serde_json::Value> = self
            .kg
            .iter()
            .enumerate()
            .map(|(i, (label, (aliases, statements)))| {
                (label.clone(), serde_json::json!({"id": format!("Q{i}"), "aliases": aliases, "statements": statements}))
            })
            .collect();
        serde_json::json!({ "entities": entities }).to_string()
    }

    /// Exact label, else the first label (in sorted order) equal to the
    /// entity ignoring case or carrying it as an alias.
    fn resolve(&self, entity: &str) -> Option<&Vec<(String, String)>> {
        if let Some((_, s)) = self.kg.get(entity) {
            return Some(s);
        }
        let lower = entity.to_lowercase();
        self.kg
            .iter()
            .find(|(l, (aliases, _))| l.to_lowercase() == lower || aliases.iter().any(|a| a.to_lowercase() == lower))
            .map(|(_, (_, s))| s)
    }
}

/// Set-algebra reference for the whole enhancement chain.
pub struct EnhancerReference {
    pub entities: std::collections::BTreeSet<String>,
    pub candidates: std::collections::BTreeSet<Key>,
    pub filtered: std::collections::BTreeSet<Key>,
    pub merged: std::collections::BTreeSet<Key>,
    pub sentences: std::collections::BTreeSet<String>,
}

pub fn enhancer_reference(f: &EnhancerFixture) -> EnhancerReference {
    use std::collections::BTreeSet;
    let initial: BTreeSet<Key> = f.initial.iter().cloned().collect();
    let entities: BTreeSet<String> = initial.iter().flat_map(|(h, _, t)| [h.clone(), t.clone()]).collect();
    let mut candidates = BTreeSet::new();
    for e in &entities {
        if let Some(statements) = f.resolve(e) {
            for (r, t) in statements {
                candidates.insert((e.clone(), r.clone(), t.clone()));
            }
        }
    }
    let lowered: BTreeSet<String> = entities.iter().map(|e| e.to_lowercase()).collect();
    let filtered: BTreeSet<Key> = candidates.iter().filter(|(_, _, t)| lowered.contains(&t.to_lowercase())).cloned().collect();
    let merged: BTreeSet<Key> = initial.union(&filtered).cloned().collect();
    let sentences = merged.iter().map(|(h, r, t)| format!("{h} {r} {t}")).collect();
    EnhancerReference {
        entities,
        candidates,
        filtered,
        merged,
        sentences,
    }
}

pub fn record(id: &str, title: &str, answer: &str) -> graphctx::corpus::QaRecord {
    let at = Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap();
    graphctx::corpus::QaRecord {
        question_id: id.into(),
        title: title.into(),
        body: String::new(),
        tags: Vec::new(),
        created_at: at,
        answers: vec![graphctx::corpus::AnswerRecord {
            body: answer.into(),
            accepted: true,
            created_at: at,
        }],
    }
}

/// Runs the library enhancer on a fixture: a fixed extractor returns the
/// initial triplets, the fixture KG serves lookups.
pub fn run_enhancer(
    f: &EnhancerFixture,
) -> (graphctx::kgenhance::EnhancedContext, graphctx::kgenhance::EnhanceTrace, graphctx::kgenhance::RetrievedContext) {
    use graphctx::kgenhance::*;
    use std::sync::Arc;
    let extractor = FixedExtractor {
        name: "fixed".into(),
        source: TripletSource::Rebel,
        items: f.initial.iter().map(|(h, r, t)| RawTriplet::new(h, r, t)).collect(),
    };
    let kg = FixtureKg::from_json("oracle", &f.kg_json()).expect("fixture kg");
    let enhancer = Enhancer::new(vec![Arc::new(extractor)], Arc::new(kg), EnhanceConfig::default());
    let retrieved = RetrievedContext {
        query_id: "q".into(),
        pairs: vec![graphctx::kgenhance::ContextPair {
            question: record("p1", "How do I install packages on Ubuntu?", "Use apt."),
            answer: "Use apt.".into(),
        }],
    };
    let (ctx, _, trace) = enhancer.enhance_traced(retrieved.clone()).expect("enhance");
    (ctx, trace, retrieved)
}

pub fn keys(ts: &[graphctx::kgenhance::Triplet]) -> std::collections::BTreeSet<Key> {
    ts.iter().map(|t| (t.head.clone(), t.relation.clone(), t.tail.clone())).collect()
}

/// Compares every stage of the library chain against the reference.
pub fn check_enhancer(f: &EnhancerFixture) -> Result<(), String> {
    use std::collections::BTreeSet;
    let want = enhancer_reference(f);
    let (ctx, trace, retrieved) = run_enhancer(f);
    let entities: BTreeSet<String> = trace.entities.iter().map(str::to_string).collect();
    if entities != want.entities {
        return Err(format!("entities {entities:?} != {:?}", want.entities));
    }
    if keys(&trace.candidates) != want.candidates {
        return Err(format!("candidates {:?} != {:?}", keys(&trace.candidates), want.candidates));
    }
    if keys(&trace.filtered) != want.filtered {
        return Err(format!("filtered {:?} != {:?}", keys(&trace.filtered), want.filtered));
    }
    if keys(&trace.merged) != want.merged || trace.merged.len() != want.merged.len() {
        return Err(format!("merged {:?} != {:?}", keys(&trace.merged), want.merged));
    }
    let sentences: BTreeSet<String> = ctx.sentences.iter().cloned().collect();
    if sentences != want.sentences || ctx.sentences.len() != sentences.len() {
        return Err(format!("sentences {:?} != {:?}", ctx.sentences, want.sentences));
    }
    let mut expected = retrieved.render();
    expected.push_str(graphctx::kgenhance::BRIDGE);
    for s in &ctx.sentences {
        expected.push_str(s);
        expected.push('\n');
    }
    if ctx.assembled != expected {
        return Err("assembled context differs from render + bridge + sentences".into());
    }
    Ok(())
}

/// Two random token sequences over a small vocabulary, 0..=12 tokens each.
pub fn random_token_pair<R: Rng>(rng: &mut R) -> (Vec<String>, Vec<String>) {
    const VOCAB: &[&str] = &["the", "cat", "sat", "on", "mat", "a", "dog", "ran", "apt", "iso"];
    let seq = |rng: &mut R| -> Vec<String> {
        let n = rng.gen_range(0..=12);
        (0..n).map(|_| VOCAB[rng.gen_range(0..VOCAB.len())].to_string()).collect()
    };
    let a = seq(rng);
    let b = seq(rng);
    (a, b)
}

/// ROUGE-1 and ROUGE-L against brute-force counting and subsequence
/// enumeration on `n` random pairs; counts must match exactly.
pub fn check_metric_pairs(n: usize, seed: u64) -> Result<(), String> {
    use graphctx::evaluate::{lcs_len, rouge1_f, rougeL_f, tokenize, unigram_overlap};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let (a, b) = random_token_pair(&mut rng);
        let (ca, cb) = (a.join(" "), b.join(" "));
        if tokenize(&ca) != a {
            return Err(format!("pair {i}: tokenize changed {a:?}"));
        }
        let overlap = brute_force_overlap(&a, &b);
        let lcs = brute_force_lcs(&a, &b);
        if unigram_overlap(&a, &b) != overlap {
            return Err(format!("pair {i}: overlap {} != {overlap}", unigram_overlap(&a, &b)));
        }
        if lcs_len(&a, &b) != lcs {
            return Err(format!("pair {i}: lcs {} != {lcs}", lcs_len(&a, &b)));
        }
        let (r1, rl) = (rouge1_f(&ca, &cb), rougeL_f(&ca, &cb));
        if (r1 - f1(overlap, a.len(), b.len())).abs() > 1e-12 || (rl - f1(lcs, a.len(), b.len())).abs() > 1e-12 {
            return Err(format!("pair {i}: f1 mismatch r1={r1} rl={rl}"));
        }
    }
    Ok(())
}
