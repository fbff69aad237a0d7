//! Acceptance gate. Runs every criterion, prints one
//! `ACCEPTANCE <name> PASS|FAIL` line each and exits nonzero on any failure.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{TimeZone, Utc};
use common::{dense_ppr_oracle, random_graph, random_graph_with_edges, random_query_edges, EnhancerFixture};
use graphctx::corpus::{self, AnswerRecord, CorpusFormat, QaRecord, INST_CLOSE, INST_OPEN};
use graphctx::embedding::{Embedder, EmbeddingCache, EmbeddingVector, FixedEmbedder};
use graphctx::evaluate::{rouge1_f, rougeL_f};
use graphctx::pipeline::{validate_config, BackendSet, Enhancement, Pipeline, PipelineConfig, Retrieval};
use graphctx::qqgraph::{self, query_aware_pagerank, top_k, ExtendedGraph, PprParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Check = fn() -> Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn default_fidelity() -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("empty.json");
    std::fs::write(&path, "{}").map_err(|e| e.to_string())?;
    for cfg in [validate_config("{}").map_err(|e| e.to_string())?, PipelineConfig::load(&path).map_err(|e| e.to_string())?] {
        let got = (cfg.threshold, cfg.alpha, cfg.max_iter, cfg.tol, cfg.k, cfg.dim);
        ensure(got == (0.8, 0.85, 100, 1e-6, 2, 1024), || format!("defaults {got:?}"))?;
        let p = cfg.ppr_params();
        ensure((p.alpha, p.max_iter, p.tol) == (0.85, 100, 1e-6), || format!("ppr params {p:?}"))?;
    }
    Ok(())
}

const TIGHT: PprParams = PprParams {
    alpha: 0.85,
    max_iter: 5000,
    tol: 1e-15,
};

fn ppr_oracle_suite() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut dangling, mut disconnected) = (0, 0);
    for i in 0..60 {
        let n = rng.gen_range(1..=12);
        let p_edge = rng.gen_range(0.0..0.5);
        let g = random_graph(&mut rng, n, p_edge, 0.8);
        // every fifth fixture leaves the query without neighbors
        let qe = if i % 5 == 0 { Vec::new() } else { random_query_edges(&mut rng, &g, 0.35) };
        if qe.is_empty() {
            disconnected += 1;
        }
        if (0..n).any(|v| g.neighbors(v).is_empty()) {
            dangling += 1;
        }
        let ext = ExtendedGraph::from_query_edges(&g, "q", qe).map_err(|e| e.to_string())?;
        let r = query_aware_pagerank(&ext, TIGHT).map_err(|e| e.to_string())?;
        let oracle = dense_ppr_oracle(&ext, TIGHT.alpha);
        let mut got = r.scores().to_vec();
        got.push(r.query_score);
        let err = linf(&got, &oracle);
        ensure(err <= 1e-8, || format!("fixture {i}: L-inf {err:e}"))?;
        let mass = r.total_mass();
        ensure((mass - 1.0).abs() <= 1e-9, || format!("fixture {i}: mass {mass}"))?;
    }
    ensure(dangling > 0 && disconnected > 0, || format!("coverage: {dangling} dangling, {disconnected} disconnected"))
}

fn rank_invariance() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for i in 0..20 {
        let n = rng.gen_range(3..=40);
        let p_edge = rng.gen_range(0.05..0.4);
        let g = random_graph(&mut rng, n, p_edge, 0.8);
        let qe = random_query_edges(&mut rng, &g, 0.3);
        let ext = ExtendedGraph::from_query_edges(&g, "q", qe).map_err(|e| e.to_string())?;
        let params = PprParams::default();
        let base = query_aware_pagerank(&ext, params).map_err(|e| e.to_string())?;
        for c in [0.1, 3.0, 100.0] {
            let scaled = g.scaled(c);
            let r = query_aware_pagerank(&ext.scaled_onto(&scaled, c), params).map_err(|e| e.to_string())?;
            for k in [1, 2, 5, n] {
                let a = top_k("q", &base, k).map_err(|e| e.to_string())?;
                let b = top_k("q", &r, k).map_err(|e| e.to_string())?;
                ensure(a.ids() == b.ids(), || format!("fixture {i}, c={c}, k={k}: {:?} vs {:?}", a.ids(), b.ids()))?;
            }
        }
    }
    Ok(())
}

fn enhancer_oracle() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut kept_any = false;
    for i in 0..200 {
        let f = EnhancerFixture::random(&mut rng);
        ensure(f.initial.len() <= 10, || "fixture too large".into())?;
        common::check_enhancer(&f).map_err(|e| format!("fixture {i}: {e}"))?;
        kept_any |= !common::enhancer_reference(&f).filtered.is_empty();
    }
    ensure(kept_any, || "no fixture exercised a non-empty filter".into())
}

fn metric_oracles() -> Result<(), String> {
    common::check_metric_pairs(200, 9)?;
    let r1 = rouge1_f("the cat sat", "the cat");
    ensure((r1 - 0.8).abs() <= 1e-9, || format!("rouge-1 {r1}"))?;
    let rl = rougeL_f("a b c d", "a c b d");
    ensure((rl - 0.75).abs() <= 1e-9, || format!("rouge-l {rl}"))
}

fn instruction_round_trip() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    const PIECES: &[&str] = &[
        "mount", "the", "ISO", "C:\\new\\dir", "\\n", "line\nbreak", "tab\there", "\\\\", "ümlaut", "\"quoted\"", "a\r\nb", "[x]", "Answer:", "\\",
    ];
    let text = |rng: &mut ChaCha8Rng, min: usize| -> String {
        let n = rng.gen_range(min..min + 15);
        (0..n).map(|_| PIECES[rng.gen_range(0..PIECES.len())]).collect::<Vec<_>>().join(" ")
    };
    let at = Utc.with_ymd_and_hms(2019, 1, 1, 0, 0, 0).unwrap();
    let records: Vec<QaRecord> = (0..100)
        .map(|i| QaRecord {
            question_id: format!("r{i:03}"),
            title: text(&mut rng, 1),
            body: text(&mut rng, 1),
            tags: Vec::new(),
            created_at: at,
            answers: vec![AnswerRecord {
                body: text(&mut rng, 10),
                accepted: true,
                created_at: at,
            }],
        })
        .collect();
    let split = corpus::temporal_split(&records, Utc.with_ymd_and_hms(2030, 1, 1, 0, 0, 0).unwrap());
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("inst.txt");
    let written = corpus::export_instructions(&split, &path).map_err(|e| e.to_string())?;
    ensure(written == 100, || format!("wrote {written}"))?;
    let raw = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
    ensure(raw.lines().count() == 100, || format!("{} lines", raw.lines().count()))?;
    for (i, line) in raw.lines().enumerate() {
        ensure(line.matches("[INST]").count() == 1 && line.matches("[\\INST] Answer:").count() == 1, || {
            format!("line {i}: markers not exactly once")
        })?;
        ensure(line.starts_with(INST_OPEN), || format!("line {i} does not open with the marker"))?;
    }
    let parsed = corpus::read_instructions(&path).map_err(|e| e.to_string())?;
    ensure(parsed.len() == 100, || format!("parsed {}", parsed.len()))?;
    for (r, ex) in records.iter().zip(&parsed) {
        let (q, a) = ex.parse().map_err(|e| e.to_string())?;
        ensure(q == r.question_text() && a == r.answers[0].body, || format!("{} not recovered", r.question_id))?;
        ensure(ex.text.matches(INST_CLOSE).count() == 1, || format!("{}: close marker count", r.question_id))?;
    }
    Ok(())
}

fn toy_run(dir: &std::path::Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    let cfg = common::toy_config(dir);
    let out = Pipeline::from_config(cfg.clone()).map_err(|e| e.to_string())?.run().map_err(|e| e.to_string())?;
    ensure(out.outcome.answers.len() == 6 && out.outcome.failures.is_empty(), || "toy run incomplete".into())?;
    let results = std::fs::read(cfg.paths.results_path()).map_err(|e| e.to_string())?;
    let report = std::fs::read(cfg.paths.report_path()).map_err(|e| e.to_string())?;
    Ok((results, report))
}

fn end_to_end_determinism() -> Result<(), String> {
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    let records = corpus::ingest(&common::data_dir().join("toy_corpus.jsonl"), CorpusFormat::Jsonl).map_err(|e| e.to_string())?;
    ensure(records.records.len() == 20, || format!("toy corpus has {} questions", records.records.len()))?;
    let first = toy_run(a.path())?;
    let second = toy_run(b.path())?;
    ensure(first.0 == second.0, || "results files differ".into())?;
    ensure(first.1 == second.1, || "score reports differ".into())
}

/// Minimum per-query retrieval time over repeated runs on a random graph of
/// `n` nodes and `e` edges; the query joins nodes by cosine as in production.
fn retrieval_time(n: usize, e: usize, seed: u64) -> Duration {
    const DIM: usize = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = random_graph_with_edges(&mut rng, n, e, 0.5);
    let vector = |rng: &mut ChaCha8Rng| {
        let v: Vec<f32> = (0..DIM).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        EmbeddingVector::new(v).expect("finite")
    };
    let vectors: BTreeMap<String, EmbeddingVector> = g.nodes().iter().map(|id| (id.clone(), vector(&mut rng))).collect();
    let queries: Vec<EmbeddingVector> = (0..5).map(|_| vector(&mut rng)).collect();
    let mut best = Duration::MAX;
    for _ in 0..12 {
        let t = Instant::now();
        for q in &queries {
            let (set, _) = qqgraph::retrieve(&g, "q", q, &vectors, PprParams::default(), 2).expect("retrieve");
            std::hint::black_box(set);
        }
        best = best.min(t.elapsed() / queries.len() as u32);
    }
    best
}

fn complexity_check() -> Result<(), String> {
    let sizes = [(1000, 5000), (2000, 10_000), (4000, 20_000)];
    retrieval_time(500, 2500, 0); // warm-up
    let times: Vec<Duration> = sizes.iter().map(|&(n, e)| retrieval_time(n, e, n as u64)).collect();
    let mut msg = Vec::new();
    let mut ok = true;
    for w in 0..2 {
        let ratio = times[w + 1].as_secs_f64() / times[w].as_secs_f64();
        msg.push(format!("{:?}->{:?}: {ratio:.2}x", sizes[w], sizes[w + 1]));
        ok &= ratio <= 2.5;
    }
    println!("  per-query times {times:?}; {}", msg.join(", "));
    ensure(ok, || msg.join(", "))
}

/// Four train questions and one query, embedded by hand so that the most
/// cosine-similar question (A) is isolated while the runner-up (B) sits in a
/// tight cluster with C and D.
fn disagreement_fixture(dir: &std::path::Path) -> Result<(PipelineConfig, BackendSet), String> {
    let vecs: [(&str, [f32; 3]); 5] = [
        ("A", [0.95, 0.312_25, 0.0]),
        ("B", [0.90, 0.0, 0.435_89]),
        ("C", [0.75, 0.0, 0.661_44]),
        ("D", [0.70, -0.1, std::f32::consts::FRAC_1_SQRT_2]),
        ("Q", [1.0, 0.0, 0.0]),
    ];
    let at = |y| Utc.with_ymd_and_hms(y, 1, 1, 0, 0, 0).unwrap();
    let mut table = HashMap::new();
    let mut records = Vec::new();
    for (name, v) in vecs {
        let r = QaRecord {
            question_id: format!("x{name}"),
            title: format!("Question {name}"),
            body: format!("Body of question {name}"),
            tags: Vec::new(),
            created_at: at(if name == "Q" { 2022 } else { 2019 }),
            answers: vec![AnswerRecord {
                body: format!("Accepted answer {name} with enough words to pass the length filter"),
                accepted: true,
                created_at: at(if name == "Q" { 2022 } else { 2019 }),
            }],
        };
        table.insert(r.question_text(), v.to_vec());
        records.push(r);
    }
    let corpus_path = dir.join("fixture.jsonl");
    corpus::write_jsonl(&records, &corpus_path).map_err(|e| e.to_string())?;
    let mut cfg = common::toy_config(&dir.join("work"));
    cfg.paths.corpus = vec![corpus_path];
    cfg.dim = 3;
    cfg.threshold = 0.88;
    cfg.k = 1;
    cfg.modes.enhancement = Enhancement::Off;
    let mut backends = BackendSet::from_config(&cfg).map_err(|e| e.to_string())?;
    let fixed = FixedEmbedder {
        name: "disagree".into(),
        table,
    };
    backends.embedder = Arc::new(Embedder::new(Box::new(fixed), EmbeddingCache::in_memory(), 3));
    Ok((cfg, backends))
}

fn ablation_matrix() -> Result<(), String> {
    for retrieval in [Retrieval::Graph, Retrieval::Text] {
        for enhancement in [Enhancement::On, Enhancement::Off] {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let mut cfg = common::toy_config(dir.path());
            cfg.modes.retrieval = retrieval;
            cfg.modes.enhancement = enhancement;
            let out = Pipeline::from_config(cfg).map_err(|e| e.to_string())?.run().map_err(|e| e.to_string())?;
            ensure(out.outcome.answers.len() == 6 && out.outcome.failures.is_empty(), || {
                format!("{retrieval:?}/{enhancement:?}: {} answers, {} failures", out.outcome.answers.len(), out.outcome.failures.len())
            })?;
        }
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut top = BTreeMap::new();
    for retrieval in [Retrieval::Graph, Retrieval::Text] {
        let (mut cfg, backends) = disagreement_fixture(dir.path())?;
        cfg.modes.retrieval = retrieval;
        let mut p = Pipeline::new(cfg, backends).map_err(|e| e.to_string())?;
        let prepared = p.prepare().map_err(|e| e.to_string())?;
        let q = prepared.split.find_test("xQ").ok_or("query missing")?.clone();
        let (set, _) = p.retrieve(&prepared, &q).map_err(|e| e.to_string())?;
        top.insert(format!("{retrieval:?}"), set.ids().iter().map(|s| s.to_string()).collect::<Vec<_>>());

        if let Some(g) = &prepared.graph {
            // the oracle confirms the fixture: B outranks A under the walk
            let ext = qqgraph::extend_with_query(g, "xQ", &prepared.query_vectors["xQ"], &prepared.train_vectors).map_err(|e| e.to_string())?;
            let s = dense_ppr_oracle(&ext, 0.85);
            let idx = |id: &str| g.index_of(id).expect("node");
            ensure(g.neighbors(idx("xA")).is_empty(), || "A is not isolated".into())?;
            ensure(s[idx("xB")] > s[idx("xA")], || format!("oracle: B {} <= A {}", s[idx("xB")], s[idx("xA")]))?;
        }
    }
    ensure(top["Text"] == ["xA"] && top["Graph"] == ["xB"], || format!("top-1 per mode {top:?}"))
}

fn main() {
    let criteria: [(&str, Check, Duration); 9] = [
        ("default_fidelity", default_fidelity, Duration::from_secs(1)),
        ("ppr_oracle_suite", ppr_oracle_suite, Duration::from_secs(10)),
        ("rank_invariance", rank_invariance, Duration::from_secs(5)),
        ("enhancer_oracle", enhancer_oracle, Duration::from_secs(2)),
        ("metric_oracles", metric_oracles, Duration::from_secs(60)),
        ("instruction_round_trip", instruction_round_trip, Duration::from_secs(60)),
        ("end_to_end_determinism", end_to_end_determinism, Duration::from_secs(30)),
        ("complexity_check", complexity_check, Duration::from_secs(120)),
        ("ablation_matrix", ablation_matrix, Duration::from_secs(60)),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check, limit) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = t.elapsed();
        let outcome = outcome.and_then(|()| ensure(elapsed < limit, || format!("took {elapsed:?}, limit {limit:?}")));
        match outcome {
            Ok(()) => println!("ACCEPTANCE {name} PASS ({elapsed:.2?})"),
            Err(e) => {
                failed += 1;
                println!("ACCEPTANCE {name} FAIL ({elapsed:.2?}): {e}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
