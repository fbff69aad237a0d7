//! Question-question similarity graph and query-personalized PageRank.
//!
//! The base graph is built once over the corpus and shared read-only. Each
//! query is attached as an extra node (never stored in the base graph), and a
//! random walk with restart at the query node ranks the corpus questions.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedding::{cosine, EmbeddingError, EmbeddingVector};

pub const GRAPH_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_THRESHOLD: f64 = 0.8;
pub const DEFAULT_ALPHA: f64 = 0.85;
pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_K: usize = 2;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("graph needs at least one vector")]
    Empty,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error("cannot access graph file: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt graph file: {0}")]
    Corrupt(String),
    #[error("graph file version {found} is not supported (expected {supported})")]
    VersionMismatch { found: u64, supported: u32 },
    #[error("graph metadata mismatch: {0}")]
    MetadataMismatch(String),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// A node that could not take part in similarity computation.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeDiagnostic {
    pub question_id: String,
    pub message: String,
}

/// Undirected weighted similarity graph over corpus question ids.
///
/// Nodes are kept sorted by id; edges are stored once with the endpoint
/// indices ordered `a < b`. A CSR adjacency is derived on construction.
#[derive(Debug, Clone)]
pub struct QQGraph {
    nodes: Arc<Vec<String>>,
    edges: Vec<(usize, usize, f64)>,
    threshold: f64,
    built_at: DateTime<Utc>,
    backend_id: String,
    index: HashMap<String, usize>,
    offsets: Vec<usize>,
    neighbors: Vec<(usize, f64)>,
    strength: Vec<f64>,
}

impl PartialEq for QQGraph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes
            && self.edges == other.edges
            && self.threshold == other.threshold
            && self.built_at == other.built_at
            && self.backend_id == other.backend_id
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(GraphError::InvalidParameter(format!(
            "threshold must be in (0, 1), got {threshold}"
        )));
    }
    Ok(())
}

impl QQGraph {
    /// Assembles a graph from explicit parts, enforcing every invariant.
    pub fn from_parts(
        nodes: Vec<String>,
        edges: Vec<(String, String, f64)>,
        threshold: f64,
        backend_id: &str,
        built_at: DateTime<Utc>,
    ) -> Result<Self> {
        check_threshold(threshold)?;
        let mut nodes = nodes;
        nodes.sort();
        if nodes.windows(2).any(|w| w[0] == w[1]) {
            return Err(GraphError::Invalid("duplicate node id".into()));
        }
        let index: HashMap<String, usize> =
            nodes.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        let mut indexed = Vec::with_capacity(edges.len());
        let mut seen = HashSet::with_capacity(edges.len());
        for (a, b, w) in edges {
            let (Some(&ia), Some(&ib)) = (index.get(&a), index.get(&b)) else {
                return Err(GraphError::Invalid(format!("edge ({a}, {b}) names an unknown node")));
            };
            if ia == ib {
                return Err(GraphError::Invalid(format!("self-loop on {a}")));
            }
            if !w.is_finite() || w < threshold {
                return Err(GraphError::Invalid(format!(
                    "edge ({a}, {b}) weight {w} is below threshold {threshold}"
                )));
            }
            let key = (ia.min(ib), ia.max(ib));
            if !seen.insert(key) {
                return Err(GraphError::Invalid(format!("duplicate edge ({a}, {b})")));
            }
            indexed.push((key.0, key.1, w));
        }
        indexed.sort_by_key(|x| (x.0, x.1));
        Ok(Self::assemble(nodes, indexed, threshold, backend_id, built_at, index))
    }

    fn assemble(
        nodes: Vec<String>,
        edges: Vec<(usize, usize, f64)>,
        threshold: f64,
        backend_id: &str,
        built_at: DateTime<Utc>,
        index: HashMap<String, usize>,
    ) -> Self {
        let n = nodes.len();
        let mut degree = vec![0usize; n];
        for &(a, b, _) in &edges {
            degree[a] += 1;
            degree[b] += 1;
        }
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        for d in &degree {
            offsets.push(offsets.last().unwrap() + d);
        }
        let mut fill = offsets.clone();
        let mut neighbors = vec![(0usize, 0.0f64); offsets[n]];
        let mut strength = vec![0.0f64; n];
        for &(a, b, w) in &edges {
            neighbors[fill[a]] = (b, w);
            fill[a] += 1;
            neighbors[fill[b]] = (a, w);
            fill[b] += 1;
            strength[a] += w;
            strength[b] += w;
        }
        Self {
            nodes: Arc::new(nodes),
            edges,
            threshold,
            built_at,
            backend_id: backend_id.to_string(),
            index,
            offsets,
            neighbors,
            strength,
        }
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Edges as `(id_a, id_b, weight)` with `id_a < id_b`.
    pub fn edges(&self) -> impl Iterator<Item = (&str, &str, f64)> + '_ {
        self.edges
            .iter()
            .map(|&(a, b, w)| (self.nodes[a].as_str(), self.nodes[b].as_str(), w))
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn built_at(&self) -> DateTime<Utc> {
        self.built_at
    }

    pub fn backend_id(&self) -> &str {
        &self.backend_id
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn neighbors(&self, node: usize) -> &[(usize, f64)] {
        &self.neighbors[self.offsets[node]..self.offsets[node + 1]]
    }

    pub fn weight(&self, a: &str, b: &str) -> Option<f64> {
        let (ia, ib) = (self.index_of(a)?, self.index_of(b)?);
        self.neighbors(ia).iter().find(|(j, _)| *j == ib).map(|(_, w)| *w)
    }

    /// Returns an error unless this graph was built with the given settings.
    pub fn ensure_matches(&self, threshold: f64, backend_id: &str) -> Result<()> {
        if self.threshold != threshold {
            return Err(GraphError::MetadataMismatch(format!(
                "graph threshold {} != configured {}",
                self.threshold, threshold
            )));
        }
        if self.backend_id != backend_id {
            return Err(GraphError::MetadataMismatch(format!(
                "graph backend {:?} != configured {:?}",
                self.backend_id, backend_id
            )));
        }
        Ok(())
    }

    /// Same graph with every edge weight and the threshold multiplied by
    /// `factor`. The result is for analysis only; its threshold may leave (0, 1).
    pub fn scaled(&self, factor: f64) -> Self {
        assert!(factor > 0.0, "scale factor must be positive");
        let edges = self.edges.iter().map(|&(a, b, w)| (a, b, w * factor)).collect();
        Self::assemble(
            self.nodes.to_vec(),
            edges,
            self.threshold * factor,
            &self.backend_id,
            self.built_at,
            self.index.clone(),
        )
    }
}

/// Builds the graph: an edge joins `a != b` iff `cosine(a, b) >= threshold`.
///
/// Zero-norm vectors become isolated nodes and are reported back. Pairs are
/// scored in parallel; rows are merged in node order, so the result does not
/// depend on scheduling.
pub fn build_graph(
    vectors: &BTreeMap<String, EmbeddingVector>,
    threshold: f64,
    backend_id: &str,
) -> Result<(QQGraph, Vec<NodeDiagnostic>)> {
    use rayon::prelude::*;
    check_threshold(threshold)?;
    if vectors.is_empty() {
        return Err(GraphError::Empty);
    }
    let ids: Vec<&String> = vectors.keys().collect();
    let vecs: Vec<&EmbeddingVector> = vectors.values().collect();
    let dim = vecs[0].dim();
    if let Some(v) = vecs.iter().find(|v| v.dim() != dim) {
        return Err(EmbeddingError::DimensionMismatch {
            expected: dim,
            got: v.dim(),
        }
        .into());
    }
    let mut diagnostics = Vec::new();
    let usable: Vec<bool> = vecs
        .iter()
        .zip(&ids)
        .map(|(v, id)| {
            let ok = v.norm() > 0.0;
            if !ok {
                diagnostics.push(NodeDiagnostic {
                    question_id: (*id).clone(),
                    message: "zero-norm embedding, node kept isolated".into(),
                });
            }
            ok
        })
        .collect();
    for d in &diagnostics {
        log::warn!("{}: {}", d.question_id, d.message);
    }

    let n = ids.len();
    let rows: Vec<Vec<(usize, usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            if !usable[i] {
                return Vec::new();
            }
            ((i + 1)..n)
                .filter(|&j| usable[j])
                .filter_map(|j| {
                    let s = cosine(vecs[i], vecs[j]).ok()?;
                    (s >= threshold).then_some((i, j, s))
                })
                .collect()
        })
        .collect();
    let edges: Vec<(usize, usize, f64)> = rows.into_iter().flatten().collect();
    let nodes: Vec<String> = ids.into_iter().cloned().collect();
    let index = nodes.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
    Ok((
        QQGraph::assemble(nodes, edges, threshold, backend_id, Utc::now(), index),
        diagnostics,
    ))
}

/// The base graph plus a query node. The query is addressed by position
/// (one past the last corpus node), so it cannot alias a corpus id.
#[derive(Debug, Clone)]
pub struct ExtendedGraph<'g> {
    pub base: &'g QQGraph,
    pub query_id: String,
    /// `(corpus node index, weight)`, ascending by index.
    query_edges: Vec<(usize, f64)>,
    /// Weight of the edge from each corpus node back to the query (0 if none).
    back_weight: Vec<f64>,
}

impl<'g> ExtendedGraph<'g> {
    pub fn query_edges(&self) -> impl Iterator<Item = (&str, f64)> + '_ {
        self.query_edges
            .iter()
            .map(|&(i, w)| (self.base.nodes[i].as_str(), w))
    }

    pub fn query_degree(&self) -> usize {
        self.query_edges.len()
    }

    /// Attaches a query with explicit edges, e.g. for synthetic graphs.
    pub fn from_query_edges(base: &'g QQGraph, query_id: &str, edges: Vec<(String, f64)>) -> Result<Self> {
        let mut indexed = Vec::with_capacity(edges.len());
        for (id, w) in edges {
            let i = base
                .index_of(&id)
                .ok_or_else(|| GraphError::Invalid(format!("query edge to unknown node {id}")))?;
            if !w.is_finite() || w < base.threshold {
                return Err(GraphError::Invalid(format!(
                    "query edge to {id} has weight {w} below threshold {}",
                    base.threshold
                )));
            }
            indexed.push((i, w));
        }
        indexed.sort_by_key(|&(i, _)| i);
        if indexed.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(GraphError::Invalid("duplicate query edge".into()));
        }
        Ok(Self::with_edges(base, query_id, indexed))
    }

    /// This query attachment moved onto `base` (a [`QQGraph::scaled`] copy of
    /// the original) with its weights multiplied by `factor`.
    pub fn scaled_onto<'h>(&self, base: &'h QQGraph, factor: f64) -> ExtendedGraph<'h> {
        assert_eq!(base.nodes, self.base.nodes, "scaled base must share nodes");
        let edges = self.query_edges.iter().map(|&(i, w)| (i, w * factor)).collect();
        ExtendedGraph::with_edges(base, &self.query_id, edges)
    }

    fn with_edges(base: &'g QQGraph, query_id: &str, query_edges: Vec<(usize, f64)>) -> Self {
        let mut back_weight = vec![0.0; base.node_count()];
        for &(i, w) in &query_edges {
            back_weight[i] = w;
        }
        Self {
            base,
            query_id: query_id.to_string(),
            query_edges,
            back_weight,
        }
    }
}

/// Connects the query to every corpus node whose cosine similarity reaches
/// the graph threshold. Corpus nodes without a vector, or with a zero norm,
/// get no query edge.
pub fn extend_with_query<'g>(
    graph: &'g QQGraph,
    query_id: &str,
    query_vec: &EmbeddingVector,
    vectors: &BTreeMap<String, EmbeddingVector>,
) -> Result<ExtendedGraph<'g>> {
    let mut query_edges = Vec::new();
    for (i, id) in graph.nodes.iter().enumerate() {
        let Some(v) = vectors.get(id) else { continue };
        if v.dim() != query_vec.dim() {
            return Err(EmbeddingError::DimensionMismatch {
                expected: v.dim(),
                got: query_vec.dim(),
            }
            .into());
        }
        match cosine(query_vec, v) {
            Ok(s) if s >= graph.threshold => query_edges.push((i, s)),
            Ok(_) | Err(EmbeddingError::ZeroNorm) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(ExtendedGraph::with_edges(graph, query_id, query_edges))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PprParams {
    pub alpha: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for PprParams {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }
}

impl PprParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(GraphError::InvalidParameter(format!(
                "alpha must be in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.max_iter < 1 {
            return Err(GraphError::InvalidParameter("max_iter must be >= 1".into()));
        }
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(GraphError::InvalidParameter(format!(
                "tol must be > 0, got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

/// Stationary scores of the query-restarted walk.
#[derive(Debug, Clone, PartialEq)]
pub struct PprResult {
    ids: Arc<Vec<String>>,
    scores: Vec<f64>,
    /// Mass left on the query node; excluded from ranking.
    pub query_score: f64,
    pub alpha: f64,
    pub iterations_used: usize,
    pub converged: bool,
}

impl PprResult {
    pub fn get(&self, id: &str) -> Option<f64> {
        self.ids.binary_search_by(|x| x.as_str().cmp(id)).ok().map(|i| self.scores[i])
    }

    /// Corpus scores in node-id order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> + '_ {
        self.ids.iter().map(String::as_str).zip(self.scores.iter().copied())
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn to_map(&self) -> BTreeMap<String, f64> {
        self.iter().map(|(id, s)| (id.to_string(), s)).collect()
    }

    /// Sum over corpus nodes and the query node.
    pub fn total_mass(&self) -> f64 {
        self.scores.iter().sum::<f64>() + self.query_score
    }
}

/// Power iteration for personalized PageRank on the query-extended graph.
///
/// Transitions follow the row-normalized edge weights; all restart mass goes
/// to the query node and dangling nodes restart there as well. Iteration
/// stops once the L1 change drops below `tol`. Each sweep touches every node
/// and edge of the extended graph once.
pub fn query_aware_pagerank(g: &ExtendedGraph<'_>, params: PprParams) -> Result<PprResult> {
    params.validate()?;
    let base = g.base;
    let n = base.node_count();
    let q = n;
    let alpha = params.alpha;

    // inverse out-strength per node in G'
    let mut inv_out = Vec::with_capacity(n + 1);
    for i in 0..n {
        let s = base.strength[i] + g.back_weight[i];
        inv_out.push(if s > 0.0 { 1.0 / s } else { 0.0 });
    }
    let query_strength: f64 = g.query_edges.iter().map(|&(_, w)| w).sum();
    inv_out.push(if query_strength > 0.0 { 1.0 / query_strength } else { 0.0 });

    let mut current = vec![0.0f64; n + 1];
    current[q] = 1.0;
    let mut next = vec![0.0f64; n + 1];
    let mut iterations_used = 0;
    let mut converged = false;

    for _ in 0..params.max_iter {
        iterations_used += 1;
        next.iter_mut().for_each(|x| *x = 0.0);
        let mut dangling = 0.0;
        for i in 0..n {
            let mass = current[i];
            if mass == 0.0 {
                continue;
            }
            if inv_out[i] == 0.0 {
                dangling += mass;
                continue;
            }
            let scale = alpha * mass * inv_out[i];
            for &(j, w) in base.neighbors(i) {
                next[j] += scale * w;
            }
            next[q] += scale * g.back_weight[i];
        }
        let qmass = current[q];
        if inv_out[q] == 0.0 {
            dangling += qmass;
        } else {
            let scale = alpha * qmass * inv_out[q];
            for &(j, w) in &g.query_edges {
                next[j] += scale * w;
            }
        }
        let total: f64 = current.iter().sum();
        next[q] += alpha * dangling + (1.0 - alpha) * total;

        let delta: f64 = next.iter().zip(&current).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut current, &mut next);
        if delta < params.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!(
            "personalized PageRank for {} did not converge within {} iterations",
            g.query_id,
            params.max_iter
        );
    }
    let query_score = current.pop().expect("query slot");
    Ok(PprResult {
        ids: base.nodes.clone(),
        scores: current,
        query_score,
        alpha,
        iterations_used,
        converged,
    })
}

/// Ordered top-k retrieval result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSet {
    pub query_id: String,
    pub items: Vec<(String, f64)>,
}

impl RetrievalSet {
    pub fn ids(&self) -> Vec<&str> {
        self.items.iter().map(|(id, _)| id.as_str()).collect()
    }
}

fn rank(query_id: &str, mut candidates: Vec<(&str, f64)>, k: usize) -> RetrievalSet {
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    candidates.truncate(k);
    RetrievalSet {
        query_id: query_id.to_string(),
        items: candidates.into_iter().map(|(id, s)| (id.to_string(), s)).collect(),
    }
}

/// The `k` best corpus nodes with positive score, score descending and
/// ties broken by ascending id.
pub fn top_k(query_id: &str, result: &PprResult, k: usize) -> Result<RetrievalSet> {
    if k < 1 {
        return Err(GraphError::InvalidParameter("k must be >= 1".into()));
    }
    let candidates = result.iter().filter(|&(_, s)| s > 0.0).collect();
    Ok(rank(query_id, candidates, k))
}

/// Plain similarity ranking: the `k` corpus vectors most cosine-similar to
/// the query, same ordering rules as [`top_k`]. Zero-norm vectors are skipped.
pub fn cosine_top_k(
    query_id: &str,
    query_vec: &EmbeddingVector,
    vectors: &BTreeMap<String, EmbeddingVector>,
    k: usize,
) -> Result<RetrievalSet> {
    if k < 1 {
        return Err(GraphError::InvalidParameter("k must be >= 1".into()));
    }
    let mut candidates = Vec::with_capacity(vectors.len());
    for (id, v) in vectors {
        match cosine(query_vec, v) {
            Ok(s) => candidates.push((id.as_str(), s)),
            Err(EmbeddingError::ZeroNorm) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(rank(query_id, candidates, k))
}

/// Extend, rank, select: the whole per-query retrieval step.
pub fn retrieve(
    graph: &QQGraph,
    query_id: &str,
    query_vec: &EmbeddingVector,
    vectors: &BTreeMap<String, EmbeddingVector>,
    params: PprParams,
    k: usize,
) -> Result<(RetrievalSet, PprResult)> {
    let extended = extend_with_query(graph, query_id, query_vec, vectors)?;
    let result = query_aware_pagerank(&extended, params)?;
    let set = top_k(query_id, &result, k)?;
    Ok((set, result))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub nodes: usize,
    pub edges: usize,
    pub density: f64,
    pub mean_degree: f64,
    pub isolated: usize,
    pub components: usize,
    pub largest_component: usize,
    pub threshold: f64,
}

/// Density and connectivity summary, for recalibrating the threshold.
pub fn graph_stats(g: &QQGraph) -> GraphStats {
    let n = g.node_count();
    let e = g.edge_count();
    let density = if n > 1 {
        2.0 * e as f64 / (n as f64 * (n as f64 - 1.0))
    } else {
        0.0
    };
    let mut seen = vec![false; n];
    let (mut components, mut largest) = (0, 0);
    for start in 0..n {
        if seen[start] {
            continue;
        }
        components += 1;
        let mut size = 0;
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(u) = queue.pop_front() {
            size += 1;
            for &(v, _) in g.neighbors(u) {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        largest = largest.max(size);
    }
    GraphStats {
        nodes: n,
        edges: e,
        density,
        mean_degree: if n > 0 { 2.0 * e as f64 / n as f64 } else { 0.0 },
        isolated: (0..n).filter(|&i| g.neighbors(i).is_empty()).count(),
        components,
        largest_component: largest,
        threshold: g.threshold,
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphBody {
    version: u32,
    threshold: f64,
    backend_id: String,
    built_at: DateTime<Utc>,
    nodes: Vec<String>,
    edges: Vec<(String, String, f64)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    #[serde(flatten)]
    body: GraphBody,
    checksum: String,
}

fn body_checksum(body: &GraphBody) -> String {
    let canonical = serde_json::to_vec(body).expect("graph body serializes");
    hex::encode(Sha256::digest(&canonical))
}

pub fn save_graph(g: &QQGraph, path: &Path) -> Result<()> {
    let body = GraphBody {
        version: GRAPH_FORMAT_VERSION,
        threshold: g.threshold,
        backend_id: g.backend_id.clone(),
        built_at: g.built_at,
        nodes: g.nodes.to_vec(),
        edges: g.edges().map(|(a, b, w)| (a.to_string(), b.to_string(), w)).collect(),
    };
    let checksum = body_checksum(&body);
    let text = serde_json::to_string(&GraphFile { body, checksum }).expect("graph serializes");
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_graph(path: &Path) -> Result<QQGraph> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| GraphError::Corrupt(e.to_string()))?;
    let version = value
        .get("version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| GraphError::Corrupt("missing version".into()))?;
    if version != u64::from(GRAPH_FORMAT_VERSION) {
        return Err(GraphError::VersionMismatch {
            found: version,
            supported: GRAPH_FORMAT_VERSION,
        });
    }
    let file: GraphFile =
        serde_json::from_value(value).map_err(|e| GraphError::Corrupt(e.to_string()))?;
    if body_checksum(&file.body) != file.checksum {
        return Err(GraphError::Corrupt("checksum mismatch".into()));
    }
    let b = file.body;
    QQGraph::from_parts(b.nodes, b.edges, b.threshold, &b.backend_id, b.built_at).map_err(|e| match e {
        GraphError::Invalid(msg) | GraphError::InvalidParameter(msg) => GraphError::Corrupt(msg),
        other => other,
    })
}
