//! Segmentation gating and clique-based subject consolidation.
//!
//! Per-frame subject crops become graph nodes; two nodes are joined when the
//! cosine distance of their embeddings is below `τ_d`. Maximum cliques are
//! extracted repeatedly while their size exceeds one third of the frame
//! count; each accepted clique is one consistent subject.

use std::cmp::Ordering;
use std::io::BufRead;
use std::process::Command;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Rng;

pub const DEFAULT_TAU_DIST: f64 = 0.3;
pub const DEFAULT_TAU_CLIP: f64 = 0.25;
pub const MAX_NODES: usize = 2000;

#[derive(Debug, Error)]
pub enum ConsolidationError {
    #[error("record {index}: {reason}")]
    BadRecord { index: usize, reason: String },
    #[error("graph is empty")]
    EmptyGraph,
    #[error("graph has {0} nodes, cap is {MAX_NODES}")]
    TooManyNodes(usize),
    #[error("threshold {0} out of range")]
    Threshold(f64),
    #[error("total_frames must be at least 1")]
    NoFrames,
    #[error("provider failed: {0}")]
    Provider(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One detected subject crop in one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationRecord {
    #[serde(rename = "frame")]
    pub frame_idx: usize,
    pub crop_ref: String,
    pub clip_score: f64,
    pub embedding: Vec<f64>,
}

impl ObservationRecord {
    /// Unit-normalizes the embedding; rejects empty, zero or non-finite ones.
    pub fn normalized(mut self, index: usize) -> Result<Self, ConsolidationError> {
        let bad = |reason: &str| ConsolidationError::BadRecord { index, reason: reason.into() };
        if self.embedding.is_empty() {
            return Err(bad("empty embedding"));
        }
        if !self.embedding.iter().all(|v| v.is_finite()) || !self.clip_score.is_finite() {
            return Err(bad("non-finite value"));
        }
        let norm = self.embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(bad("zero-norm embedding"));
        }
        self.embedding.iter_mut().for_each(|v| *v /= norm);
        Ok(self)
    }

    fn sort_key_cmp(&self, other: &Self) -> Ordering {
        self.frame_idx
            .cmp(&other.frame_idx)
            .then_with(|| self.crop_ref.cmp(&other.crop_ref))
            .then_with(|| self.clip_score.total_cmp(&other.clip_score))
            .then_with(|| {
                let a = self.embedding.iter().map(|v| v.to_bits());
                let b = other.embedding.iter().map(|v| v.to_bits());
                a.cmp(b)
            })
    }
}

/// Normalizes every record and sorts by `(frame, crop_ref)` so results do not
/// depend on input order.
pub fn ingest(records: Vec<ObservationRecord>) -> Result<Vec<ObservationRecord>, ConsolidationError> {
    let mut out = records
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.normalized(i))
        .collect::<Result<Vec<_>, _>>()?;
    out.sort_by(ObservationRecord::sort_key_cmp);
    Ok(out)
}

/// Keeps records whose CLIP score strictly exceeds `tau_clip`.
pub fn validate_segmentation(
    records: &[ObservationRecord],
    tau_clip: f64,
) -> Result<Vec<ObservationRecord>, ConsolidationError> {
    if !(0.0..=1.0).contains(&tau_clip) {
        return Err(ConsolidationError::Threshold(tau_clip));
    }
    Ok(records.iter().filter(|r| r.clip_score > tau_clip).cloned().collect())
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectGraph {
    pub nodes: Vec<ObservationRecord>,
    adjacency: Vec<Vec<bool>>,
    pub tau_dist: f64,
}

impl SubjectGraph {
    /// Graph from an explicit adjacency matrix (made symmetric, no self loops).
    pub fn from_adjacency(adjacency: Vec<Vec<bool>>) -> Self {
        let n = adjacency.len();
        let mut adj = vec![vec![false; n]; n];
        for i in 0..n {
            for j in 0..n {
                if i != j && (adjacency[i][j] || adjacency[j][i]) {
                    adj[i][j] = true;
                }
            }
        }
        Self { nodes: Vec::new(), adjacency: adj, tau_dist: f64::NAN }
    }

    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn adjacent(&self, u: usize, v: usize) -> bool {
        self.adjacency[u][v]
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(|r| r.iter().filter(|&&b| b).count()).sum::<usize>() / 2
    }
}

/// Joins nodes whose cosine distance is below `tau_dist`.
pub fn build_graph(records: &[ObservationRecord], tau_dist: f64) -> Result<SubjectGraph, ConsolidationError> {
    if !tau_dist.is_finite() {
        return Err(ConsolidationError::Threshold(tau_dist));
    }
    let n = records.len();
    if n > MAX_NODES {
        return Err(ConsolidationError::TooManyNodes(n));
    }
    for (i, r) in records.iter().enumerate() {
        if !r.embedding.iter().all(|v| v.is_finite()) {
            return Err(ConsolidationError::BadRecord { index: i, reason: "non-finite embedding".into() });
        }
    }
    let mut adjacency = vec![vec![false; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let linked = cosine_distance(&records[i].embedding, &records[j].embedding) < tau_dist;
            adjacency[i][j] = linked;
            adjacency[j][i] = linked;
        }
    }
    Ok(SubjectGraph { nodes: records.to_vec(), adjacency, tau_dist })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Clique {
    /// Node indices, ascending.
    pub members: Vec<usize>,
    pub representative: usize,
}

struct Search<'g> {
    graph: &'g SubjectGraph,
    best: Vec<usize>,
}

impl Search<'_> {
    fn offer(&mut self, r: &[usize]) {
        let mut cand = r.to_vec();
        cand.sort_unstable();
        if cand.len() > self.best.len() || (cand.len() == self.best.len() && cand < self.best) {
            self.best = cand;
        }
    }

    /// Bron–Kerbosch with Tomita pivoting; branches that cannot reach the
    /// current best size are cut. Equal-size branches are kept so the
    /// lexicographic tie-break sees every maximum clique.
    fn expand(&mut self, r: &mut Vec<usize>, mut p: Vec<usize>, mut x: Vec<usize>) {
        if p.is_empty() {
            if x.is_empty() {
                self.offer(r);
            }
            return;
        }
        if r.len() + p.len() < self.best.len() {
            return;
        }
        let g = self.graph;
        let pivot = p
            .iter()
            .chain(x.iter())
            .copied()
            .max_by_key(|&u| (p.iter().filter(|&&w| g.adjacent(u, w)).count(), std::cmp::Reverse(u)))
            .expect("p is non-empty");
        let branch: Vec<usize> = p.iter().copied().filter(|&v| !g.adjacent(pivot, v)).collect();
        for v in branch {
            let np: Vec<usize> = p.iter().copied().filter(|&w| g.adjacent(v, w)).collect();
            let nx: Vec<usize> = x.iter().copied().filter(|&w| g.adjacent(v, w)).collect();
            r.push(v);
            self.expand(r, np, nx);
            r.pop();
            p.retain(|&w| w != v);
            x.push(v);
        }
    }
}

fn max_clique_within(graph: &SubjectGraph, nodes: &[usize]) -> Vec<usize> {
    let mut search = Search { graph, best: Vec::new() };
    let mut p = nodes.to_vec();
    p.sort_unstable();
    search.expand(&mut Vec::new(), p, Vec::new());
    search.best
}

fn medoid(graph: &SubjectGraph, members: &[usize]) -> usize {
    if graph.nodes.is_empty() {
        return members[0];
    }
    let mut best = (f64::INFINITY, members[0]);
    for &m in members {
        let total: f64 = members
            .iter()
            .filter(|&&o| o != m)
            .map(|&o| cosine_distance(&graph.nodes[m].embedding, &graph.nodes[o].embedding))
            .sum();
        if total < best.0 {
            best = (total, m);
        }
    }
    best.1
}

/// Exact maximum clique; ties go to the lexicographically smallest sorted
/// member list.
pub fn max_clique(graph: &SubjectGraph) -> Result<Clique, ConsolidationError> {
    if graph.is_empty() {
        return Err(ConsolidationError::EmptyGraph);
    }
    if graph.len() > MAX_NODES {
        return Err(ConsolidationError::TooManyNodes(graph.len()));
    }
    let all: Vec<usize> = (0..graph.len()).collect();
    let members = max_clique_within(graph, &all);
    let representative = medoid(graph, &members);
    Ok(Clique { members, representative })
}

/// Repeatedly extracts maximum cliques while `|clique| > total_frames / 3`.
pub fn consolidate(graph: &SubjectGraph, total_frames: usize) -> Result<Vec<Clique>, ConsolidationError> {
    if total_frames == 0 {
        return Err(ConsolidationError::NoFrames);
    }
    if graph.len() > MAX_NODES {
        return Err(ConsolidationError::TooManyNodes(graph.len()));
    }
    let mut remaining: Vec<usize> = (0..graph.len()).collect();
    let mut out = Vec::new();
    while !remaining.is_empty() {
        let members = max_clique_within(graph, &remaining);
        if 3 * members.len() <= total_frames {
            break;
        }
        remaining.retain(|n| members.binary_search(n).is_err());
        let representative = medoid(graph, &members);
        out.push(Clique { members, representative });
    }
    Ok(out)
}

/// Parses one record per non-blank line.
pub fn read_jsonl(reader: impl BufRead) -> Result<Vec<ObservationRecord>, ConsolidationError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ObservationRecord = serde_json::from_str(&line)
            .map_err(|e| ConsolidationError::BadRecord { index: i, reason: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

/// Source of per-frame subject observations (detection + segmentation +
/// embedding happen behind this interface).
pub trait ObservationProvider {
    fn observations(&self) -> Result<Vec<ObservationRecord>, ConsolidationError>;
}

/// Runs an external command and reads JSONL records from its stdout.
#[derive(Clone, Debug)]
pub struct CommandProvider {
    pub program: String,
    pub args: Vec<String>,
}

impl ObservationProvider for CommandProvider {
    fn observations(&self) -> Result<Vec<ObservationRecord>, ConsolidationError> {
        let out = Command::new(&self.program).args(&self.args).output()?;
        if !out.status.success() {
            return Err(ConsolidationError::Provider(format!(
                "{} exited with {}: {}",
                self.program,
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        read_jsonl(out.stdout.as_slice())
    }
}

/// Deterministic synthetic detections: persistent subjects visible in most
/// frames, one fleeting subject, per-observation embedding noise and a few
/// low-score segmentations.
#[derive(Clone, Debug)]
pub struct MockProvider {
    pub seed: u64,
    pub total_frames: usize,
    pub subjects: usize,
    pub dim: usize,
    pub noise: f64,
}

impl ObservationProvider for MockProvider {
    fn observations(&self) -> Result<Vec<ObservationRecord>, ConsolidationError> {
        let mut rng = Rng::new(self.seed);
        let protos: Vec<Vec<f64>> = (0..=self.subjects)
            .map(|_| (0..self.dim).map(|_| rng.normal()).collect())
            .collect();
        let mut out = Vec::new();
        for frame in 0..self.total_frames {
            for (k, proto) in protos.iter().enumerate() {
                let fleeting = k == self.subjects;
                let visible = if fleeting { frame == 0 } else { rng.uniform() < 0.9 };
                if !visible {
                    continue;
                }
                let embedding = proto.iter().map(|v| v + self.noise * rng.normal()).collect();
                let clip_score = if rng.uniform() < 0.1 { 0.1 } else { 0.3 + 0.4 * rng.uniform() };
                out.push(ObservationRecord {
                    frame_idx: frame,
                    crop_ref: format!("f{frame:03}_s{k}"),
                    clip_score,
                    embedding,
                });
            }
        }
        Ok(out)
    }
}

/// Gate, graph, consolidate: the whole pipeline on raw records.
pub fn run_pipeline(
    records: Vec<ObservationRecord>,
    tau_dist: f64,
    tau_clip: f64,
    total_frames: usize,
) -> Result<(SubjectGraph, Vec<Clique>), ConsolidationError> {
    let records = ingest(records)?;
    let kept = validate_segmentation(&records, tau_clip)?;
    let graph = build_graph(&kept, tau_dist)?;
    let cliques = consolidate(&graph, total_frames)?;
    Ok((graph, cliques))
}

/// Key-sorted JSON manifest of the accepted cliques.
pub fn manifest(graph: &SubjectGraph, cliques: &[Clique], total_frames: usize) -> serde_json::Value {
    let subjects: Vec<serde_json::Value> = cliques
        .iter()
        .enumerate()
        .map(|(i, c)| {
            serde_json::json!({
                "id": i,
                "members": c.members.iter().map(|&m| serde_json::json!({
                    "crop_ref": graph.nodes[m].crop_ref,
                    "frame": graph.nodes[m].frame_idx,
                })).collect::<Vec<_>>(),
                "representative": graph.nodes[c.representative].crop_ref,
                "size": c.members.len(),
            })
        })
        .collect();
    serde_json::json!({
        "nodes": graph.len(),
        "subjects": subjects,
        "tau_dist": graph.tau_dist,
        "total_frames": total_frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph_from_edges(n: usize, edges: &[(usize, usize)]) -> SubjectGraph {
        let mut adj = vec![vec![false; n]; n];
        for &(a, b) in edges {
            adj[a][b] = true;
        }
        SubjectGraph::from_adjacency(adj)
    }

    fn rec(frame: usize, crop: &str, score: f64, emb: &[f64]) -> ObservationRecord {
        ObservationRecord { frame_idx: frame, crop_ref: crop.into(), clip_score: score, embedding: emb.to_vec() }
    }

    #[test]
    fn clip_gate() {
        let rs = vec![rec(0, "a", 0.2, &[1.0]), rec(1, "b", 0.35, &[1.0]), rec(2, "c", 0.0, &[1.0])];
        assert_eq!(validate_segmentation(&rs, 0.3).unwrap().len(), 1);
        assert_eq!(validate_segmentation(&rs, 0.0).unwrap().len(), 2);
        assert!(validate_segmentation(&rs, 1.0).unwrap().is_empty());
        assert!(validate_segmentation(&rs, 1.5).is_err());
    }

    #[test]
    fn graph_construction() {
        let same = vec![rec(0, "a", 1.0, &[1.0, 2.0]), rec(1, "b", 1.0, &[2.0, 4.0]), rec(2, "c", 1.0, &[0.5, 1.0])];
        let g = build_graph(&ingest(same).unwrap(), 1e-9).unwrap();
        assert_eq!(g.edge_count(), 3);
        let ortho = vec![rec(0, "a", 1.0, &[1.0, 0.0, 0.0]), rec(1, "b", 1.0, &[0.0, 1.0, 0.0]), rec(2, "c", 1.0, &[0.0, 0.0, 1.0])];
        assert_eq!(build_graph(&ingest(ortho).unwrap(), 0.5).unwrap().edge_count(), 0);
        assert!(build_graph(&[], 0.3).unwrap().is_empty());
        let nan = vec![rec(0, "a", 1.0, &[f64::NAN])];
        assert!(build_graph(&nan, 0.3).is_err());
        assert!(ingest(vec![rec(0, "z", 1.0, &[0.0, 0.0])]).is_err());
    }

    #[test]
    fn ingest_normalizes() {
        let r = ingest(vec![rec(0, "a", 0.5, &[3.0, 4.0])]).unwrap();
        let n: f64 = r[0].embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }

    #[test]
    fn max_clique_examples() {
        let tri = graph_from_edges(4, &[(0, 1), (1, 2), (0, 2)]);
        assert_eq!(max_clique(&tri).unwrap().members, vec![0, 1, 2]);
        let edgeless = graph_from_edges(3, &[]);
        assert_eq!(max_clique(&edgeless).unwrap().members, vec![0]);
        let two = graph_from_edges(6, &[(3, 4), (4, 5), (3, 5), (0, 1), (1, 2), (0, 2)]);
        assert_eq!(max_clique(&two).unwrap().members, vec![0, 1, 2]);
        assert!(matches!(max_clique(&graph_from_edges(0, &[])), Err(ConsolidationError::EmptyGraph)));
    }

    fn complete_on(nodes: &[usize], edges: &mut Vec<(usize, usize)>) {
        for (i, &a) in nodes.iter().enumerate() {
            for &b in &nodes[i + 1..] {
                edges.push((a, b));
            }
        }
    }

    #[test]
    fn consolidate_threshold_cases() {
        let mut edges = Vec::new();
        complete_on(&[0, 1, 2, 3], &mut edges);
        complete_on(&[4, 5, 6, 7], &mut edges);
        let g = graph_from_edges(9, &edges);
        let cs = consolidate(&g, 9).unwrap();
        assert_eq!(cs.len(), 2);
        assert_eq!(cs[0].members, vec![0, 1, 2, 3]);
        assert_eq!(cs[1].members, vec![4, 5, 6, 7]);

        let mut edges = Vec::new();
        complete_on(&[0, 1, 2], &mut edges);
        assert!(consolidate(&graph_from_edges(9, &edges), 9).unwrap().is_empty());

        let single = graph_from_edges(1, &[]);
        let cs = consolidate(&single, 1).unwrap();
        assert_eq!(cs, vec![Clique { members: vec![0], representative: 0 }]);
        assert!(matches!(consolidate(&single, 0), Err(ConsolidationError::NoFrames)));
    }

    #[test]
    fn medoid_picks_central_member() {
        let rs = ingest(vec![
            rec(0, "a", 1.0, &[1.0, 0.0]),
            rec(1, "b", 1.0, &[1.0, 0.2]),
            rec(2, "c", 1.0, &[1.0, 0.4]),
        ])
        .unwrap();
        let g = build_graph(&rs, 0.5).unwrap();
        let c = max_clique(&g).unwrap();
        assert_eq!(c.members, vec![0, 1, 2]);
        assert_eq!(c.representative, 1);
    }

    #[test]
    fn jsonl_rejects_unknown_fields() {
        let good = r#"{"frame": 1, "crop_ref": "x", "clip_score": 0.5, "embedding": [1.0, 0.0]}"#;
        assert_eq!(read_jsonl(good.as_bytes()).unwrap().len(), 1);
        let bad = r#"{"frame": 1, "crop_ref": "x", "clip_score": 0.5, "embedding": [1.0], "extra": 1}"#;
        assert!(read_jsonl(bad.as_bytes()).is_err());
    }

    #[test]
    fn mock_provider_yields_persistent_subjects() {
        let p = MockProvider { seed: 3, total_frames: 12, subjects: 2, dim: 16, noise: 0.05 };
        let recs = p.observations().unwrap();
        let (_, cliques) = run_pipeline(recs, DEFAULT_TAU_DIST, DEFAULT_TAU_CLIP, 12).unwrap();
        assert_eq!(cliques.len(), 2);
    }
}
