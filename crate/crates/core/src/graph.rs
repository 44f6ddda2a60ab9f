//! Knowledge graphs over embedding indices and the per-table transition
//! models that drive stochastic embedding replacement.
//!
//! A transition model is a row-stochastic distribution `p(j, k)` over
//! replacement indices `k` for a looked-up index `j`. Three kinds exist:
//!
//! - `Identity`: `p(j, j) = 1`, replacement disabled.
//! - `Uniform(p0)`: keep `j` with probability `1 - p0`, otherwise move to one
//!   of the `N - 1` other indices uniformly (the complete-graph case).
//! - `Graph(p0, rho, g)`: keep `j` with probability `1 - p0`; conditional on
//!   moving, a neighbor of `j` in the knowledge graph is `rho` times as
//!   likely as a non-neighbor, uniformly within each class. With
//!   `d_j = deg(j)` the off-diagonal mass normalizer is
//!   `Z_j = rho * d_j + (N - 1 - d_j)`, giving `p(j, k) = p0 * rho / Z_j`
//!   for neighbors and `p0 / Z_j` for non-neighbors. This is the unique
//!   distribution with the fixed retention probability, the neighbor ratio,
//!   and within-class uniformity.
//!
//! Sampling never materializes the `N x N` table.

use std::collections::HashSet;
use std::io::BufRead;
use std::path::Path;

use rand::Rng;

use crate::dataset::IdMap;
use crate::error::{Error, Result};

/// Undirected graph over one embedding table's indices.
///
/// Symmetric, self-loop-free, neighbor lists sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeGraph {
    num_nodes: usize,
    adjacency: Vec<Vec<usize>>,
}

impl KnowledgeGraph {
    /// Builds a graph from undirected edges. Duplicate edges (in either
    /// orientation) collapse to one; self-loops and out-of-range endpoints
    /// are errors.
    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adjacency = vec![Vec::new(); num_nodes];
        let mut seen = HashSet::new();
        for &(a, b) in edges {
            if a == b {
                return Err(Error::InvalidArgument(format!("self-loop on node {a}")));
            }
            if a >= num_nodes || b >= num_nodes {
                return Err(Error::IndexOutOfRange {
                    index: a.max(b),
                    size: num_nodes,
                });
            }
            let key = (a.min(b), a.max(b));
            if seen.insert(key) {
                adjacency[a].push(b);
                adjacency[b].push(a);
            }
        }
        for adj in &mut adjacency {
            adj.sort_unstable();
        }
        Ok(Self {
            num_nodes,
            adjacency,
        })
    }

    pub fn edgeless(num_nodes: usize) -> Self {
        Self {
            num_nodes,
            adjacency: vec![Vec::new(); num_nodes],
        }
    }

    pub fn complete(num_nodes: usize) -> Self {
        let adjacency = (0..num_nodes)
            .map(|j| (0..num_nodes).filter(|&k| k != j).collect())
            .collect();
        Self {
            num_nodes,
            adjacency,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency.iter().map(|a| a.len()).sum::<usize>() / 2
    }

    pub fn degree(&self, j: usize) -> usize {
        self.adjacency[j].len()
    }

    pub fn neighbors(&self, j: usize) -> &[usize] {
        &self.adjacency[j]
    }

    pub fn has_edge(&self, j: usize, k: usize) -> bool {
        j < self.num_nodes && self.adjacency[j].binary_search(&k).is_ok()
    }

    pub fn adjacency(&self) -> &[Vec<usize>] {
        &self.adjacency
    }

    /// Iterates each undirected edge once, as (j, k) with j < k.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(j, adj)| adj.iter().filter(move |&&k| j < k).map(move |&k| (j, k)))
    }
}

/// Connects items whose entity tag sets intersect (e.g. movies sharing an
/// actor). `tags[j]` is the tag set of item `j`.
pub fn build_item_graph(tags: &[HashSet<String>]) -> KnowledgeGraph {
    let mut by_tag: std::collections::HashMap<&str, Vec<usize>> = std::collections::HashMap::new();
    for (j, set) in tags.iter().enumerate() {
        for tag in set {
            by_tag.entry(tag.as_str()).or_default().push(j);
        }
    }
    let mut edges = HashSet::new();
    for members in by_tag.values() {
        for (i, &a) in members.iter().enumerate() {
            for &b in &members[i + 1..] {
                edges.insert((a.min(b), a.max(b)));
            }
        }
    }
    let edge_vec: Vec<(usize, usize)> = edges.into_iter().collect();
    KnowledgeGraph::from_edges(tags.len(), &edge_vec).expect("tag edges are in range")
}

/// Result of loading an edge-list file.
#[derive(Debug)]
pub struct LoadedGraph {
    pub graph: KnowledgeGraph,
    /// Self-loop lines dropped with a warning rather than an error.
    pub self_loops_dropped: usize,
}

/// Loads a two-column whitespace-separated edge list of raw ids, mapping
/// them through `ids`. Duplicate edges collapse; self-loops are dropped and
/// counted. Unknown ids and malformed lines are errors naming the line.
pub fn load_edge_list(path: &Path, ids: &IdMap) -> Result<LoadedGraph> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut edges = Vec::new();
    let mut self_loops = 0usize;
    for (lineno0, line) in reader.lines().enumerate() {
        let lineno = lineno0 + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut parts = trimmed.split_whitespace();
        let (a, b) = match (parts.next(), parts.next()) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::parse(path, lineno, "expected two whitespace-separated ids")),
        };
        let a_idx = ids
            .get(a)
            .ok_or_else(|| Error::parse(path, lineno, format!("unknown id {a:?}")))?;
        let b_idx = ids
            .get(b)
            .ok_or_else(|| Error::parse(path, lineno, format!("unknown id {b:?}")))?;
        if a_idx == b_idx {
            self_loops += 1;
            continue;
        }
        edges.push((a_idx, b_idx));
    }
    let graph = KnowledgeGraph::from_edges(ids.len(), &edges)?;
    Ok(LoadedGraph {
        graph,
        self_loops_dropped: self_loops,
    })
}

/// Replacement distribution kind. See the module docs for the formulas.
#[derive(Debug, Clone)]
pub enum TransitionKind {
    Identity,
    Uniform { p0: f64 },
    Graph { p0: f64, rho: f64, graph: KnowledgeGraph },
}

/// Row-stochastic replacement distribution over one table's indices.
#[derive(Debug, Clone)]
pub struct TransitionModel {
    kind: TransitionKind,
    num_nodes: usize,
}

/// When uniform-over-non-neighbors rejection would retry more than this many
/// times in expectation, enumerate the complement instead.
const REJECTION_RETRY_LIMIT: f64 = 4.0;

impl TransitionModel {
    pub fn identity(num_nodes: usize) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::InvalidArgument("transition model needs >= 1 node".into()));
        }
        Ok(Self {
            kind: TransitionKind::Identity,
            num_nodes,
        })
    }

    pub fn uniform(num_nodes: usize, p0: f64) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::InvalidArgument("transition model needs >= 1 node".into()));
        }
        check_p0(p0)?;
        Ok(Self {
            kind: TransitionKind::Uniform { p0 },
            num_nodes,
        })
    }

    pub fn from_graph(graph: KnowledgeGraph, p0: f64, rho: f64) -> Result<Self> {
        if graph.num_nodes() == 0 {
            return Err(Error::InvalidArgument("transition model needs >= 1 node".into()));
        }
        check_p0(p0)?;
        if !(rho >= 1.0) || !rho.is_finite() {
            return Err(Error::InvalidArgument(format!("rho must be >= 1, got {rho}")));
        }
        let num_nodes = graph.num_nodes();
        Ok(Self {
            kind: TransitionKind::Graph { p0, rho, graph },
            num_nodes,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn kind(&self) -> &TransitionKind {
        &self.kind
    }

    /// True when every row is a point mass at its own index, so sampling is
    /// a no-op and enumeration can skip the off-diagonal terms.
    pub fn is_deterministic(&self) -> bool {
        match &self.kind {
            TransitionKind::Identity => true,
            TransitionKind::Uniform { p0 } | TransitionKind::Graph { p0, .. } => {
                *p0 == 0.0 || self.num_nodes == 1
            }
        }
    }

    /// Transition probability `p(j, k)`.
    pub fn prob(&self, j: usize, k: usize) -> Result<f64> {
        let n = self.num_nodes;
        if j >= n {
            return Err(Error::IndexOutOfRange { index: j, size: n });
        }
        if k >= n {
            return Err(Error::IndexOutOfRange { index: k, size: n });
        }
        // A single-index table never transitions, whatever p0 says.
        if n == 1 {
            return Ok(1.0);
        }
        Ok(match &self.kind {
            TransitionKind::Identity => {
                if j == k {
                    1.0
                } else {
                    0.0
                }
            }
            TransitionKind::Uniform { p0 } => {
                if j == k {
                    1.0 - p0
                } else {
                    p0 / (n - 1) as f64
                }
            }
            TransitionKind::Graph { p0, rho, graph } => {
                if j == k {
                    1.0 - p0
                } else {
                    let d = graph.degree(j) as f64;
                    let z = rho * d + (n as f64 - 1.0 - d);
                    if graph.has_edge(j, k) {
                        p0 * rho / z
                    } else {
                        p0 / z
                    }
                }
            }
        })
    }

    /// Draws a replacement index for `j`, distributed per [`Self::prob`].
    ///
    /// Deterministic rows (identity, p0 = 0, single node) consume no
    /// randomness. Otherwise one uniform decides keep-vs-move; a move picks
    /// neighbor-vs-other by class mass and then uniformly inside the class,
    /// with uniform-over-others drawn by rejection against `{j} ∪ adj(j)`
    /// (falling back to enumerating the complement when the graph row is
    /// near-complete).
    pub fn sample<R: Rng + ?Sized>(&self, j: usize, rng: &mut R) -> Result<usize> {
        let n = self.num_nodes;
        if j >= n {
            return Err(Error::IndexOutOfRange { index: j, size: n });
        }
        if self.is_deterministic() {
            return Ok(j);
        }
        let (p0, graph): (f64, Option<&KnowledgeGraph>) = match &self.kind {
            TransitionKind::Identity => unreachable!("identity is deterministic"),
            TransitionKind::Uniform { p0 } => (*p0, None),
            TransitionKind::Graph { p0, rho: _, graph } => (*p0, Some(graph)),
        };
        if rng.random::<f64>() >= p0 {
            return Ok(j);
        }
        match graph {
            None => Ok(sample_other_uniform(n, j, rng)),
            Some(g) => {
                let d = g.degree(j);
                if d == 0 {
                    return Ok(sample_other_uniform(n, j, rng));
                }
                let rho = match &self.kind {
                    TransitionKind::Graph { rho, .. } => *rho,
                    _ => unreachable!(),
                };
                let z = rho * d as f64 + (n - 1 - d) as f64;
                let neighbor_mass = rho * d as f64 / z;
                if d == n - 1 || rng.random::<f64>() < neighbor_mass {
                    let idx = rng.random_range(0..d);
                    Ok(g.neighbors(j)[idx])
                } else {
                    Ok(sample_non_neighbor(g, n, j, rng))
                }
            }
        }
    }

    /// Draws one replacement per table, independently.
    pub fn sample_joint<R: Rng + ?Sized>(
        models: &[&TransitionModel],
        js: &[usize],
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        if models.len() != js.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} transition models for {} indices",
                models.len(),
                js.len()
            )));
        }
        models
            .iter()
            .zip(js)
            .map(|(tm, &j)| tm.sample(j, rng))
            .collect()
    }
}

fn check_p0(p0: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p0) {
        return Err(Error::InvalidArgument(format!("p0 must lie in [0, 1), got {p0}")));
    }
    Ok(())
}

/// Uniform over `{0..n} \ {j}` by rejection; expected retries n/(n-1).
fn sample_other_uniform<R: Rng + ?Sized>(n: usize, j: usize, rng: &mut R) -> usize {
    loop {
        let k = rng.random_range(0..n);
        if k != j {
            return k;
        }
    }
}

/// Uniform over non-neighbors of `j` (excluding `j` itself).
fn sample_non_neighbor<R: Rng + ?Sized>(
    g: &KnowledgeGraph,
    n: usize,
    j: usize,
    rng: &mut R,
) -> usize {
    let complement = (n - 1 - g.degree(j)) as f64;
    if n as f64 / complement > REJECTION_RETRY_LIMIT {
        let others: Vec<usize> = (0..n).filter(|&k| k != j && !g.has_edge(j, k)).collect();
        return others[rng.random_range(0..others.len())];
    }
    loop {
        let k = rng.random_range(0..n);
        if k != j && !g.has_edge(j, k) {
            return k;
        }
    }
}
