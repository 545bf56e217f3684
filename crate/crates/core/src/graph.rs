//! Weighted digraphs, their Laplacians, and the connectivity/balance/σ checks
//! the algorithms rely on.
//!
//! Edge convention: an edge `(i, j)` means agent `i` *receives* from agent `j`.
//! The Laplacian therefore has `L[i][j] = -weight(i, j)` and
//! `L[i][i] = Σ_j weight(i, j)`, so every row sums to zero.
//!
//! Indices are zero-based in the API and one-based in the text format.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

/// Absolute tolerance for row/column sums.
pub const SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("topology needs at least one agent")]
    Empty,
    #[error("self-loop on agent {0}")]
    SelfLoop(usize),
    #[error("edge ({to}, {from}) references an agent outside 0..{n}")]
    OutOfRange { to: usize, from: usize, n: usize },
    #[error("edge ({to}, {from}) has non-positive or non-finite weight {weight}")]
    BadWeight { to: usize, from: usize, weight: f64 },
    #[error("duplicate edge ({to}, {from}): entries #{first} (weight {w_first}) and #{second} (weight {w_second})")]
    DuplicateEdge { to: usize, from: usize, first: usize, second: usize, w_first: f64, w_second: f64 },
    #[error("ring lattice needs at least one offset")]
    NoOffsets,
    #[error("ring lattice offset {offset} must lie in [1, {max}]")]
    BadOffset { offset: usize, max: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    /// Receiving agent.
    pub to: usize,
    /// Transmitting agent.
    pub from: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    n: usize,
    edges: Vec<Edge>,
}

impl Topology {
    /// Validates agent indices, self-loops, and weights. Duplicate edges are
    /// reported by [`build_laplacian`].
    pub fn new(n: usize, edges: Vec<Edge>) -> Result<Self, GraphError> {
        if n == 0 {
            return Err(GraphError::Empty);
        }
        for e in &edges {
            if e.to >= n || e.from >= n {
                return Err(GraphError::OutOfRange { to: e.to, from: e.from, n });
            }
            if e.to == e.from {
                return Err(GraphError::SelfLoop(e.to));
            }
            if !(e.weight.is_finite() && e.weight > 0.0) {
                return Err(GraphError::BadWeight { to: e.to, from: e.from, weight: e.weight });
            }
        }
        Ok(Self { n, edges })
    }

    pub fn from_triples(n: usize, triples: &[(usize, usize, f64)]) -> Result<Self, GraphError> {
        let edges = triples.iter().map(|&(to, from, weight)| Edge { to, from, weight }).collect();
        Self::new(n, edges)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// In-neighbors of `i` with their weights, in edge-list order.
    pub fn in_edges(&self, i: usize) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.to == i)
    }

    /// Removes agent `i` and every edge touching it; higher indices shift down by one.
    pub fn without_agent(&self, i: usize) -> Result<Self, GraphError> {
        if i >= self.n {
            return Err(GraphError::OutOfRange { to: i, from: i, n: self.n });
        }
        let shift = |a: usize| if a > i { a - 1 } else { a };
        let edges = self
            .edges
            .iter()
            .filter(|e| e.to != i && e.from != i)
            .map(|e| Edge { to: shift(e.to), from: shift(e.from), weight: e.weight })
            .collect();
        Self::new(self.n - 1, edges)
    }

    /// Inserts a new agent at index `i` (existing agents at `>= i` shift up)
    /// and appends `new_edges`, which are expressed in the post-insertion indexing.
    pub fn with_agent(&self, i: usize, new_edges: &[Edge]) -> Result<Self, GraphError> {
        if i > self.n {
            return Err(GraphError::OutOfRange { to: i, from: i, n: self.n + 1 });
        }
        let shift = |a: usize| if a >= i { a + 1 } else { a };
        let mut edges: Vec<Edge> =
            self.edges.iter().map(|e| Edge { to: shift(e.to), from: shift(e.from), weight: e.weight }).collect();
        edges.extend_from_slice(new_edges);
        Self::new(self.n + 1, edges)
    }

    /// Keeps only edges for which `keep` returns true.
    pub fn filter_edges(&self, mut keep: impl FnMut(&Edge) -> bool) -> Self {
        Self { n: self.n, edges: self.edges.iter().filter(|e| keep(e)).copied().collect() }
    }

    /// Text form: `n` on the first line, then `i j weight` (one-based).
    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.n);
        for e in &self.edges {
            out.push_str(&format!("{} {} {}\n", e.to + 1, e.from + 1, e.weight));
        }
        out
    }
}

impl FromStr for Topology {
    type Err = GraphError;

    /// Blank lines and `#` comments are skipped.
    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut n: Option<usize> = None;
        let mut edges = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let perr = |msg: String| GraphError::Parse { line: line_no, msg };
            let Some(count) = n else {
                let v: usize = line.parse().map_err(|_| perr(format!("expected agent count, got {line:?}")))?;
                n = Some(v);
                continue;
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(perr(format!("expected `i j weight`, got {} fields", fields.len())));
            }
            let to: usize = fields[0].parse().map_err(|_| perr(format!("bad agent index {:?}", fields[0])))?;
            let from: usize = fields[1].parse().map_err(|_| perr(format!("bad agent index {:?}", fields[1])))?;
            let weight: f64 = fields[2].parse().map_err(|_| perr(format!("bad weight {:?}", fields[2])))?;
            if to == 0 || from == 0 || to > count || from > count {
                return Err(perr(format!("agent indices must lie in 1..={count}")));
            }
            if !(weight.is_finite() && weight > 0.0) {
                return Err(perr(format!("weight must be positive, got {weight}")));
            }
            if to == from {
                return Err(perr(format!("self-loop on agent {to}")));
            }
            edges.push(Edge { to: to - 1, from: from - 1, weight });
        }
        let n = n.ok_or(GraphError::Parse { line: 0, msg: "missing agent count".into() })?;
        Topology::new(n, edges)
    }
}

/// Directed ring lattice: agent `i` receives from `(i + o) mod n` for every offset `o`.
pub fn ring_lattice(n: usize, offsets: &[usize], weight: f64) -> Result<Topology, GraphError> {
    if offsets.is_empty() {
        return Err(GraphError::NoOffsets);
    }
    if let Some(&bad) = offsets.iter().find(|&&o| o == 0 || o >= n) {
        return Err(GraphError::BadOffset { offset: bad, max: n.saturating_sub(1) });
    }
    let mut edges = Vec::with_capacity(n * offsets.len());
    for i in 0..n {
        for &o in offsets {
            edges.push(Edge { to: i, from: (i + o) % n, weight });
        }
    }
    Topology::new(n, edges)
}

/// Complete digraph with uniform weight.
pub fn complete(n: usize, weight: f64) -> Result<Topology, GraphError> {
    let mut edges = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                edges.push(Edge { to: i, from: j, weight });
            }
        }
    }
    Topology::new(n, edges)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Laplacian {
    entries: DMatrix<f64>,
    sigma: f64,
    balanced: bool,
    strongly_connected: bool,
}

impl Laplacian {
    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    /// `||I - Π - L||`.
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn balanced(&self) -> bool {
        self.balanced
    }

    pub fn strongly_connected(&self) -> bool {
        self.strongly_connected
    }

    pub fn max_row_sum(&self) -> f64 {
        self.entries.row_iter().map(|r| r.sum().abs()).fold(0.0, f64::max)
    }

    pub fn max_col_sum(&self) -> f64 {
        self.entries.column_iter().map(|c| c.sum().abs()).fold(0.0, f64::max)
    }

    /// `I - Π - L`.
    pub fn deviation(&self) -> DMatrix<f64> {
        linalg::disagreement_projector(self.n()) - &self.entries
    }
}

pub fn build_laplacian(topology: &Topology) -> Result<Laplacian, GraphError> {
    let n = topology.n();
    let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
    let mut entries = DMatrix::zeros(n, n);
    for (idx, e) in topology.edges().iter().enumerate() {
        if let Some(&first) = seen.get(&(e.to, e.from)) {
            return Err(GraphError::DuplicateEdge {
                to: e.to,
                from: e.from,
                first,
                second: idx,
                w_first: topology.edges()[first].weight,
                w_second: e.weight,
            });
        }
        seen.insert((e.to, e.from), idx);
        entries[(e.to, e.from)] = -e.weight;
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| entries[(i, j)]).sum();
        entries[(i, i)] = -off;
    }
    let balanced = entries.column_iter().all(|c| c.sum().abs() < SUM_TOL);
    let strongly_connected = is_strongly_connected(topology);
    let sigma = linalg::spectral_norm(&(linalg::disagreement_projector(n) - &entries));
    Ok(Laplacian { entries, sigma, balanced, strongly_connected })
}

fn is_strongly_connected(topology: &Topology) -> bool {
    let mut g: DiGraph<(), ()> = DiGraph::with_capacity(topology.n(), topology.edges().len());
    let nodes: Vec<_> = (0..topology.n()).map(|_| g.add_node(())).collect();
    for e in topology.edges() {
        // Information flows from `from` to `to`.
        g.add_edge(nodes[e.from], nodes[e.to], ());
    }
    tarjan_scc(&g).len() == 1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub strongly_connected: bool,
    pub balanced: bool,
    pub sigma: f64,
    pub sigma_below_one: bool,
}

impl AssumptionReport {
    pub fn all_pass(&self) -> bool {
        self.strongly_connected && self.balanced && self.sigma_below_one
    }
}

impl fmt::Display for AssumptionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mark = |b: bool| if b { "pass" } else { "FAIL" };
        write!(
            f,
            "strong connectivity: {}; weight balance: {}; sigma = {:.6} < 1: {}",
            mark(self.strongly_connected),
            mark(self.balanced),
            self.sigma,
            mark(self.sigma_below_one)
        )
    }
}

pub fn check_assumptions(lap: &Laplacian) -> AssumptionReport {
    AssumptionReport {
        strongly_connected: lap.strongly_connected,
        balanced: lap.balanced,
        sigma: lap.sigma,
        sigma_below_one: lap.sigma < 1.0,
    }
}
