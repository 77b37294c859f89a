//! Undirected weighted item co-occurrence graph and fixed-fanout
//! neighborhood sampling.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};

use ndarray::Array2;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Matrix;
use crate::error::{Error, Result};
use crate::sessiondata::SessionCorpus;

/// How raw pair counts become edge weights in (0, 1].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `c / c_max`
    #[default]
    GlobalMax,
    /// `ln(1 + c) / ln(1 + c_max)`
    LogGlobalMax,
}

impl Normalization {
    fn apply(self, count: u64, max: u64) -> f64 {
        match self {
            Normalization::GlobalMax => count as f64 / max as f64,
            Normalization::LogGlobalMax => (count as f64).ln_1p() / (max as f64).ln_1p(),
        }
    }
}

/// Compressed-row adjacency with node features.
#[derive(Debug, Clone, PartialEq)]
pub struct CoGraph {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    weights: Vec<f64>,
    max_count: u64,
    features: Matrix,
}

impl CoGraph {
    /// Builds from undirected edges `(i, j, w)` with `i < j`. Each edge is
    /// stored in both directions; neighbor lists come out ascending.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)], max_count: u64, features: Matrix) -> Result<Self> {
        if features.nrows() != n {
            return Err(Error::shape(
                "cograph",
                format!("{} feature rows for {n} nodes", features.nrows()),
            ));
        }
        let mut degree = vec![0usize; n];
        for &(i, j, w) in edges {
            if i >= j || j >= n {
                return Err(Error::Format(format!("edge ({i}, {j}) must satisfy i < j < {n}")));
            }
            if !(w > 0.0 && w <= 1.0) {
                return Err(Error::Format(format!("edge ({i}, {j}) weight {w} outside (0, 1]")));
            }
            degree[i] += 1;
            degree[j] += 1;
        }
        let mut offsets = vec![0; n + 1];
        for k in 0..n {
            offsets[k + 1] = offsets[k] + degree[k];
        }
        let mut adj: Vec<Vec<(usize, f64)>> = degree.iter().map(|&d| Vec::with_capacity(d)).collect();
        for &(i, j, w) in edges {
            adj[i].push((j, w));
            adj[j].push((i, w));
        }
        let mut neighbors = Vec::with_capacity(offsets[n]);
        let mut weights = Vec::with_capacity(offsets[n]);
        for list in &mut adj {
            list.sort_by_key(|&(j, _)| j);
            if list.windows(2).any(|p| p[0].0 == p[1].0) {
                return Err(Error::Format("duplicate edge".into()));
            }
            for &(j, w) in list.iter() {
                neighbors.push(j);
                weights.push(w);
            }
        }
        Ok(Self {
            offsets,
            neighbors,
            weights,
            max_count,
            features,
        })
    }

    pub fn node_count(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Undirected edge count.
    pub fn edge_count(&self) -> usize {
        self.neighbors.len() / 2
    }

    /// Largest raw pair count (the normalization denominator).
    pub fn max_count(&self) -> u64 {
        self.max_count
    }

    pub fn degree(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }

    pub fn max_degree(&self) -> usize {
        (0..self.node_count()).map(|v| self.degree(v)).max().unwrap_or(0)
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[self.offsets[node]..self.offsets[node + 1]]
    }

    pub fn weights(&self, node: usize) -> &[f64] {
        &self.weights[self.offsets[node]..self.offsets[node + 1]]
    }

    /// Weight of edge `(i, j)`, if present.
    pub fn weight(&self, i: usize, j: usize) -> Option<f64> {
        let ns = self.neighbors(i);
        ns.binary_search(&j).ok().map(|k| self.weights(i)[k])
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn with_features(&self, features: Matrix) -> Result<Self> {
        if features.nrows() != self.node_count() {
            return Err(Error::shape("cograph", "feature row count differs from node count"));
        }
        Ok(Self {
            features,
            ..self.clone()
        })
    }

    /// Undirected edges `(i, j, w)` with `i < j`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.edge_count());
        for i in 0..self.node_count() {
            for (&j, &w) in self.neighbors(i).iter().zip(self.weights(i)) {
                if i < j {
                    out.push((i, j, w));
                }
            }
        }
        out
    }

    /// Structural invariants: symmetric, loop-free, sorted, weights in (0, 1].
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.node_count() {
            let ns = self.neighbors(i);
            if ns.windows(2).any(|p| p[0] >= p[1]) {
                return Err(Error::Format(format!("node {i}: neighbors not strictly ascending")));
            }
            for (&j, &w) in ns.iter().zip(self.weights(i)) {
                if j == i {
                    return Err(Error::Format(format!("self-loop at {i}")));
                }
                if !(w > 0.0 && w <= 1.0) {
                    return Err(Error::Format(format!("weight {w} on ({i}, {j})")));
                }
                if self.weight(j, i).map(f64::to_bits) != Some(w.to_bits()) {
                    return Err(Error::Format(format!("edge ({i}, {j}) is not symmetric")));
                }
            }
        }
        Ok(())
    }
}

/// Counts, per unordered pair of distinct items, the sessions containing
/// both (each session is collapsed to its item set first).
pub fn cooccurrence_counts(train: &SessionCorpus) -> HashMap<(usize, usize), u64> {
    let mut counts: HashMap<(usize, usize), u64> = HashMap::new();
    for s in &train.sessions {
        let mut items = s.items.clone();
        items.sort_unstable();
        items.dedup();
        for (a, &i) in items.iter().enumerate() {
            for &j in &items[a + 1..] {
                *counts.entry((i, j)).or_default() += 1;
            }
        }
    }
    counts
}

/// Builds the co-occurrence graph over `features.nrows()` items.
pub fn build_cograph(train: &SessionCorpus, features: &Matrix, norm: Normalization) -> Result<CoGraph> {
    let n = features.nrows();
    if let Some(bad) = train.sessions.iter().flat_map(|s| &s.items).find(|&&i| i >= n) {
        return Err(Error::shape("build_cograph", format!("item {bad} outside catalog of {n}")));
    }
    let counts = cooccurrence_counts(train);
    let max = counts.values().copied().max().unwrap_or(0);
    if max == 0 {
        return Err(Error::DegenerateGraph);
    }
    let mut edges: Vec<(usize, usize, f64)> = counts
        .into_iter()
        .map(|((i, j), c)| (i, j, norm.apply(c, max)))
        .collect();
    edges.sort_by_key(|&(i, j, _)| (i, j));
    CoGraph::from_edges(n, &edges, max, features.clone())
}

// Serialization.

const BINARY_MAGIC: &[u8; 4] = b"SGCG";

/// Text layout: a header line `n edge_count c_max`, then one `i j w` line
/// per undirected edge (`i < j`, ascending). Weights use shortest
/// round-trip decimals.
pub fn write_graph_text<W: Write>(mut w: W, g: &CoGraph) -> Result<()> {
    writeln!(w, "{} {} {}", g.node_count(), g.edge_count(), g.max_count())?;
    for (i, j, wt) in g.edges() {
        writeln!(w, "{i} {j} {wt:?}")?;
    }
    Ok(())
}

pub fn read_graph_text<R: Read>(r: R, features: Matrix) -> Result<CoGraph> {
    let mut lines = BufReader::new(r).lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty graph file".into()))??;
    let h: Vec<u64> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Format(format!("bad header {header:?}"))))
        .collect::<Result<_>>()?;
    let [n, m, max] = h[..] else {
        return Err(Error::Format(format!("bad header {header:?}")));
    };
    let mut edges = Vec::with_capacity(m as usize);
    for (k, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Row {
            row: k + 2,
            message: format!("bad edge {line:?}"),
        };
        let mut p = line.split_whitespace();
        let i = p.next().and_then(|t| t.parse().ok()).ok_or_else(bad)?;
        let j = p.next().and_then(|t| t.parse().ok()).ok_or_else(bad)?;
        let w = p.next().and_then(|t| t.parse().ok()).ok_or_else(bad)?;
        edges.push((i, j, w));
    }
    if edges.len() as u64 != m {
        return Err(Error::Format(format!("header promises {m} edges, found {}", edges.len())));
    }
    CoGraph::from_edges(n as usize, &edges, max, features)
}

/// Binary layout (little-endian): magic `"SGCG"`, `u32` version 1,
/// `u64` n, `u64` edge count, `u64` c_max, then per edge `u64` i, `u64` j,
/// `f64` weight, with `i < j` ascending.
pub fn write_graph_binary<W: Write>(mut w: W, g: &CoGraph) -> Result<()> {
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&1u32.to_le_bytes())?;
    w.write_all(&(g.node_count() as u64).to_le_bytes())?;
    w.write_all(&(g.edge_count() as u64).to_le_bytes())?;
    w.write_all(&g.max_count().to_le_bytes())?;
    for (i, j, wt) in g.edges() {
        w.write_all(&(i as u64).to_le_bytes())?;
        w.write_all(&(j as u64).to_le_bytes())?;
        w.write_all(&wt.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_graph_binary<R: Read>(mut r: R, features: Matrix) -> Result<CoGraph> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BINARY_MAGIC {
        return Err(Error::Format("not a binary graph file".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    if u32::from_le_bytes(b4) != 1 {
        return Err(Error::Format("unsupported graph file version".into()));
    }
    let mut b8 = [0u8; 8];
    let mut next = |r: &mut R| -> Result<u64> {
        r.read_exact(&mut b8)?;
        Ok(u64::from_le_bytes(b8))
    };
    let n = next(&mut r)? as usize;
    let m = next(&mut r)? as usize;
    let max = next(&mut r)?;
    let mut edges = Vec::with_capacity(m);
    for _ in 0..m {
        let i = next(&mut r)? as usize;
        let j = next(&mut r)? as usize;
        let w = f64::from_bits(next(&mut r)?);
        edges.push((i, j, w));
    }
    CoGraph::from_edges(n, &edges, max, features)
}

/// Source of neighbor lists for sampling; lets a new node join an existing
/// graph without rebuilding it.
pub trait Neighborhood {
    fn node_count(&self) -> usize;
    fn neighbors_of(&self, node: usize) -> (&[usize], &[f64]);
}

impl Neighborhood for CoGraph {
    fn node_count(&self) -> usize {
        CoGraph::node_count(self)
    }

    fn neighbors_of(&self, node: usize) -> (&[usize], &[f64]) {
        (self.neighbors(node), self.weights(node))
    }
}

/// Sampled neighbor lists for one layer: `lists[k]` belongs to `nodes[k]`,
/// holds global neighbor ids ascending with parallel weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledLayer {
    pub nodes: Vec<usize>,
    pub neighbors: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
}

/// Multi-hop neighborhood sample around a seed set.
///
/// `frontiers[0]` is the sorted seed set; `hops[k]` holds the sampled
/// neighbors of every node of `frontiers[k]` and `frontiers[k + 1]` is
/// `frontiers[k]` plus those neighbors. With fanouts `(f1, f2)` the first
/// hop lists up to f1 neighbors per seed and the second up to f2 neighbors
/// per first-hop frontier node.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSample {
    pub hops: Vec<SampledLayer>,
    pub frontiers: Vec<Vec<usize>>,
}

impl NeighborSample {
    pub fn seeds(&self) -> &[usize] {
        &self.frontiers[0]
    }

    /// Every node the sample touches, sorted.
    pub fn closure(&self) -> &[usize] {
        self.frontiers.last().expect("at least the seed frontier")
    }

    pub fn depth(&self) -> usize {
        self.hops.len()
    }
}

/// Draws up to `fanout` distinct neighbors uniformly without replacement;
/// all neighbors when the degree is at most `fanout`. Result ascending.
pub fn sample_list<G: Neighborhood + ?Sized, R: Rng>(g: &G, node: usize, fanout: usize, rng: &mut R) -> (Vec<usize>, Vec<f64>) {
    let (ns, ws) = g.neighbors_of(node);
    if ns.len() <= fanout {
        return (ns.to_vec(), ws.to_vec());
    }
    let mut picks = index::sample(rng, ns.len(), fanout).into_vec();
    picks.sort_unstable();
    (picks.iter().map(|&k| ns[k]).collect(), picks.iter().map(|&k| ws[k]).collect())
}

fn sample_layer<G: Neighborhood + ?Sized, R: Rng>(g: &G, nodes: Vec<usize>, fanout: usize, rng: &mut R) -> SampledLayer {
    let mut neighbors = Vec::with_capacity(nodes.len());
    let mut weights = Vec::with_capacity(nodes.len());
    for &v in &nodes {
        let (n, w) = sample_list(g, v, fanout, rng);
        neighbors.push(n);
        weights.push(w);
    }
    SampledLayer {
        nodes,
        neighbors,
        weights,
    }
}

/// Samples `fanouts.len()` hops around `seeds` (deduplicated and sorted
/// first). Fanouts below 1 are treated as 1.
pub fn sample_neighbors<G: Neighborhood + ?Sized, R: Rng>(
    g: &G,
    seeds: &[usize],
    fanouts: &[usize],
    rng: &mut R,
) -> Result<NeighborSample> {
    let n = g.node_count();
    if let Some(&bad) = seeds.iter().find(|&&s| s >= n) {
        return Err(Error::shape("sample_neighbors", format!("seed {bad} outside {n} nodes")));
    }
    let mut frontier = seeds.to_vec();
    frontier.sort_unstable();
    frontier.dedup();
    let mut frontiers = vec![frontier];
    let mut hops = Vec::with_capacity(fanouts.len());
    for &fanout in fanouts {
        let current = frontiers.last().expect("nonempty").clone();
        let hop = sample_layer(g, current.clone(), fanout.max(1), rng);
        let mut next: Vec<usize> = current.into_iter().chain(hop.neighbors.iter().flatten().copied()).collect();
        next.sort_unstable();
        next.dedup();
        hops.push(hop);
        frontiers.push(next);
    }
    Ok(NeighborSample { hops, frontiers })
}

/// Unsampled `depth`-hop neighborhood of `seeds`.
pub fn full_neighborhood<G: Neighborhood + ?Sized>(g: &G, seeds: &[usize], depth: usize) -> Result<NeighborSample> {
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    sample_neighbors(g, seeds, &vec![usize::MAX; depth], &mut rng)
}

/// Dense adjacency-weight matrix (zero where no edge); for tests and small
/// graphs.
pub fn dense_weights(g: &CoGraph) -> Array2<f64> {
    let n = g.node_count();
    let mut a = Array2::zeros((n, n));
    for (i, j, w) in g.edges() {
        a[[i, j]] = w;
        a[[j, i]] = w;
    }
    a
}
