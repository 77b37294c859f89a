//! Synthetic corpora and graphs with known structure.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cograph::CoGraph;
use crate::error::Result;
use crate::sessiondata::{FeatureKind, FeatureSchema, FeatureSpec, Interaction};

/// Sessions drawn from item clusters: each session picks one cluster and
/// walks through it, occasionally jumping to a random item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterCorpusConfig {
    pub items: usize,
    pub clusters: usize,
    pub sessions: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a step leaves the session's cluster.
    pub noise: f64,
    /// Distinct values of the categorical item feature.
    pub categories: usize,
    /// Probability that an item's category is derived from its cluster
    /// rather than drawn uniformly.
    pub feature_signal: f64,
    pub seed: u64,
}

impl Default for ClusterCorpusConfig {
    fn default() -> Self {
        Self::smoke(0)
    }
}

impl ClusterCorpusConfig {
    /// 100 items, 500 sessions.
    pub fn smoke(seed: u64) -> Self {
        Self {
            items: 100,
            clusters: 10,
            sessions: 500,
            min_len: 3,
            max_len: 8,
            noise: 0.05,
            categories: 8,
            feature_signal: 0.0,
            seed,
        }
    }

    /// 500 items, 5000 sessions.
    pub fn clustered(seed: u64) -> Self {
        Self {
            items: 500,
            clusters: 25,
            sessions: 5000,
            min_len: 3,
            max_len: 8,
            noise: 0.05,
            categories: 10,
            feature_signal: 0.0,
            seed,
        }
    }
}

pub fn synthetic_schema() -> FeatureSchema {
    FeatureSchema::new(vec![
        FeatureSpec {
            name: "category".into(),
            kind: FeatureKind::Categorical,
        },
        FeatureSpec {
            name: "price".into(),
            kind: FeatureKind::Numeric,
        },
    ])
    .expect("valid schema")
}

/// Cluster of every item: item `i` belongs to cluster `i % clusters`.
pub fn item_cluster(item: usize, clusters: usize) -> usize {
    item % clusters
}

/// Interactions of a clustered corpus, session ids `s0, s1, …` with
/// increasing timestamps.
pub fn clustered_interactions(cfg: &ClusterCorpusConfig) -> Vec<Interaction> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let clusters = cfg.clusters.clamp(1, cfg.items.max(1));
    let categories = cfg.categories.max(1);
    let features: Vec<Vec<String>> = (0..cfg.items)
        .map(|i| {
            let category = if rng.gen_bool(cfg.feature_signal) {
                item_cluster(i, clusters) % categories
            } else {
                rng.gen_range(0..categories)
            };
            vec![
                format!("c{category}"),
                format!("{:.2}", rng.gen_range(1.0..100.0)),
            ]
        })
        .collect();
    let members: Vec<Vec<usize>> = (0..clusters)
        .map(|c| (0..cfg.items).filter(|&i| item_cluster(i, clusters) == c).collect())
        .collect();
    let mut out = Vec::new();
    let mut clock = 1_600_000_000i64;
    for s in 0..cfg.sessions {
        let cluster = &members[rng.gen_range(0..clusters)];
        let len = rng.gen_range(cfg.min_len..=cfg.max_len.max(cfg.min_len));
        let mut walk: Vec<usize> = cluster.choose_multiple(&mut rng, len.min(cluster.len())).copied().collect();
        while walk.len() < len {
            walk.push(*cluster.choose(&mut rng).expect("nonempty cluster"));
        }
        for item in walk.iter_mut() {
            if rng.gen_bool(cfg.noise) {
                *item = rng.gen_range(0..cfg.items);
            }
        }
        for item in walk {
            clock += rng.gen_range(5..120);
            out.push(Interaction {
                session_id: format!("s{s}"),
                item_id: format!("i{item}"),
                timestamp: clock,
                features: features[item].clone(),
            });
        }
        clock += 3600;
    }
    out
}

/// Two equal communities of `n` nodes total; edges appear independently with
/// probability `p_in` inside a block and `p_out` across. Features are the
/// one-hot block indicator. Returns the graph and each node's block.
pub fn two_block_graph(n: usize, p_in: f64, p_out: f64, seed: u64) -> Result<(CoGraph, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block: Vec<usize> = (0..n).map(|i| usize::from(i >= n / 2)).collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if block[i] == block[j] { p_in } else { p_out };
            if rng.gen_bool(p) {
                edges.push((i, j, 1.0));
            }
        }
    }
    let mut x = Array2::zeros((n, 2));
    for (i, &b) in block.iter().enumerate() {
        x[[i, b]] = 1.0;
    }
    Ok((CoGraph::from_edges(n, &edges, 1, x)?, block))
}
