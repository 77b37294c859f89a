//! Session-kNN recommenders with optional embedding-threshold matching.
//!
//! With matching on, two sessions are compared through the pairs of items
//! whose embedding cosine distance is at most `distance_threshold`:
//!
//! ```text
//! r(i, c) = |T_ic| / (√|S_i| · √|S_c|)
//! T_ic = {(x, y) ∈ S_i × S_c : 1 − cos(e_x, e_y) ≤ τ}
//! ```
//!
//! One-hot embeddings with `τ < 1` make `T_ic` the set of shared items, so
//! `r` reduces to the binary cosine of plain SKNN.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffcore::Matrix;
use crate::error::{Error, Result};
use crate::sessiondata::{compare_ids, ItemCatalog, SessionCorpus};

pub const DEFAULT_K: usize = 100;
pub const DEFAULT_SAMPLE: usize = 1000;
pub const DEFAULT_K_REC: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BaseMode {
    #[default]
    #[serde(rename = "sknn")]
    Sknn,
    #[serde(rename = "v-sknn")]
    VSknn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionScoring {
    #[default]
    Rscore,
    /// r-score similarity plus last-match position weighting of items.
    Position,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedMatch {
    pub distance_threshold: f64,
    pub session_scoring: SessionScoring,
    /// Also admit sessions reached only through embedding matches.
    pub expand_pool: bool,
}

impl Default for EmbedMatch {
    fn default() -> Self {
        Self {
            distance_threshold: 0.1,
            session_scoring: SessionScoring::Rscore,
            expand_pool: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnnConfig {
    pub k: usize,
    pub m_sample: usize,
    pub base_mode: BaseMode,
    pub embed_match: Option<EmbedMatch>,
    pub k_rec: usize,
    pub exclude_input_items: bool,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            m_sample: DEFAULT_SAMPLE,
            base_mode: BaseMode::Sknn,
            embed_match: None,
            k_rec: DEFAULT_K_REC,
            exclude_input_items: false,
        }
    }
}

impl KnnConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.k == 0 {
            errs.push("knn.k must be positive".into());
        }
        if self.k > self.m_sample {
            errs.push(format!("knn.k ({}) exceeds knn.m_sample ({})", self.k, self.m_sample));
        }
        if self.k_rec == 0 {
            errs.push("knn.k_rec must be positive".into());
        }
        if let Some(m) = self.embed_match {
            if !(0.0..=2.0).contains(&m.distance_threshold) {
                errs.push(format!(
                    "knn.embed_match.distance_threshold = {} must lie in [0, 2]",
                    m.distance_threshold
                ));
            }
        }
        errs
    }

    fn position_weighted(&self) -> bool {
        self.base_mode == BaseMode::VSknn
            || matches!(self.embed_match, Some(m) if m.session_scoring == SessionScoring::Position)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexedSession {
    pub id: String,
    pub start: i64,
    pub items: Vec<usize>,
    /// Distinct items, ascending.
    pub set: Vec<usize>,
}

/// Training sessions ordered oldest first, with an item → session inverted
/// index. A session's position is its recency rank.
#[derive(Debug, Clone)]
pub struct SessionIndex {
    sessions: Vec<IndexedSession>,
    postings: Vec<Vec<usize>>,
}

impl SessionIndex {
    pub fn new(train: &SessionCorpus, item_count: usize) -> Result<Self> {
        let mut sessions: Vec<IndexedSession> = train
            .sessions
            .iter()
            .map(|s| {
                let mut set = s.items.clone();
                set.sort_unstable();
                set.dedup();
                IndexedSession {
                    id: s.id.clone(),
                    start: s.start,
                    items: s.items.clone(),
                    set,
                }
            })
            .collect();
        sessions.sort_by(|a, b| a.start.cmp(&b.start).then_with(|| compare_ids(&a.id, &b.id)));
        let mut postings = vec![Vec::new(); item_count];
        for (pos, s) in sessions.iter().enumerate() {
            for &x in &s.set {
                let list = postings
                    .get_mut(x)
                    .ok_or_else(|| Error::Format(format!("session {} references item {x} outside the catalog", s.id)))?;
                list.push(pos);
            }
        }
        Ok(Self { sessions, postings })
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn item_count(&self) -> usize {
        self.postings.len()
    }

    pub fn session(&self, pos: usize) -> &IndexedSession {
        &self.sessions[pos]
    }

    pub fn sessions(&self) -> &[IndexedSession] {
        &self.sessions
    }

    /// Positions of sessions containing `item`, oldest first; empty for
    /// unknown items.
    pub fn sessions_with(&self, item: usize) -> &[usize] {
        self.postings.get(item).map_or(&[], |p| p)
    }
}

/// Unit-normalized embedding rows for distance queries.
#[derive(Debug, Clone)]
pub struct EmbeddingMatcher {
    unit: Matrix,
}

impl EmbeddingMatcher {
    pub fn new(embeddings: &Matrix) -> Self {
        let mut unit = embeddings.clone();
        for mut row in unit.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row /= norm;
            }
        }
        Self { unit }
    }

    pub fn len(&self) -> usize {
        self.unit.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.unit.nrows() == 0
    }

    /// `1 − cos`; a zero row is at distance 1 from everything.
    pub fn distance(&self, x: usize, y: usize) -> f64 {
        1.0 - self.unit.row(x).dot(&self.unit.row(y))
    }

    fn check(&self, items: &[usize]) -> Result<()> {
        match items.iter().find(|&&x| x >= self.len()) {
            Some(x) => Err(Error::Config(vec![format!("no embedding row for item {x}")])),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    /// Recency position in the index.
    pub session: usize,
    pub similarity: f64,
    /// 1-based position in the input of the most recent input item matched
    /// in this session; 0 if none.
    pub last_match: usize,
}

fn distinct(items: &[usize]) -> Vec<usize> {
    let mut set = items.to_vec();
    set.sort_unstable();
    set.dedup();
    set
}

/// The `k` most similar sessions among the `m_sample` most recent ones
/// sharing a match with `input`, best first; ties go to the newer session.
/// Input items without postings are skipped for lookup but still take part
/// in embedding matching.
pub fn find_neighbors(
    input: &[usize],
    index: &SessionIndex,
    config: &KnnConfig,
    matcher: Option<&EmbeddingMatcher>,
) -> Result<Vec<Neighbor>> {
    let set_i = distinct(input);
    if set_i.is_empty() {
        return Ok(Vec::new());
    }
    let matching = match (config.embed_match, matcher) {
        (Some(m), Some(e)) => {
            e.check(&set_i)?;
            e.check(&[index.item_count().saturating_sub(1)])?;
            Some((m, e))
        }
        (Some(_), None) => return Err(Error::Config(vec!["embedding matching needs an embedding matrix".into()])),
        (None, _) => None,
    };
    let mut pool: Vec<usize> = set_i.iter().flat_map(|&x| index.sessions_with(x).iter().copied()).collect();
    if let Some((m, e)) = matching.filter(|(m, _)| m.expand_pool) {
        for y in 0..index.item_count() {
            if set_i.iter().any(|&x| e.distance(x, y) <= m.distance_threshold) {
                pool.extend_from_slice(index.sessions_with(y));
            }
        }
    }
    pool.sort_unstable_by(|a, b| b.cmp(a));
    pool.dedup();
    pool.truncate(config.m_sample);

    let norm_i = (set_i.len() as f64).sqrt();
    let mut scored: Vec<Neighbor> = pool
        .into_iter()
        .filter_map(|pos| {
            let s = index.session(pos);
            let norm = norm_i * (s.set.len() as f64).sqrt();
            let (count, matched): (usize, Box<dyn Fn(usize) -> bool>) = match matching {
                None => {
                    let count = set_i.iter().filter(|x| s.set.binary_search(x).is_ok()).count();
                    (count, Box::new(|x| s.set.binary_search(&x).is_ok()))
                }
                Some((m, e)) => {
                    let tau = m.distance_threshold;
                    let count = set_i
                        .iter()
                        .map(|&x| s.set.iter().filter(|&&y| e.distance(x, y) <= tau).count())
                        .sum();
                    (count, Box::new(move |x| s.set.iter().any(|&y| e.distance(x, y) <= tau)))
                }
            };
            if count == 0 {
                return None;
            }
            let last_match = (1..=input.len()).rev().find(|&p| matched(input[p - 1])).unwrap_or(0);
            Some(Neighbor {
                session: pos,
                similarity: count as f64 / norm,
                last_match,
            })
        })
        .collect();
    scored.sort_by(|a, b| {
        b.similarity
            .partial_cmp(&a.similarity)
            .unwrap_or(Ordering::Equal)
            .then(b.session.cmp(&a.session))
    });
    scored.truncate(config.k);
    Ok(scored)
}

/// `score(x) = Σ_{s ∋ x} sim(s) · w(s)` over the neighbors.
pub fn score_items(neighbors: &[Neighbor], input_len: usize, index: &SessionIndex, config: &KnnConfig) -> HashMap<usize, f64> {
    let positional = config.position_weighted();
    let mut scores = HashMap::new();
    for n in neighbors {
        let w = if positional {
            n.last_match as f64 / input_len.max(1) as f64
        } else {
            1.0
        };
        for &x in &index.session(n.session).set {
            *scores.entry(x).or_insert(0.0) += n.similarity * w;
        }
    }
    scores
}

/// Top `k_rec` items by descending score, ties by ascending index.
pub fn rank(scores: HashMap<usize, f64>, k_rec: usize, exclude: &[usize]) -> Vec<(usize, f64)> {
    let mut list: Vec<(usize, f64)> = scores.into_iter().filter(|(x, _)| !exclude.contains(x)).collect();
    list.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    list.truncate(k_rec);
    list
}

pub fn recommend(
    input: &[usize],
    index: &SessionIndex,
    config: &KnnConfig,
    matcher: Option<&EmbeddingMatcher>,
) -> Result<Vec<(usize, f64)>> {
    let neighbors = find_neighbors(input, index, config, matcher)?;
    let scores = score_items(&neighbors, input.len(), index, config);
    let exclude = if config.exclude_input_items { input } else { &[] };
    Ok(rank(scores, config.k_rec, exclude))
}

/// A ready-to-query recommender owning its index and embeddings.
#[derive(Debug, Clone)]
pub struct KnnRecommender {
    pub index: SessionIndex,
    pub config: KnnConfig,
    pub matcher: Option<EmbeddingMatcher>,
}

impl KnnRecommender {
    pub fn new(train: &SessionCorpus, item_count: usize, config: KnnConfig, embeddings: Option<&Matrix>) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let index = SessionIndex::new(train, item_count)?;
        let matcher = match (config.embed_match, embeddings) {
            (Some(_), None) => return Err(Error::Config(vec!["embedding matching needs an embedding matrix".into()])),
            (Some(_), Some(e)) => {
                let m = EmbeddingMatcher::new(e);
                m.check(&[item_count.saturating_sub(1)])?;
                Some(m)
            }
            (None, _) => None,
        };
        Ok(Self { index, config, matcher })
    }

    pub fn recommend(&self, input: &[usize]) -> Result<Vec<(usize, f64)>> {
        recommend(input, &self.index, &self.config, self.matcher.as_ref())
    }
}

/// One query per non-empty line of space-separated external item ids. Query
/// ids are 1-based line numbers; ids missing from the catalog are dropped.
pub fn read_queries<R: Read>(r: R, catalog: &ItemCatalog) -> Result<Vec<(usize, Vec<usize>)>> {
    let mut out = Vec::new();
    for (k, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let items = line.split_whitespace().filter_map(|id| catalog.index_of(id)).collect();
        out.push((k + 1, items));
    }
    Ok(out)
}

/// Rows `query<TAB>rank<TAB>item<TAB>score` with ranks from 1 and scores to
/// six decimals.
pub fn write_ranked<W: Write>(mut w: W, results: &[(usize, Vec<(usize, f64)>)], catalog: &ItemCatalog) -> Result<()> {
    for (q, list) in results {
        for (r, (x, s)) in list.iter().enumerate() {
            writeln!(w, "{q}\t{}\t{}\t{s:.6}", r + 1, catalog.external_id(*x))?;
        }
    }
    Ok(())
}

/// One-hot rows for `n` items, the degenerate embedding under which
/// matching reduces to exact item overlap.
pub fn one_hot(n: usize) -> Matrix {
    Array2::eye(n)
}
