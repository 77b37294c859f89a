//! Interaction log ingestion and corpus preparation.
//!
//! The flow is `load_interactions` → `sessionize` → `filter_corpus` →
//! `temporal_split` → `generate_prefixes`. Item features are encoded by a
//! [`FeatureEncoder`] fitted on the training catalog.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Interaction-count threshold below which items are removed.
pub const MIN_ITEM_SUPPORT: usize = 5;
/// Sessions shorter than this are removed.
pub const MIN_SESSION_LEN: usize = 2;
/// Longest prefix fed to a recommender.
pub const MAX_PREFIX_LEN: usize = 50;
/// Train / validation / test fractions.
pub const SPLIT_FRACTIONS: [f64; 3] = [0.8, 0.1, 0.1];
/// Default inactivity gap that closes a session.
pub const DEFAULT_GAP_SECONDS: i64 = 1800;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Categorical,
    Numeric,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureSchema {
    features: Vec<FeatureSpec>,
}

impl FeatureSchema {
    pub fn new(features: Vec<FeatureSpec>) -> Result<Self> {
        let mut seen = HashSet::new();
        for f in &features {
            if matches!(f.name.as_str(), "session_id" | "item_id" | "timestamp") {
                return Err(Error::Schema(format!("feature name {:?} is reserved", f.name)));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("duplicate feature name {:?}", f.name)));
            }
        }
        Ok(Self { features })
    }

    pub fn features(&self) -> &[FeatureSpec] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub session_id: String,
    pub item_id: String,
    pub timestamp: i64,
    pub features: Vec<String>,
}

/// Delimited-text layout of an interaction log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DelimitedFormat {
    pub delimiter: u8,
}

impl DelimitedFormat {
    pub const CSV: Self = Self { delimiter: b',' };
    pub const TSV: Self = Self { delimiter: b'\t' };
}

impl Default for DelimitedFormat {
    fn default() -> Self {
        Self::CSV
    }
}

/// Parses a header-led delimited log. Columns are located by name; the
/// reported row number is the 1-based line number in the input.
pub fn load_interactions<R: Read>(
    source: R,
    schema: &FeatureSchema,
    format: DelimitedFormat,
) -> Result<Vec<Interaction>> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(format.delimiter)
        .has_headers(true)
        .flexible(true)
        .from_reader(source);
    let header = reader
        .headers()
        .map_err(|e| Error::Schema(format!("unreadable header: {e}")))?
        .clone();
    let column = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("header lacks column {name:?}")))
    };
    let sid_col = column("session_id")?;
    let item_col = column("item_id")?;
    let ts_col = column("timestamp")?;
    let feature_cols = schema
        .features()
        .iter()
        .map(|f| column(&f.name))
        .collect::<Result<Vec<_>>>()?;

    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| Error::Row {
            row,
            message: e.to_string(),
        })?;
        if record.len() != header.len() {
            return Err(Error::Row {
                row,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let field = |c: usize| record.get(c).unwrap_or("").trim();
        let session_id = field(sid_col);
        if session_id.is_empty() {
            return Err(Error::Row {
                row,
                message: "empty session_id".into(),
            });
        }
        let item_id = field(item_col);
        if item_id.is_empty() {
            return Err(Error::Row {
                row,
                message: "empty item_id".into(),
            });
        }
        let timestamp: i64 = field(ts_col).parse().map_err(|_| Error::Row {
            row,
            message: format!("unparseable timestamp {:?}", field(ts_col)),
        })?;
        if timestamp < 0 {
            return Err(Error::Row {
                row,
                message: format!("negative timestamp {timestamp}"),
            });
        }
        out.push(Interaction {
            session_id: session_id.to_string(),
            item_id: item_id.to_string(),
            timestamp,
            features: feature_cols.iter().map(|&c| field(c).to_string()).collect(),
        });
    }
    Ok(out)
}

/// Writes interactions in the layout `load_interactions` reads.
pub fn write_interactions<W: Write>(
    sink: W,
    schema: &FeatureSchema,
    format: DelimitedFormat,
    interactions: &[Interaction],
) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .delimiter(format.delimiter)
        .from_writer(sink);
    let mut header = vec!["session_id", "item_id", "timestamp"];
    header.extend(schema.features().iter().map(|f| f.name.as_str()));
    writer.write_record(&header).map_err(csv_io)?;
    for it in interactions {
        let ts = it.timestamp.to_string();
        let mut rec = vec![it.session_id.as_str(), it.item_id.as_str(), ts.as_str()];
        rec.extend(it.features.iter().map(String::as_str));
        writer.write_record(&rec).map_err(csv_io)?;
    }
    writer.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Orders identifiers numerically when both parse as integers, otherwise
/// lexicographically.
pub fn compare_ids(a: &str, b: &str) -> Ordering {
    match (a.parse::<i128>(), b.parse::<i128>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

/// A timestamp-ordered run of interactions before filtering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawSession {
    pub id: String,
    pub interactions: Vec<Interaction>,
}

impl RawSession {
    pub fn start(&self) -> i64 {
        self.interactions.first().map_or(0, |i| i.timestamp)
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }
}

/// Groups interactions by `session_id`, sorts each group by timestamp
/// (stable) and, when `gap_seconds` is set, cuts the group wherever two
/// consecutive events are more than `gap_seconds` apart. Split pieces get
/// ids `"<session_id>#<k>"`. The output is sorted by (start, id).
///
/// For logs keyed by user rather than by session, put the user id in the
/// `session_id` column and pass a gap.
pub fn sessionize(interactions: &[Interaction], gap_seconds: Option<i64>) -> Vec<RawSession> {
    let mut groups: HashMap<&str, Vec<&Interaction>> = HashMap::new();
    for it in interactions {
        groups.entry(it.session_id.as_str()).or_default().push(it);
    }
    let mut out = Vec::new();
    for (sid, mut events) in groups {
        events.sort_by_key(|e| e.timestamp);
        let mut runs: Vec<Vec<Interaction>> = Vec::new();
        for e in events {
            let cut = match (gap_seconds, runs.last().and_then(|r| r.last())) {
                (Some(gap), Some(prev)) => e.timestamp - prev.timestamp > gap,
                (_, None) => true,
                (None, Some(_)) => false,
            };
            if cut {
                runs.push(Vec::new());
            }
            runs.last_mut().expect("run exists").push(e.clone());
        }
        let split = runs.len() > 1;
        for (k, run) in runs.into_iter().enumerate() {
            let id = if split {
                format!("{sid}#{k}")
            } else {
                sid.to_string()
            };
            out.push(RawSession {
                id,
                interactions: run,
            });
        }
    }
    out.sort_by(|a, b| a.start().cmp(&b.start()).then_with(|| compare_ids(&a.id, &b.id)));
    out
}

/// One session over dense catalog indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub id: String,
    pub start: i64,
    pub items: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SessionCorpus {
    pub sessions: Vec<Session>,
}

impl SessionCorpus {
    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn interaction_count(&self) -> usize {
        self.sessions.iter().map(|s| s.items.len()).sum()
    }

    /// All prefix samples of every session, in session order.
    pub fn prefixes(&self, max_len: usize) -> Vec<PrefixSample> {
        self.sessions
            .iter()
            .flat_map(|s| generate_prefixes(&s.items, max_len))
            .collect()
    }
}

/// Fitted feature encoding: one-hot (plus an unknown column) for
/// categorical features and z-scores for numeric ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEncoder {
    columns: Vec<ColumnEncoder>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum ColumnEncoder {
    Categorical { values: Vec<String> },
    Numeric { mean: f64, std: f64 },
}

impl ColumnEncoder {
    fn width(&self) -> usize {
        match self {
            ColumnEncoder::Categorical { values } => values.len() + 1,
            ColumnEncoder::Numeric { .. } => 1,
        }
    }
}

fn parse_numeric(raw: &str, feature: usize) -> Result<f64> {
    let v: f64 = raw
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("feature {feature}: {raw:?} is not numeric")))?;
    if !v.is_finite() {
        return Err(Error::Format(format!("feature {feature}: {raw:?} is not finite")));
    }
    Ok(v)
}

impl FeatureEncoder {
    /// Fits on one raw row per catalog item.
    pub fn fit(schema: &FeatureSchema, rows: &[Vec<String>]) -> Result<Self> {
        let mut columns = Vec::with_capacity(schema.len());
        for (c, spec) in schema.features().iter().enumerate() {
            let col = match spec.kind {
                FeatureKind::Categorical => {
                    let mut values: Vec<String> = rows
                        .iter()
                        .map(|r| r[c].clone())
                        .collect::<HashSet<_>>()
                        .into_iter()
                        .collect();
                    values.sort();
                    ColumnEncoder::Categorical { values }
                }
                FeatureKind::Numeric => {
                    let xs = rows
                        .iter()
                        .map(|r| parse_numeric(&r[c], c))
                        .collect::<Result<Vec<_>>>()?;
                    let n = xs.len().max(1) as f64;
                    let mean = xs.iter().sum::<f64>() / n;
                    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                    ColumnEncoder::Numeric {
                        mean,
                        std: var.sqrt(),
                    }
                }
            };
            columns.push(col);
        }
        Ok(Self { columns })
    }

    pub fn width(&self) -> usize {
        self.columns.iter().map(ColumnEncoder::width).sum()
    }

    pub fn feature_count(&self) -> usize {
        self.columns.len()
    }

    /// Encodes one raw row. Unseen categories light the unknown column;
    /// unparseable numerics encode as 0 (the training mean).
    pub fn encode_row(&self, raw: &[String]) -> Result<Vec<f64>> {
        if raw.len() != self.columns.len() {
            return Err(Error::shape(
                "encode_row",
                format!("expected {} raw features, got {}", self.columns.len(), raw.len()),
            ));
        }
        let mut out = Vec::with_capacity(self.width());
        for (col, value) in self.columns.iter().zip(raw) {
            match col {
                ColumnEncoder::Categorical { values } => {
                    let hit = values.binary_search(value).ok();
                    for k in 0..values.len() {
                        out.push(if hit == Some(k) { 1.0 } else { 0.0 });
                    }
                    out.push(if hit.is_none() { 1.0 } else { 0.0 });
                }
                ColumnEncoder::Numeric { mean, std } => {
                    let z = match value.trim().parse::<f64>() {
                        Ok(v) if v.is_finite() && *std > 0.0 => (v - mean) / std,
                        _ => 0.0,
                    };
                    out.push(z);
                }
            }
        }
        Ok(out)
    }

    pub fn encode(&self, rows: &[Vec<String>]) -> Result<Array2<f64>> {
        let mut x = Array2::zeros((rows.len(), self.width()));
        for (i, r) in rows.iter().enumerate() {
            let enc = self.encode_row(r)?;
            for (j, v) in enc.into_iter().enumerate() {
                x[[i, j]] = v;
            }
        }
        Ok(x)
    }
}

/// Fits an encoder on `rows` and encodes them.
pub fn encode_features(rows: &[Vec<String>], schema: &FeatureSchema) -> Result<(FeatureEncoder, Array2<f64>)> {
    let enc = FeatureEncoder::fit(schema, rows)?;
    let x = enc.encode(rows)?;
    Ok((enc, x))
}

/// Dense item indexing plus the encoded feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemCatalog {
    schema: FeatureSchema,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    raw_features: Vec<Vec<String>>,
    encoder: FeatureEncoder,
    features: Array2<f64>,
}

impl ItemCatalog {
    /// Builds a catalog from (external id, raw feature row) pairs. Items are
    /// indexed in [`compare_ids`] order.
    pub fn build(schema: &FeatureSchema, mut items: Vec<(String, Vec<String>)>) -> Result<Self> {
        items.sort_by(|a, b| compare_ids(&a.0, &b.0));
        items.dedup_by(|a, b| a.0 == b.0);
        let ids: Vec<String> = items.iter().map(|(id, _)| id.clone()).collect();
        let raw_features: Vec<Vec<String>> = items.into_iter().map(|(_, f)| f).collect();
        let (encoder, features) = encode_features(&raw_features, schema)?;
        Ok(Self::from_parts(schema.clone(), ids, raw_features, encoder, features))
    }

    pub fn from_parts(
        schema: FeatureSchema,
        ids: Vec<String>,
        raw_features: Vec<Vec<String>>,
        encoder: FeatureEncoder,
        features: Array2<f64>,
    ) -> Self {
        let index = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        Self {
            schema,
            ids,
            index,
            raw_features,
            encoder,
            features,
        }
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, external: &str) -> Option<usize> {
        self.index.get(external).copied()
    }

    pub fn external_id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn raw_features(&self) -> &[Vec<String>] {
        &self.raw_features
    }

    pub fn encoder(&self) -> &FeatureEncoder {
        &self.encoder
    }
}

/// Removes items with fewer than `min_item_support` interactions and sessions
/// shorter than `min_session_len`, repeating both until nothing changes.
pub fn filter_sessions(raw: &[RawSession], min_item_support: usize, min_session_len: usize) -> Vec<RawSession> {
    let mut sessions: Vec<RawSession> = raw.to_vec();
    loop {
        let mut support: HashMap<&str, usize> = HashMap::new();
        for s in &sessions {
            for it in &s.interactions {
                *support.entry(it.item_id.as_str()).or_default() += 1;
            }
        }
        let rare: HashSet<String> = support
            .into_iter()
            .filter(|&(_, c)| c < min_item_support)
            .map(|(id, _)| id.to_string())
            .collect();
        let before: usize = sessions.iter().map(RawSession::len).sum::<usize>() + sessions.len();
        for s in &mut sessions {
            s.interactions.retain(|it| !rare.contains(&it.item_id));
        }
        sessions.retain(|s| s.len() >= min_session_len);
        let after: usize = sessions.iter().map(RawSession::len).sum::<usize>() + sessions.len();
        if after == before {
            return sessions;
        }
    }
}

/// Filters to a fixpoint and indexes the surviving items. An item's raw
/// features are taken from its earliest interaction.
pub fn filter_corpus(
    raw: &[RawSession],
    schema: &FeatureSchema,
    min_item_support: usize,
    min_session_len: usize,
) -> Result<(SessionCorpus, ItemCatalog)> {
    let kept = filter_sessions(raw, min_item_support, min_session_len);
    if kept.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut first: BTreeMap<&str, (i64, &Vec<String>)> = BTreeMap::new();
    for s in &kept {
        for it in &s.interactions {
            let e = first.entry(it.item_id.as_str()).or_insert((it.timestamp, &it.features));
            if it.timestamp < e.0 {
                *e = (it.timestamp, &it.features);
            }
        }
    }
    let items = first
        .into_iter()
        .map(|(id, (_, f))| (id.to_string(), f.clone()))
        .collect();
    let catalog = ItemCatalog::build(schema, items)?;
    let sessions = kept
        .iter()
        .map(|s| Session {
            id: s.id.clone(),
            start: s.start(),
            items: s
                .interactions
                .iter()
                .map(|it| catalog.index_of(&it.item_id).expect("item survived filtering"))
                .collect(),
        })
        .collect();
    Ok((SessionCorpus { sessions }, catalog))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub train: SessionCorpus,
    pub validation: SessionCorpus,
    pub test: SessionCorpus,
    /// Catalog over training items only; every split indexes into it.
    pub catalog: ItemCatalog,
    pub fractions: [f64; 3],
}

/// Split sizes for `n` sessions: ⌊f₀·n⌋, ⌊f₁·n⌋, remainder.
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> (usize, usize, usize) {
    let floor = |f: f64| ((n as f64) * f + 1e-9).floor() as usize;
    let train = floor(fractions[0]).min(n);
    let val = floor(fractions[1]).min(n - train);
    (train, val, n - train - val)
}

/// Splits whole sessions by start time (ties by session id). The catalog is
/// rebuilt over training items and re-fitted on training rows; items of
/// validation and test sessions missing from it are dropped in place.
pub fn temporal_split(corpus: &SessionCorpus, catalog: &ItemCatalog, fractions: [f64; 3]) -> Result<CorpusSplit> {
    let n = corpus.len();
    if n < 3 {
        return Err(Error::Split(n));
    }
    let mut ordered: Vec<&Session> = corpus.sessions.iter().collect();
    ordered.sort_by(|a, b| a.start.cmp(&b.start).then_with(|| compare_ids(&a.id, &b.id)));
    let (n_train, n_val, _) = split_sizes(n, fractions);

    let mut train_items: Vec<usize> = ordered[..n_train]
        .iter()
        .flat_map(|s| s.items.iter().copied())
        .collect();
    train_items.sort_unstable();
    train_items.dedup();
    let items = train_items
        .iter()
        .map(|&i| (catalog.external_id(i).to_string(), catalog.raw_features()[i].clone()))
        .collect();
    let train_catalog = ItemCatalog::build(catalog.schema(), items)?;

    let remap = |sessions: &[&Session]| SessionCorpus {
        sessions: sessions
            .iter()
            .map(|s| Session {
                id: s.id.clone(),
                start: s.start,
                items: s
                    .items
                    .iter()
                    .filter_map(|&i| train_catalog.index_of(catalog.external_id(i)))
                    .collect(),
            })
            .collect(),
    };
    Ok(CorpusSplit {
        train: remap(&ordered[..n_train]),
        validation: remap(&ordered[n_train..n_train + n_val]),
        test: remap(&ordered[n_train + n_val..]),
        catalog: train_catalog,
        fractions,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixSample {
    pub prefix: Vec<usize>,
    pub target: usize,
}

/// Expands a session into (prefix, next item) pairs, keeping the most
/// recent `max_len` items of long prefixes. Sessions shorter than two items
/// yield nothing.
pub fn generate_prefixes(session: &[usize], max_len: usize) -> Vec<PrefixSample> {
    (1..session.len())
        .map(|t| PrefixSample {
            prefix: session[t.saturating_sub(max_len)..t].to_vec(),
            target: session[t],
        })
        .collect()
}

// Line-delimited artifact formats.

/// Writes `session_id<TAB>space-separated item indices<TAB>start` per line.
pub fn write_corpus<W: Write>(mut sink: W, corpus: &SessionCorpus) -> Result<()> {
    for s in &corpus.sessions {
        let items: Vec<String> = s.items.iter().map(usize::to_string).collect();
        writeln!(sink, "{}\t{}\t{}", s.id, items.join(" "), s.start)?;
    }
    Ok(())
}

pub fn read_corpus<R: Read>(source: R) -> Result<SessionCorpus> {
    let mut sessions = Vec::new();
    for (i, line) in BufReader::new(source).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |m: &str| Error::Row {
            row: i + 1,
            message: m.to_string(),
        };
        let mut parts = line.split('\t');
        let id = parts.next().ok_or_else(|| bad("missing session id"))?;
        let items = parts.next().ok_or_else(|| bad("missing items"))?;
        let start = parts
            .next()
            .ok_or_else(|| bad("missing start"))?
            .parse()
            .map_err(|_| bad("bad start timestamp"))?;
        let items = items
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad("bad item index")))
            .collect::<Result<Vec<usize>>>()?;
        sessions.push(Session {
            id: id.to_string(),
            start,
            items,
        });
    }
    Ok(SessionCorpus { sessions })
}

/// Writes `index<TAB>external id` per line.
pub fn write_id_map<W: Write>(mut sink: W, catalog: &ItemCatalog) -> Result<()> {
    for (i, id) in catalog.ids().iter().enumerate() {
        writeln!(sink, "{i}\t{id}")?;
    }
    Ok(())
}

pub fn read_id_map<R: Read>(source: R) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for (i, line) in BufReader::new(source).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (idx, id) = line.split_once('\t').ok_or_else(|| Error::Row {
            row: i + 1,
            message: "expected index<TAB>id".into(),
        })?;
        if idx.parse::<usize>().ok() != Some(ids.len()) {
            return Err(Error::Row {
                row: i + 1,
                message: "indices must be contiguous from 0".into(),
            });
        }
        ids.push(id.to_string());
    }
    Ok(ids)
}

/// Writes one space-separated row of shortest round-trip decimals per item.
pub fn write_matrix<W: Write>(mut sink: W, x: &Array2<f64>) -> Result<()> {
    for row in x.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(sink, "{}", cells.join(" "))?;
    }
    Ok(())
}

pub fn read_matrix<R: Read>(source: R) -> Result<Array2<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in BufReader::new(source).lines().enumerate() {
        let line = line?;
        let row = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>().map_err(|_| Error::Row {
                    row: i + 1,
                    message: format!("bad float {t:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Format("ragged feature matrix".into()));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let n = if cols == 0 { 0 } else { flat.len() / cols };
    Array2::from_shape_vec((n, cols), flat).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> FeatureSchema {
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
        .unwrap()
    }

    fn ev(sid: &str, item: &str, ts: i64) -> Interaction {
        Interaction {
            session_id: sid.into(),
            item_id: item.into(),
            timestamp: ts,
            features: vec!["c".into(), "1".into()],
        }
    }

    #[test]
    fn parses_three_rows() {
        let text = "session_id,item_id,timestamp,category,price\n1,a,10,x,1.5\n1,b,20,y,2\n2,a,30,x,1.5\n";
        let rows = load_interactions(text.as_bytes(), &schema(), DelimitedFormat::CSV).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[1].item_id, "b");
        assert_eq!(rows[1].features, vec!["y", "2"]);
    }

    #[test]
    fn empty_item_names_row() {
        let text = "session_id,item_id,timestamp,category,price\n1,a,10,x,1\n1,,20,y,2\n";
        match load_interactions(text.as_bytes(), &schema(), DelimitedFormat::CSV) {
            Err(Error::Row { row, .. }) => assert_eq!(row, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_timestamp_and_header() {
        let text = "session_id,item_id,timestamp,category,price\n1,a,soon,x,1\n";
        assert!(matches!(
            load_interactions(text.as_bytes(), &schema(), DelimitedFormat::CSV),
            Err(Error::Row { row: 2, .. })
        ));
        let text = "session_id,item_id,category,price\n1,a,x,1\n";
        assert!(matches!(
            load_interactions(text.as_bytes(), &schema(), DelimitedFormat::CSV),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn duplicate_feature_names_rejected() {
        let f = FeatureSpec {
            name: "a".into(),
            kind: FeatureKind::Numeric,
        };
        assert!(FeatureSchema::new(vec![f.clone(), f]).is_err());
    }

    #[test]
    fn gap_splits_session() {
        let evs = vec![ev("u", "a", 2000), ev("u", "b", 0), ev("u", "c", 100)];
        let s = sessionize(&evs, Some(1800));
        let ts: Vec<Vec<i64>> = s
            .iter()
            .map(|r| r.interactions.iter().map(|i| i.timestamp).collect())
            .collect();
        assert_eq!(ts, vec![vec![0, 100], vec![2000]]);
        assert_eq!(s[0].id, "u#0");
    }

    #[test]
    fn single_interaction_session() {
        let s = sessionize(&[ev("s", "a", 5)], Some(1800));
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].len(), 1);
        assert_eq!(s[0].id, "s");
    }

    #[test]
    fn no_gap_keeps_explicit_sessions() {
        let evs = vec![ev("s", "a", 0), ev("s", "b", 100_000)];
        assert_eq!(sessionize(&evs, None).len(), 1);
    }

    fn raw(id: &str, start: i64, items: &[&str]) -> RawSession {
        RawSession {
            id: id.into(),
            interactions: items
                .iter()
                .enumerate()
                .map(|(k, it)| ev(id, it, start + k as i64))
                .collect(),
        }
    }

    #[test]
    fn item_with_four_occurrences_dropped() {
        let mut sessions = Vec::new();
        for k in 0..5 {
            sessions.push(raw(&k.to_string(), k, &["a", "b"]));
        }
        sessions[0].interactions.push(ev("0", "z", 100));
        for k in 5..8 {
            sessions.push(raw(&k.to_string(), k, &["a", "z"]));
        }
        // z appears 4 times
        let (corpus, catalog) = filter_corpus(&sessions, &schema(), 5, 2).unwrap();
        assert!(catalog.index_of("z").is_none());
        assert_eq!(catalog.len(), 2);
        assert_eq!(corpus.len(), 5);
    }

    #[test]
    fn all_singletons_is_empty() {
        let sessions: Vec<_> = (0..10).map(|k| raw(&k.to_string(), k, &["a"])).collect();
        assert!(matches!(filter_corpus(&sessions, &schema(), 5, 2), Err(Error::EmptyCorpus)));
    }

    fn corpus_of(n: usize, start: impl Fn(usize) -> i64) -> (SessionCorpus, ItemCatalog) {
        let sessions: Vec<_> = (0..n)
            .map(|k| raw(&k.to_string(), start(k), &["a", "b"]))
            .collect();
        filter_corpus(&sessions, &schema(), 1, 2).unwrap()
    }

    #[test]
    fn ten_sessions_split_8_1_1() {
        let (c, cat) = corpus_of(10, |k| k as i64 * 10);
        let s = temporal_split(&c, &cat, SPLIT_FRACTIONS).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (8, 1, 1));
    }

    #[test]
    fn equal_timestamps_split_by_id() {
        let (c, cat) = corpus_of(12, |_| 7);
        let s = temporal_split(&c, &cat, SPLIT_FRACTIONS).unwrap();
        let ids: Vec<&str> = s
            .train
            .sessions
            .iter()
            .chain(&s.validation.sessions)
            .chain(&s.test.sessions)
            .map(|s| s.id.as_str())
            .collect();
        let expected: Vec<String> = (0..12).map(|k| k.to_string()).collect();
        assert_eq!(ids, expected);
    }

    #[test]
    fn split_requires_three() {
        let (c, cat) = corpus_of(2, |k| k as i64);
        assert!(matches!(temporal_split(&c, &cat, SPLIT_FRACTIONS), Err(Error::Split(2))));
    }

    #[test]
    fn unseen_eval_items_dropped() {
        let mut sessions: Vec<_> = (0..9).map(|k| raw(&k.to_string(), k, &["a", "b"])).collect();
        sessions.push(raw("9", 9, &["a", "new", "b"]));
        let (c, cat) = filter_corpus(&sessions, &schema(), 1, 2).unwrap();
        let s = temporal_split(&c, &cat, SPLIT_FRACTIONS).unwrap();
        assert_eq!(s.catalog.len(), 2);
        assert_eq!(s.test.sessions[0].items.len(), 2);
    }

    #[test]
    fn prefixes_of_abc() {
        let p = generate_prefixes(&[0, 1, 2], 50);
        assert_eq!(
            p,
            vec![
                PrefixSample { prefix: vec![0], target: 1 },
                PrefixSample { prefix: vec![0, 1], target: 2 },
            ]
        );
        assert_eq!(generate_prefixes(&[3, 4], 50).len(), 1);
        assert!(generate_prefixes(&[3], 50).is_empty());
    }

    #[test]
    fn categorical_gets_unknown_column() {
        let s = FeatureSchema::new(vec![FeatureSpec {
            name: "c".into(),
            kind: FeatureKind::Categorical,
        }])
        .unwrap();
        let rows: Vec<Vec<String>> = ["x", "y", "z"].iter().map(|v| vec![v.to_string()]).collect();
        let (enc, x) = encode_features(&rows, &s).unwrap();
        assert_eq!(x.ncols(), 4);
        assert_eq!(enc.encode_row(&["w".into()]).unwrap(), vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(enc.encode_row(&["y".into()]).unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn numeric_zscore() {
        let s = FeatureSchema::new(vec![FeatureSpec {
            name: "p".into(),
            kind: FeatureKind::Numeric,
        }])
        .unwrap();
        let rows: Vec<Vec<String>> = ["1", "2", "3"].iter().map(|v| vec![v.to_string()]).collect();
        let (_, x) = encode_features(&rows, &s).unwrap();
        // population standard deviation sqrt(2/3)
        let expected = [-1.5f64.sqrt(), 0.0, 1.5f64.sqrt()];
        for (got, want) in x.column(0).iter().zip(expected) {
            assert!((got - want).abs() < 1e-6);
        }
        assert!((expected[2] - 1.2247).abs() < 1e-4);

        let rows: Vec<Vec<String>> = ["4", "4"].iter().map(|v| vec![v.to_string()]).collect();
        let (_, x) = encode_features(&rows, &s).unwrap();
        assert!(x.iter().all(|&v| v == 0.0));
    }
}
