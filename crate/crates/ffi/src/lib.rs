//! C interface to the sessgraph toolkit.
//!
//! Every fallible call returns an [`SgStatus`]. On failure a description is
//! kept per thread and can be read with [`sg_last_error`]. Objects are opaque
//! handles released with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::BufReader;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use ndarray::Array2;
use sessgraph::bgrl::{train_embeddings, BgrlConfig, EmbeddingMatrix};
use sessgraph::cograph::CoGraph;
use sessgraph::evalkit::paired_t_test;
use sessgraph::knnrec::{BaseMode, EmbedMatch, KnnConfig, KnnRecommender};
use sessgraph::sessiondata::{Session, SessionCorpus};
use sessgraph::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Shape = 6,
    Training = 7,
    BufferTooSmall = 8,
    Panic = 99,
}

/// Opaque item co-occurrence graph.
pub struct SgGraph(CoGraph);

/// Opaque embedding matrix, one row per item.
pub struct SgEmbeddings(EmbeddingMatrix);

/// Opaque nearest-neighbor recommender.
pub struct SgKnn(KnnRecommender);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SgStatus {
    match e {
        Error::Config(_) | Error::Contract(_) => SgStatus::Config,
        Error::Io(_) | Error::MissingArtifact(_) => SgStatus::Io,
        Error::Format(_) | Error::Schema(_) | Error::Row { .. } => SgStatus::Format,
        Error::Shape { .. } => SgStatus::Shape,
        Error::NonFinite(_) | Error::Diverged { .. } => SgStatus::Training,
        Error::Run { source, .. } => status_of(source),
        _ => SgStatus::InvalidArgument,
    }
}

struct Fail(SgStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SgStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SgStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SgStatus::Panic
        }
    }
}

/// Slice from a pointer that may be null only when `len` is zero.
unsafe fn view<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn out<T>(p: *mut T, what: &str) -> Result<&'static mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn sg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a graph from an undirected weighted edge list, either endpoint
/// order, weights in (0, 1]. `features` is row-major
/// `node_count x feature_dim`.
///
/// # Safety
/// Array arguments must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn sg_graph_from_edges(
    node_count: usize,
    src: *const usize,
    dst: *const usize,
    weights: *const f64,
    edge_count: usize,
    features: *const f64,
    feature_dim: usize,
    out_graph: *mut *mut SgGraph,
) -> SgStatus {
    guard(|| {
        let slot = out(out_graph, "out_graph")?;
        let src = view(src, edge_count, "src")?;
        let dst = view(dst, edge_count, "dst")?;
        let weights = view(weights, edge_count, "weights")?;
        let x = view(features, node_count * feature_dim, "features")?;
        let edges: Vec<(usize, usize, f64)> = (0..edge_count)
            .map(|e| (src[e].min(dst[e]), src[e].max(dst[e]), weights[e]))
            .collect();
        let x = Array2::from_shape_vec((node_count, feature_dim), x.to_vec())
            .map_err(|e| Fail(SgStatus::Shape, e.to_string()))?;
        let g = CoGraph::from_edges(node_count, &edges, 1, x)?;
        *slot = Box::into_raw(Box::new(SgGraph(g)));
        Ok(())
    })
}

/// # Safety
/// `graph` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sg_graph_free(graph: *mut SgGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// # Safety
/// `graph` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn sg_graph_node_count(graph: *const SgGraph) -> usize {
    graph.as_ref().map_or(0, |g| g.0.node_count())
}

/// # Safety
/// `graph` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn sg_graph_edge_count(graph: *const SgGraph) -> usize {
    graph.as_ref().map_or(0, |g| g.0.edge_count())
}

/// Trains embeddings with default settings except epochs and seed. Items are
/// named by their decimal index.
///
/// # Safety
/// `graph` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sg_embeddings_train(
    graph: *const SgGraph,
    epochs: usize,
    seed: u64,
    out_embeddings: *mut *mut SgEmbeddings,
) -> SgStatus {
    guard(|| {
        let slot = out(out_embeddings, "out_embeddings")?;
        let g = &graph.as_ref().ok_or_else(|| null("graph"))?.0;
        let cfg = BgrlConfig {
            epochs,
            seed,
            ..Default::default()
        };
        let errs = cfg.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs).into());
        }
        let trained = train_embeddings(g, &cfg)?;
        let ids = (0..g.node_count()).map(|i| i.to_string()).collect();
        *slot = Box::into_raw(Box::new(SgEmbeddings(EmbeddingMatrix::new(ids, trained.embeddings)?)));
        Ok(())
    })
}

/// Reads an embedding file in the binary layout written by the CLI.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sg_embeddings_read(path: *const c_char, out_embeddings: *mut *mut SgEmbeddings) -> SgStatus {
    guard(|| {
        let slot = out(out_embeddings, "out_embeddings")?;
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(SgStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let file = File::open(path).map_err(|e| Fail(SgStatus::Io, format!("{path}: {e}")))?;
        *slot = Box::into_raw(Box::new(SgEmbeddings(EmbeddingMatrix::read_binary(BufReader::new(file))?)));
        Ok(())
    })
}

/// # Safety
/// `embeddings` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sg_embeddings_free(embeddings: *mut SgEmbeddings) {
    if !embeddings.is_null() {
        drop(Box::from_raw(embeddings));
    }
}

/// # Safety
/// `embeddings` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn sg_embeddings_rows(embeddings: *const SgEmbeddings) -> usize {
    embeddings.as_ref().map_or(0, |e| e.0.len())
}

/// # Safety
/// `embeddings` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn sg_embeddings_dim(embeddings: *const SgEmbeddings) -> usize {
    embeddings.as_ref().map_or(0, |e| e.0.dim())
}

/// Copies row `row` into `buffer`, which must hold `sg_embeddings_dim` values.
///
/// # Safety
/// `buffer` must hold `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn sg_embeddings_row(
    embeddings: *const SgEmbeddings,
    row: usize,
    buffer: *mut f64,
    capacity: usize,
) -> SgStatus {
    guard(|| {
        let e = &embeddings.as_ref().ok_or_else(|| null("embeddings"))?.0;
        if row >= e.len() {
            return Err(Fail(SgStatus::InvalidArgument, format!("row {row} out of range for {} rows", e.len())));
        }
        if capacity < e.dim() {
            return Err(Fail(SgStatus::BufferTooSmall, format!("need {} values, got {capacity}", e.dim())));
        }
        if buffer.is_null() {
            return Err(null("buffer"));
        }
        let dst = slice::from_raw_parts_mut(buffer, e.dim());
        for (d, v) in dst.iter_mut().zip(e.values.row(row)) {
            *d = *v;
        }
        Ok(())
    })
}

/// Options for [`sg_knn_new`]. A negative `distance_threshold` disables
/// embedding matching.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SgKnnOptions {
    pub k: usize,
    pub m_sample: usize,
    pub k_rec: usize,
    /// Nonzero weights neighbors by the position of the last shared item.
    pub positional: u8,
    pub exclude_input_items: u8,
    pub distance_threshold: f64,
}

/// Defaults matching the library configuration.
#[no_mangle]
pub extern "C" fn sg_knn_default_options() -> SgKnnOptions {
    let d = KnnConfig::default();
    SgKnnOptions {
        k: d.k,
        m_sample: d.m_sample,
        k_rec: d.k_rec,
        positional: matches!(d.base_mode, BaseMode::VSknn) as u8,
        exclude_input_items: d.exclude_input_items as u8,
        distance_threshold: -1.0,
    }
}

/// Indexes training sessions given in CSR form: session `s` holds
/// `items[offsets[s]..offsets[s + 1]]`, sessions ordered oldest first.
/// `embeddings` may be null when matching is disabled.
///
/// # Safety
/// `offsets` must hold `session_count + 1` values and `items` the last one.
#[no_mangle]
pub unsafe extern "C" fn sg_knn_new(
    items: *const usize,
    offsets: *const usize,
    session_count: usize,
    item_count: usize,
    options: *const SgKnnOptions,
    embeddings: *const SgEmbeddings,
    out_knn: *mut *mut SgKnn,
) -> SgStatus {
    guard(|| {
        let slot = out(out_knn, "out_knn")?;
        let o = *options.as_ref().ok_or_else(|| null("options"))?;
        let offsets = view(offsets, session_count + 1, "offsets")?;
        if offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Fail(SgStatus::InvalidArgument, "offsets must be nondecreasing".into()));
        }
        let items = view(items, offsets[session_count], "items")?;
        let corpus = SessionCorpus {
            sessions: (0..session_count)
                .map(|s| Session {
                    id: s.to_string(),
                    start: s as i64,
                    items: items[offsets[s]..offsets[s + 1]].to_vec(),
                })
                .collect(),
        };
        let config = KnnConfig {
            k: o.k,
            m_sample: o.m_sample,
            k_rec: o.k_rec,
            base_mode: if o.positional != 0 { BaseMode::VSknn } else { BaseMode::Sknn },
            exclude_input_items: o.exclude_input_items != 0,
            embed_match: (o.distance_threshold >= 0.0).then(|| EmbedMatch {
                distance_threshold: o.distance_threshold,
                ..Default::default()
            }),
        };
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs).into());
        }
        let emb = embeddings.as_ref().map(|e| &e.0.values);
        if config.embed_match.is_some() && emb.is_none() {
            return Err(Fail(SgStatus::Config, "embedding matching needs embeddings".into()));
        }
        *slot = Box::into_raw(Box::new(SgKnn(KnnRecommender::new(&corpus, item_count, config, emb)?)));
        Ok(())
    })
}

/// # Safety
/// `knn` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sg_knn_free(knn: *mut SgKnn) {
    if !knn.is_null() {
        drop(Box::from_raw(knn));
    }
}

/// Ranks items for a session prefix. Writes at most `capacity` results and
/// stores the number written in `written`.
///
/// # Safety
/// `input` must hold `input_len` values; output buffers `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn sg_knn_recommend(
    knn: *const SgKnn,
    input: *const usize,
    input_len: usize,
    out_items: *mut usize,
    out_scores: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> SgStatus {
    guard(|| {
        let rec = &knn.as_ref().ok_or_else(|| null("knn"))?.0;
        let written = out(written, "written")?;
        let input = view(input, input_len, "input")?;
        let ranked = rec.recommend(input)?;
        let n = ranked.len().min(capacity);
        if n > 0 && (out_items.is_null() || out_scores.is_null()) {
            return Err(null("output buffer"));
        }
        for (k, (item, score)) in ranked.into_iter().take(n).enumerate() {
            *out_items.add(k) = item;
            *out_scores.add(k) = score;
        }
        *written = n;
        Ok(())
    })
}

/// Two-sided paired t-test. `t` and `p` are NaN when every difference is equal.
///
/// # Safety
/// `a` and `b` must hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn sg_paired_t_test(
    a: *const f64,
    b: *const f64,
    n: usize,
    t: *mut f64,
    p: *mut f64,
) -> SgStatus {
    guard(|| {
        let a = view(a, n, "a")?;
        let b = view(b, n, "b")?;
        let (t, p) = (out(t, "t")?, out(p, "p")?);
        let r = paired_t_test(a, b)?;
        *t = r.t.unwrap_or(f64::NAN);
        *p = r.p.unwrap_or(f64::NAN);
        Ok(())
    })
}
