//! End-to-end experiment runs, in memory and as file-backed stages.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bgrl::{train_embeddings, EmbeddingMatrix};
use crate::cograph::{build_cograph, read_graph_binary, write_graph_binary, CoGraph};
use crate::config::{Recommender, RunConfig, TableInit};
use crate::diffcore::Matrix;
use crate::error::{Error, Result};
use crate::evalkit::{compare_reports, render_structured, render_table, Comparison, MetricReport, RunMetrics, CUTOFFS};
use crate::knnrec::KnnRecommender;
use crate::nextitem::{init_table, target_ranks, train_next, write_log, EpochRecord, InitMode, NextItemModel};
use crate::sessiondata::{
    filter_corpus, load_interactions, read_corpus, read_id_map, read_matrix, sessionize, temporal_split, write_corpus,
    write_matrix, PrefixSample, SessionCorpus,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Filtered, split corpus with the training catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub train: SessionCorpus,
    pub validation: SessionCorpus,
    pub test: SessionCorpus,
    pub ids: Vec<String>,
    pub features: Matrix,
}

impl Prepared {
    pub fn item_count(&self) -> usize {
        self.ids.len()
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let path = &cfg.data.interactions;
    let file = File::open(path).map_err(|_| Error::MissingArtifact(path.clone()))?;
    let schema = cfg.schema()?;
    let rows = load_interactions(BufReader::new(file), &schema, cfg.data.format.delimited())?;
    let p = &cfg.preprocess;
    let raw = sessionize(&rows, p.gap_seconds);
    let (corpus, catalog) = filter_corpus(&raw, &schema, p.min_item_support, p.min_session_len)?;
    let split = temporal_split(&corpus, &catalog, p.split)?;
    Ok(Prepared {
        train: split.train,
        validation: split.validation,
        test: split.test,
        ids: split.catalog.ids().to_vec(),
        features: split.catalog.features().clone(),
    })
}

pub fn graph_of(cfg: &RunConfig, data: &Prepared) -> Result<CoGraph> {
    build_cograph(&data.train, &data.features, cfg.graph.normalization)
}

/// Whether the configured recommender consumes item embeddings.
pub fn needs_embeddings(cfg: &RunConfig) -> bool {
    match cfg.eval.recommender {
        Recommender::Knn => cfg.knn.embed_match.is_some(),
        Recommender::Nextitem => cfg.nextitem.init == TableInit::Pretrained,
    }
}

pub fn train_run_embeddings(cfg: &RunConfig, graph: &CoGraph, ids: &[String], run: usize) -> Result<EmbeddingMatrix> {
    let mut bgrl = cfg.bgrl.clone();
    bgrl.seed = cfg.run_seed(run);
    let trained = train_embeddings(graph, &bgrl)?;
    EmbeddingMatrix::new(ids.to_vec(), trained.embeddings)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Validation,
    Test,
}

fn eval_samples(cfg: &RunConfig, data: &Prepared, split: EvalSplit) -> Vec<PrefixSample> {
    let corpus = match split {
        EvalSplit::Validation => &data.validation,
        EvalSplit::Test => &data.test,
    };
    corpus.prefixes(cfg.preprocess.max_prefix_len)
}

/// kNN ranks of every sample's target, queries evaluated in parallel.
pub fn knn_run(cfg: &RunConfig, data: &Prepared, embeddings: Option<&Matrix>, samples: &[PrefixSample]) -> Result<RunMetrics> {
    let rec = KnnRecommender::new(&data.train, data.item_count(), cfg.knn, embeddings)?;
    let ranks = samples
        .par_iter()
        .map(|s| {
            let list = rec.recommend(&s.prefix)?;
            Ok(list.iter().position(|&(x, _)| x == s.target).map(|p| p + 1))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RunMetrics::from_ranks(&ranks))
}

pub fn next_run(
    cfg: &RunConfig,
    data: &Prepared,
    embeddings: Option<&Matrix>,
    samples: &[PrefixSample],
    run: usize,
) -> Result<(RunMetrics, Vec<EpochRecord>)> {
    let seed = cfg.run_seed(run);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.bgrl.encoder.out_dim;
    let mode = match (cfg.nextitem.init, embeddings) {
        (TableInit::Pretrained, Some(e)) => InitMode::Pretrained(e),
        (TableInit::Pretrained, None) => return Err(Error::config("pretrained init needs embeddings")),
        (TableInit::Random, _) => InitMode::ScaledUniform,
    };
    let mut model = NextItemModel::new(init_table(mode, data.item_count(), d, &mut rng)?);
    let mut tc = cfg.nextitem.train.clone();
    tc.seed = seed;
    let train = data.train.prefixes(cfg.preprocess.max_prefix_len);
    let validation = data.validation.prefixes(cfg.preprocess.max_prefix_len);
    let log = train_next(&mut model, &train, &validation, &tc)?;
    let ranks: Vec<Option<usize>> = target_ranks(&model, samples)?.into_iter().map(Some).collect();
    Ok((RunMetrics::from_ranks(&ranks), log))
}

pub fn report_label(cfg: &RunConfig) -> String {
    match cfg.eval.recommender {
        Recommender::Knn => {
            let base = serde_json::to_value(cfg.knn.base_mode).expect("serializes");
            let base = base.as_str().unwrap_or("knn").to_string();
            if cfg.knn.embed_match.is_some() {
                format!("{base}+embed")
            } else {
                base
            }
        }
        Recommender::Nextitem => match cfg.nextitem.init {
            TableInit::Random => "nextitem-random".into(),
            TableInit::Pretrained => "nextitem-pretrained".into(),
        },
    }
}

/// One run of the configured recommender. Embeddings are trained unless
/// supplied.
pub fn single_run(
    cfg: &RunConfig,
    data: &Prepared,
    graph: &CoGraph,
    supplied: Option<&EmbeddingMatrix>,
    split: EvalSplit,
    run: usize,
) -> Result<(RunMetrics, Vec<EpochRecord>)> {
    let trained;
    let embeddings = match supplied {
        Some(e) => Some(&e.values),
        None if needs_embeddings(cfg) => {
            trained = train_run_embeddings(cfg, graph, &data.ids, run)?;
            Some(&trained.values)
        }
        None => None,
    };
    let samples = eval_samples(cfg, data, split);
    match cfg.eval.recommender {
        Recommender::Knn => Ok((knn_run(cfg, data, embeddings, &samples)?, Vec::new())),
        Recommender::Nextitem => next_run(cfg, data, embeddings, &samples, run),
    }
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub report: MetricReport,
    pub logs: Vec<Vec<EpochRecord>>,
}

/// Preprocess, graph, embed and evaluate `eval.repeats` times; run `r` uses
/// seed `master_seed + r`.
pub fn run_experiment(cfg: &RunConfig, split: EvalSplit) -> Result<Experiment> {
    let data = prepare(cfg)?;
    let graph = graph_of(cfg, &data)?;
    run_experiment_on(cfg, &data, &graph, split)
}

pub fn run_experiment_on(cfg: &RunConfig, data: &Prepared, graph: &CoGraph, split: EvalSplit) -> Result<Experiment> {
    let mut runs = Vec::with_capacity(cfg.eval.repeats);
    let mut logs = Vec::with_capacity(cfg.eval.repeats);
    for r in 0..cfg.eval.repeats {
        let (m, log) = single_run(cfg, data, graph, None, split, r).map_err(|e| Error::Run {
            run: r,
            source: Box::new(e),
        })?;
        runs.push(m);
        logs.push(log);
    }
    Ok(Experiment {
        report: MetricReport::new(report_label(cfg), runs),
        logs,
    })
}

// File-backed stages.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Text,
    Structured,
}

/// Provenance record written next to every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub params: serde_json::Value,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Output directory with one subdirectory per stage.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

pub const MANIFEST: &str = "manifest.json";
pub const RESOLVED_CONFIG: &str = "config.toml";

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn stage(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn require(&self, stage: &str, file: &str) -> Result<PathBuf> {
        let p = self.stage(stage).join(file);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact(p))
        }
    }

    fn open(&self, stage: &str, file: &str) -> Result<BufReader<File>> {
        Ok(BufReader::new(File::open(self.require(stage, file)?)?))
    }

    pub fn load_prepared(&self) -> Result<Prepared> {
        let data = Prepared {
            train: read_corpus(self.open("preprocess", "train.tsv")?)?,
            validation: read_corpus(self.open("preprocess", "validation.tsv")?)?,
            test: read_corpus(self.open("preprocess", "test.tsv")?)?,
            ids: read_id_map(self.open("preprocess", "items.tsv")?)?,
            features: read_matrix(self.open("preprocess", "features.txt")?)?,
        };
        if data.features.nrows() != data.ids.len() {
            return Err(Error::Format("feature rows do not match the item map".into()));
        }
        Ok(data)
    }

    pub fn load_graph(&self, data: &Prepared) -> Result<CoGraph> {
        read_graph_binary(self.open("graph", "graph.bin")?, data.features.clone())
    }

    pub fn embedding_file(run: usize) -> String {
        format!("run-{run}.sgem")
    }

    pub fn load_embeddings(&self, data: &Prepared, run: usize) -> Result<EmbeddingMatrix> {
        let e = EmbeddingMatrix::read_binary(self.open("embed", &Self::embedding_file(run))?)?;
        if e.ids != data.ids {
            return Err(Error::Format(format!("embeddings of run {run} do not match the item map")));
        }
        Ok(e)
    }
}

struct StageWriter {
    dir: PathBuf,
    outputs: BTreeMap<String, String>,
}

impl StageWriter {
    fn new(ws: &Workspace, stage: &str) -> Result<Self> {
        let dir = ws.stage(stage);
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            outputs: BTreeMap::new(),
        })
    }

    fn write(&mut self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let path = self.dir.join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        f(&mut w)?;
        w.flush()?;
        drop(w);
        self.outputs.insert(name.to_string(), sha256_file(&path)?);
        Ok(())
    }

    fn finish(self, stage: &str, cfg: &RunConfig, inputs: BTreeMap<String, String>, params: serde_json::Value) -> Result<Manifest> {
        fs::write(self.dir.join(RESOLVED_CONFIG), cfg.to_toml())?;
        let manifest = Manifest {
            stage: stage.to_string(),
            version: VERSION.to_string(),
            seed: cfg.eval.master_seed,
            config_hash: cfg.hash(),
            inputs,
            outputs: self.outputs,
            params,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(self.dir.join(MANIFEST), text + "\n")?;
        Ok(manifest)
    }
}

fn hashed_inputs(ws: &Workspace, files: &[(&str, &str)]) -> Result<BTreeMap<String, String>> {
    files
        .iter()
        .map(|(stage, file)| Ok((format!("{stage}/{file}"), sha256_file(&ws.require(stage, file)?)?)))
        .collect()
}

const PREPARED_FILES: [(&str, &str); 5] = [
    ("preprocess", "train.tsv"),
    ("preprocess", "validation.tsv"),
    ("preprocess", "test.tsv"),
    ("preprocess", "items.tsv"),
    ("preprocess", "features.txt"),
];

pub fn stage_preprocess(cfg: &RunConfig, ws: &Workspace) -> Result<Manifest> {
    let data = prepare(cfg)?;
    let mut out = StageWriter::new(ws, "preprocess")?;
    out.write("train.tsv", |w| write_corpus(w, &data.train))?;
    out.write("validation.tsv", |w| write_corpus(w, &data.validation))?;
    out.write("test.tsv", |w| write_corpus(w, &data.test))?;
    out.write("items.tsv", |w| {
        for (i, id) in data.ids.iter().enumerate() {
            writeln!(w, "{i}\t{id}")?;
        }
        Ok(())
    })?;
    out.write("features.txt", |w| write_matrix(w, &data.features))?;
    let p = &cfg.preprocess;
    let longest = [&data.train, &data.validation, &data.test]
        .iter()
        .flat_map(|c| c.prefixes(p.max_prefix_len))
        .map(|s| s.prefix.len())
        .max()
        .unwrap_or(0);
    let params = serde_json::json!({
        "min_item_support": p.min_item_support,
        "min_session_len": p.min_session_len,
        "max_prefix_len": p.max_prefix_len,
        "split": p.split,
        "gap_seconds": p.gap_seconds,
        "items": data.item_count(),
        "sessions": [data.train.len(), data.validation.len(), data.test.len()],
        "prefixes": [
            data.train.prefixes(p.max_prefix_len).len(),
            data.validation.prefixes(p.max_prefix_len).len(),
            data.test.prefixes(p.max_prefix_len).len(),
        ],
        "longest_prefix": longest,
        "shortest_train_session": data.train.sessions.iter().map(|s| s.items.len()).min(),
    });
    let source = cfg.data.interactions.display().to_string();
    let inputs = BTreeMap::from([(source, sha256_file(&cfg.data.interactions)?)]);
    out.finish("preprocess", cfg, inputs, params)
}

pub fn stage_build_graph(cfg: &RunConfig, ws: &Workspace) -> Result<Manifest> {
    let data = ws.load_prepared()?;
    let graph = graph_of(cfg, &data)?;
    let mut out = StageWriter::new(ws, "graph")?;
    out.write("graph.bin", |w| write_graph_binary(w, &graph))?;
    let params = serde_json::json!({
        "normalization": cfg.graph.normalization,
        "nodes": graph.node_count(),
        "edges": graph.edge_count(),
        "max_count": graph.max_count(),
    });
    out.finish("build-graph", cfg, hashed_inputs(ws, &PREPARED_FILES)?, params)
}

/// Trains one embedding matrix per run seed.
pub fn stage_train_embed(cfg: &RunConfig, ws: &Workspace) -> Result<Manifest> {
    let data = ws.load_prepared()?;
    let graph = ws.load_graph(&data)?;
    let mut out = StageWriter::new(ws, "embed")?;
    let mut seeds = Vec::new();
    for r in 0..cfg.eval.repeats {
        let mut bgrl = cfg.bgrl.clone();
        bgrl.seed = cfg.run_seed(r);
        let trained = train_embeddings(&graph, &bgrl).map_err(|e| Error::Run {
            run: r,
            source: Box::new(e),
        })?;
        let emb = EmbeddingMatrix::new(data.ids.clone(), trained.embeddings)?;
        out.write(&Workspace::embedding_file(r), |w| emb.write_binary(w))?;
        out.write(&format!("run-{r}.losses.tsv"), |w| {
            writeln!(w, "epoch\tloss")?;
            for (e, l) in trained.epoch_losses.iter().enumerate() {
                writeln!(w, "{}\t{l:?}", e + 1)?;
            }
            Ok(())
        })?;
        seeds.push(bgrl.seed);
    }
    let params = serde_json::json!({
        "embedding_dim": cfg.bgrl.encoder.out_dim,
        "layers": cfg.bgrl.encoder.layers,
        "heads": cfg.bgrl.encoder.heads,
        "epochs": cfg.bgrl.epochs,
        "fanouts": cfg.bgrl.fanouts,
        "repeats": cfg.eval.repeats,
        "run_seeds": seeds,
    });
    let mut files = PREPARED_FILES.to_vec();
    files.push(("graph", "graph.bin"));
    out.finish("train-embed", cfg, hashed_inputs(ws, &files)?, params)
}

fn write_report(out: &mut StageWriter, reports: &[&MetricReport], cmp: Option<&Comparison>, format: ReportFormat) -> Result<()> {
    match format {
        ReportFormat::Text => out.write("report.txt", |w| Ok(w.write_all(render_table(reports, cmp).as_bytes())?))?,
        ReportFormat::Structured => {
            out.write("report.tsv", |w| Ok(w.write_all(render_structured(reports, cmp).as_bytes())?))?
        }
    }
    out.write("report.json", |w| {
        let doc = serde_json::json!({ "reports": reports, "comparison": cmp });
        serde_json::to_writer_pretty(&mut *w, &doc).map_err(|e| Error::Format(e.to_string()))?;
        Ok(writeln!(w)?)
    })
}

fn eval_params(cfg: &RunConfig, report: &MetricReport) -> serde_json::Value {
    serde_json::json!({
        "recommender": cfg.eval.recommender,
        "label": report.label,
        "repeats": cfg.eval.repeats,
        "run_seeds": (0..cfg.eval.repeats).map(|r| cfg.run_seed(r)).collect::<Vec<_>>(),
        "cutoffs": CUTOFFS,
        "queries": report.runs.first().map_or(0, |r| r.per_query.len()),
    })
}

/// Evaluates `cfg.eval.recommender` from stage artifacts, reading
/// `embed/run-<r>.sgem` when embeddings are needed.
fn stage_eval(cfg: &RunConfig, ws: &Workspace, stage: &str, format: ReportFormat) -> Result<Manifest> {
    let data = ws.load_prepared()?;
    let mut files = PREPARED_FILES.to_vec();
    let use_emb = needs_embeddings(cfg);
    let names: Vec<String> = (0..cfg.eval.repeats).map(Workspace::embedding_file).collect();
    if use_emb {
        files.extend(names.iter().map(|n| ("embed", n.as_str())));
    }
    let inputs = hashed_inputs(ws, &files)?;
    let samples = eval_samples(cfg, &data, EvalSplit::Test);
    let mut out = StageWriter::new(ws, stage)?;
    let mut runs = Vec::new();
    for r in 0..cfg.eval.repeats {
        let wrap = |e| Error::Run {
            run: r,
            source: Box::new(e),
        };
        let emb = if use_emb {
            Some(ws.load_embeddings(&data, r).map_err(wrap)?)
        } else {
            None
        };
        let values = emb.as_ref().map(|e| &e.values);
        let (m, log) = match cfg.eval.recommender {
            Recommender::Knn => (knn_run(cfg, &data, values, &samples).map_err(wrap)?, Vec::new()),
            Recommender::Nextitem => next_run(cfg, &data, values, &samples, r).map_err(wrap)?,
        };
        if !log.is_empty() {
            out.write(&format!("run-{r}.log.tsv"), |w| write_log(w, &log))?;
        }
        runs.push(m);
    }
    let report = MetricReport::new(report_label(cfg), runs);
    write_report(&mut out, &[&report], None, format)?;
    let params = eval_params(cfg, &report);
    out.finish(stage, cfg, inputs, params)
}

pub fn stage_eval_knn(cfg: &RunConfig, ws: &Workspace, format: ReportFormat) -> Result<Manifest> {
    let mut cfg = cfg.clone();
    cfg.eval.recommender = Recommender::Knn;
    stage_eval(&cfg, ws, "eval-knn", format)
}

pub fn stage_train_next(cfg: &RunConfig, ws: &Workspace, format: ReportFormat) -> Result<Manifest> {
    let mut cfg = cfg.clone();
    cfg.eval.recommender = Recommender::Nextitem;
    stage_eval(&cfg, ws, "train-next", format)
}

/// Runs both configurations end to end and tests the paired difference.
pub fn stage_compare(a: &RunConfig, b: &RunConfig, ws: &Workspace, format: ReportFormat) -> Result<(Manifest, Comparison)> {
    let ra = run_experiment(a, EvalSplit::Test)?.report;
    let mut rb = run_experiment(b, EvalSplit::Test)?.report;
    if rb.label == ra.label {
        rb.label.push_str("-b");
    }
    let cmp = compare_reports(&ra, &rb, a.eval.pairing)?;
    let mut out = StageWriter::new(ws, "compare")?;
    write_report(&mut out, &[&ra, &rb], Some(&cmp), format)?;
    fs::write(out.dir.join("config-b.toml"), b.to_toml())?;
    let source = a.data.interactions.display().to_string();
    let inputs = BTreeMap::from([(source, sha256_file(&a.data.interactions)?)]);
    let params = serde_json::json!({
        "a": ra.label,
        "b": rb.label,
        "b_config_hash": b.hash(),
        "pairing": a.eval.pairing,
        "repeats": a.eval.repeats,
    });
    Ok((out.finish("compare", a, inputs, params)?, cmp))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridEntry {
    pub assignment: Vec<(String, String)>,
    pub validation_mrr20: f64,
    pub validation_hr20: f64,
}

/// Evaluates every lattice point on the validation split with at most
/// `workers` concurrent runs; entries are ranked by mean validation MRR@20.
pub fn stage_grid(cfg: &RunConfig, ws: &Workspace, workers: usize) -> Result<(Manifest, Vec<GridEntry>)> {
    let points = cfg.grid_points()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::config(e.to_string()))?;
    let mut entries = pool.install(|| {
        points
            .par_iter()
            .map(|(assignment, point)| {
                let report = run_experiment(point, EvalSplit::Validation)?.report;
                Ok(GridEntry {
                    assignment: assignment.iter().map(|(k, v)| (k.clone(), v.to_string())).collect(),
                    validation_mrr20: report.mean(3),
                    validation_hr20: report.mean(1),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    entries.sort_by(|a, b| b.validation_mrr20.total_cmp(&a.validation_mrr20));
    let mut out = StageWriter::new(ws, "grid")?;
    out.write("summary.tsv", |w| {
        writeln!(w, "rank\tMRR@20\tHR@20\tassignment")?;
        for (k, e) in entries.iter().enumerate() {
            let a: Vec<String> = e.assignment.iter().map(|(p, v)| format!("{p}={v}")).collect();
            writeln!(w, "{}\t{:.6}\t{:.6}\t{}", k + 1, e.validation_mrr20, e.validation_hr20, a.join(" "))?;
        }
        Ok(())
    })?;
    let source = cfg.data.interactions.display().to_string();
    let inputs = BTreeMap::from([(source, sha256_file(&cfg.data.interactions)?)]);
    let params = serde_json::json!({ "points": entries.len(), "workers": workers });
    Ok((out.finish("grid", cfg, inputs, params)?, entries))
}
