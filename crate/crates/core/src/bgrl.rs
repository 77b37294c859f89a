//! Bootstrapped two-view training of the graph encoder.

use std::io::{BufRead, BufReader, Read, Write};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cograph::{sample_neighbors, CoGraph, NeighborSample};
use crate::diffcore::{Adam, AdamConfig, Bound, Matrix, ParamId, ParamStore, Tape, Var};
use crate::encoder::{glorot, EncoderConfig, Plan, SkipEncoder, PRELU_INIT};
use crate::error::{Error, Result};

pub const EMA_DECAY: f64 = 0.99;
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewConfig {
    pub feature_mask_prob: f64,
    pub edge_drop_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// One keep-mask over feature columns shared by every node.
    #[default]
    Column,
    /// An independent keep-mask per node and column.
    Node,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub view1: ViewConfig,
    pub view2: ViewConfig,
    pub mask_mode: MaskMode,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            view1: ViewConfig {
                feature_mask_prob: 0.1,
                edge_drop_prob: 0.2,
            },
            view2: ViewConfig {
                feature_mask_prob: 0.2,
                edge_drop_prob: 0.4,
            },
            mask_mode: MaskMode::Column,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (k, v) in [("view1", self.view1), ("view2", self.view2)] {
            for (name, p) in [("feature_mask_prob", v.feature_mask_prob), ("edge_drop_prob", v.edge_drop_prob)] {
                if !(0.0..1.0).contains(&p) {
                    errs.push(format!("augmentation.{k}.{name} = {p} must lie in [0, 1)"));
                }
            }
        }
        errs
    }
}

/// A randomly masked and edge-dropped copy of `graph`.
pub fn augment<R: Rng>(graph: &CoGraph, view: &ViewConfig, mode: MaskMode, rng: &mut R) -> Result<CoGraph> {
    let keep_feature = 1.0 - view.feature_mask_prob;
    let mut x = graph.features().clone();
    match mode {
        MaskMode::Column => {
            for mut col in x.columns_mut() {
                if !rng.gen_bool(keep_feature) {
                    col.fill(0.0);
                }
            }
        }
        MaskMode::Node => {
            for v in x.iter_mut() {
                if !rng.gen_bool(keep_feature) {
                    *v = 0.0;
                }
            }
        }
    }
    let keep_edge = 1.0 - view.edge_drop_prob;
    let edges: Vec<_> = graph.edges().into_iter().filter(|_| rng.gen_bool(keep_edge)).collect();
    CoGraph::from_edges(graph.node_count(), &edges, graph.max_count(), x)
}

pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Two-layer perceptron `d → d → d`: linear, batch normalization over the
/// seed rows, PReLU, linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    pub params: ParamStore,
    w1: ParamId,
    b1: ParamId,
    gamma: ParamId,
    beta: ParamId,
    slope: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Predictor {
    pub fn new<R: Rng>(d: usize, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        let w1 = params.add("predictor.W1", glorot(rng, d, d));
        let b1 = params.add("predictor.b1", Array2::zeros((1, d)));
        let gamma = params.add("predictor.bn_scale", Array2::ones((1, d)));
        let beta = params.add("predictor.bn_shift", Array2::zeros((1, d)));
        let slope = params.add("predictor.prelu", Array2::from_elem((1, 1), PRELU_INIT));
        let w2 = params.add("predictor.W2", glorot(rng, d, d));
        let b2 = params.add("predictor.b2", Array2::zeros((1, d)));
        Self {
            params,
            w1,
            b1,
            gamma,
            beta,
            slope,
            w2,
            b2,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<Var> {
        let h = tape.matmul(z, p[self.w1])?;
        let h = tape.add_row(h, p[self.b1])?;
        let h = tape.standardize_cols(h, BATCH_NORM_EPS)?;
        let h = tape.mul_row(h, p[self.gamma])?;
        let h = tape.add_row(h, p[self.beta])?;
        let h = tape.prelu(h, p[self.slope])?;
        let h = tape.matmul(h, p[self.w2])?;
        tape.add_row(h, p[self.b2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BgrlConfig {
    pub encoder: EncoderConfig,
    pub augmentation: AugmentationConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Per-hop sample sizes, nearest hop first; one per encoder layer.
    pub fanouts: Vec<usize>,
    pub lr: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for BgrlConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            augmentation: AugmentationConfig::default(),
            epochs: 100,
            batch_size: 256,
            fanouts: vec![10, 5],
            lr: 1e-3,
            weight_decay: 1e-5,
            ema_decay: EMA_DECAY,
            seed: 0,
        }
    }
}

impl BgrlConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.encoder.validate();
        errs.extend(self.augmentation.validate());
        if self.batch_size == 0 {
            errs.push("bgrl.batch_size must be positive".into());
        }
        if self.fanouts.len() != self.encoder.layers {
            errs.push(format!(
                "bgrl.fanouts has {} entries for {} encoder layers",
                self.fanouts.len(),
                self.encoder.layers
            ));
        }
        if self.fanouts.contains(&0) {
            errs.push("bgrl.fanouts entries must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push(format!("bgrl.lr = {} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            errs.push(format!("bgrl.weight_decay = {} must be nonnegative", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            errs.push(format!("bgrl.ema_decay = {} must lie in [0, 1]", self.ema_decay));
        }
        errs
    }
}

/// Online encoder, its moving-average target, the predictor and the
/// optimizer state over online + predictor parameters.
#[derive(Debug, Clone)]
pub struct BgrlState {
    pub online: SkipEncoder,
    pub target: SkipEncoder,
    pub predictor: Predictor,
    pub optimizer: Adam,
    pub ema_decay: f64,
}

impl BgrlState {
    pub fn new<R: Rng>(feature_dim: usize, config: &BgrlConfig, rng: &mut R) -> Result<Self> {
        let online = SkipEncoder::new(feature_dim, config.encoder.clone(), rng)?;
        let predictor = Predictor::new(online.out_dim(), rng);
        let target = online.clone();
        let optimizer = Adam::new(AdamConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        });
        Ok(Self {
            online,
            target,
            predictor,
            optimizer,
            ema_decay: config.ema_decay,
        })
    }
}

/// `target ← τ·target + (1 − τ)·online`, parameter-wise.
pub fn ema_update(target: &mut ParamStore, online: &ParamStore, tau: f64) -> Result<()> {
    target.check_same_layout(online)?;
    for id in online.ids() {
        let src = online.value(id);
        target.value_mut(id).zip_mut_with(src, |t, &o| *t = tau * *t + (1.0 - tau) * o);
    }
    Ok(())
}

/// Tape handles produced by [`bgrl_loss`].
pub struct LossGraph {
    pub loss: Var,
    pub online: Bound,
    pub predictor: Bound,
    pub target: Bound,
}

/// Symmetric bootstrap loss averaged over the seeds shared by both samples.
/// The target branch is bound as constants.
pub fn bgrl_loss(
    tape: &mut Tape,
    state: &BgrlState,
    view1: (&CoGraph, &NeighborSample),
    view2: (&CoGraph, &NeighborSample),
) -> Result<LossGraph> {
    if view1.1.seeds() != view2.1.seeds() {
        return Err(Error::Contract("both views must be sampled around the same seeds".into()));
    }
    let online = state.online.params.bind(tape);
    let predictor = state.predictor.params.bind(tape);
    let target = state.target.params.bind_frozen(tape);
    let plan1 = Plan::from_sample(view1.1);
    let plan2 = Plan::from_sample(view2.1);
    let z1 = state.online.forward(tape, &online, view1.0.features(), &plan1)?;
    let z2 = state.online.forward(tape, &online, view2.0.features(), &plan2)?;
    let t1 = state.target.forward(tape, &target, view1.0.features(), &plan1)?;
    let t2 = state.target.forward(tape, &target, view2.0.features(), &plan2)?;
    let p1 = state.predictor.forward(tape, &predictor, z1)?;
    let p2 = state.predictor.forward(tape, &predictor, z2)?;
    let loss = pair_loss(tape, (p1, t2), (p2, t1))?;
    Ok(LossGraph {
        loss,
        online,
        predictor,
        target,
    })
}

/// `mean_i [2 − cos(a_i, b_i) − cos(c_i, d_i)]`.
pub fn pair_loss(tape: &mut Tape, ab: (Var, Var), cd: (Var, Var)) -> Result<Var> {
    let c1 = tape.cosine_rows(ab.0, ab.1, COSINE_EPS)?;
    let c2 = tape.cosine_rows(cd.0, cd.1, COSINE_EPS)?;
    let c = tape.add(c1, c2)?;
    let m = tape.mean(c)?;
    let neg = tape.scale(m, -1.0)?;
    let two = tape.scalar(2.0);
    tape.add(neg, two)
}

/// Row `i` embeds catalog item `i`; `ids` holds the external ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub ids: Vec<String>,
    pub values: Matrix,
}

const EMBEDDING_MAGIC: &[u8; 4] = b"SGEM";

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, values: Matrix) -> Result<Self> {
        if ids.len() != values.nrows() {
            return Err(Error::shape(
                "embedding",
                format!("{} ids for {} rows", ids.len(), values.nrows()),
            ));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite embedding value {v}")));
        }
        Ok(Self { ids, values })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// Header `m d`, then `id v1 … vd` per row, tab separated.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}\t{}", self.len(), self.dim())?;
        for (id, row) in self.ids.iter().zip(self.values.rows()) {
            write!(w, "{id}")?;
            for v in row {
                write!(w, "\t{v:?}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_text<R: Read>(r: R) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty embedding file".into()))??;
        let dims: Vec<usize> = header
            .split('\t')
            .map(|t| t.trim().parse().map_err(|_| Error::Format(format!("bad embedding header {header:?}"))))
            .collect::<Result<_>>()?;
        let [m, d] = dims[..] else {
            return Err(Error::Format(format!("bad embedding header {header:?}")));
        };
        let mut ids = Vec::with_capacity(m);
        let mut values = Vec::with_capacity(m * d);
        for (k, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            ids.push(fields.next().unwrap_or_default().to_string());
            let row: Vec<f64> = fields
                .map(|t| t.parse().map_err(|_| Error::Format(format!("embedding line {}: bad value {t:?}", k + 2))))
                .collect::<Result<_>>()?;
            if row.len() != d {
                return Err(Error::Format(format!("embedding line {}: {} values, expected {d}", k + 2, row.len())));
            }
            values.extend(row);
        }
        if ids.len() != m {
            return Err(Error::Format(format!("embedding file has {} rows, header says {m}", ids.len())));
        }
        Self::new(ids, Array2::from_shape_vec((m, d), values).expect("sized"))
    }

    /// `"SGEM"`, u32 version 1, u64 m, u64 d, then per row a u32
    /// length-prefixed UTF-8 id and d little-endian f64.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(EMBEDDING_MAGIC)?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim() as u64).to_le_bytes())?;
        for (id, row) in self.ids.iter().zip(self.values.rows()) {
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
            for v in row {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut buf4 = [0u8; 4];
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf4)?;
        if &buf4 != EMBEDDING_MAGIC {
            return Err(Error::Format("not an embedding file".into()));
        }
        r.read_exact(&mut buf4)?;
        if u32::from_le_bytes(buf4) != 1 {
            return Err(Error::Format("unsupported embedding file version".into()));
        }
        r.read_exact(&mut buf8)?;
        let m = u64::from_le_bytes(buf8) as usize;
        r.read_exact(&mut buf8)?;
        let d = u64::from_le_bytes(buf8) as usize;
        let mut ids = Vec::with_capacity(m);
        let mut values = Vec::with_capacity(m * d);
        for _ in 0..m {
            r.read_exact(&mut buf4)?;
            let mut id = vec![0u8; u32::from_le_bytes(buf4) as usize];
            r.read_exact(&mut id)?;
            ids.push(String::from_utf8(id).map_err(|_| Error::Format("embedding id is not UTF-8".into()))?);
            for _ in 0..d {
                r.read_exact(&mut buf8)?;
                values.push(f64::from_le_bytes(buf8));
            }
        }
        Self::new(ids, Array2::from_shape_vec((m, d), values).expect("sized"))
    }
}

#[derive(Debug, Clone)]
pub struct TrainedEmbeddings {
    /// Online-encoder output on the unaugmented graph, row per node.
    pub embeddings: Matrix,
    pub state: BgrlState,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Full training loop. Deterministic for a given `config.seed`.
pub fn train_embeddings(graph: &CoGraph, config: &BgrlConfig) -> Result<TrainedEmbeddings> {
    let errs = config.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    if graph.edge_count() == 0 {
        return Err(Error::DegenerateGraph);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = BgrlState::new(graph.features().ncols(), config, &mut rng)?;
    let aug = config.augmentation;
    let mut order: Vec<usize> = (0..graph.node_count()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut history = Vec::new();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (batch, seeds) in order.chunks(config.batch_size).enumerate() {
            let diverged = |loss: f64, history: &[f64]| Error::Diverged {
                epoch,
                batch,
                loss,
                history: history.to_vec(),
            };
            let v1 = augment(graph, &aug.view1, aug.mask_mode, &mut rng)?;
            let v2 = augment(graph, &aug.view2, aug.mask_mode, &mut rng)?;
            let s1 = sample_neighbors(&v1, seeds, &config.fanouts, &mut rng)?;
            let s2 = sample_neighbors(&v2, seeds, &config.fanouts, &mut rng)?;
            let mut tape = Tape::new();
            let step = bgrl_loss(&mut tape, &state, (&v1, &s1), (&v2, &s2)).and_then(|g| {
                tape.backward(g.loss)?;
                Ok(g)
            });
            let g = match step {
                Ok(g) => g,
                Err(Error::NonFinite(_)) => return Err(diverged(f64::NAN, &history)),
                Err(e) => return Err(e),
            };
            let loss = tape.scalar_value(g.loss);
            if !loss.is_finite() {
                return Err(diverged(loss, &history));
            }
            history.push(loss);
            state.online.params.pull_grads(&tape, &g.online);
            state.predictor.params.pull_grads(&tape, &g.predictor);
            state
                .optimizer
                .adamw_step(&mut [&mut state.online.params, &mut state.predictor.params]);
            ema_update(&mut state.target.params, &state.online.params, state.ema_decay)?;
            total += loss;
            batches += 1;
        }
        epoch_losses.push(total / batches.max(1) as f64);
    }
    let embeddings = state.online.encode_graph(graph)?;
    if embeddings.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("final embeddings"));
    }
    Ok(TrainedEmbeddings {
        embeddings,
        state,
        epoch_losses,
    })
}
