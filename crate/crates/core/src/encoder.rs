//! GATv2 attention convolution with edge-weight conditioning, stacked with
//! feature skip connections.
//!
//! Layer `k` maps node inputs `h` to
//!
//! ```text
//! h'_i = prelu( Σ_{j ∈ N(i)} α_ij · h_j W_val )
//! α_i· = softmax_j( a · leaky_relu([h_i ‖ h_j ‖ e_ij] W_att) )
//! ```
//!
//! per head, with heads concatenated. Layer `k + 1` consumes
//! `H_k + X W_skip(k)`. Weights use the row-vector convention: `W_val` is
//! `d_in × d_out`, `W_att` is `(2·d_in + 1) × (heads·d_att)`, `a` is
//! `heads × d_att`.

use std::rc::Rc;

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cograph::{full_neighborhood, CoGraph, NeighborSample, Neighborhood, SampledLayer};
use crate::diffcore::{Bound, Matrix, ParamId, ParamStore, Segments, Tape, Var};
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const PRELU_INIT: f64 = 0.25;
pub const EMBEDDING_DIM: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Width of every hidden layer.
    pub hidden_dim: usize,
    /// Width of the final embedding.
    pub out_dim: usize,
    pub heads: usize,
    /// Attention width per head; 0 means `layer width / heads`.
    pub att_dim: usize,
    pub layers: usize,
    pub leaky_slope: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden_dim: EMBEDDING_DIM,
            out_dim: EMBEDDING_DIM,
            heads: 1,
            att_dim: 0,
            layers: 2,
            leaky_slope: LEAKY_SLOPE,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.layers == 0 {
            errs.push("encoder.layers must be at least 1".to_string());
        }
        if self.heads == 0 {
            errs.push("encoder.heads must be at least 1".to_string());
        } else {
            for (name, w) in [("hidden_dim", self.hidden_dim), ("out_dim", self.out_dim)] {
                if w == 0 || w % self.heads != 0 {
                    errs.push(format!("encoder.{name} ({w}) must be a positive multiple of heads ({})", self.heads));
                }
            }
        }
        errs
    }
}

/// Parameter handles of one attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gatv2Layer {
    pub w_val: ParamId,
    pub w_att: ParamId,
    pub a: ParamId,
    pub prelu: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub heads: usize,
    pub att_dim: usize,
}

/// Message-passing structure for one layer: destination nodes are a subset
/// of the source rows; edges are grouped by destination and ascending by
/// source within each group.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub n_src: usize,
    pub dst_in_src: Vec<usize>,
    pub edge_dst: Vec<usize>,
    pub edge_src: Vec<usize>,
    pub edge_weight: Vec<f64>,
}

impl Block {
    pub fn n_dst(&self) -> usize {
        self.dst_in_src.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_dst.len()
    }

    /// Whole-graph block: every node is both source and destination.
    pub fn full(graph: &CoGraph) -> Self {
        let n = graph.node_count();
        let mut edge_dst = Vec::new();
        let mut edge_src = Vec::new();
        let mut edge_weight = Vec::new();
        for i in 0..n {
            for (&j, &w) in graph.neighbors(i).iter().zip(graph.weights(i)) {
                edge_dst.push(i);
                edge_src.push(j);
                edge_weight.push(w);
            }
        }
        Self {
            n_src: n,
            dst_in_src: (0..n).collect(),
            edge_dst,
            edge_src,
            edge_weight,
        }
    }

    /// Block for one sampled hop whose neighbors all lie in `src_nodes`
    /// (sorted global ids).
    pub fn from_hop(hop: &SampledLayer, src_nodes: &[usize]) -> Self {
        let pos = |g: usize| src_nodes.binary_search(&g).expect("sampled node lies in the next frontier");
        let mut edge_dst = Vec::new();
        let mut edge_src = Vec::new();
        let mut edge_weight = Vec::new();
        for (k, (ns, ws)) in hop.neighbors.iter().zip(&hop.weights).enumerate() {
            for (&j, &w) in ns.iter().zip(ws) {
                edge_dst.push(k);
                edge_src.push(pos(j));
                edge_weight.push(w);
            }
        }
        Self {
            n_src: src_nodes.len(),
            dst_in_src: hop.nodes.iter().map(|&g| pos(g)).collect(),
            edge_dst,
            edge_src,
            edge_weight,
        }
    }
}

/// Per-layer blocks of a neighborhood sample, ordered first layer first,
/// plus the global ids of each layer's input rows.
#[derive(Debug, Clone)]
pub struct Plan {
    pub blocks: Vec<Block>,
    /// `inputs[l]` lists the global node of each input row of layer `l`;
    /// the last entry lists the output rows (the seeds).
    pub inputs: Vec<Vec<usize>>,
}

impl Plan {
    pub fn from_sample(sample: &NeighborSample) -> Self {
        let depth = sample.depth();
        let mut blocks = Vec::with_capacity(depth);
        let mut inputs = Vec::with_capacity(depth + 1);
        for layer in 0..depth {
            let hop = depth - 1 - layer;
            let src = &sample.frontiers[hop + 1];
            blocks.push(Block::from_hop(&sample.hops[hop], src));
            inputs.push(src.clone());
        }
        inputs.push(sample.seeds().to_vec());
        Self { blocks, inputs }
    }

    /// Every layer over the whole graph.
    pub fn full(graph: &CoGraph, layers: usize) -> Self {
        let block = Block::full(graph);
        let all: Vec<usize> = (0..graph.node_count()).collect();
        Self {
            blocks: vec![block; layers],
            inputs: vec![all; layers + 1],
        }
    }
}

pub(crate) fn glorot<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

fn gather(x: &Matrix, rows: &[usize]) -> Matrix {
    x.select(Axis(0), rows)
}

/// Stack of GATv2 layers with feature skips into every layer after the first.
#[derive(Debug, Clone, PartialEq)]
pub struct SkipEncoder {
    pub config: EncoderConfig,
    pub feature_dim: usize,
    pub params: ParamStore,
    pub layers: Vec<Gatv2Layer>,
    pub skips: Vec<ParamId>,
}

impl SkipEncoder {
    pub fn new<R: Rng>(feature_dim: usize, config: EncoderConfig, rng: &mut R) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        if feature_dim == 0 {
            return Err(Error::config("encoder needs at least one input feature"));
        }
        let mut params = ParamStore::new();
        let mut layers = Vec::with_capacity(config.layers);
        let mut skips = Vec::new();
        let mut in_dim = feature_dim;
        for k in 0..config.layers {
            let out_dim = if k + 1 == config.layers {
                config.out_dim
            } else {
                config.hidden_dim
            };
            let heads = config.heads;
            let att_dim = if config.att_dim == 0 {
                out_dim / heads
            } else {
                config.att_dim
            };
            let name = format!("layer{}", k + 1);
            if k > 0 {
                skips.push(params.add(format!("skip{k}.W"), glorot(rng, feature_dim, in_dim)));
            }
            let w_val = params.add(format!("{name}.W_val"), glorot(rng, in_dim, out_dim));
            let w_att = params.add(format!("{name}.W_att"), glorot(rng, 2 * in_dim + 1, heads * att_dim));
            let a = params.add(format!("{name}.a"), glorot(rng, heads, att_dim));
            let prelu = params.add(format!("{name}.prelu"), Array2::from_elem((1, 1), PRELU_INIT));
            layers.push(Gatv2Layer {
                w_val,
                w_att,
                a,
                prelu,
                in_dim,
                out_dim,
                heads,
                att_dim,
            });
            in_dim = out_dim;
        }
        Ok(Self {
            config,
            feature_dim,
            params,
            layers,
            skips,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.config.out_dim
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    fn attention_logits(&self, tape: &mut Tape, p: &Bound, layer: &Gatv2Layer, h: Var, block: &Block) -> Result<Var> {
        let d = layer.in_dim;
        if tape.value(h).dim() != (block.n_src, d) {
            let (r, c) = tape.value(h).dim();
            return Err(Error::shape(
                "gatv2",
                format!("input {r}x{c}, block expects {}x{d}", block.n_src),
            ));
        }
        let w_dst = tape.slice_rows(p[layer.w_att], 0, d)?;
        let w_src = tape.slice_rows(p[layer.w_att], d, 2 * d)?;
        let w_edge = tape.slice_rows(p[layer.w_att], 2 * d, 2 * d + 1)?;
        let proj_dst = tape.matmul(h, w_dst)?;
        let proj_src = tape.matmul(h, w_src)?;
        let dst_rows: Rc<[usize]> = block.edge_dst.iter().map(|&k| block.dst_in_src[k]).collect();
        let pi = tape.gather_rows(proj_dst, dst_rows)?;
        let pj = tape.gather_rows(proj_src, block.edge_src.clone().into())?;
        let e = tape.constant(Array2::from_shape_vec((block.edge_count(), 1), block.edge_weight.clone()).expect("column"));
        let pe = tape.matmul(e, w_edge)?;
        let z = tape.add(pi, pj)?;
        let z = tape.add(z, pe)?;
        let u = tape.leaky_relu(z, self.config.leaky_slope)?;
        tape.head_dot(u, p[layer.a])
    }

    /// Attention coefficients `E × heads` for one layer on a block.
    pub fn layer_attention(&self, tape: &mut Tape, p: &Bound, layer: usize, h: Var, block: &Block) -> Result<Var> {
        let l = self.layers[layer];
        let logits = self.attention_logits(tape, p, &l, h, block)?;
        let seg = Rc::new(Segments::new(block.edge_dst.clone(), block.n_dst())?);
        tape.segment_softmax(logits, seg)
    }

    /// Attention coefficients of layer `layer` evaluated on plain inputs.
    pub fn attention_coeffs(&self, layer: usize, h: &Matrix, block: &Block) -> Result<Matrix> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let h = tape.constant(h.clone());
        let a = self.layer_attention(&mut tape, &p, layer, h, block)?;
        Ok(tape.value(a).clone())
    }

    /// One GATv2 layer; destinations without neighbors produce `prelu(0) = 0`.
    pub fn layer_forward(&self, tape: &mut Tape, p: &Bound, layer: usize, h: Var, block: &Block) -> Result<Var> {
        let l = self.layers[layer];
        let alpha = self.layer_attention(tape, p, layer, h, block)?;
        let v = tape.matmul(h, p[l.w_val])?;
        let vj = tape.gather_rows(v, block.edge_src.clone().into())?;
        let seg = Rc::new(Segments::new(block.edge_dst.clone(), block.n_dst())?);
        let agg = tape.segment_weighted_sum(vj, alpha, seg)?;
        tape.prelu(agg, p[l.prelu])
    }

    /// Records the full stack on `tape`; output rows follow the plan's seeds.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, features: &Matrix, plan: &Plan) -> Result<Var> {
        if features.ncols() != self.feature_dim {
            return Err(Error::shape(
                "encode",
                format!("{} feature columns, encoder expects {}", features.ncols(), self.feature_dim),
            ));
        }
        if plan.blocks.len() != self.depth() {
            return Err(Error::shape(
                "encode",
                format!("plan has {} blocks for {} layers", plan.blocks.len(), self.depth()),
            ));
        }
        let mut h = tape.constant(gather(features, &plan.inputs[0]));
        for (k, block) in plan.blocks.iter().enumerate() {
            if k > 0 {
                let x = tape.constant(gather(features, &plan.inputs[k]));
                let skip = tape.matmul(x, p[self.skips[k - 1]])?;
                h = tape.add(h, skip)?;
            }
            h = self.layer_forward(tape, p, k, h, block)?;
        }
        Ok(h)
    }

    /// Embeddings (no gradient) for the seeds of `sample`, in sorted seed
    /// order.
    pub fn encode_sample(&self, features: &Matrix, sample: &NeighborSample) -> Result<Matrix> {
        if sample.depth() != self.depth() {
            return Err(Error::shape(
                "encode",
                format!("sample depth {} for {} layers", sample.depth(), self.depth()),
            ));
        }
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &p, features, &Plan::from_sample(sample))?;
        Ok(tape.value(out).clone())
    }

    /// Embeddings of every node using full neighborhoods.
    pub fn encode_graph(&self, graph: &CoGraph) -> Result<Matrix> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &p, graph.features(), &Plan::full(graph, self.depth()))?;
        Ok(tape.value(out).clone())
    }

    /// Embeds an item unseen during training from its encoded feature row
    /// and its (possibly empty) weighted links to known items. Known items
    /// keep their original neighborhoods.
    pub fn inductive_embed(&self, graph: &CoGraph, feature_row: &[f64], links: &[(usize, f64)]) -> Result<Vec<f64>> {
        if feature_row.len() != self.feature_dim {
            return Err(Error::shape(
                "inductive_embed",
                format!("feature row has {} columns, encoder expects {}", feature_row.len(), self.feature_dim),
            ));
        }
        let n = graph.node_count();
        let mut links = links.to_vec();
        links.sort_by_key(|&(j, _)| j);
        if links.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Contract("duplicate link in inductive neighbor list".into()));
        }
        if let Some(&(bad, _)) = links.iter().find(|&&(j, w)| j >= n || !(w > 0.0 && w <= 1.0)) {
            return Err(Error::Contract(format!("link to {bad} is out of range")));
        }
        let ext = Extended {
            base: graph,
            neighbors: links.iter().map(|&(j, _)| j).collect(),
            weights: links.iter().map(|&(_, w)| w).collect(),
        };
        let mut features = graph.features().clone();
        features
            .push_row(ndarray::ArrayView1::from(feature_row))
            .map_err(|e| Error::shape("inductive_embed", e.to_string()))?;
        let sample = full_neighborhood(&ext, &[n], self.depth())?;
        let out = self.encode_sample(&features, &sample)?;
        Ok(out.row(0).to_vec())
    }
}

/// A graph plus one appended node whose links point into the graph.
struct Extended<'a> {
    base: &'a CoGraph,
    neighbors: Vec<usize>,
    weights: Vec<f64>,
}

impl Neighborhood for Extended<'_> {
    fn node_count(&self) -> usize {
        self.base.node_count() + 1
    }

    fn neighbors_of(&self, node: usize) -> (&[usize], &[f64]) {
        if node == self.base.node_count() {
            (&self.neighbors, &self.weights)
        } else {
            (self.base.neighbors(node), self.base.weights(node))
        }
    }
}
