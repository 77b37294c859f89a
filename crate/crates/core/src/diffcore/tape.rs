//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D matrix; scalars are `1×1`. Operations
//! append a node holding the forward value and enough structure to run the
//! adjoint. [`Tape::backward`] walks the nodes in reverse recording order
//! and adds the resulting adjoints into the gradient slots of leaves created
//! with `requires_grad`, so repeated calls accumulate.

use std::rc::Rc;

use ndarray::{s, Array1, Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous row groups described by sorted, nonnegative segment ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    ids: Vec<usize>,
    offsets: Vec<usize>,
}

impl Segments {
    /// `ids[r]` is the segment of row `r`; ids must be nondecreasing and
    /// below `count`.
    pub fn new(ids: Vec<usize>, count: usize) -> Result<Self> {
        if ids.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::shape("segments", "segment ids are not sorted"));
        }
        if let Some(&last) = ids.last() {
            if last >= count {
                return Err(Error::shape(
                    "segments",
                    format!("segment id {last} out of range for {count} segments"),
                ));
            }
        }
        let mut offsets = vec![0; count + 1];
        for &id in &ids {
            offsets[id + 1] += 1;
        }
        for k in 0..count {
            offsets[k + 1] += offsets[k];
        }
        Ok(Self { ids, offsets })
    }

    pub fn count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Row range of segment `k`.
    pub fn range(&self, k: usize) -> std::ops::Range<usize> {
        self.offsets[k]..self.offsets[k + 1]
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    StandardizeCols(Var, f64),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    SliceRows(Var, usize),
    GatherRows(Var, Rc<[usize]>),
    LeakyRelu(Var, f64),
    Prelu(Var, Var),
    HeadDot(Var, Var),
    SegmentSoftmax(Var, Rc<Segments>),
    SegmentWeightedSum(Var, Var, Rc<Segments>),
    L2Normalize(Var, f64),
    CosineRows(Var, Var, f64),
    Mean(Var),
    Sum(Var),
    CrossEntropy(Var, Rc<[usize]>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
    grad: Option<Matrix>,
}

/// Record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_str(m: &Matrix) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}

fn ensure_finite(op: &'static str, m: &Matrix) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn standardize(x: &Matrix, eps: f64) -> (Matrix, Array1<f64>) {
    let n = x.nrows() as f64;
    let mean = x.sum_axis(Axis(0)) / n;
    let centered = x - &mean.view().insert_axis(Axis(0));
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
    let inv = var.mapv(|v| 1.0 / (v + eps).sqrt());
    let xhat = &centered * &inv.view().insert_axis(Axis(0));
    (xhat, inv)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.leaf(value, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), v))
    }

    fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    /// Accumulated gradient of a `requires_grad` leaf, if any backward pass
    /// has reached it.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Clears all accumulated leaf gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, op: &'static str, value: Matrix, kind: Op, inputs: &[Var]) -> Result<Var> {
        ensure_finite(op, &value)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.ncols() != y.nrows() {
            return Err(Error::shape("matmul", format!("{} · {}", shape_str(x), shape_str(y))));
        }
        let out = x.dot(y);
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.dim() != y.dim() {
            return Err(Error::shape("add", format!("{} + {}", shape_str(x), shape_str(y))));
        }
        let out = x + y;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.dim() != y.dim() {
            return Err(Error::shape("mul", format!("{} * {}", shape_str(x), shape_str(y))));
        }
        let out = x * y;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `1×c` row to every row of an `r×c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.nrows() != 1 || r.ncols() != x.ncols() {
            return Err(Error::shape("add_row", format!("{} + row {}", shape_str(x), shape_str(r))));
        }
        let out = x + r;
        self.push("add_row", out, Op::AddRow(a, row), &[a, row])
    }

    /// Multiplies every row of an `r×c` matrix elementwise by a `1×c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.nrows() != 1 || r.ncols() != x.ncols() {
            return Err(Error::shape("mul_row", format!("{} * row {}", shape_str(x), shape_str(r))));
        }
        let out = x * r;
        self.push("mul_row", out, Op::MulRow(a, row), &[a, row])
    }

    /// Centers each column and divides by `sqrt(var + eps)`, using the
    /// population variance over rows.
    pub fn standardize_cols(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        if x.nrows() == 0 {
            return Err(Error::shape("standardize_cols", "empty input"));
        }
        let (xhat, _) = standardize(x, eps);
        self.push("standardize_cols", xhat, Op::StandardizeCols(a, eps), &[a])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a) * factor;
        self.push("scale", out, Op::Scale(a, factor), &[a])
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn row_concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).nrows())
            .ok_or_else(|| Error::shape("row_concat", "no inputs"))?;
        if let Some(&bad) = parts.iter().find(|&&p| self.value(p).nrows() != rows) {
            return Err(Error::shape(
                "row_concat",
                format!("row counts {rows} and {}", self.value(bad).nrows()),
            ));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).map_err(|e| Error::shape("row_concat", e.to_string()))?;
        self.push("row_concat", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).t().to_owned();
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start > end || end > x.nrows() {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{end} of {}", shape_str(x)),
            ));
        }
        let out = x.slice(s![start..end, ..]).to_owned();
        self.push("slice_rows", out, Op::SliceRows(a, start), &[a])
    }

    /// `out[r] = a[index[r]]`.
    pub fn gather_rows(&mut self, a: Var, index: Rc<[usize]>) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= x.nrows()) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {}", shape_str(x))));
        }
        let mut out = Array2::zeros((index.len(), x.ncols()));
        for (r, &i) in index.iter().enumerate() {
            out.row_mut(r).assign(&x.row(i));
        }
        self.push("gather_rows", out, Op::GatherRows(a, index), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let out = self.value(a).mapv(|v| if v > 0.0 { v } else { slope * v });
        self.push("leaky_relu", out, Op::LeakyRelu(a, slope), &[a])
    }

    /// Parametric ReLU with a learnable `1×1` slope.
    pub fn prelu(&mut self, a: Var, slope: Var) -> Result<Var> {
        let k = self.value(slope);
        if k.dim() != (1, 1) {
            return Err(Error::shape("prelu", format!("slope must be 1x1, got {}", shape_str(k))));
        }
        let k = k[[0, 0]];
        let out = self.value(a).mapv(|v| if v > 0.0 { v } else { k * v });
        self.push("prelu", out, Op::Prelu(a, slope), &[a, slope])
    }

    /// Per-head dot products: `u` is `E × (H·k)`, `a` is `H × k`, the result
    /// is `E × H` with `out[e,h] = Σ_j u[e, h·k + j] · a[h, j]`.
    pub fn head_dot(&mut self, u: Var, a: Var) -> Result<Var> {
        let (x, w) = (self.value(u), self.value(a));
        let (heads, k) = w.dim();
        if heads == 0 || x.ncols() != heads * k {
            return Err(Error::shape("head_dot", format!("{} against heads {}", shape_str(x), shape_str(w))));
        }
        let mut out = Array2::zeros((x.nrows(), heads));
        for (e, row) in x.rows().into_iter().enumerate() {
            for h in 0..heads {
                let mut acc = 0.0;
                for j in 0..k {
                    acc += row[h * k + j] * w[[h, j]];
                }
                out[[e, h]] = acc;
            }
        }
        self.push("head_dot", out, Op::HeadDot(u, a), &[u, a])
    }

    /// Softmax of each column within each segment of rows.
    pub fn segment_softmax(&mut self, logits: Var, segments: Rc<Segments>) -> Result<Var> {
        let x = self.value(logits);
        if x.nrows() != segments.rows() {
            return Err(Error::shape(
                "segment_softmax",
                format!("{} rows vs {} segment ids", x.nrows(), segments.rows()),
            ));
        }
        let mut out = Array2::zeros(x.dim());
        for k in 0..segments.count() {
            let r = segments.range(k);
            if r.is_empty() {
                continue;
            }
            for c in 0..x.ncols() {
                let max = r.clone().map(|i| x[[i, c]]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for i in r.clone() {
                    let e = (x[[i, c]] - max).exp();
                    out[[i, c]] = e;
                    z += e;
                }
                for i in r.clone() {
                    out[[i, c]] /= z;
                }
            }
        }
        self.push("segment_softmax", out, Op::SegmentSoftmax(logits, segments), &[logits])
    }

    /// Weighted per-segment sum: `values` is `E × (H·k)`, `weights` is
    /// `E × H`; column block `h` of each row is scaled by `weights[e, h]`.
    /// Returns `segments.count() × (H·k)`; empty segments give zero rows.
    /// Rows are summed in ascending row order.
    pub fn segment_weighted_sum(&mut self, values: Var, weights: Var, segments: Rc<Segments>) -> Result<Var> {
        let (v, w) = (self.value(values), self.value(weights));
        let heads = w.ncols();
        if v.nrows() != w.nrows() || v.nrows() != segments.rows() || heads == 0 || v.ncols() % heads != 0 {
            return Err(Error::shape(
                "segment_weighted_sum",
                format!(
                    "values {}, weights {}, {} segment ids",
                    shape_str(v),
                    shape_str(w),
                    segments.rows()
                ),
            ));
        }
        let k = v.ncols() / heads;
        let mut out = Array2::zeros((segments.count(), v.ncols()));
        for seg in 0..segments.count() {
            for e in segments.range(seg) {
                for h in 0..heads {
                    let a = w[[e, h]];
                    for j in h * k..(h + 1) * k {
                        out[[seg, j]] += a * v[[e, j]];
                    }
                }
            }
        }
        self.push(
            "segment_weighted_sum",
            out,
            Op::SegmentWeightedSum(values, weights, segments),
            &[values, weights],
        )
    }

    /// Scales each row to unit norm; norms below `eps` are clamped to `eps`.
    pub fn l2_normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt().max(eps);
            row /= n;
        }
        self.push("l2_normalize", out, Op::L2Normalize(a, eps), &[a])
    }

    /// Row-wise cosine similarity as an `r×1` column; norms are clamped
    /// below by `eps`.
    pub fn cosine_rows(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.dim() != y.dim() {
            return Err(Error::shape("cosine_rows", format!("{} vs {}", shape_str(x), shape_str(y))));
        }
        let mut out = Array2::zeros((x.nrows(), 1));
        for r in 0..x.nrows() {
            let (xr, yr) = (x.row(r), y.row(r));
            let na = xr.dot(&xr).sqrt().max(eps);
            let nb = yr.dot(&yr).sqrt().max(eps);
            out[[r, 0]] = xr.dot(&yr) / (na * nb);
        }
        self.push("cosine_rows", out, Op::CosineRows(a, b, eps), &[a, b])
    }

    /// Mean of all entries, as `1×1`.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::shape("mean", "empty input"));
        }
        let out = Array2::from_elem((1, 1), x.sum() / x.len() as f64);
        self.push("mean", out, Op::Mean(a), &[a])
    }

    /// Sum of all entries, as `1×1`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    /// Mean over rows of `logsumexp(logits[r]) − logits[r, targets[r]]`.
    pub fn cross_entropy_with_logits(&mut self, logits: Var, targets: Rc<[usize]>) -> Result<Var> {
        let x = self.value(logits);
        if x.nrows() != targets.len() || x.nrows() == 0 {
            return Err(Error::shape(
                "cross_entropy_with_logits",
                format!("{} logits rows vs {} targets", x.nrows(), targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= x.ncols()) {
            return Err(Error::shape(
                "cross_entropy_with_logits",
                format!("target {bad} outside {} classes", x.ncols()),
            ));
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = x.row(r);
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let out = Array2::from_elem((1, 1), total / targets.len() as f64);
        self.push("cross_entropy_with_logits", out, Op::CrossEntropy(logits, targets), &[logits])
    }

    /// Propagates `∂loss/∂·` from a `1×1` loss back through the tape and adds
    /// the result into every reachable `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let dim = self.value(loss).dim();
        if dim != (1, 1) {
            return Err(Error::Contract(format!("backward needs a scalar loss, got {}x{}", dim.0, dim.1)));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            ensure_finite("backward", &g)?;
            if let Op::Leaf = self.nodes[i].op {
                let slot = &mut self.nodes[i].grad;
                match slot {
                    Some(acc) => *acc += &g,
                    None => *slot = Some(g),
                }
                continue;
            }
            for (input, contribution) in self.adjoints(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut adj[input.0] {
                    Some(acc) => *acc += &contribution,
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    fn adjoints(&self, i: usize, g: &Matrix) -> Vec<(Var, Matrix)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let mut out = Vec::new();
                if wants(*a) {
                    out.push((*a, g.dot(&val(*b).t())));
                }
                if wants(*b) {
                    out.push((*b, val(*a).t().dot(g)));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => vec![(*a, g * val(*b)), (*b, g * val(*a))],
            Op::AddRow(a, row) => vec![(*a, g.clone()), (*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)))],
            Op::MulRow(a, row) => {
                let r = val(*row);
                let gr = (g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                vec![(*a, g * r), (*row, gr)]
            }
            Op::StandardizeCols(a, eps) => {
                let (xhat, inv) = standardize(val(*a), *eps);
                let n = xhat.nrows() as f64;
                let g_mean = g.sum_axis(Axis(0)) / n;
                let gx_mean = (g * &xhat).sum_axis(Axis(0)) / n;
                let dx = (g - &g_mean.insert_axis(Axis(0)) - &xhat * &gx_mean.insert_axis(Axis(0)))
                    * &inv.insert_axis(Axis(0));
                vec![(*a, dx)]
            }
            Op::Scale(a, f) => vec![(*a, g * *f)],
            Op::ConcatCols(parts) => {
                let mut col = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let w = val(p).ncols();
                        let piece = g.slice(s![.., col..col + w]).to_owned();
                        col += w;
                        (p, piece)
                    })
                    .collect()
            }
            Op::Transpose(a) => vec![(*a, g.t().to_owned())],
            Op::SliceRows(a, start) => {
                let mut d = Array2::zeros(val(*a).dim());
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                vec![(*a, d)]
            }
            Op::GatherRows(a, index) => {
                let mut d = Array2::zeros(val(*a).dim());
                for (r, &src) in index.iter().enumerate() {
                    let mut row = d.row_mut(src);
                    row += &g.row(r);
                }
                vec![(*a, d)]
            }
            Op::LeakyRelu(a, slope) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(val(*a))
                    .for_each(|d, &x| if x <= 0.0 { *d *= slope });
                vec![(*a, d)]
            }
            Op::Prelu(a, slope) => {
                let k = val(*slope)[[0, 0]];
                let x = val(*a);
                let mut d = g.clone();
                let mut dk = 0.0;
                Zip::from(&mut d).and(x).for_each(|d, &x| {
                    if x <= 0.0 {
                        dk += *d * x;
                        *d *= k;
                    }
                });
                vec![(*a, d), (*slope, Array2::from_elem((1, 1), dk))]
            }
            Op::HeadDot(u, a) => {
                let (x, w) = (val(*u), val(*a));
                let (heads, k) = w.dim();
                let mut du = Array2::zeros(x.dim());
                let mut da = Array2::zeros(w.dim());
                for e in 0..x.nrows() {
                    for h in 0..heads {
                        let ge = g[[e, h]];
                        for j in 0..k {
                            du[[e, h * k + j]] = ge * w[[h, j]];
                            da[[h, j]] += ge * x[[e, h * k + j]];
                        }
                    }
                }
                vec![(*u, du), (*a, da)]
            }
            Op::SegmentSoftmax(a, segments) => {
                let y = &node.value;
                let mut d = Array2::zeros(y.dim());
                for k in 0..segments.count() {
                    let r = segments.range(k);
                    for c in 0..y.ncols() {
                        let dot: f64 = r.clone().map(|i| g[[i, c]] * y[[i, c]]).sum();
                        for i in r.clone() {
                            d[[i, c]] = y[[i, c]] * (g[[i, c]] - dot);
                        }
                    }
                }
                vec![(*a, d)]
            }
            Op::SegmentWeightedSum(values, weights, segments) => {
                let (v, w) = (val(*values), val(*weights));
                let heads = w.ncols();
                let k = v.ncols() / heads;
                let mut dv = Array2::zeros(v.dim());
                let mut dw = Array2::zeros(w.dim());
                for (e, &seg) in segments.ids().iter().enumerate() {
                    for h in 0..heads {
                        let a = w[[e, h]];
                        let mut acc = 0.0;
                        for j in h * k..(h + 1) * k {
                            dv[[e, j]] = a * g[[seg, j]];
                            acc += g[[seg, j]] * v[[e, j]];
                        }
                        dw[[e, h]] = acc;
                    }
                }
                vec![(*values, dv), (*weights, dw)]
            }
            Op::L2Normalize(a, eps) => {
                let x = val(*a);
                let y = &node.value;
                let mut d = Array2::zeros(x.dim());
                for r in 0..x.nrows() {
                    let norm = x.row(r).dot(&x.row(r)).sqrt();
                    let gr = g.row(r);
                    if norm > *eps {
                        let yg = y.row(r).dot(&gr);
                        let row = (&gr - &(&y.row(r) * yg)) / norm;
                        d.row_mut(r).assign(&row);
                    } else {
                        d.row_mut(r).assign(&(&gr / *eps));
                    }
                }
                vec![(*a, d)]
            }
            Op::CosineRows(a, b, eps) => {
                let (x, y) = (val(*a), val(*b));
                let mut da = Array2::zeros(x.dim());
                let mut db = Array2::zeros(y.dim());
                for r in 0..x.nrows() {
                    let (xr, yr) = (x.row(r), y.row(r));
                    let rna = xr.dot(&xr).sqrt();
                    let rnb = yr.dot(&yr).sqrt();
                    let (na, nb) = (rna.max(*eps), rnb.max(*eps));
                    let c = node.value[[r, 0]];
                    let gr = g[[r, 0]];
                    let mut ra = &yr / (na * nb);
                    if rna > *eps {
                        ra -= &(&xr * (c / (na * na)));
                    }
                    let mut rb = &xr / (na * nb);
                    if rnb > *eps {
                        rb -= &(&yr * (c / (nb * nb)));
                    }
                    da.row_mut(r).assign(&(ra * gr));
                    db.row_mut(r).assign(&(rb * gr));
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Mean(a) => {
                let x = val(*a);
                vec![(*a, Array2::from_elem(x.dim(), g[[0, 0]] / x.len() as f64))]
            }
            Op::Sum(a) => vec![(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]]))],
            Op::CrossEntropy(a, targets) => {
                let x = val(*a);
                let scale = g[[0, 0]] / targets.len() as f64;
                let mut d = Array2::zeros(x.dim());
                for (r, &t) in targets.iter().enumerate() {
                    let row = x.row(r);
                    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    for c in 0..x.ncols() {
                        d[[r, c]] = scale * (x[[r, c]] - max).exp() / z;
                    }
                    d[[r, t]] -= scale;
                }
                vec![(*a, d)]
            }
        }
    }
}
