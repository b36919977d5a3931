use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use super::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};
use super::{DiffError, ParamStore};

const GELU_COEFF: f64 = 0.044715;
const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which bound parameters receive gradients.
#[derive(Clone, Copy, Debug)]
pub enum Trainable<'a> {
    All,
    Nothing,
    Only(&'a BTreeSet<String>),
}

impl Trainable<'_> {
    pub fn contains(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Nothing => false,
            Trainable::Only(set) => set.contains(name),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    Exp(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    PadRows(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<usize> },
    KlStdNormal { mu: Var, sigma: Var },
    Reparameterize { mu: Var, sigma: Var, noise: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation so it can be replayed backward.
///
/// Every op checks its output for NaN/Inf and reports the op by name when one
/// appears. Values are immutable once recorded.
pub struct Graph<'a> {
    nodes: Vec<Node>,
    store: Option<&'a ParamStore>,
    trainable: Trainable<'a>,
    bound: Vec<(String, Var, bool)>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            trainable: Trainable::Nothing,
            bound: Vec::new(),
        }
    }

    /// A graph that resolves [`Graph::param`] against `store`.
    pub fn with_params(store: &'a ParamStore, trainable: Trainable<'a>) -> Self {
        Self {
            nodes: Vec::new(),
            store: Some(store),
            trainable,
            bound: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_unchecked(t, Op::Leaf, false)
    }

    /// A free leaf that receives a gradient (read it back with [`Gradients::wrt`]).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_unchecked(t, Op::Leaf, true)
    }

    /// Binds the named parameter from the attached store. Frozen parameters
    /// enter as constants.
    pub fn param(&mut self, name: &str) -> Result<Var, DiffError> {
        if let Some((_, v, _)) = self.bound.iter().find(|(n, _, _)| n == name) {
            return Ok(*v);
        }
        let store = self
            .store
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))?;
        let t = store
            .get(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))?
            .clone();
        let trainable = self.trainable.contains(name);
        let v = self.push_unchecked(t, Op::Leaf, trainable);
        self.bound.push((name.to_string(), v, trainable));
        Ok(v)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn matrix_dims(&self, v: Var, op: &str) -> Result<(usize, usize), DiffError> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(DiffError::Shape(format!("{op} expects a matrix, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(DiffError::Shape(format!("matmul [{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// `a[m,k] · b[n,k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (m, k) = self.matrix_dims(a, "matmul_nt")?;
        let (n, k2) = self.matrix_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(DiffError::Shape(format!("matmul_nt [{m},{k}] x [{n},{k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul_nt", Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), &[a, b])
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<(), DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(DiffError::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("add", Tensor::from_parts(shape, data), Op::Add(a, b), &[a, b])
    }

    /// Adds the vector `b[n]` to every row of `a[.., n]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let n = self.value(a).cols();
        if self.value(b).len() != n {
            return Err(DiffError::Shape(format!(
                "add_row: rows of width {n} vs bias {:?}",
                self.shape(b)
            )));
        }
        let bias = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bias).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("add_row", Tensor::from_parts(shape, data), Op::AddRow(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("mul", Tensor::from_parts(shape, data), Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, DiffError> {
        let t = self.value(a).map(|x| x * c);
        self.push("scale", t, Op::Scale(a, c), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, DiffError> {
        let t = self.value(a).map(gelu);
        self.push("gelu", t, Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, DiffError> {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push("relu", t, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, DiffError> {
        let t = self.value(a).map(f64::exp);
        self.push("exp", t, Op::Exp(a), &[a])
    }

    /// Softmax over the last axis of each row.
    pub fn softmax(&mut self, a: Var) -> Result<Var, DiffError> {
        let x = self.value(a);
        let n = x.cols();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let shape = x.shape().to_vec();
        self.push("softmax", Tensor::from_parts(shape, data), Op::Softmax(a), &[a])
    }

    /// Row-wise softmax of a square score matrix where row `i` only sees
    /// columns `0..=i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var, DiffError> {
        let (m, n) = self.matrix_dims(a, "causal_softmax")?;
        if m != n {
            return Err(DiffError::Shape(format!("causal_softmax needs a square matrix, got [{m},{n}]")));
        }
        let mut data = self.value(a).data().to_vec();
        for (i, row) in data.chunks_mut(n).enumerate() {
            softmax_in_place(&mut row[..=i]);
            row[i + 1..].fill(0.0);
        }
        self.push("causal_softmax", Tensor::from_parts(vec![m, n], data), Op::Softmax(a), &[a])
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, DiffError> {
        let n = self.value(x).cols();
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(DiffError::Shape(format!("layer_norm: width {n} vs gain/bias")));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut data = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).data().chunks(n) {
            let (mean, rstd) = row_stats(row);
            data.extend(row.iter().enumerate().map(|(j, &v)| (v - mean) * rstd * g[j] + b[j]));
        }
        let shape = self.shape(x).to_vec();
        self.push(
            "layer_norm",
            Tensor::from_parts(shape, data),
            Op::LayerNorm { x, gain, bias },
            &[x, gain, bias],
        )
    }

    /// Gathers rows of `table[V, E]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, DiffError> {
        let (v, e) = self.matrix_dims(table, "embedding")?;
        if ids.is_empty() {
            return Err(DiffError::Shape("embedding lookup with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(DiffError::Shape(format!("embedding id {bad} out of range for {v} rows")));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        self.push(
            "embedding",
            Tensor::from_parts(vec![ids.len(), e], data),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = *parts
            .first()
            .ok_or_else(|| DiffError::Shape("concat_rows of nothing".into()))?;
        let cols = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.cols() != cols {
                return Err(DiffError::Shape(format!("concat_rows: {:?} vs width {cols}", t.shape())));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        self.push(
            "concat_rows",
            Tensor::from_parts(vec![rows, cols], data),
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = *parts
            .first()
            .ok_or_else(|| DiffError::Shape("concat_cols of nothing".into()))?;
        let (rows, _) = self.matrix_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_cols")?;
            if r != rows {
                return Err(DiffError::Shape(format!("concat_cols: {r} rows vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(
            "concat_cols",
            Tensor::from_parts(vec![rows, total], data),
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let (rows, cols) = self.matrix_dims(x, "slice_cols")?;
        if start >= end || end > cols {
            return Err(DiffError::Shape(format!("slice_cols {start}..{end} of width {cols}")));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * w);
        for i in 0..rows {
            data.extend_from_slice(&src[i * cols + start..i * cols + end]);
        }
        self.push(
            "slice_cols",
            Tensor::from_parts(vec![rows, w], data),
            Op::SliceCols { x, start },
            &[x],
        )
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let (rows, cols) = self.matrix_dims(x, "slice_rows")?;
        if start >= end || end > rows {
            return Err(DiffError::Shape(format!("slice_rows {start}..{end} of {rows} rows")));
        }
        let data = self.value(x).data()[start * cols..end * cols].to_vec();
        self.push(
            "slice_rows",
            Tensor::from_parts(vec![end - start, cols], data),
            Op::SliceRows { x, start },
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let t = self.value(x).reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    /// Appends zero rows so the matrix has `rows` rows.
    pub fn pad_rows(&mut self, x: Var, rows: usize) -> Result<Var, DiffError> {
        let (r, c) = self.matrix_dims(x, "pad_rows")?;
        if rows < r {
            return Err(DiffError::Shape(format!("pad_rows to {rows} from {r}")));
        }
        let mut data = self.value(x).data().to_vec();
        data.resize(rows * c, 0.0);
        self.push("pad_rows", Tensor::from_parts(vec![rows, c], data), Op::PadRows(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, DiffError> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, DiffError> {
        let t = self.value(x);
        let s = t.sum() / t.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// `−log softmax(logits)[target]` summed over rows of `logits[m, V]`,
    /// one target per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, DiffError> {
        let t = self.value(logits);
        let v = t.cols();
        if v < 2 {
            return Err(DiffError::Shape(format!("cross_entropy needs at least 2 classes, got {v}")));
        }
        if t.rows() != targets.len() {
            return Err(DiffError::Shape(format!(
                "cross_entropy: {} rows vs {} targets",
                t.rows(),
                targets.len()
            )));
        }
        let mut total = 0.0;
        for (row, &target) in t.data().chunks(v).zip(targets) {
            if target >= v {
                return Err(DiffError::TargetOutOfRange { target, classes: v });
            }
            total += log_sum_exp(row) - row[target];
        }
        self.push(
            "cross_entropy",
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    /// `KL(N(mu, diag sigma²) ‖ N(0, I))` summed over every element.
    pub fn kl_std_normal(&mut self, mu: Var, sigma: Var) -> Result<Var, DiffError> {
        self.same_shape(mu, sigma, "kl_std_normal")?;
        if let Some(&s) = self.value(sigma).data().iter().find(|&&s| s <= 0.0) {
            return Err(DiffError::NonPositiveSigma(s));
        }
        let total: f64 = self
            .value(mu)
            .data()
            .iter()
            .zip(self.value(sigma).data())
            .map(|(&m, &s)| 0.5 * (m * m + s * s - 1.0 - (s * s).ln()))
            .sum();
        self.push(
            "kl_std_normal",
            Tensor::scalar(total),
            Op::KlStdNormal { mu, sigma },
            &[mu, sigma],
        )
    }

    /// `mu + sigma ⊙ noise`; `noise` is a constant.
    pub fn reparameterize(&mut self, mu: Var, sigma: Var, noise: Tensor) -> Result<Var, DiffError> {
        self.same_shape(mu, sigma, "reparameterize")?;
        if noise.shape() != self.shape(mu) {
            return Err(DiffError::Shape(format!(
                "reparameterize: noise {:?} vs mu {:?}",
                noise.shape(),
                self.shape(mu)
            )));
        }
        let data = self
            .value(mu)
            .data()
            .iter()
            .zip(self.value(sigma).data())
            .zip(noise.data())
            .map(|((m, s), e)| m + s * e)
            .collect();
        let shape = self.shape(mu).to_vec();
        self.push(
            "reparameterize",
            Tensor::from_parts(shape, data),
            Op::Reparameterize { mu, sigma, noise },
            &[mu, sigma],
        )
    }

    /// Replays the tape from `loss` back to its leaves.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(DiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let params = self
            .bound
            .iter()
            .filter(|(_, _, trainable)| *trainable)
            .map(|(name, v, _)| {
                let shape = self.shape(*v).to_vec();
                let g = match grads.get(v.0).and_then(|g| g.clone()) {
                    Some(g) => Tensor::from_parts(shape, g),
                    None => Tensor::zeros(&shape),
                };
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { nodes: grads, params })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.value(*a));
                let n = self.value(*b).cols();
                if needs(*a) {
                    matmul_nt_acc(g, self.value(*b).data(), slot(grads, *a, m * k), m, n, k);
                }
                if needs(*b) {
                    matmul_tn_acc(self.value(*a).data(), g, slot(grads, *b, k * n), m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = dims2(self.value(*a));
                let n = self.value(*b).rows();
                if needs(*a) {
                    matmul_acc(g, self.value(*b).data(), slot(grads, *a, m * k), m, n, k);
                }
                if needs(*b) {
                    matmul_tn_acc(g, self.value(*a).data(), slot(grads, *b, n * k), m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        axpy(slot(grads, v, g.len()), g, 1.0);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if needs(*a) {
                    axpy(slot(grads, *a, g.len()), g, 1.0);
                }
                if needs(*b) {
                    let n = self.value(*b).len();
                    let gb = slot(grads, *b, n);
                    for row in g.chunks(n) {
                        axpy(gb, row, 1.0);
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bv = self.value(*b).data();
                    for ((o, &gi), &y) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(bv) {
                        *o += gi * y;
                    }
                }
                if needs(*b) {
                    let av = self.value(*a).data();
                    for ((o, &gi), &x) in slot(grads, *b, g.len()).iter_mut().zip(g).zip(av) {
                        *o += gi * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    axpy(slot(grads, *a, g.len()), g, *c);
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                for ((o, &gi), &xi) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(x) {
                    *o += gi * gelu_grad(xi);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                for ((o, &gi), &xi) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(x) {
                    if xi > 0.0 {
                        *o += gi;
                    }
                }
            }
            Op::Exp(a) => {
                let y = node.value.data();
                for ((o, &gi), &yi) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(y) {
                    *o += gi * yi;
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = node.value.cols();
                let ga = slot(grads, *a, g.len());
                for ((grow, yrow), orow) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((o, &gi), &yi) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o += yi * (gi - dot);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let n = self.value(*x).cols();
                let xv = self.value(*x).data();
                let gamma = self.value(*gain).data().to_vec();
                let mut g_gain = vec![0.0; n];
                let mut g_bias = vec![0.0; n];
                let mut gx = vec![0.0; xv.len()];
                let mut xhat = vec![0.0; n];
                let mut gxhat = vec![0.0; n];
                for ((row, grow), gxrow) in xv.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let (mean, rstd) = row_stats(row);
                    for j in 0..n {
                        xhat[j] = (row[j] - mean) * rstd;
                        gxhat[j] = grow[j] * gamma[j];
                        g_gain[j] += grow[j] * xhat[j];
                        g_bias[j] += grow[j];
                    }
                    let m1 = gxhat.iter().sum::<f64>() / n as f64;
                    let m2 = gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        gxrow[j] = rstd * (gxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if needs(*x) {
                    axpy(slot(grads, *x, gx.len()), &gx, 1.0);
                }
                if needs(*gain) {
                    axpy(slot(grads, *gain, n), &g_gain, 1.0);
                }
                if needs(*bias) {
                    axpy(slot(grads, *bias, n), &g_bias, 1.0);
                }
            }
            Op::Embedding { table, ids } => {
                let e = self.value(*table).cols();
                let len = self.value(*table).len();
                let gt = slot(grads, *table, len);
                for (row, &id) in g.chunks(e).zip(ids) {
                    axpy(&mut gt[id * e..(id + 1) * e], row, 1.0);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if needs(p) {
                        axpy(slot(grads, p, len), &g[offset..offset + len], 1.0);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut start = 0;
                for &p in parts {
                    let (rows, w) = dims2(self.value(p));
                    if needs(p) {
                        let gp = slot(grads, p, rows * w);
                        for i in 0..rows {
                            axpy(
                                &mut gp[i * w..(i + 1) * w],
                                &g[i * total + start..i * total + start + w],
                                1.0,
                            );
                        }
                    }
                    start += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = dims2(self.value(*x));
                let w = node.value.cols();
                let gx = slot(grads, *x, rows * cols);
                for i in 0..rows {
                    axpy(
                        &mut gx[i * cols + start..i * cols + start + w],
                        &g[i * w..(i + 1) * w],
                        1.0,
                    );
                }
            }
            Op::SliceRows { x, start } => {
                let (rows, cols) = dims2(self.value(*x));
                let gx = slot(grads, *x, rows * cols);
                axpy(&mut gx[start * cols..start * cols + g.len()], g, 1.0);
            }
            Op::Reshape(x) => axpy(slot(grads, *x, g.len()), g, 1.0),
            Op::PadRows(x) => {
                let len = self.value(*x).len();
                axpy(slot(grads, *x, len), &g[..len], 1.0);
            }
            Op::Sum(x) => {
                let len = self.value(*x).len();
                slot(grads, *x, len).iter_mut().for_each(|o| *o += g[0]);
            }
            Op::Mean(x) => {
                let len = self.value(*x).len();
                let c = g[0] / len as f64;
                slot(grads, *x, len).iter_mut().for_each(|o| *o += c);
            }
            Op::CrossEntropy { logits, targets } => {
                let t = self.value(*logits);
                let v = t.cols();
                let gl = slot(grads, *logits, t.len());
                let mut probs = vec![0.0; v];
                for ((row, orow), &target) in t.data().chunks(v).zip(gl.chunks_mut(v)).zip(targets) {
                    probs.copy_from_slice(row);
                    softmax_in_place(&mut probs);
                    for (j, (o, p)) in orow.iter_mut().zip(&probs).enumerate() {
                        let onehot = if j == target { 1.0 } else { 0.0 };
                        *o += g[0] * (p - onehot);
                    }
                }
            }
            Op::KlStdNormal { mu, sigma } => {
                if needs(*mu) {
                    let m = self.value(*mu).data();
                    for (o, &mi) in slot(grads, *mu, m.len()).iter_mut().zip(m) {
                        *o += g[0] * mi;
                    }
                }
                if needs(*sigma) {
                    let s = self.value(*sigma).data();
                    for (o, &si) in slot(grads, *sigma, s.len()).iter_mut().zip(s) {
                        *o += g[0] * (si - 1.0 / si);
                    }
                }
            }
            Op::Reparameterize { mu, sigma, noise } => {
                if needs(*mu) {
                    axpy(slot(grads, *mu, g.len()), g, 1.0);
                }
                if needs(*sigma) {
                    for ((o, &gi), &e) in slot(grads, *sigma, g.len()).iter_mut().zip(g).zip(noise.data()) {
                        *o += gi * e;
                    }
                }
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient with respect to any recorded node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every trainable parameter bound on the graph. Bound but
    /// unused parameters map to exact zeros.
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(out: &mut [f64], x: &[f64], c: f64) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += c * v;
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn gelu(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEFF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    let t = (c * (x + GELU_COEFF * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEFF * x * x)
}
