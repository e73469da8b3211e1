//! A small reverse-mode tape over dense matrices.
//!
//! A [`Graph`] borrows a [`ParamStore`] and records operations as they are
//! applied. Parameters enter the tape as leaves without being copied;
//! [`Graph::backward`] returns dense gradients for every trainable parameter
//! that the loss touched.

use crate::losses;
use crate::tensor::{self, matmul, matmul_at, matmul_bt, Mat, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter matrices with per-parameter freeze flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Mat<T>>,
    frozen: Vec<bool>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self { names: vec![], values: vec![], frozen: vec![] }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn add(&mut self, name: impl Into<String>, value: Mat<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.frozen.push(false);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Mat::cast).collect(),
            frozen: self.frozen.clone(),
        }
    }
}

/// Dense gradients indexed by parameter; `None` where the loss did not
/// reach the parameter or the parameter is frozen.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn empty(n: usize) -> Self {
        Self { grads: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn set(&mut self, id: ParamId, grad: Mat<T>) {
        self.grads[id.0] = Some(grad);
    }

    /// Adds `other` in parameter order; the fixed order keeps sums reproducible.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.add_assign(t),
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Mat::is_finite)
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Gather { table: NodeId, ids: Vec<usize> },
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    Scale(NodeId, T),
    Gelu(NodeId),
    Tanh(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Mat<T>, rstd: Vec<T> },
    Softmax { x: NodeId },
    SliceCols { a: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    SliceRows { a: NodeId, start: usize },
    RepeatRows(NodeId),
    MulConst { a: NodeId, factor: Mat<T> },
    CrossEntropy { logits: NodeId, targets: Vec<Option<usize>>, probs: Mat<T> },
    ScatterRows { src: NodeId, positions: Vec<usize> },
    WeightedSum(Vec<(NodeId, T)>),
    Kernel { inputs: Vec<NodeId>, grads: Vec<Mat<f64>> },
}

#[derive(Debug)]
struct Node<T> {
    value: Option<Mat<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'p, T> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<NodeId>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::with_capacity(256), param_nodes: vec![None; params.len()] }
    }

    pub fn value(&self, id: NodeId) -> &Mat<T> {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.params.get(*p),
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, id: NodeId) -> T {
        let v = self.value(id);
        assert_eq!(v.shape(), (1, 1), "not a scalar node");
        v[(0, 0)]
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat<T>) -> NodeId {
        self.nodes.push(Node { value: Some(value), op: Op::Leaf, needs_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id), needs_grad: !self.params.is_frozen(id) });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(n);
        n
    }

    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let value = self.value(table).select_rows(ids);
        self.push(value, Op::Gather { table, ids: ids.to_vec() }, &[table])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b), &[a, b])
    }

    /// `a + 1·row`, broadcasting a `1 × n` row over every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        let mut value = self.value(a).clone();
        let bias = r.row(0).to_vec();
        for i in 0..value.rows() {
            for (v, &b) in value.row_mut(i).iter_mut().zip(&bias) {
                *v = *v + b;
            }
        }
        self.push(value, Op::AddRow(a, row), &[a, row])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = matmul(self.value(a), self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = matmul_bt(self.value(a), self.value(b));
        self.push(value, Op::MatMulBt(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let value = self.value(a).map(|v| v * s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let (c, k) = (T::of(GELU_C), T::of(GELU_A));
        let half = T::of(0.5);
        let value = self.value(a).map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        self.push(value, Op::Gelu(a), &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x.tanh());
        self.push(value, Op::Tanh(a), &[a])
    }

    /// Row-wise layer normalization with `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let eps = T::of(1e-5);
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let n = T::of(cols as f64);
        let mut xhat = Mat::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let s = T::one() / (var + eps).sqrt();
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
            rstd.push(s);
        }
        let g = self.value(gamma).row(0).to_vec();
        let b = self.value(beta).row(0).to_vec();
        let mut value = xhat.clone();
        for r in 0..rows {
            for (c, v) in value.row_mut(r).iter_mut().enumerate() {
                *v = *v * g[c] + b[c];
            }
        }
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// Row softmax; entries where `allowed` is false get probability 0.
    pub fn masked_softmax(&mut self, x: NodeId, allowed: &[bool]) -> NodeId {
        let xv = self.value(x);
        assert_eq!(allowed.len(), xv.data().len(), "mask shape mismatch");
        let mut value = xv.clone();
        let cols = value.cols();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let ok = &allowed[r * cols..(r + 1) * cols];
            let max = row.iter().zip(ok).filter(|(_, &a)| a).map(|(&v, _)| v).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for (v, &a) in row.iter_mut().zip(ok) {
                *v = if a { (*v - max).exp() } else { T::zero() };
                total = total + *v;
            }
            if total > T::zero() {
                for v in row.iter_mut() {
                    *v = *v / total;
                }
            }
        }
        self.push(value, Op::Softmax { x }, &[x])
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let value = tensor::softmax_rows(self.value(x));
        self.push(value, Op::Softmax { x }, &[x])
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let av = self.value(a);
        let mut value = Mat::zeros(av.rows(), len);
        for r in 0..av.rows() {
            value.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        self.push(value, Op::SliceCols { a, start }, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Mat::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat row mismatch");
            for r in 0..rows {
                value.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
            }
            offset += pv.cols();
        }
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let value = self.value(a).slice_rows(start, len);
        self.push(value, Op::SliceRows { a, start }, &[a])
    }

    /// Stacks a `1 × n` row `count` times.
    pub fn repeat_rows(&mut self, a: NodeId, count: usize) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.rows(), 1, "repeat_rows expects a single row");
        let mut value = Mat::zeros(count, av.cols());
        for r in 0..count {
            value.row_mut(r).copy_from_slice(av.row(0));
        }
        self.push(value, Op::RepeatRows(a), &[a])
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: NodeId, factor: Mat<T>) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.shape(), factor.shape(), "mul_const shape mismatch");
        let data = av.data().iter().zip(factor.data()).map(|(&x, &f)| x * f).collect();
        let value = Mat::from_vec(av.rows(), av.cols(), data);
        self.push(value, Op::MulConst { a, factor }, &[a])
    }

    /// Summed negative log-likelihood of `targets` under row-softmax of
    /// `logits`; rows with `None` are skipped. Returns a `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[Option<usize>]) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "one target slot per logit row");
        let probs = tensor::softmax_rows(lv);
        let mut total = T::zero();
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                total = total + (tensor::log_sum_exp(lv.row(r)) - lv[(r, t)]);
            }
        }
        self.push(Mat::filled(1, 1, total), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, &[logits])
    }

    /// Copies `base` and overwrites rows `positions[i]` with row `i` of `src`.
    pub fn scatter_rows(&mut self, base: Mat<T>, src: NodeId, positions: &[usize]) -> NodeId {
        let sv = self.value(src);
        assert_eq!(sv.rows(), positions.len(), "one position per source row");
        let mut value = base;
        for (i, &p) in positions.iter().enumerate() {
            value.row_mut(p).copy_from_slice(sv.row(i));
        }
        self.push(value, Op::ScatterRows { src, positions: positions.to_vec() }, &[src])
    }

    pub fn weighted_sum(&mut self, terms: &[(NodeId, T)]) -> NodeId {
        let mut total = T::zero();
        for &(n, w) in terms {
            total = total + w * self.scalar(n);
        }
        let inputs: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        self.push(Mat::filled(1, 1, total), Op::WeightedSum(terms.to_vec()), &inputs)
    }

    /// Kernel (MMD) loss between differentiable sequences `inputs` and
    /// constant `targets`, evaluated in `f64`. Bandwidths are treated as
    /// constants.
    pub fn kernel_loss(&mut self, inputs: &[NodeId], targets: &[Mat<f64>], bandwidths: &[f64]) -> NodeId {
        let generated: Vec<Mat<f64>> = inputs.iter().map(|&n| self.value(n).cast()).collect();
        let (value, grads) = losses::mmd_value_and_grad(&generated, targets, bandwidths);
        self.push(Mat::filled(1, 1, T::of(value)), Op::Kernel { inputs: inputs.to_vec(), grads }, inputs)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Gradients<T> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Mat<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::filled(1, 1, T::one()));
        let mut out = Gradients::empty(self.params.len());

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => out.grads[p.0] = Some(g),
                Op::Gather { table, ids } => {
                    if self.wants(*table) {
                        let tv = self.value(*table);
                        let acc = slot(&mut grads, *table, tv.shape());
                        for (r, &i) in ids.iter().enumerate() {
                            for (a, &v) in acc.row_mut(i).iter_mut().zip(g.row(r)) {
                                *a = *a + v;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    self.send(&mut grads, *a, &g);
                    self.send(&mut grads, *b, &g);
                }
                Op::AddRow(a, row) => {
                    self.send(&mut grads, *a, &g);
                    if self.wants(*row) {
                        let mut colsum = Mat::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (c, &v) in colsum.row_mut(0).iter_mut().zip(g.row(r)) {
                                *c = *c + v;
                            }
                        }
                        self.send_owned(&mut grads, *row, colsum);
                    }
                }
                Op::MatMul(a, b) => {
                    if self.wants(*a) {
                        let ga = matmul_bt(&g, self.value(*b));
                        self.send_owned(&mut grads, *a, ga);
                    }
                    if self.wants(*b) {
                        let gb = matmul_at(self.value(*a), &g);
                        self.send_owned(&mut grads, *b, gb);
                    }
                }
                Op::MatMulBt(a, b) => {
                    if self.wants(*a) {
                        let ga = matmul(&g, self.value(*b));
                        self.send_owned(&mut grads, *a, ga);
                    }
                    if self.wants(*b) {
                        let gb = matmul_at(&g, self.value(*a));
                        self.send_owned(&mut grads, *b, gb);
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    self.send_owned(&mut grads, *a, g.map(|v| v * s));
                }
                Op::Gelu(a) => {
                    let (c, k) = (T::of(GELU_C), T::of(GELU_A));
                    let half = T::of(0.5);
                    let three = T::of(3.0);
                    let xv = self.value(*a);
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gv)| {
                            let t = (c * (x + k * x * x * x)).tanh();
                            let dt = (T::one() - t * t) * c * (T::one() + three * k * x * x);
                            gv * (half * (T::one() + t) + half * x * dt)
                        })
                        .collect();
                    self.send_owned(&mut grads, *a, Mat::from_vec(xv.rows(), xv.cols(), data));
                }
                Op::Tanh(a) => {
                    let y = node.value.as_ref().expect("tanh value");
                    let data = y.data().iter().zip(g.data()).map(|(&t, &gv)| gv * (T::one() - t * t)).collect();
                    self.send_owned(&mut grads, *a, Mat::from_vec(y.rows(), y.cols(), data));
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let (rows, cols) = xhat.shape();
                    let gam = self.value(*gamma).row(0).to_vec();
                    if self.wants(*gamma) || self.wants(*beta) {
                        let mut dg = Mat::zeros(1, cols);
                        let mut db = Mat::zeros(1, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                dg[(0, c)] = dg[(0, c)] + g[(r, c)] * xhat[(r, c)];
                                db[(0, c)] = db[(0, c)] + g[(r, c)];
                            }
                        }
                        self.send_owned(&mut grads, *gamma, dg);
                        self.send_owned(&mut grads, *beta, db);
                    }
                    if self.wants(*x) {
                        let n = T::of(cols as f64);
                        let mut dx = Mat::zeros(rows, cols);
                        for r in 0..rows {
                            let dxhat: Vec<T> = (0..cols).map(|c| g[(r, c)] * gam[c]).collect();
                            let mean_d = dxhat.iter().copied().sum::<T>() / n;
                            let mean_dx = (0..cols).map(|c| dxhat[c] * xhat[(r, c)]).sum::<T>() / n;
                            for c in 0..cols {
                                dx[(r, c)] = rstd[r] * (dxhat[c] - mean_d - xhat[(r, c)] * mean_dx);
                            }
                        }
                        self.send_owned(&mut grads, *x, dx);
                    }
                }
                Op::Softmax { x } => {
                    let y = node.value.as_ref().expect("softmax value");
                    let mut dx = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let inner = tensor::dot(y.row(r), g.row(r));
                        for ((d, &yv), &gv) in dx.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                            *d = yv * (gv - inner);
                        }
                    }
                    self.send_owned(&mut grads, *x, dx);
                }
                Op::SliceCols { a, start } => {
                    if self.wants(*a) {
                        let shape = self.value(*a).shape();
                        let acc = slot(&mut grads, *a, shape);
                        for r in 0..g.rows() {
                            for (o, &v) in acc.row_mut(r)[*start..*start + g.cols()].iter_mut().zip(g.row(r)) {
                                *o = *o + v;
                            }
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.wants(p) {
                            let mut part = Mat::zeros(g.rows(), w);
                            for r in 0..g.rows() {
                                part.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                            }
                            self.send_owned(&mut grads, p, part);
                        }
                        offset += w;
                    }
                }
                Op::SliceRows { a, start } => {
                    if self.wants(*a) {
                        let shape = self.value(*a).shape();
                        let acc = slot(&mut grads, *a, shape);
                        for r in 0..g.rows() {
                            for (o, &v) in acc.row_mut(start + r).iter_mut().zip(g.row(r)) {
                                *o = *o + v;
                            }
                        }
                    }
                }
                Op::RepeatRows(a) => {
                    let mut colsum = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (c, &v) in colsum.row_mut(0).iter_mut().zip(g.row(r)) {
                            *c = *c + v;
                        }
                    }
                    self.send_owned(&mut grads, *a, colsum);
                }
                Op::MulConst { a, factor } => {
                    let data = g.data().iter().zip(factor.data()).map(|(&gv, &f)| gv * f).collect();
                    self.send_owned(&mut grads, *a, Mat::from_vec(g.rows(), g.cols(), data));
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let up = g[(0, 0)];
                    let mut dl = Mat::zeros(probs.rows(), probs.cols());
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for (d, &p) in dl.row_mut(r).iter_mut().zip(probs.row(r)) {
                                *d = up * p;
                            }
                            dl[(r, t)] = dl[(r, t)] - up;
                        }
                    }
                    self.send_owned(&mut grads, *logits, dl);
                }
                Op::ScatterRows { src, positions } => {
                    let mut ds = Mat::zeros(positions.len(), g.cols());
                    for (i, &p) in positions.iter().enumerate() {
                        ds.row_mut(i).copy_from_slice(g.row(p));
                    }
                    self.send_owned(&mut grads, *src, ds);
                }
                Op::WeightedSum(terms) => {
                    let up = g[(0, 0)];
                    for &(n, w) in terms {
                        self.send_owned(&mut grads, n, Mat::filled(1, 1, up * w));
                    }
                }
                Op::Kernel { inputs, grads: kgrads } => {
                    let up = g[(0, 0)].f64();
                    for (&n, kg) in inputs.iter().zip(kgrads) {
                        self.send_owned(&mut grads, n, kg.map(|v| v * up).cast());
                    }
                }
            }
        }
        out
    }

    fn wants(&self, n: NodeId) -> bool {
        self.nodes[n.0].needs_grad
    }

    fn send(&self, grads: &mut [Option<Mat<T>>], to: NodeId, g: &Mat<T>) {
        if !self.wants(to) {
            return;
        }
        match &mut grads[to.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    fn send_owned(&self, grads: &mut [Option<Mat<T>>], to: NodeId, g: Mat<T>) {
        if !self.wants(to) {
            return;
        }
        match &mut grads[to.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Mat<T>>], n: NodeId, shape: (usize, usize)) -> &mut Mat<T> {
    grads[n.0].get_or_insert_with(|| Mat::zeros(shape.0, shape.1))
}
