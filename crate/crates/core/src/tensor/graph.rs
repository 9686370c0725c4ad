//! Tape of matrix operations with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and `backward` is a single reverse sweep. A graph lives
//! for one forward pass; parameters are copied in from a [`ParamStore`] and
//! their gradients are pushed back with [`Graph::accumulate_param_grads`].

use std::ops::Range;
use std::rc::Rc;

use crate::scalar::Real;
use crate::tensor::{Matrix, ParamId, ParamStore, TensorError};

/// Variance stabilizer for layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous row ranges, one per entity set.
pub type Segments = Rc<Vec<Range<usize>>>;

enum Op<F> {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, F),
    Relu(NodeId),
    Exp(NodeId),
    Square(NodeId),
    Clamp {
        x: NodeId,
        lo: Matrix<F>,
        hi: Matrix<F>,
    },
    Maximum(NodeId, NodeId),
    Minimum(NodeId, NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    PickColumns {
        x: NodeId,
        cols: Vec<usize>,
    },
    RowSum(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        shift: NodeId,
        normalized: Matrix<F>,
        inv_std: Vec<F>,
    },
    SegmentAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segments: Segments,
        heads: usize,
        /// Row-stochastic weights, one `k×k` block per (segment, head).
        weights: Vec<Vec<F>>,
    },
    SegmentMean {
        x: NodeId,
        segments: Segments,
    },
    GatherRows {
        x: NodeId,
        index: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
}

struct Node<F> {
    value: Matrix<F>,
    grad: Matrix<F>,
    op: Op<F>,
}

/// A computation graph over [`Matrix`] values.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    params: Vec<(NodeId, u64, ParamId)>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, left: (usize, usize), right: (usize, usize)) -> TensorError {
    TensorError::Shape { op, left, right }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<F>, op: Op<F>) -> NodeId {
        let (r, c) = value.shape();
        self.nodes.push(Node {
            value,
            grad: Matrix::zeros(r, c),
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant or input leaf.
    pub fn input(&mut self, value: Matrix<F>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// A leaf holding a copy of a stored parameter.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> NodeId {
        let node = self.push(store.value(id).clone(), Op::Leaf);
        self.params.push((node, store.registry_id(), id));
        node
    }

    pub fn value(&self, node: NodeId) -> &Matrix<F> {
        &self.nodes[node.0].value
    }

    pub fn grad(&self, node: NodeId) -> &Matrix<F> {
        &self.nodes[node.0].grad
    }

    /// Resets every accumulated gradient to zero.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad.fill(F::zero());
        }
    }

    fn shape(&self, node: NodeId) -> (usize, usize) {
        self.nodes[node.0].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Adds a `1×d` row to every row of `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = self.shape(x);
        if self.shape(bias) != (1, c) {
            return Err(shape_err("add_bias", (r, c), self.shape(bias)));
        }
        let mut value = self.value(x).clone();
        let b = self.value(bias).as_slice().to_vec();
        for i in 0..r {
            for (v, &bj) in value.row_mut(i).iter_mut().zip(&b) {
                *v += bj;
            }
        }
        Ok(self.push(value, Op::AddBias(x, bias)))
    }

    /// `input · weight + bias`, bias broadcast over rows.
    pub fn linear(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, TensorError> {
        let xw = self.matmul(input, weight)?;
        self.add_bias(xw, bias)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, factor: F) -> NodeId {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(F::zero()));
        self.push(value, Op::Relu(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(F::exp);
        self.push(value, Op::Exp(x))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v * v);
        self.push(value, Op::Square(x))
    }

    /// Elementwise clamp into `[lo, hi]`. The gradient passes only where the
    /// input lies inside the closed interval.
    pub fn clamp(
        &mut self,
        x: NodeId,
        lo: Matrix<F>,
        hi: Matrix<F>,
    ) -> Result<NodeId, TensorError> {
        let shape = self.shape(x);
        if lo.shape() != shape || hi.shape() != shape {
            return Err(shape_err("clamp", shape, lo.shape()));
        }
        let xv = self.value(x);
        let mut value = xv.clone();
        for (i, v) in value.as_mut_slice().iter_mut().enumerate() {
            *v = v.max(lo.as_slice()[i]).min(hi.as_slice()[i]);
        }
        Ok(self.push(value, Op::Clamp { x, lo, hi }))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape("maximum", a, b)?;
        let value = self
            .value(a)
            .zip_map(self.value(b), |x, y| if x >= y { x } else { y });
        Ok(self.push(value, Op::Maximum(a, b)))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape("minimum", a, b)?;
        let value = self
            .value(a)
            .zip_map(self.value(b), |x, y| if x <= y { x } else { y });
        Ok(self.push(value, Op::Minimum(a, b)))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let value = softmax_rows(self.value(x));
        self.push(value, Op::Softmax(x))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut value = xv.clone();
        for i in 0..xv.rows() {
            let row = value.row_mut(i);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(value, Op::LogSoftmax(x))
    }

    /// Picks one column per row, giving an `n×1` result.
    pub fn pick_columns(&mut self, x: NodeId, cols: &[usize]) -> Result<NodeId, TensorError> {
        let (r, c) = self.shape(x);
        if cols.len() != r {
            return Err(shape_err("pick_columns", (r, c), (cols.len(), 1)));
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(TensorError::Index {
                op: "pick_columns",
                index: bad,
                bound: c,
            });
        }
        let xv = self.value(x);
        let picked: Vec<F> = cols.iter().enumerate().map(|(i, &j)| xv[(i, j)]).collect();
        let value = Matrix::column(&picked);
        Ok(self.push(
            value,
            Op::PickColumns {
                x,
                cols: cols.to_vec(),
            },
        ))
    }

    /// Sums each row into an `n×1` column.
    pub fn row_sum(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let sums: Vec<F> = (0..xv.rows()).map(|i| xv.row(i).iter().copied().sum()).collect();
        let value = Matrix::column(&sums);
        self.push(value, Op::RowSum(x))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let value = Matrix::scalar(self.value(x).sum());
        self.push(value, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(TensorError::Empty { op: "mean_all" });
        }
        let value = Matrix::scalar(xv.sum() / F::from_usize(xv.len()).unwrap());
        Ok(self.push(value, Op::MeanAll(x)))
    }

    /// Per-row normalization to zero mean and unit variance followed by an
    /// affine `gain`/`shift` (both `1×d`).
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        shift: NodeId,
    ) -> Result<NodeId, TensorError> {
        let (r, d) = self.shape(x);
        if d < 2 {
            return Err(TensorError::LayerNormWidth(d));
        }
        for p in [gain, shift] {
            if self.shape(p) != (1, d) {
                return Err(shape_err("layer_norm", (r, d), self.shape(p)));
            }
        }
        let eps = F::from_f(LAYER_NORM_EPS);
        let width = F::from_usize(d).unwrap();
        let xv = self.value(x);
        let g = self.value(gain).as_slice();
        let s = self.value(shift).as_slice();
        let mut normalized = Matrix::zeros(r, d);
        let mut value = Matrix::zeros(r, d);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<F>() / width;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / width;
            let inv = F::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                normalized[(i, j)] = h;
                value[(i, j)] = h * g[j] + s[j];
            }
        }
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                shift,
                normalized,
                inv_std,
            },
        ))
    }

    /// Multi-head scaled dot-product attention restricted to row segments.
    ///
    /// Rows attend only to rows of their own segment. Columns are split into
    /// `heads` equal blocks and each block is scaled by `1/sqrt(d/heads)`.
    pub fn segment_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segments: Segments,
        heads: usize,
    ) -> Result<NodeId, TensorError> {
        self.same_shape("segment_attention", q, k)?;
        self.same_shape("segment_attention", q, v)?;
        let (rows, d) = self.shape(q);
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Heads { width: d, heads });
        }
        check_segments(&segments, rows)?;
        let dh = d / heads;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Matrix::zeros(rows, d);
        let mut weights = Vec::with_capacity(segments.len() * heads);
        for seg in segments.iter() {
            let n = seg.len();
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let mut w = vec![F::zero(); n * n];
                for i in 0..n {
                    let qi = &qv.row(seg.start + i)[cols.clone()];
                    let wrow = &mut w[i * n..(i + 1) * n];
                    for (j, wij) in wrow.iter_mut().enumerate() {
                        let kj = &kv.row(seg.start + j)[cols.clone()];
                        *wij = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<F>() * scale;
                    }
                    softmax_in_place(wrow);
                }
                for i in 0..n {
                    for j in 0..n {
                        let wij = w[i * n + j];
                        let vj = &vv.row(seg.start + j)[cols.clone()];
                        let orow = &mut out.row_mut(seg.start + i)[cols.clone()];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += wij * x;
                        }
                    }
                }
                weights.push(w);
            }
        }
        Ok(self.push(
            out,
            Op::SegmentAttention {
                q,
                k,
                v,
                segments,
                heads,
                weights,
            },
        ))
    }

    /// Attention weights recorded by a [`Graph::segment_attention`] node,
    /// as `k×k` matrices ordered by (segment, head).
    pub fn attention_weights(&self, node: NodeId) -> Option<Vec<Matrix<F>>> {
        match &self.nodes[node.0].op {
            Op::SegmentAttention {
                segments,
                heads,
                weights,
                ..
            } => {
                let mut out = Vec::with_capacity(weights.len());
                for (s, seg) in segments.iter().enumerate() {
                    for h in 0..*heads {
                        let w = &weights[s * heads + h];
                        out.push(Matrix::from_vec(seg.len(), seg.len(), w.clone()).ok()?);
                    }
                }
                Some(out)
            }
            _ => None,
        }
    }

    /// Averages the rows of each segment, one output row per segment.
    pub fn segment_mean(&mut self, x: NodeId, segments: Segments) -> Result<NodeId, TensorError> {
        let (rows, d) = self.shape(x);
        check_segments(&segments, rows)?;
        let xv = self.value(x);
        let mut value = Matrix::zeros(segments.len(), d);
        for (s, seg) in segments.iter().enumerate() {
            let inv = F::one() / F::from_usize(seg.len()).unwrap();
            for r in seg.clone() {
                for (o, &v) in value.row_mut(s).iter_mut().zip(xv.row(r)) {
                    *o += v * inv;
                }
            }
        }
        Ok(self.push(value, Op::SegmentMean { x, segments }))
    }

    /// Row `i` of the output is row `index[i]` of `x`.
    pub fn gather_rows(&mut self, x: NodeId, index: &[usize]) -> Result<NodeId, TensorError> {
        let (rows, d) = self.shape(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Index {
                op: "gather_rows",
                index: bad,
                bound: rows,
            });
        }
        let xv = self.value(x);
        let mut value = Matrix::zeros(index.len(), d);
        for (o, &i) in index.iter().enumerate() {
            value.row_mut(o).copy_from_slice(xv.row(i));
        }
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
        ))
    }

    /// Stacks the inputs vertically.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let first = *parts.first().ok_or(TensorError::Empty { op: "concat_rows" })?;
        let d = self.shape(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != d {
                return Err(shape_err("concat_rows", self.shape(first), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.as_slice());
        }
        let value = Matrix::from_vec(rows, d, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    /// Back-propagates from a `1×1` node. Gradients add onto whatever earlier
    /// calls accumulated.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if self.shape(loss) != (1, 1) {
            return Err(TensorError::NotScalar(self.shape(loss)));
        }
        let mut grads: Vec<Option<Matrix<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(F::one()));
        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &upstream, &mut grads);
            self.nodes[idx].grad.add_assign(&upstream);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, dy: &Matrix<F>, grads: &mut [Option<Matrix<F>>]) {
        let node = &self.nodes[idx];
        let mut send = |target: NodeId, g: Matrix<F>| match &mut grads[target.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.shape();
                let n = bv.cols();
                let mut da = Matrix::zeros(m, k);
                F::gemm(m, n, k, dy.as_slice(), false, bv.as_slice(), true, F::zero(), da.as_mut_slice());
                let mut db = Matrix::zeros(k, n);
                F::gemm(k, m, n, av.as_slice(), true, dy.as_slice(), false, F::zero(), db.as_mut_slice());
                send(*a, da);
                send(*b, db);
            }
            Op::AddBias(x, bias) => {
                let mut db = Matrix::zeros(1, dy.cols());
                for i in 0..dy.rows() {
                    for (o, &g) in db.as_mut_slice().iter_mut().zip(dy.row(i)) {
                        *o += g;
                    }
                }
                send(*x, dy.clone());
                send(*bias, db);
            }
            Op::Add(a, b) => {
                send(*a, dy.clone());
                send(*b, dy.clone());
            }
            Op::Sub(a, b) => {
                send(*a, dy.clone());
                send(*b, dy.map(|g| -g));
            }
            Op::Mul(a, b) => {
                send(*a, dy.zip_map(self.value(*b), |g, y| g * y));
                send(*b, dy.zip_map(self.value(*a), |g, x| g * x));
            }
            Op::Scale(x, factor) => send(*x, dy.map(|g| g * *factor)),
            Op::Relu(x) => send(
                *x,
                dy.zip_map(self.value(*x), |g, v| if v > F::zero() { g } else { F::zero() }),
            ),
            Op::Exp(x) => send(*x, dy.zip_map(&node.value, |g, y| g * y)),
            Op::Square(x) => send(
                *x,
                dy.zip_map(self.value(*x), |g, v| g * (v + v)),
            ),
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x);
                let mut dx = dy.clone();
                for (i, g) in dx.as_mut_slice().iter_mut().enumerate() {
                    let v = xv.as_slice()[i];
                    if v < lo.as_slice()[i] || v > hi.as_slice()[i] {
                        *g = F::zero();
                    }
                }
                send(*x, dx);
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let pick_max = matches!(node.op, Op::Maximum(..));
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = dy.clone();
                let mut db = dy.clone();
                for i in 0..dy.len() {
                    let (x, y) = (av.as_slice()[i], bv.as_slice()[i]);
                    let to_a = if pick_max { x >= y } else { x <= y };
                    if to_a {
                        db.as_mut_slice()[i] = F::zero();
                    } else {
                        da.as_mut_slice()[i] = F::zero();
                    }
                }
                send(*a, da);
                send(*b, db);
            }
            Op::Softmax(x) => {
                let s = &node.value;
                let mut dx = Matrix::zeros(s.rows(), s.cols());
                for i in 0..s.rows() {
                    let dot: F = s.row(i).iter().zip(dy.row(i)).map(|(&p, &g)| p * g).sum();
                    for j in 0..s.cols() {
                        dx[(i, j)] = s[(i, j)] * (dy[(i, j)] - dot);
                    }
                }
                send(*x, dx);
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let total: F = dy.row(i).iter().copied().sum();
                    for j in 0..y.cols() {
                        dx[(i, j)] = dy[(i, j)] - y[(i, j)].exp() * total;
                    }
                }
                send(*x, dx);
            }
            Op::PickColumns { x, cols } => {
                let (r, c) = self.shape(*x);
                let mut dx = Matrix::zeros(r, c);
                for (i, &j) in cols.iter().enumerate() {
                    dx[(i, j)] = dy[(i, 0)];
                }
                send(*x, dx);
            }
            Op::RowSum(x) => {
                let (r, c) = self.shape(*x);
                let mut dx = Matrix::zeros(r, c);
                for i in 0..r {
                    dx.row_mut(i).fill(dy[(i, 0)]);
                }
                send(*x, dx);
            }
            Op::SumAll(x) => {
                let (r, c) = self.shape(*x);
                send(*x, Matrix::filled(r, c, dy[(0, 0)]));
            }
            Op::MeanAll(x) => {
                let (r, c) = self.shape(*x);
                let g = dy[(0, 0)] / F::from_usize(r * c).unwrap();
                send(*x, Matrix::filled(r, c, g));
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                normalized,
                inv_std,
            } => {
                let (r, d) = normalized.shape();
                let g = self.value(*gain).as_slice();
                let width = F::from_usize(d).unwrap();
                let mut dx = Matrix::zeros(r, d);
                let mut dgain = Matrix::zeros(1, d);
                let mut dshift = Matrix::zeros(1, d);
                let mut dh = vec![F::zero(); d];
                for i in 0..r {
                    let h = normalized.row(i);
                    let gy = dy.row(i);
                    for j in 0..d {
                        dgain.as_mut_slice()[j] += gy[j] * h[j];
                        dshift.as_mut_slice()[j] += gy[j];
                        dh[j] = gy[j] * g[j];
                    }
                    let sum_dh: F = dh.iter().copied().sum();
                    let sum_dh_h: F = dh.iter().zip(h).map(|(&a, &b)| a * b).sum();
                    let scale = inv_std[i] / width;
                    for j in 0..d {
                        dx[(i, j)] = scale * (width * dh[j] - sum_dh - h[j] * sum_dh_h);
                    }
                }
                send(*x, dx);
                send(*gain, dgain);
                send(*shift, dshift);
            }
            Op::SegmentAttention {
                q,
                k,
                v,
                segments,
                heads,
                weights,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (rows, d) = qv.shape();
                let dh = d / heads;
                let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
                let mut dq = Matrix::zeros(rows, d);
                let mut dk = Matrix::zeros(rows, d);
                let mut dv = Matrix::zeros(rows, d);
                for (s, seg) in segments.iter().enumerate() {
                    let n = seg.len();
                    for h in 0..*heads {
                        let cols = h * dh..(h + 1) * dh;
                        let w = &weights[s * heads + h];
                        // dW_ij = dOut_i · v_j
                        let mut dw = vec![F::zero(); n * n];
                        for i in 0..n {
                            let go = &dy.row(seg.start + i)[cols.clone()];
                            for j in 0..n {
                                let vj = &vv.row(seg.start + j)[cols.clone()];
                                dw[i * n + j] = go.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                                let wij = w[i * n + j];
                                let dvj = &mut dv.row_mut(seg.start + j)[cols.clone()];
                                for (o, &g) in dvj.iter_mut().zip(go) {
                                    *o += wij * g;
                                }
                            }
                        }
                        for i in 0..n {
                            let wrow = &w[i * n..(i + 1) * n];
                            let dwrow = &dw[i * n..(i + 1) * n];
                            let dot: F = wrow.iter().zip(dwrow).map(|(&a, &b)| a * b).sum();
                            for j in 0..n {
                                let dl = wrow[j] * (dwrow[j] - dot) * scale;
                                if dl == F::zero() {
                                    continue;
                                }
                                for c in cols.clone() {
                                    dq[(seg.start + i, c)] += dl * kv[(seg.start + j, c)];
                                    dk[(seg.start + j, c)] += dl * qv[(seg.start + i, c)];
                                }
                            }
                        }
                    }
                }
                send(*q, dq);
                send(*k, dk);
                send(*v, dv);
            }
            Op::SegmentMean { x, segments } => {
                let (r, d) = self.shape(*x);
                let mut dx = Matrix::zeros(r, d);
                for (s, seg) in segments.iter().enumerate() {
                    let inv = F::one() / F::from_usize(seg.len()).unwrap();
                    for row in seg.clone() {
                        for (o, &g) in dx.row_mut(row).iter_mut().zip(dy.row(s)) {
                            *o += g * inv;
                        }
                    }
                }
                send(*x, dx);
            }
            Op::GatherRows { x, index } => {
                let (r, d) = self.shape(*x);
                let mut dx = Matrix::zeros(r, d);
                for (o, &i) in index.iter().enumerate() {
                    for (acc, &g) in dx.row_mut(i).iter_mut().zip(dy.row(o)) {
                        *acc += g;
                    }
                }
                send(*x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, d) = self.shape(p);
                    let slice = dy.as_slice()[offset * d..(offset + r) * d].to_vec();
                    send(p, Matrix::from_vec(r, d, slice).expect("shape recorded at forward"));
                    offset += r;
                }
            }
        }
    }

    /// Adds the gradients of every parameter leaf drawn from `store` into
    /// the store's gradient buffers.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<F>) {
        for &(node, registry, id) in &self.params {
            if registry == store.registry_id() {
                store.grad_mut(id).add_assign(&self.nodes[node.0].grad);
            }
        }
    }
}

fn check_segments(segments: &[Range<usize>], rows: usize) -> Result<(), TensorError> {
    for seg in segments {
        if seg.is_empty() {
            return Err(TensorError::EmptySegment);
        }
        if seg.end > rows {
            return Err(TensorError::Index {
                op: "segment",
                index: seg.end - 1,
                bound: rows,
            });
        }
    }
    Ok(())
}

fn softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut z = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

/// Row-wise softmax of a plain matrix.
pub fn softmax_rows<F: Real>(x: &Matrix<F>) -> Matrix<F> {
    let mut out = x.clone();
    for i in 0..x.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

/// Builds contiguous segments from per-set row counts.
pub fn segments_from_counts(counts: &[usize]) -> Segments {
    let mut start = 0;
    Rc::new(
        counts
            .iter()
            .map(|&c| {
                let r = start..start + c;
                start += c;
                r
            })
            .collect(),
    )
}
