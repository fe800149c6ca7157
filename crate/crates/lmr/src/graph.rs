//! Reverse-mode automatic differentiation over 2-D arrays.
//!
//! A [`Graph`] records every operation eagerly (values are computed at build
//! time) and [`Graph::backward`] replays the tape in reverse, accumulating
//! vector-Jacobian products. The op set is exactly what the model and its
//! losses need; each op's backward rule is verified against central finite
//! differences in this module's tests.
//!
//! The whole tape is generic over [`Real`] so the same forward code runs in
//! `f32` for training and in `f64` for gradient checks.

use ndarray::{s, Array2, Axis};

/// Scalar type the tape operates on (`f32` or `f64`).
pub trait Real:
    ndarray::LinalgScalar
    + num_traits::Float
    + num_traits::FromPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("finite literal")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(u32);

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// `n×d + 1×d`, the row vector broadcast over rows.
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, T),
    SoftmaxRows(NodeId),
    LogSumExpRows(NodeId),
    LayerNormRows {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: T,
    },
    Gelu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Abs(NodeId),
    MinElem(NodeId, NodeId),
    MaxElem(NodeId, NodeId),
    Transpose(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    Slice {
        x: NodeId,
        row0: usize,
        rows: usize,
        col0: usize,
        cols: usize,
    },
    MeanRows(NodeId),
    RepeatRow(NodeId, usize),
    SumAll(NodeId),
    MeanAll(NodeId),
}

struct Node<T: Real> {
    value: Array2<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`NodeId`].
pub struct Grads<T: Real> {
    by_node: Vec<Option<Array2<T>>>,
}

impl<T: Real> Grads<T> {
    /// Gradient of the loss w.r.t. the given node, if any flowed into it.
    pub fn wrt(&self, id: NodeId) -> Option<&Array2<T>> {
        self.by_node.get(id.idx()).and_then(|g| g.as_ref())
    }
}

/// Eager tape of 2-D array operations.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Current value of a node.
    pub fn value(&self, id: NodeId) -> &Array2<T> {
        &self.nodes[id.idx()].value
    }

    /// Value of a 1×1 node as a scalar.
    pub fn scalar_value(&self, id: NodeId) -> T {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "scalar_value on non-scalar node");
        v[[0, 0]]
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.idx()].needs_grad
    }

    /// Non-trainable leaf (inputs, masks, constants).
    pub fn leaf(&mut self, value: Array2<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; `backward` will produce a gradient for it.
    pub fn param(&mut self, value: Array2<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// 1×1 non-trainable scalar leaf.
    pub fn scalar(&mut self, v: T) -> NodeId {
        self.leaf(Array2::from_elem((1, 1), v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ar, ac) = self.value(a).dim();
        let (br, bc) = self.value(b).dim();
        assert_eq!(ac, br, "matmul {ar}x{ac} . {br}x{bc}");
        let value = self.value(a).dot(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape");
        let value = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    /// Broadcast-add a `1×d` row vector to every row of an `n×d` matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (_, ac) = self.value(a).dim();
        let (rr, rc) = self.value(row).dim();
        assert_eq!((rr, rc), (1, ac), "add_row shape");
        let value = self.value(a) + self.value(row);
        let ng = self.needs(a) || self.needs(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub shape");
        let value = self.value(a) - self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul shape");
        let value = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "div shape");
        let value = self.value(a) / self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Div(a, b), ng)
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let value = self.value(a).mapv(|v| v * c);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, T::from_f(-1.0))
    }

    /// Row-wise softmax (max-subtracted for stability). Every output row sums to 1.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
            row.mapv_inplace(|v| (v - mx).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let ng = self.needs(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    /// Row-wise log-sum-exp, `n×m -> n×1`.
    pub fn logsumexp_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let n = x.nrows();
        let mut value = Array2::zeros((n, 1));
        for (i, row) in x.rows().into_iter().enumerate() {
            let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let sum = row.iter().map(|&v| (v - mx).exp()).fold(T::zero(), |a, b| a + b);
            value[[i, 0]] = mx + sum.ln();
        }
        let ng = self.needs(a);
        self.push(value, Op::LogSumExpRows(a), ng)
    }

    /// Row-wise layer normalisation with learnable `1×d` gain and bias.
    pub fn layer_norm_rows(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let eps = T::from_f(1e-5);
        let (n, d) = self.value(x).dim();
        assert_eq!(self.value(gain).dim(), (1, d), "layer_norm gain shape");
        assert_eq!(self.value(bias).dim(), (1, d), "layer_norm bias shape");
        let mut value = Array2::zeros((n, d));
        {
            let xv = self.value(x);
            let g = self.value(gain);
            let b = self.value(bias);
            for i in 0..n {
                let row = xv.row(i);
                let mean = row.sum() / T::from_f(d as f64);
                let var = row
                    .iter()
                    .map(|&v| (v - mean) * (v - mean))
                    .fold(T::zero(), |a, c| a + c)
                    / T::from_f(d as f64);
                let rstd = T::one() / (var + eps).sqrt();
                for j in 0..d {
                    value[[i, j]] = (row[j] - mean) * rstd * g[[0, j]] + b[[0, j]];
                }
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(value, Op::LayerNormRows { x, gain, bias, eps }, ng)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(gelu_val);
        let ng = self.needs(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(sigmoid_val);
        let ng = self.needs(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(softplus_val);
        let ng = self.needs(a);
        self.push(value, Op::Softplus(a), ng)
    }

    /// Elementwise absolute value; subgradient 0 at the kink.
    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(T::abs);
        let ng = self.needs(a);
        self.push(value, Op::Abs(a), ng)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "min shape");
        let value = ndarray::Zip::from(self.value(a))
            .and(self.value(b))
            .map_collect(|&x, &y| if x <= y { x } else { y });
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MinElem(a, b), ng)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "max shape");
        let value = ndarray::Zip::from(self.value(a))
            .and(self.value(b))
            .map_collect(|&x, &y| if x >= y { x } else { y });
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MaxElem(a, b), ng)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).t().to_owned();
        let ng = self.needs(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let d = self.value(parts[0]).ncols();
        let n: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut value = Array2::zeros((n, d));
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.ncols(), d, "concat_rows width");
            value.slice_mut(s![off..off + v.nrows(), ..]).assign(v);
            off += v.nrows();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).nrows();
        let d: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut value = Array2::zeros((n, d));
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.nrows(), n, "concat_cols height");
            value.slice_mut(s![.., off..off + v.ncols()]).assign(v);
            off += v.ncols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Rectangular sub-matrix `rows×cols` starting at `(row0, col0)`.
    pub fn slice(&mut self, x: NodeId, row0: usize, rows: usize, col0: usize, cols: usize) -> NodeId {
        let (n, d) = self.value(x).dim();
        assert!(row0 + rows <= n && col0 + cols <= d, "slice bounds");
        let value = self
            .value(x)
            .slice(s![row0..row0 + rows, col0..col0 + cols])
            .to_owned();
        let ng = self.needs(x);
        self.push(
            value,
            Op::Slice {
                x,
                row0,
                rows,
                col0,
                cols,
            },
            ng,
        )
    }

    pub fn slice_rows(&mut self, x: NodeId, row0: usize, rows: usize) -> NodeId {
        let cols = self.value(x).ncols();
        self.slice(x, row0, rows, 0, cols)
    }

    /// Column-wise mean over rows, `n×d -> 1×d`.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let (n, _) = self.value(a).dim();
        let value = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        let ng = self.needs(a);
        let _ = n;
        self.push(value, Op::MeanRows(a), ng)
    }

    /// Repeat a `1×d` row `times` times into a `times×d` matrix.
    pub fn repeat_row(&mut self, a: NodeId, times: usize) -> NodeId {
        let (r, d) = self.value(a).dim();
        assert_eq!(r, 1, "repeat_row expects a 1×d input");
        let mut value = Array2::zeros((times, d));
        for mut row in value.rows_mut() {
            row.assign(&self.nodes[a.idx()].value.row(0));
        }
        let ng = self.needs(a);
        self.push(value, Op::RepeatRow(a, times), ng)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.needs(a);
        self.push(value, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let (n, d) = self.value(a).dim();
        let value = Array2::from_elem((1, 1), self.value(a).sum() / T::from_f((n * d) as f64));
        let ng = self.needs(a);
        self.push(value, Op::MeanAll(a), ng)
    }

    /// `x @ w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let prod = self.matmul(x, w);
        self.add_row(prod, b)
    }

    /// Reverse sweep from a 1×1 loss node.
    pub fn backward(&self, loss: NodeId) -> Grads<T> {
        assert_eq!(
            self.value(loss).dim(),
            (1, 1),
            "backward expects a scalar loss node"
        );
        let mut by_node: Vec<Option<Array2<T>>> = vec![None; self.nodes.len()];
        by_node[loss.idx()] = Some(Array2::from_elem((1, 1), T::one()));

        for idx in (0..=loss.idx()).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if by_node[idx].is_none() {
                continue;
            }
            // Leaves keep their accumulated gradient; interior nodes give
            // theirs up once propagated.
            let dy = match self.nodes[idx].op {
                Op::Leaf => continue,
                _ => by_node[idx].take().expect("checked above"),
            };
            self.propagate(idx, &dy, &mut by_node);
        }
        Grads { by_node }
    }

    fn acc(&self, by_node: &mut [Option<Array2<T>>], id: NodeId, delta: Array2<T>) {
        if !self.needs(id) {
            return;
        }
        match &mut by_node[id.idx()] {
            Some(g) => *g = &*g + &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, dy: &Array2<T>, by: &mut [Option<Array2<T>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let da = dy.dot(&self.value(b).t());
                    self.acc(by, a, da);
                }
                if self.needs(b) {
                    let db = self.value(a).t().dot(dy);
                    self.acc(by, b, db);
                }
            }
            Op::Add(a, b) => {
                self.acc(by, *a, dy.clone());
                self.acc(by, *b, dy.clone());
            }
            Op::AddRow(a, row) => {
                self.acc(by, *a, dy.clone());
                let dr = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.acc(by, *row, dr);
            }
            Op::Sub(a, b) => {
                self.acc(by, *a, dy.clone());
                self.acc(by, *b, dy.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    self.acc(by, a, dy * self.value(b));
                }
                if self.needs(b) {
                    self.acc(by, b, dy * self.value(a));
                }
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let bv = self.value(b);
                if self.needs(a) {
                    self.acc(by, a, dy / bv);
                }
                if self.needs(b) {
                    let av = self.value(a);
                    let db = ndarray::Zip::from(dy)
                        .and(av)
                        .and(bv)
                        .map_collect(|&g, &x, &y| -g * x / (y * y));
                    self.acc(by, b, db);
                }
            }
            Op::Scale(a, c) => {
                self.acc(by, *a, dy.mapv(|v| v * *c));
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                let mut dx = dy * y;
                for i in 0..dx.nrows() {
                    let dot = dx.row(i).sum();
                    let yr = y.row(i);
                    let mut dr = dx.row_mut(i);
                    for j in 0..dr.len() {
                        dr[j] = dr[j] - yr[j] * dot;
                    }
                }
                self.acc(by, *a, dx);
            }
            Op::LogSumExpRows(a) => {
                let x = self.value(*a);
                let mut dx = Array2::zeros(x.dim());
                for i in 0..x.nrows() {
                    let row = x.row(i);
                    let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
                    let sum = row.iter().map(|&v| (v - mx).exp()).fold(T::zero(), |a, c| a + c);
                    let g = dy[[i, 0]];
                    for j in 0..row.len() {
                        dx[[i, j]] = g * (row[j] - mx).exp() / sum;
                    }
                }
                self.acc(by, *a, dx);
            }
            Op::LayerNormRows { x, gain, bias, eps } => {
                let (x, gain, bias, eps) = (*x, *gain, *bias, *eps);
                let xv = self.value(x);
                let g = self.value(gain);
                let (n, d) = xv.dim();
                let dn = T::from_f(d as f64);
                let mut dx = Array2::zeros((n, d));
                let mut dgain = Array2::zeros((1, d));
                let mut dbias = Array2::zeros((1, d));
                for i in 0..n {
                    let row = xv.row(i);
                    let mean = row.sum() / dn;
                    let var = row
                        .iter()
                        .map(|&v| (v - mean) * (v - mean))
                        .fold(T::zero(), |a, c| a + c)
                        / dn;
                    let rstd = T::one() / (var + eps).sqrt();
                    // xhat_j = (x_j - mean) * rstd
                    // dxhat_j = dy_j * gain_j
                    let mut m_dxhat = T::zero();
                    let mut m_dxhat_xhat = T::zero();
                    for j in 0..d {
                        let xhat = (row[j] - mean) * rstd;
                        let dxh = dy[[i, j]] * g[[0, j]];
                        m_dxhat = m_dxhat + dxh;
                        m_dxhat_xhat = m_dxhat_xhat + dxh * xhat;
                        dgain[[0, j]] = dgain[[0, j]] + dy[[i, j]] * xhat;
                        dbias[[0, j]] = dbias[[0, j]] + dy[[i, j]];
                    }
                    m_dxhat = m_dxhat / dn;
                    m_dxhat_xhat = m_dxhat_xhat / dn;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * rstd;
                        let dxh = dy[[i, j]] * g[[0, j]];
                        dx[[i, j]] = rstd * (dxh - m_dxhat - xhat * m_dxhat_xhat);
                    }
                }
                self.acc(by, x, dx);
                self.acc(by, gain, dgain);
                self.acc(by, bias, dbias);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let dx = ndarray::Zip::from(dy).and(x).map_collect(|&g, &v| g * gelu_grad(v));
                self.acc(by, *a, dx);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                let dx = ndarray::Zip::from(dy)
                    .and(y)
                    .map_collect(|&g, &s| g * s * (T::one() - s));
                self.acc(by, *a, dx);
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                let dx = ndarray::Zip::from(dy)
                    .and(x)
                    .map_collect(|&g, &v| g * sigmoid_val(v));
                self.acc(by, *a, dx);
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                let dx = ndarray::Zip::from(dy).and(x).map_collect(|&g, &v| {
                    if v > T::zero() {
                        g
                    } else if v < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                });
                self.acc(by, *a, dx);
            }
            Op::MinElem(a, b) => {
                let (a, b) = (*a, *b);
                let av = self.value(a);
                let bv = self.value(b);
                if self.needs(a) {
                    let da = ndarray::Zip::from(dy)
                        .and(av)
                        .and(bv)
                        .map_collect(|&g, &x, &y| if x <= y { g } else { T::zero() });
                    self.acc(by, a, da);
                }
                if self.needs(b) {
                    let db = ndarray::Zip::from(dy)
                        .and(av)
                        .and(bv)
                        .map_collect(|&g, &x, &y| if x <= y { T::zero() } else { g });
                    self.acc(by, b, db);
                }
            }
            Op::MaxElem(a, b) => {
                let (a, b) = (*a, *b);
                let av = self.value(a);
                let bv = self.value(b);
                if self.needs(a) {
                    let da = ndarray::Zip::from(dy)
                        .and(av)
                        .and(bv)
                        .map_collect(|&g, &x, &y| if x >= y { g } else { T::zero() });
                    self.acc(by, a, da);
                }
                if self.needs(b) {
                    let db = ndarray::Zip::from(dy)
                        .and(av)
                        .and(bv)
                        .map_collect(|&g, &x, &y| if x >= y { T::zero() } else { g });
                    self.acc(by, b, db);
                }
            }
            Op::Transpose(a) => {
                self.acc(by, *a, dy.t().to_owned());
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).nrows();
                    let dp = dy.slice(s![off..off + rows, ..]).to_owned();
                    self.acc(by, p, dp);
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.value(p).ncols();
                    let dp = dy.slice(s![.., off..off + cols]).to_owned();
                    self.acc(by, p, dp);
                    off += cols;
                }
            }
            Op::Slice {
                x,
                row0,
                rows,
                col0,
                cols,
            } => {
                let mut dx = Array2::zeros(self.value(*x).dim());
                dx.slice_mut(s![*row0..*row0 + *rows, *col0..*col0 + *cols])
                    .assign(dy);
                self.acc(by, *x, dx);
            }
            Op::MeanRows(a) => {
                let (n, d) = self.value(*a).dim();
                let inv = T::one() / T::from_f(n as f64);
                let mut dx = Array2::zeros((n, d));
                for mut row in dx.rows_mut() {
                    for j in 0..d {
                        row[j] = dy[[0, j]] * inv;
                    }
                }
                self.acc(by, *a, dx);
            }
            Op::RepeatRow(a, _times) => {
                let da = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.acc(by, *a, da);
            }
            Op::SumAll(a) => {
                let g = dy[[0, 0]];
                let dx = Array2::from_elem(self.value(*a).dim(), g);
                self.acc(by, *a, dx);
            }
            Op::MeanAll(a) => {
                let (n, d) = self.value(*a).dim();
                let g = dy[[0, 0]] / T::from_f((n * d) as f64);
                let dx = Array2::from_elem((n, d), g);
                self.acc(by, *a, dx);
            }
        }
    }
}

fn sigmoid_val<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus_val<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

const GELU_C1: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C2: f64 = 0.044_715;

fn gelu_val<T: Real>(x: T) -> T {
    let c1 = T::from_f(GELU_C1);
    let c2 = T::from_f(GELU_C2);
    let half = T::from_f(0.5);
    let u = c1 * (x + c2 * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c1 = T::from_f(GELU_C1);
    let c2 = T::from_f(GELU_C2);
    let half = T::from_f(0.5);
    let three = T::from_f(3.0);
    let u = c1 * (x + c2 * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c1 * (T::one() + three * c2 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::RngExt;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        })
    }

    /// Central finite-difference check of `d loss / d inputs[i]` for every
    /// input element, against the tape's backward pass.
    fn fd_check(inputs: &[Array2<f64>], build: impl Fn(&mut Graph<f64>, &[NodeId]) -> NodeId) {
        let h = 1e-6;
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|x| g.param(x.clone())).collect();
        let loss = build(&mut g, &ids);
        let grads = g.backward(loss);

        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.wrt(ids[k]).expect("gradient exists").clone();
            for ((i, j), _) in x.indexed_iter() {
                let eval = |delta: f64| {
                    let mut pert = inputs.to_vec();
                    pert[k][[i, j]] += delta;
                    let mut g2 = Graph::new();
                    let ids2: Vec<NodeId> = pert.iter().map(|x| g2.param(x.clone())).collect();
                    let l2 = build(&mut g2, &ids2);
                    g2.scalar_value(l2)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic[[i, j]];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() / denom < 1e-5,
                    "input {k} [{i},{j}]: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_linear_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, 3, 4);
        let b = randn(&mut rng, 4, 2);
        let c = randn(&mut rng, 1, 2);
        fd_check(&[a, b, c], |g, ids| {
            let y = g.linear(ids[0], ids[1], ids[2]);
            g.mean_all(y)
        });
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randn(&mut rng, 2, 3);
        let b = randn(&mut rng, 2, 3).mapv(|v| v + 4.0); // keep divisor away from 0
        fd_check(&[a.clone(), b.clone()], |g, ids| {
            let s = g.add(ids[0], ids[1]);
            let d = g.sub(s, ids[1]);
            let m = g.mul(d, ids[1]);
            let q = g.div(m, ids[1]);
            let sc = g.scale(q, 1.7);
            g.sum_all(sc)
        });
    }

    #[test]
    fn softmax_rows_grad_and_row_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randn(&mut rng, 3, 5);
        let w = randn(&mut rng, 3, 5);
        let wc = w.clone();
        fd_check(&[a.clone()], move |g, ids| {
            let y = g.softmax_rows(ids[0]);
            let mask = g.leaf(wc.clone());
            let m = g.mul(y, mask);
            g.sum_all(m)
        });
        let mut g = Graph::new();
        let x = g.leaf(a);
        let y = g.softmax_rows(x);
        for row in g.value(y).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn logsumexp_matches_naive_and_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = randn(&mut rng, 4, 3);
        let mut g = Graph::new();
        let x = g.leaf(a.clone());
        let y = g.logsumexp_rows(x);
        for i in 0..4 {
            let naive = a.row(i).iter().map(|v| v.exp()).sum::<f64>().ln();
            assert!((g.value(y)[[i, 0]] - naive).abs() < 1e-12);
        }
        fd_check(&[a], |g, ids| {
            let y = g.logsumexp_rows(ids[0]);
            g.mean_all(y)
        });
    }

    #[test]
    fn layer_norm_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, 3, 6);
        let gain = randn(&mut rng, 1, 6).mapv(|v| 1.0 + 0.1 * v);
        let bias = randn(&mut rng, 1, 6).mapv(|v| 0.1 * v);
        let w = randn(&mut rng, 3, 6);
        fd_check(&[x, gain, bias], move |g, ids| {
            let y = g.layer_norm_rows(ids[0], ids[1], ids[2]);
            let mask = g.leaf(w.clone());
            let m = g.mul(y, mask);
            g.sum_all(m)
        });
    }

    #[test]
    fn activations_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn(&mut rng, 2, 4);
        fd_check(&[x.clone()], |g, ids| {
            let a = g.gelu(ids[0]);
            let b = g.sigmoid(a);
            let c = g.softplus(b);
            g.mean_all(c)
        });
        // abs away from the kink
        let y = x.mapv(|v| v + 3.0 * v.signum());
        fd_check(&[y], |g, ids| {
            let a = g.abs(ids[0]);
            g.sum_all(a)
        });
    }

    #[test]
    fn min_max_grad_off_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = randn(&mut rng, 3, 3);
        let b = randn(&mut rng, 3, 3).mapv(|v| v + 0.5);
        fd_check(&[a, b], |g, ids| {
            let lo = g.min_elem(ids[0], ids[1]);
            let hi = g.max_elem(ids[0], ids[1]);
            let d = g.sub(hi, lo);
            g.sum_all(d)
        });
    }

    #[test]
    fn shape_movement_ops_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = randn(&mut rng, 3, 4);
        let b = randn(&mut rng, 2, 4);
        let r = randn(&mut rng, 1, 4);
        fd_check(&[a, b, r], |g, ids| {
            let cat = g.concat_rows(&[ids[0], ids[1]]);
            let rep = g.repeat_row(ids[2], 5);
            let cat2 = g.concat_rows(&[cat, rep]);
            let t = g.transpose(cat2);
            let sl = g.slice(t, 1, 2, 2, 6);
            let m = g.mean_rows(sl);
            g.mean_all(m)
        });
    }

    #[test]
    fn concat_cols_and_slice_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = randn(&mut rng, 3, 2);
        let b = randn(&mut rng, 3, 3);
        fd_check(&[a, b], |g, ids| {
            let cat = g.concat_cols(&[ids[0], ids[1]]);
            let sl = g.slice(cat, 0, 3, 1, 3);
            g.sum_all(sl)
        });
    }

    #[test]
    fn fan_out_accumulates() {
        // One node consumed twice must receive the sum of both contributions.
        let a = Array2::from_shape_vec((1, 2), vec![1.5, -2.0]).unwrap();
        fd_check(&[a], |g, ids| {
            let s = g.add(ids[0], ids[0]);
            let m = g.mul(s, ids[0]);
            g.sum_all(m)
        });
    }

    #[test]
    fn grad_skips_non_trainable_leaves() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Array2::from_elem((2, 2), 1.0));
        let w = g.param(Array2::from_elem((2, 2), 2.0));
        let y = g.mul(x, w);
        let l = g.sum_all(y);
        let grads = g.backward(l);
        assert!(grads.wrt(x).is_none());
        assert_eq!(grads.wrt(w).unwrap(), &Array2::from_elem((2, 2), 1.0));
    }

    #[test]
    fn repeat_row_values() {
        let mut g: Graph<f64> = Graph::new();
        let r = g.leaf(Array2::from_shape_vec((1, 3), vec![1.0, 2.0, 3.0]).unwrap());
        let rep = g.repeat_row(r, 4);
        assert_eq!(g.value(rep).dim(), (4, 3));
        for row in g.value(rep).rows() {
            assert_eq!(row.to_vec(), vec![1.0, 2.0, 3.0]);
        }
    }
}
