//! Matrix-valued reverse-mode tape.
//!
//! Every node holds a dense [`Tensor`]. Operations append nodes in
//! evaluation order; [`Tape::backward`] walks them in exact reverse,
//! accumulating adjoints only for nodes that depend on a parameter.

use std::rc::Rc;

use super::tensor::{matmul_into, Tensor};
use super::NnError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row-compressed sparse matrix used for fixed linear maps such as
/// bilinear feature lookups.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    cols: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseMatrix {
    pub fn new(cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        debug_assert!(rows.iter().flatten().all(|&(c, _)| c < cols));
        SparseMatrix { cols, rows }
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.cols
    }

    pub fn row_entries(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn mul_dense(&self, x: &Tensor) -> Tensor {
        let c = x.cols();
        let mut out = Tensor::zeros(self.rows.len(), c);
        for (i, entries) in self.rows.iter().enumerate() {
            let o = out.row_slice_mut(i);
            for &(j, w) in entries {
                for (ov, xv) in o.iter_mut().zip(x.row_slice(j)) {
                    *ov += w * xv;
                }
            }
        }
        out
    }

    fn mul_transpose_dense(&self, g: &Tensor) -> Tensor {
        let c = g.cols();
        let mut out = Tensor::zeros(self.cols, c);
        for (i, entries) in self.rows.iter().enumerate() {
            let gi = g.row_slice(i);
            for &(j, w) in entries {
                for (ov, gv) in out.row_slice_mut(j).iter_mut().zip(gi) {
                    *ov += w * gv;
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Transpose(Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    MaskedSoftmax(Var),
    RowSum(Var),
    MinRows(Var, Vec<usize>),
    PairwiseSqDist(Var, Var),
    Sparse(Rc<SparseMatrix>, Var),
    AxisAngle(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of a computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
    params: Vec<Var>,
}

impl Gradients {
    /// Adjoint of `v`; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let [r, c] = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    /// Adjoints of every registered parameter, in registration order.
    pub fn params(&self) -> Vec<Tensor> {
        self.params.iter().map(|&p| self.get(p)).collect()
    }
}

macro_rules! check_shape {
    ($cond:expr, $a:expr, $b:expr) => {
        if !$cond {
            return Err(NnError::DimensionMismatch {
                expected: $a.to_vec(),
                found: $b.to_vec(),
            });
        }
    };
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push(v);
        v
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Var {
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let ng = self.ng(a) || self.ng(b);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (x, y) = (self.value(a), self.value(b));
        check_shape!(x.shape() == y.shape(), x.shape(), y.shape());
        let v = x.zip_map(y, |p, q| p + q);
        Ok(self.binary(a, b, v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (x, y) = (self.value(a), self.value(b));
        check_shape!(x.shape() == y.shape(), x.shape(), y.shape());
        let v = x.zip_map(y, |p, q| p - q);
        Ok(self.binary(a, b, v, Op::Sub(a, b)))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (x, y) = (self.value(a), self.value(b));
        check_shape!(x.shape() == y.shape(), x.shape(), y.shape());
        let v = x.zip_map(y, |p, q| p * q);
        Ok(self.binary(a, b, v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.unary(a, v, Op::Scale(a, s))
    }

    /// Adds a constant to every entry.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.unary(a, v, Op::Offset(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.binary(a, b, v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.unary(a, v, Op::Transpose(a))
    }

    /// `a (n×m) + row (1×m)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NnError> {
        let (x, r) = (self.value(a), self.value(row));
        check_shape!(r.rows() == 1 && r.cols() == x.cols(), x.shape(), r.shape());
        let mut v = x.clone();
        for i in 0..v.rows() {
            for (o, b) in v.row_slice_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        Ok(self.binary(a, row, v, Op::AddRow(a, row)))
    }

    /// `a (n×m) ⊙ col (n×1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var, NnError> {
        let (x, c) = (self.value(a), self.value(col));
        check_shape!(c.cols() == 1 && c.rows() == x.rows(), x.shape(), c.shape());
        let mut v = x.clone();
        for i in 0..v.rows() {
            let s = c.data()[i];
            for o in v.row_slice_mut(i) {
                *o *= s;
            }
        }
        Ok(self.binary(a, col, v, Op::MulCol(a, col)))
    }

    /// `a · s` for a `1 × 1` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var, NnError> {
        let sv = self.value(s);
        check_shape!(sv.shape() == [1, 1], [1, 1], sv.shape());
        let k = sv.item();
        let v = self.value(a).map(|x| x * k);
        Ok(self.binary(a, s, v, Op::MulScalar(a, s)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.unary(a, v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.unary(a, v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.unary(a, v, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.unary(a, v, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.unary(a, v, Op::Abs(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.unary(a, v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor::scalar(x.sum() / x.len() as f64);
        self.unary(a, v, Op::Mean(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            check_shape!(s[0] == rows, [rows, s[1]], s);
            cols += s[1];
        }
        let mut v = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let x = &self.nodes[p.0].value;
            for i in 0..rows {
                v.row_slice_mut(i)[off..off + x.cols()].copy_from_slice(x.row_slice(i));
            }
            off += x.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let x = self.value(p);
            check_shape!(x.cols() == cols, [x.rows(), cols], x.shape());
            data.extend_from_slice(x.data());
            rows += x.rows();
        }
        let v = Tensor::from_vec(rows, cols, data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, NnError> {
        let v = self.value(a).clone().reshaped(rows, cols)?;
        Ok(self.unary(a, v, Op::Reshape(a)))
    }

    /// Output row `i` is input row `idx[i]`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, NnError> {
        let x = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
            return Err(NnError::IndexOutOfRange {
                index: bad,
                len: x.rows(),
            });
        }
        let mut data = Vec::with_capacity(idx.len() * x.cols());
        for &i in idx {
            data.extend_from_slice(x.row_slice(i));
        }
        let v = Tensor::from_vec(idx.len(), x.cols(), data)?;
        Ok(self.unary(a, v, Op::GatherRows(a, idx.to_vec())))
    }

    /// Places input row `i` at output row `idx[i]` of an `n_rows`-row zero
    /// matrix. Indices must be distinct.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], n_rows: usize) -> Result<Var, NnError> {
        let x = self.value(a);
        check_shape!(idx.len() == x.rows(), [idx.len(), x.cols()], x.shape());
        let mut v = Tensor::zeros(n_rows, x.cols());
        for (i, &r) in idx.iter().enumerate() {
            if r >= n_rows {
                return Err(NnError::IndexOutOfRange {
                    index: r,
                    len: n_rows,
                });
            }
            v.row_slice_mut(r).copy_from_slice(x.row_slice(i));
        }
        Ok(self.unary(a, v, Op::ScatterRows(a, idx.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let x = self.value(a);
        check_shape!(start + len <= x.cols(), [x.rows(), start + len], x.shape());
        let v = Tensor::from_fn(x.rows(), len, |i, j| x.get(i, start + j));
        Ok(self.unary(a, v, Op::SliceCols(a, start)))
    }

    /// Row-wise `softmax(a + bias)` where `bias` entries are `0` or `-∞`.
    ///
    /// A row whose bias is entirely `-∞` yields a zero row with zero
    /// gradient.
    pub fn masked_softmax(&mut self, a: Var, bias: &Tensor) -> Result<Var, NnError> {
        let x = self.value(a);
        check_shape!(x.shape() == bias.shape(), x.shape(), bias.shape());
        let mut v = Tensor::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            masked_softmax_row(x.row_slice(i), bias.row_slice(i), v.row_slice_mut(i));
        }
        Ok(self.unary(a, v, Op::MaskedSoftmax(a)))
    }

    /// `n × m → n × 1` row sums.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor::from_fn(x.rows(), 1, |i, _| x.row_slice(i).iter().sum());
        self.unary(a, v, Op::RowSum(a))
    }

    /// `n × m → n × 1` row minima; the gradient goes to the first argmin.
    pub fn min_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut arg = Vec::with_capacity(x.rows());
        let mut data = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let (j, m) = x
                .row_slice(i)
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |(bj, bm), (j, &v)| {
                    if v < bm {
                        (j, v)
                    } else {
                        (bj, bm)
                    }
                });
            arg.push(j);
            data.push(m);
        }
        let v = Tensor::from_vec(x.rows(), 1, data).expect("shape");
        self.unary(a, v, Op::MinRows(a, arg))
    }

    /// `D_ij = ‖a_i − b_j‖²` for row-point sets `a (n×k)`, `b (m×k)`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (x, y) = (self.value(a), self.value(b));
        check_shape!(x.cols() == y.cols(), x.shape(), y.shape());
        let v = Tensor::from_fn(x.rows(), y.rows(), |i, j| {
            x.row_slice(i)
                .iter()
                .zip(y.row_slice(j))
                .map(|(p, q)| (p - q) * (p - q))
                .sum()
        });
        Ok(self.binary(a, b, v, Op::PairwiseSqDist(a, b)))
    }

    /// Fixed sparse linear map applied from the left.
    pub fn sparse_matmul(&mut self, s: Rc<SparseMatrix>, a: Var) -> Result<Var, NnError> {
        let x = self.value(a);
        check_shape!(s.n_cols() == x.rows(), [s.n_rows(), s.n_cols()], x.shape());
        let v = s.mul_dense(x);
        Ok(self.unary(a, v, Op::Sparse(s, a)))
    }

    /// Rodrigues map from `n × 3` axis-angle rows to `n × 9` row-major
    /// rotation matrices.
    pub fn axis_angle(&mut self, a: Var) -> Result<Var, NnError> {
        let x = self.value(a);
        check_shape!(x.cols() == 3, [x.rows(), 3], x.shape());
        let mut v = Tensor::zeros(x.rows(), 9);
        for i in 0..x.rows() {
            let r = x.row_slice(i);
            let m = rodrigues([r[0], r[1], r[2]]);
            v.row_slice_mut(i).copy_from_slice(&m);
        }
        Ok(self.unary(a, v, Op::AxisAngle(a)))
    }

    /// Reverse sweep from a `1 × 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        let lv = self.value(loss);
        if lv.shape() != [1, 1] {
            return Err(NnError::NotScalarLoss { shape: lv.shape() });
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            params: self.params.clone(),
        })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, d: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;

        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |p, q| p * q));
                acc(*b, g.zip_map(val(*a), |p, q| p * q));
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::Offset(a) => acc(*a, g.clone()),
            Op::MatMul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                if self.nodes[a.0].needs_grad {
                    let mut d = Tensor::zeros(x.rows(), x.cols());
                    matmul_into(g, &y.transpose(), &mut d);
                    acc(*a, d);
                }
                if self.nodes[b.0].needs_grad {
                    let mut d = Tensor::zeros(y.rows(), y.cols());
                    matmul_into(&x.transpose(), g, &mut d);
                    acc(*b, d);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::AddRow(a, r) => {
                acc(*a, g.clone());
                let mut d = Tensor::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (o, x) in d.data_mut().iter_mut().zip(g.row_slice(i)) {
                        *o += x;
                    }
                }
                acc(*r, d);
            }
            Op::MulCol(a, c) => {
                let (x, cv) = (val(*a), val(*c));
                let mut da = g.clone();
                let mut dc = Tensor::zeros(cv.rows(), 1);
                for i in 0..g.rows() {
                    let s = cv.data()[i];
                    let mut dot = 0.0;
                    for (dv, xv) in da.row_slice_mut(i).iter_mut().zip(x.row_slice(i)) {
                        dot += *dv * xv;
                        *dv *= s;
                    }
                    dc.data_mut()[i] = dot;
                }
                acc(*a, da);
                acc(*c, dc);
            }
            Op::MulScalar(a, s) => {
                let k = val(*s).item();
                acc(*a, g.map(|x| x * k));
                let dot: f64 = g.data().iter().zip(val(*a).data()).map(|(p, q)| p * q).sum();
                acc(*s, Tensor::scalar(dot));
            }
            Op::Relu(a) => acc(*a, g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })),
            Op::Sigmoid(a) => acc(*a, g.zip_map(out, |gv, y| gv * y * (1.0 - y))),
            Op::Exp(a) => acc(*a, g.zip_map(out, |gv, y| gv * y)),
            Op::Square(a) => acc(*a, g.zip_map(val(*a), |gv, x| 2.0 * gv * x)),
            Op::Abs(a) => acc(*a, g.zip_map(val(*a), |gv, x| gv * sign(x))),
            Op::Sum(a) => {
                let [r, c] = val(*a).shape();
                acc(*a, Tensor::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let x = val(*a);
                acc(*a, Tensor::filled(x.rows(), x.cols(), g.item() / x.len() as f64));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = val(p).cols();
                    let d = Tensor::from_fn(g.rows(), c, |i, j| g.get(i, off + j));
                    acc(p, d);
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let [r, c] = val(p).shape();
                    let d = Tensor::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec())
                        .expect("shape");
                    acc(p, d);
                    off += r;
                }
            }
            Op::Reshape(a) => {
                let [r, c] = val(*a).shape();
                acc(*a, g.clone().reshaped(r, c).expect("shape"));
            }
            Op::GatherRows(a, idx) => {
                let [r, c] = val(*a).shape();
                let mut d = Tensor::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    for (o, x) in d.row_slice_mut(i).iter_mut().zip(g.row_slice(k)) {
                        *o += x;
                    }
                }
                acc(*a, d);
            }
            Op::ScatterRows(a, idx) => {
                let c = g.cols();
                let mut data = Vec::with_capacity(idx.len() * c);
                for &r in idx {
                    data.extend_from_slice(g.row_slice(r));
                }
                acc(*a, Tensor::from_vec(idx.len(), c, data).expect("shape"));
            }
            Op::SliceCols(a, start) => {
                let [r, c] = val(*a).shape();
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    d.row_slice_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row_slice(i));
                }
                acc(*a, d);
            }
            Op::MaskedSoftmax(a) => {
                let mut d = Tensor::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let p = out.row_slice(i);
                    let gi = g.row_slice(i);
                    let dot: f64 = p.iter().zip(gi).map(|(a, b)| a * b).sum();
                    for ((o, &pv), &gv) in d.row_slice_mut(i).iter_mut().zip(p).zip(gi) {
                        *o = pv * (gv - dot);
                    }
                }
                acc(*a, d);
            }
            Op::RowSum(a) => {
                let [r, c] = val(*a).shape();
                acc(*a, Tensor::from_fn(r, c, |i, _| g.data()[i]));
            }
            Op::MinRows(a, arg) => {
                let [r, c] = val(*a).shape();
                let mut d = Tensor::zeros(r, c);
                for (i, &j) in arg.iter().enumerate() {
                    d.set(i, j, g.data()[i]);
                }
                acc(*a, d);
            }
            Op::PairwiseSqDist(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let k = x.cols();
                let mut da = Tensor::zeros(x.rows(), k);
                let mut db = Tensor::zeros(y.rows(), k);
                for i in 0..x.rows() {
                    for j in 0..y.rows() {
                        let gij = 2.0 * g.get(i, j);
                        if gij == 0.0 {
                            continue;
                        }
                        for c in 0..k {
                            let diff = x.get(i, c) - y.get(j, c);
                            da.data_mut()[i * k + c] += gij * diff;
                            db.data_mut()[j * k + c] -= gij * diff;
                        }
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Sparse(s, a) => acc(*a, s.mul_transpose_dense(g)),
            Op::AxisAngle(a) => {
                let x = val(*a);
                let mut d = Tensor::zeros(x.rows(), 3);
                for i in 0..x.rows() {
                    let r = x.row_slice(i);
                    let jac = rodrigues_jacobian([r[0], r[1], r[2]], out.row_slice(i));
                    let gi = g.row_slice(i);
                    for (c, dr) in jac.iter().enumerate() {
                        d.data_mut()[i * 3 + c] = dr.iter().zip(gi).map(|(p, q)| p * q).sum();
                    }
                }
                acc(*a, d);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Softmax of `logits + bias` over one row; a fully masked row is zero.
pub fn masked_softmax_row(logits: &[f64], bias: &[f64], out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (&l, &b) in logits.iter().zip(bias) {
        if b != f64::NEG_INFINITY {
            max = max.max(l + b);
        }
    }
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let mut total = 0.0;
    for ((o, &l), &b) in out.iter_mut().zip(logits).zip(bias) {
        *o = if b == f64::NEG_INFINITY {
            0.0
        } else {
            (l + b - max).exp()
        };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn skew(v: [f64; 3]) -> [[f64; 3]; 3] {
    [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
}

fn mat_mul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut o = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            o[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    o
}

/// Row-major rotation matrix of an axis-angle vector.
pub fn rodrigues(v: [f64; 3]) -> [f64; 9] {
    let th2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    let th = th2.sqrt();
    let (a, b) = if th < 1e-6 {
        (1.0 - th2 / 6.0, 0.5 - th2 / 24.0)
    } else {
        (th.sin() / th, (1.0 - th.cos()) / th2)
    };
    let k = skew(v);
    let k2 = mat_mul3(&k, &k);
    let mut r = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            let id = if i == j { 1.0 } else { 0.0 };
            r[i * 3 + j] = id + a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

/// `∂R/∂v_c` for each axis-angle component, as row-major 3×3 blocks.
///
/// Uses `∂R/∂v_c = ((v_c [v]× + [v × (I − R) e_c]×) / ‖v‖²) R`, which
/// reduces to `[e_c]×` at the origin.
fn rodrigues_jacobian(v: [f64; 3], r: &[f64]) -> [[f64; 9]; 3] {
    let th2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    let mut out = [[0.0; 9]; 3];
    if th2 < 1e-16 {
        for (c, o) in out.iter_mut().enumerate() {
            let mut e = [0.0; 3];
            e[c] = 1.0;
            let s = skew(e);
            for i in 0..3 {
                for j in 0..3 {
                    o[i * 3 + j] = s[i][j];
                }
            }
        }
        return out;
    }
    let rm = [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]];
    let vx = skew(v);
    for (c, o) in out.iter_mut().enumerate() {
        // (I − R) e_c is column c of (I − R)
        let col = [
            (if c == 0 { 1.0 } else { 0.0 }) - rm[0][c],
            (if c == 1 { 1.0 } else { 0.0 }) - rm[1][c],
            (if c == 2 { 1.0 } else { 0.0 }) - rm[2][c],
        ];
        let cr = [
            v[1] * col[2] - v[2] * col[1],
            v[2] * col[0] - v[0] * col[2],
            v[0] * col[1] - v[1] * col[0],
        ];
        let sc = skew(cr);
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = (v[c] * vx[i][j] + sc[i][j]) / th2;
            }
        }
        let d = mat_mul3(&m, &rm);
        for i in 0..3 {
            for j in 0..3 {
                o[i * 3 + j] = d[i][j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(vec![1.0, 2.0]));
        let sq = tape.square(x);
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_has_zero_grads() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::scalar(3.0));
        let g = tape.backward(c).unwrap();
        assert_eq!(g.get(x).data(), &[0.0, 0.0]);
        assert_eq!(g.params()[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(x),
            Err(NnError::NotScalarLoss { shape: [1, 2] })
        ));
    }

    #[test]
    fn fully_masked_softmax_row_is_zero() {
        let mut out = [9.0; 3];
        masked_softmax_row(&[1.0, 2.0, 3.0], &[f64::NEG_INFINITY; 3], &mut out);
        assert_eq!(out, [0.0; 3]);
        masked_softmax_row(&[1.0, 1.0, 5.0], &[0.0, 0.0, f64::NEG_INFINITY], &mut out);
        assert_eq!(out, [0.5, 0.5, 0.0]);
    }

    #[test]
    fn rodrigues_quarter_turn() {
        let r = rodrigues([0.0, 0.0, std::f64::consts::FRAC_PI_2]);
        let expect = [0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        for (a, b) in r.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn rodrigues_jacobian_matches_central_difference() {
        for v in [[0.3, -0.2, 0.9], [0.0, 0.0, 0.0], [1e-5, 2e-5, -1e-5], [2.0, 1.0, -0.5]] {
            let r = rodrigues(v);
            let jac = rodrigues_jacobian(v, &r);
            for c in 0..3 {
                let h = 1e-6;
                let mut vp = v;
                let mut vm = v;
                vp[c] += h;
                vm[c] -= h;
                let (rp, rm) = (rodrigues(vp), rodrigues(vm));
                for k in 0..9 {
                    let fd = (rp[k] - rm[k]) / (2.0 * h);
                    assert!((fd - jac[c][k]).abs() < 1e-7, "v={v:?} c={c} k={k}");
                }
            }
        }
    }
}
