//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse from a scalar output and
//! accumulates gradients into every node that depends on a variable or a
//! bound parameter. Constants never receive gradients.

use super::params::{ParamId, ParameterStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Variable,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Elu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    MaskedSoftmax {
        x: Var,
        mask: Vec<bool>,
        outer: usize,
        len: usize,
        inner: usize,
    },
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    Sum(Var),
    RowNormalize(Var),
    MaxRows(Var, Vec<usize>),
    RowBilinear(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Computation tape. One graph per forward pass; drop it when done.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bound: Vec<Option<Var>>,
    frozen: bool,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// `a` is m×k, `b` is k×n.
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a` is m×k, `b` is n×k; returns `a · bᵀ`.
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a` is k×m, `b` is k×n; returns `aᵀ · b`.
fn mm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn add_owned(dst: &mut Option<Vec<f64>>, src: Vec<f64>) {
    match dst {
        Some(d) => d.iter_mut().zip(&src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that binds parameters as constants, for forward passes that
    /// are never differentiated (target networks, action selection).
    pub fn frozen() -> Self {
        Self {
            frozen: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Result<Var> {
        #[cfg(debug_assertions)]
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name(&op) });
        }
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Constant,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that receives a gradient (used by gradient checks).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Variable,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter onto the tape. Binding the same id twice
    /// returns the same node, so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        let idx = id.index();
        if self.bound.len() <= idx {
            self.bound.resize(idx + 1, None);
        }
        if let Some(v) = self.bound[idx] {
            return v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
            tracked: !self.frozen,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound[idx] = Some(v);
        v
    }

    fn mat_dims(&self, v: Var) -> (usize, usize) {
        let t = &self.node(v).value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a);
        let (k2, n) = self.mat_dims(b);
        if k != k2 || self.node(a).value.rank() != 2 || self.node(b).value.rank() != 2 {
            return Err(shape_err(
                "matmul",
                &self.node(a).value,
                &self.node(b).value,
            ));
        }
        let data = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let tracked = self.tracked(&[a, b]);
        self.push(
            Tensor::from_parts(vec![m, n], data),
            Op::MatMul(a, b),
            tracked,
        )
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a);
        let (n, k2) = self.mat_dims(b);
        if k != k2 {
            return Err(shape_err(
                "matmul_t",
                &self.node(a).value,
                &self.node(b).value,
            ));
        }
        let data = mm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let tracked = self.tracked(&[a, b]);
        self.push(
            Tensor::from_parts(vec![m, n], data),
            Op::MatMulT(a, b),
            tracked,
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, &self.node(a).value, &self.node(b).value));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let tracked = self.tracked(&[a, b]);
        self.push(Tensor::from_parts(shape, data), op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, n) = self.mat_dims(x);
        let (r, n2) = self.mat_dims(row);
        if r != 1 || n != n2 {
            return Err(shape_err(
                "add_row",
                &self.node(x).value,
                &self.node(row).value,
            ));
        }
        let b = self.value(row).data();
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|c| c.iter().zip(b).map(|(p, q)| p + q))
            .collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(&[x, row]);
        self.push(Tensor::from_parts(shape, data), Op::AddRow(x, row), tracked)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let tracked = self.tracked(&[x]);
        self.push(Tensor::from_parts(shape, data), op, tracked)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Elu(x), elu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sigmoid(x), |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Abs(x), f64::abs)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Square(x), |v| v * v)
    }

    /// Softmax along `axis` restricted to entries where `mask` is true.
    /// Masked entries are exactly zero. A slice with no unmasked entry is an
    /// error naming the slice index.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool], axis: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if mask.len() != t.len() {
            return Err(Error::Dimension {
                op: "masked_softmax",
                left: shape,
                right: vec![mask.len()],
            });
        }
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len)
                    .filter(|&j| mask[idx(j)])
                    .map(|j| src[idx(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(Error::FullyMaskedSlice(o * inner + i));
                }
                let mut total = 0.0;
                for j in 0..len {
                    if mask[idx(j)] {
                        let e = (src[idx(j)] - max).exp();
                        out[idx(j)] = e;
                        total += e;
                    }
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let tracked = self.tracked(&[x]);
        let op = Op::MaskedSoftmax {
            x,
            mask: mask.to_vec(),
            outer,
            len,
            inner,
        };
        self.push(Tensor::from_parts(shape, out), op, tracked)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat_dims(x);
        if len == 0 || start + len > n {
            return Err(Error::Dimension {
                op: "slice_cols",
                left: vec![m, n],
                right: vec![start, len],
            });
        }
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let tracked = self.tracked(&[x]);
        self.push(
            Tensor::from_parts(vec![m, len], data),
            Op::SliceCols(x, start),
            tracked,
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.mat_dims(x);
        let src = self.value(x).data();
        let data = (0..n * m).map(|i| src[(i % m) * n + i / m]).collect();
        let tracked = self.tracked(&[x]);
        self.push(
            Tensor::from_parts(vec![n, m], data),
            Op::Transpose(x),
            tracked,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat_dims(x);
        if len == 0 || start + len > m {
            return Err(Error::Dimension {
                op: "slice_rows",
                left: vec![m, n],
                right: vec![start, len],
            });
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let tracked = self.tracked(&[x]);
        self.push(
            Tensor::from_parts(vec![len, n], data),
            Op::SliceRows(x, start),
            tracked,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.mat_dims(parts[0]).0;
        if parts.iter().any(|&p| self.mat_dims(p).0 != m) {
            return Err(shape_err(
                "concat_cols",
                &self.node(parts[0]).value,
                &self.node(*parts.last().unwrap()).value,
            ));
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.mat_dims(p).1).collect();
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let tracked = self.tracked(parts);
        self.push(
            Tensor::from_parts(vec![m, n], data),
            Op::ConcatCols(parts.to_vec()),
            tracked,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.mat_dims(parts[0]).1;
        if parts.iter().any(|&p| self.mat_dims(p).1 != n) {
            return Err(shape_err(
                "concat_rows",
                &self.node(parts[0]).value,
                &self.node(*parts.last().unwrap()).value,
            ));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let m = data.len() / n;
        let tracked = self.tracked(parts);
        self.push(
            Tensor::from_parts(vec![m, n], data),
            Op::ConcatRows(parts.to_vec()),
            tracked,
        )
    }

    /// Selects rows by index; repeats are allowed.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.mat_dims(x);
        if rows.is_empty() || rows.iter().any(|&r| r >= m) {
            return Err(Error::Dimension {
                op: "gather_rows",
                left: vec![m, n],
                right: rows.to_vec(),
            });
        }
        let src = self.value(x).data();
        let data = rows
            .iter()
            .flat_map(|&r| src[r * n..(r + 1) * n].iter().copied())
            .collect();
        let tracked = self.tracked(&[x]);
        self.push(
            Tensor::from_parts(vec![rows.len(), n], data),
            Op::GatherRows(x, rows.to_vec()),
            tracked,
        )
    }

    /// Picks one column per row: `out[i] = x[i][cols[i]]`, shape m×1.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (m, n) = self.mat_dims(x);
        if cols.len() != m || cols.iter().any(|&c| c >= n) {
            return Err(Error::Dimension {
                op: "pick",
                left: vec![m, n],
                right: cols.to_vec(),
            });
        }
        let src = self.value(x).data();
        let data = cols
            .iter()
            .enumerate()
            .map(|(i, &c)| src[i * n + c])
            .collect();
        let tracked = self.tracked(&[x]);
        self.push(
            Tensor::from_parts(vec![m, 1], data),
            Op::Pick(x, cols.to_vec()),
            tracked,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let tracked = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Scales every row to unit Euclidean norm.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.mat_dims(x);
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|r| {
                let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                r.iter().map(move |v| v / norm)
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(&[x]);
        self.push(
            Tensor::from_parts(shape, data),
            Op::RowNormalize(x),
            tracked,
        )
    }

    /// Elementwise maximum over the selected rows, shape 1×n.
    pub fn max_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.mat_dims(x);
        if rows.is_empty() || rows.iter().any(|&r| r >= m) {
            return Err(Error::Dimension {
                op: "max_rows",
                left: vec![m, n],
                right: rows.to_vec(),
            });
        }
        let src = self.value(x).data();
        let data = (0..n)
            .map(|c| {
                rows.iter()
                    .map(|&r| src[r * n + c])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let tracked = self.tracked(&[x]);
        self.push(
            Tensor::from_parts(vec![1, n], data),
            Op::MaxRows(x, rows.to_vec()),
            tracked,
        )
    }

    /// Per-row generated linear layer: `h` is m×k and row `i` of `w` holds a
    /// k×n weight matrix (row-major); returns m×n with
    /// `out[i][j] = Σ_p h[i][p] · w[i][p·n + j]`.
    pub fn row_bilinear(&mut self, h: Var, w: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(h);
        let (m2, kn) = self.mat_dims(w);
        if m != m2 || kn % k != 0 {
            return Err(shape_err(
                "row_bilinear",
                &self.node(h).value,
                &self.node(w).value,
            ));
        }
        let n = kn / k;
        let hv = self.value(h).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let hp = hv[i * k + p];
                let wrow = &wv[i * kn + p * n..i * kn + (p + 1) * n];
                for (o, wv) in orow.iter_mut().zip(wrow) {
                    *o += hp * wv;
                }
            }
        }
        let tracked = self.tracked(&[h, w]);
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::RowBilinear(h, w),
            tracked,
        )
    }

    /// Reverse pass from a scalar output. Gradients from earlier calls are
    /// discarded.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar output, got shape {:?}",
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0]);
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let want = |v: Var| self.nodes[v.0].tracked;
        match &node.op {
            Op::Constant | Op::Variable | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.mat_dims(*a);
                let n = self.mat_dims(*b).1;
                if want(*a) {
                    add_owned(&mut grads[a.0], mm_nt(g, self.value(*b).data(), m, n, k));
                }
                if want(*b) {
                    add_owned(&mut grads[b.0], mm_tn(self.value(*a).data(), g, m, k, n));
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.mat_dims(*a);
                let n = self.mat_dims(*b).0;
                if want(*a) {
                    add_owned(&mut grads[a.0], mm(g, self.value(*b).data(), m, n, k));
                }
                if want(*b) {
                    add_owned(&mut grads[b.0], mm_tn(g, self.value(*a).data(), m, n, k));
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if want(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if want(*b) {
                    add_owned(&mut grads[b.0], g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let bv = self.value(*b).data();
                    add_owned(
                        &mut grads[a.0],
                        g.iter().zip(bv).map(|(p, q)| p * q).collect(),
                    );
                }
                if want(*b) {
                    let av = self.value(*a).data();
                    add_owned(
                        &mut grads[b.0],
                        g.iter().zip(av).map(|(p, q)| p * q).collect(),
                    );
                }
            }
            Op::AddRow(x, row) => {
                if want(*x) {
                    add_into(&mut grads[x.0], g);
                }
                if want(*row) {
                    let n = self.mat_dims(*row).1;
                    let mut acc = vec![0.0; n];
                    for c in g.chunks(n) {
                        acc.iter_mut().zip(c).for_each(|(a, b)| *a += b);
                    }
                    add_owned(&mut grads[row.0], acc);
                }
            }
            Op::Scale(x, c) => {
                add_owned(&mut grads[x.0], g.iter().map(|v| v * c).collect());
            }
            Op::Elu(x) => {
                let xv = self.value(*x).data();
                let d = g
                    .iter()
                    .zip(xv.iter().zip(y))
                    .map(|(gv, (&xi, &yi))| if xi > 0.0 { *gv } else { gv * (yi + 1.0) })
                    .collect();
                add_owned(&mut grads[x.0], d);
            }
            Op::Tanh(x) => {
                let d = g
                    .iter()
                    .zip(y)
                    .map(|(gv, yi)| gv * (1.0 - yi * yi))
                    .collect();
                add_owned(&mut grads[x.0], d);
            }
            Op::Sigmoid(x) => {
                let d = g
                    .iter()
                    .zip(y)
                    .map(|(gv, yi)| gv * yi * (1.0 - yi))
                    .collect();
                add_owned(&mut grads[x.0], d);
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(gv, xi)| {
                        if *xi > 0.0 {
                            *gv
                        } else if *xi < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                add_owned(&mut grads[x.0], d);
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                let d = g.iter().zip(xv).map(|(gv, xi)| 2.0 * gv * xi).collect();
                add_owned(&mut grads[x.0], d);
            }
            Op::MaskedSoftmax {
                x,
                mask,
                outer,
                len,
                inner,
            } => {
                let mut d = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..*len).map(|j| y[idx(j)] * g[idx(j)]).sum();
                        for j in 0..*len {
                            if mask[idx(j)] {
                                d[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
                add_owned(&mut grads[x.0], d);
            }
            Op::SliceCols(x, start) => {
                let (m, n) = self.mat_dims(*x);
                let w = node.value.cols();
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    d[r * n + start..r * n + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                add_owned(&mut grads[x.0], d);
            }
            Op::Transpose(x) => {
                let (m, n) = self.mat_dims(*x);
                // g is n×m
                let d = (0..m * n).map(|i| g[(i % n) * m + i / n]).collect();
                add_owned(&mut grads[x.0], d);
            }
            Op::SliceRows(x, start) => {
                let (m, n) = self.mat_dims(*x);
                let mut d = vec![0.0; m * n];
                d[start * n..start * n + g.len()].copy_from_slice(g);
                add_owned(&mut grads[x.0], d);
            }
            Op::ConcatCols(parts) => {
                let n = node.value.cols();
                let m = node.value.rows();
                let mut offset = 0;
                for p in parts {
                    let w = self.mat_dims(*p).1;
                    if want(*p) {
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&g[r * n + offset..r * n + offset + w]);
                        }
                        add_owned(&mut grads[p.0], d);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if want(*p) {
                        add_into(&mut grads[p.0], &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::GatherRows(x, rows) => {
                let (m, n) = self.mat_dims(*x);
                let mut d = vec![0.0; m * n];
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..n {
                        d[r * n + c] += g[i * n + c];
                    }
                }
                add_owned(&mut grads[x.0], d);
            }
            Op::Pick(x, cols) => {
                let (m, n) = self.mat_dims(*x);
                let mut d = vec![0.0; m * n];
                for (i, &c) in cols.iter().enumerate() {
                    d[i * n + c] = g[i];
                }
                add_owned(&mut grads[x.0], d);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                add_owned(&mut grads[x.0], vec![g[0]; n]);
            }
            Op::RowNormalize(x) => {
                let xv = self.value(*x).data();
                let n = node.value.cols();
                let mut d = vec![0.0; xv.len()];
                for ((row_x, row_y), (row_g, row_d)) in xv
                    .chunks(n)
                    .zip(y.chunks(n))
                    .zip(g.chunks(n).zip(d.chunks_mut(n)))
                {
                    let norm = row_x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    let dot: f64 = row_y.iter().zip(row_g).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        row_d[j] = (row_g[j] - row_y[j] * dot) / norm;
                    }
                }
                add_owned(&mut grads[x.0], d);
            }
            Op::MaxRows(x, rows) => {
                let (m, n) = self.mat_dims(*x);
                let xv = self.value(*x).data();
                let mut d = vec![0.0; m * n];
                for c in 0..n {
                    // first row attaining the maximum takes the gradient
                    let winner = rows
                        .iter()
                        .copied()
                        .find(|&r| xv[r * n + c] == y[c])
                        .expect("max is attained");
                    d[winner * n + c] += g[c];
                }
                add_owned(&mut grads[x.0], d);
            }
            Op::RowBilinear(h, w) => {
                let (m, k) = self.mat_dims(*h);
                let kn = self.mat_dims(*w).1;
                let n = kn / k;
                let hv = self.value(*h).data();
                let wv = self.value(*w).data();
                if want(*h) {
                    let mut d = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let wrow = &wv[i * kn + p * n..i * kn + (p + 1) * n];
                            d[i * k + p] = wrow
                                .iter()
                                .zip(&g[i * n..(i + 1) * n])
                                .map(|(a, b)| a * b)
                                .sum();
                        }
                    }
                    add_owned(&mut grads[h.0], d);
                }
                if want(*w) {
                    let mut d = vec![0.0; m * kn];
                    for i in 0..m {
                        for p in 0..k {
                            let hp = hv[i * k + p];
                            let drow = &mut d[i * kn + p * n..i * kn + (p + 1) * n];
                            for (dv, gv) in drow.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *dv = hp * gv;
                            }
                        }
                    }
                    add_owned(&mut grads[w.0], d);
                }
            }
        }
    }

    /// Gradient of the last backward output with respect to `v`, if any
    /// flowed into it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradients of every bound parameter into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParameterStore) {
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = self.grads.get(idx).and_then(|g| g.as_deref()) {
                    store.accumulate_grad(id, g);
                }
            }
        }
    }
}

#[cfg(debug_assertions)]
fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Constant => "constant",
        Op::Variable => "variable",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::MatMulT(..) => "matmul_t",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::Scale(..) => "scale",
        Op::Elu(_) => "elu",
        Op::Tanh(_) => "tanh",
        Op::Sigmoid(_) => "sigmoid",
        Op::Abs(_) => "abs",
        Op::Square(_) => "square",
        Op::MaskedSoftmax { .. } => "masked_softmax",
        Op::SliceCols(..) => "slice_cols",
        Op::SliceRows(..) => "slice_rows",
        Op::Transpose(..) => "transpose",
        Op::ConcatCols(_) => "concat_cols",
        Op::ConcatRows(_) => "concat_rows",
        Op::GatherRows(..) => "gather_rows",
        Op::Pick(..) => "pick",
        Op::Sum(_) => "sum",
        Op::RowNormalize(_) => "row_normalize",
        Op::MaxRows(..) => "max_rows",
        Op::RowBilinear(..) => "row_bilinear",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let i = g.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = g.constant(t(&[&[3.0, 4.0], &[5.0, 6.0]]));
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = g.constant(t(&[&[1.0, 2.0]]));
        let b = g.constant(t(&[&[3.0], &[4.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::Dimension { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn masked_softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[0.0, 0.0, 0.0]));
        let y = g.masked_softmax(x, &[true; 3], 1).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = g.constant(Tensor::row(&[5.0, 2.0, 7.0]));
        let y = g.masked_softmax(x, &[true, false, true], 1).unwrap();
        let e2 = 2f64.exp();
        let want = [1.0 / (1.0 + e2), 0.0, e2 / (1.0 + e2)];
        let got = g.value(y).data();
        assert_eq!(got[1], 0.0);
        assert!((got[0] - want[0]).abs() < 1e-12);
        assert!((got[2] - want[2]).abs() < 1e-12);
        assert!((got[0] - 0.1192).abs() < 1e-4);
        assert!((got[2] - 0.8808).abs() < 1e-4);

        let x = g.constant(Tensor::row(&[9.0, 9.0]));
        let err = g.masked_softmax(x, &[false, false], 1).unwrap_err();
        assert_eq!(err.to_string(), "fully masked slice 0");
    }

    #[test]
    fn masked_softmax_along_rows_axis() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[1.0, 2.0], &[3.0, 4.0], &[0.5, -1.0]]));
        let mask = [true, true, false, true, true, false];
        let y = g.masked_softmax(x, &mask, 0).unwrap();
        let v = g.value(y);
        let col0: f64 = (0..3).map(|r| v.get(r, 0)).sum();
        let col1: f64 = (0..3).map(|r| v.get(r, 1)).sum();
        assert!((col0 - 1.0).abs() < 1e-12 && (col1 - 1.0).abs() < 1e-12);
        assert_eq!(v.get(1, 0), 0.0);
        assert_eq!(v.get(2, 1), 0.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::row(&[1.0, 2.0]));
        let v = g.variable(Tensor::row(&[3.0, 4.0]));
        let p = g.mul(c, v).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(v).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let v = g.variable(Tensor::row(&[3.0, 4.0]));
        assert!(matches!(g.backward(v), Err(Error::Contract(_))));
    }
}
