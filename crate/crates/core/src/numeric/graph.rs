//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is a topological order
//! by construction and `backward` simply walks it in reverse.

use std::f64::consts::LN_2;

use super::kernels::{self, matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::tensor::{dims2, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'a> {
    Owned(Vec<f64>),
    Borrowed(&'a [f64]),
}

impl Value<'_> {
    fn as_slice(&self) -> &[f64] {
        match self {
            Value::Owned(v) => v,
            Value::Borrowed(s) => s,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    Sum(Var),
    Normalize(Var),
    EntropyBits {
        p: Var,
        indices: Vec<usize>,
    },
    LnFloor {
        x: Var,
        floor: f64,
    },
    Nll {
        x: Var,
        targets: Vec<usize>,
    },
}

struct Node<'a> {
    value: Value<'a>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// A tape of tensor operations. Leaves may borrow their data (model
/// parameters) for the lifetime `'a`, so binding a model costs no copies.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Value<'a>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Value::Owned(value), shape, op, requires_grad)
    }

    // ---- leaves ---------------------------------------------------------

    /// A leaf that never accumulates gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(Value::Owned(t.into_data()), shape, Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(
            Value::Borrowed(t.data()),
            t.shape().to_vec(),
            Op::Leaf,
            false,
        )
    }

    /// A leaf whose gradient is populated by [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(Value::Owned(t.into_data()), shape, Op::Leaf, true)
    }

    pub fn param_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(
            Value::Borrowed(t.data()),
            t.shape().to_vec(),
            Op::Leaf,
            true,
        )
    }

    /// Binds a borrowed tensor, trainable or not.
    pub fn leaf_ref(&mut self, t: &'a Tensor, requires_grad: bool) -> Var {
        if requires_grad {
            self.param_ref(t)
        } else {
            self.constant_ref(t)
        }
    }

    // ---- accessors ------------------------------------------------------

    pub fn value(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.as_slice()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape is valid")
    }

    /// Gradient of the last `backward` call with respect to `v`; `None` when
    /// `v` is not reachable from the loss or does not require grad.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        dims2(self.shape(v))
    }

    // ---- operations -----------------------------------------------------

    /// `[m,k] · [k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 || self.shape(b).len() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push_op(out, vec![m, n], Op::MatMul(a, b), &[a, b]))
    }

    /// `[m,k] · [n,k]ᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::shape(
                "matmul_bt",
                format!("{:?} x {:?}ᵀ", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_acc(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push_op(out, vec![m, n], Op::MatMulBt(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push_op(out, self.shape(a).to_vec(), Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push_op(out, self.shape(a).to_vec(), Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push_op(out, self.shape(a).to_vec(), Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`n` vector to every row of an `[m,n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.dims(a);
        if self.value(row).len() != n {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", self.shape(a), self.shape(row)),
            ));
        }
        let r = self.value(row);
        let out: Vec<f64> = self
            .value(a)
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        Ok(self.push_op(out, self.shape(a).to_vec(), Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * factor).collect();
        self.push_op(out, self.shape(a).to_vec(), Op::Scale(a, factor), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| kernels::gelu(x)).collect();
        self.push_op(out, self.shape(a).to_vec(), Op::Gelu(a), &[a])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.dims(a);
        let x = self.value(a);
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("softmax input"));
        }
        let mut out = vec![0.0; x.len()];
        for (xr, or) in x.chunks(n).zip(out.chunks_mut(n)) {
            kernels::softmax_row(xr, or);
        }
        Ok(self.push_op(out, self.shape(a).to_vec(), Op::Softmax(a), &[a]))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.dims(a);
        let x = self.value(a);
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("log_softmax input"));
        }
        let mut out = vec![0.0; x.len()];
        for (xr, or) in x.chunks(n).zip(out.chunks_mut(n)) {
            let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + xr.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, v) in or.iter_mut().zip(xr) {
                *o = v - lse;
            }
        }
        Ok(self.push_op(out, self.shape(a).to_vec(), Op::LogSoftmax(a), &[a]))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::shape("layer_norm", format!("width {n}")));
        }
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push_op(
            out,
            shape,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Gathers rows of an embedding table, producing `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims(table);
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::OutOfRange {
                    what: "embedding id",
                    index: id,
                    len: rows,
                });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        Ok(self.push_op(
            out,
            vec![ids.len(), d],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        let v = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::OutOfRange {
                    what: "row",
                    index: r,
                    len: m,
                });
            }
            out.extend_from_slice(&v[r * n..(r + 1) * n]);
        }
        Ok(self.push_op(
            out,
            vec![rows.len(), n],
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + len > n || len == 0 {
            return Err(Error::shape("slice_cols", format!("{start}+{len} of {n}")));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&v[r * n + start..r * n + start + len]);
        }
        Ok(self.push_op(out, vec![m, len], Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no inputs"));
        };
        let (m, _) = self.dims(first);
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        if parts.iter().any(|&p| self.dims(p).0 != m) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push_op(out, vec![m, total], Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Picks flat entries of `x` into a vector.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if indices.is_empty() {
            return Err(Error::shape("gather", "empty index set"));
        }
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            out.push(*v.get(i).ok_or(Error::OutOfRange {
                what: "gather",
                index: i,
                len: v.len(),
            })?);
        }
        Ok(self.push_op(
            out,
            vec![indices.len()],
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push_op(vec![s], vec![1], Op::Sum(x), &[x])
    }

    /// Divides a nonnegative vector by its sum.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s: f64 = v.iter().sum();
        if s <= 0.0 || !s.is_finite() {
            return Err(Error::NonFinite("normalize (sum must be positive)"));
        }
        let out = v.iter().map(|x| x / s).collect();
        Ok(self.push_op(out, self.shape(x).to_vec(), Op::Normalize(x), &[x]))
    }

    /// `−Σ_{i∈indices} p_i log₂ p_i`, with `0 · log₂ 0 = 0`.
    pub fn entropy_bits(&mut self, p: Var, indices: &[usize]) -> Result<Var> {
        let v = self.value(p);
        let mut h = 0.0;
        for &i in indices {
            let pi = *v.get(i).ok_or(Error::OutOfRange {
                what: "entropy index",
                index: i,
                len: v.len(),
            })?;
            if pi < 0.0 {
                return Err(Error::NegativeProbability {
                    index: i,
                    value: pi,
                });
            }
            if pi > 0.0 {
                h -= pi * kernels::log2(pi);
            }
        }
        Ok(self.push_op(
            vec![h],
            vec![1],
            Op::EntropyBits {
                p,
                indices: indices.to_vec(),
            },
            &[p],
        ))
    }

    /// Entropy over every entry of `p`.
    pub fn entropy_bits_all(&mut self, p: Var) -> Result<Var> {
        let all: Vec<usize> = (0..self.value(p).len()).collect();
        self.entropy_bits(p, &all)
    }

    /// Natural log of `max(x, floor)`; the gradient is zero where the floor binds.
    pub fn ln_floor(&mut self, x: Var, floor: f64) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(floor).ln()).collect();
        self.push_op(out, self.shape(x).to_vec(), Op::LnFloor { x, floor }, &[x])
    }

    /// Mean negative log-likelihood: `−mean_r x[r, targets[r]]` for log-probabilities `x`.
    pub fn nll(&mut self, x: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if targets.len() != m {
            return Err(Error::shape(
                "nll",
                format!("{m} rows, {} targets", targets.len()),
            ));
        }
        let v = self.value(x);
        let mut s = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= n {
                return Err(Error::OutOfRange {
                    what: "nll target",
                    index: t,
                    len: n,
                });
            }
            s -= v[r * n + t];
        }
        Ok(self.push_op(
            vec![s / m as f64],
            vec![1],
            Op::Nll {
                x,
                targets: targets.to_vec(),
            },
            &[x],
        ))
    }

    /// Sum of scalars, each multiplied by a weight.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let Some(&(first, w0)) = terms.first() else {
            return Err(Error::shape("weighted_sum", "no terms"));
        };
        let mut acc = self.scale(first, w0);
        for &(t, w) in &terms[1..] {
            let s = self.scale(t, w);
            acc = self.add(acc, s)?;
        }
        Ok(acc)
    }

    // ---- backward -------------------------------------------------------

    /// Populates gradients of `loss` with respect to every reachable node
    /// that requires grad. Gradients accumulate across repeated uses of a
    /// node; calling `backward` again adds to the previous gradients until
    /// [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize_with(self.nodes.len(), || None);
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        accumulate(&mut self.grads, loss.0, &[1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &dy);
            // Only leaves keep their gradient for the caller.
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(dy);
            }
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, dy: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let val = |v: Var| nodes[v.0].value.as_slice();
        let dims = |v: Var| dims2(&nodes[v.0].shape);
        let needs = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(*a);
                let (_, n) = dims(*b);
                if needs(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_bt_acc(dy, val(*b), &mut da, m, n, k);
                    accumulate(grads, a.0, &da);
                }
                if needs(*b) {
                    let mut db = vec![0.0; k * n];
                    matmul_at_acc(val(*a), dy, &mut db, m, k, n);
                    accumulate(grads, b.0, &db);
                }
            }
            Op::MatMulBt(a, b) => {
                // c[m,n] = a[m,k] b[n,k]ᵀ
                let (m, k) = dims(*a);
                let (n, _) = dims(*b);
                if needs(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_acc(dy, val(*b), &mut da, m, n, k);
                    accumulate(grads, a.0, &da);
                }
                if needs(*b) {
                    let mut db = vec![0.0; n * k];
                    matmul_at_acc(dy, val(*a), &mut db, m, n, k);
                    accumulate(grads, b.0, &db);
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, a.0, dy);
                }
                if needs(*b) {
                    accumulate(grads, b.0, dy);
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(grads, a.0, dy);
                }
                if needs(*b) {
                    let neg: Vec<f64> = dy.iter().map(|g| -g).collect();
                    accumulate(grads, b.0, &neg);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let da = zip_map(dy, val(*b), |g, y| g * y);
                    accumulate(grads, a.0, &da);
                }
                if needs(*b) {
                    let db = zip_map(dy, val(*a), |g, x| g * x);
                    accumulate(grads, b.0, &db);
                }
            }
            Op::AddRow(a, row) => {
                if needs(*a) {
                    accumulate(grads, a.0, dy);
                }
                if needs(*row) {
                    let n = val(*row).len();
                    let mut dr = vec![0.0; n];
                    for chunk in dy.chunks(n) {
                        for (d, g) in dr.iter_mut().zip(chunk) {
                            *d += g;
                        }
                    }
                    accumulate(grads, row.0, &dr);
                }
            }
            Op::Scale(a, f) => {
                let da: Vec<f64> = dy.iter().map(|g| g * f).collect();
                accumulate(grads, a.0, &da);
            }
            Op::Gelu(a) => {
                let da = zip_map(dy, val(*a), |g, x| g * kernels::gelu_grad(x));
                accumulate(grads, a.0, &da);
            }
            Op::Softmax(a) => {
                let (_, n) = dims(*a);
                let y = node.value.as_slice();
                let mut da = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(dy.chunks(n)).zip(da.chunks_mut(n)) {
                    let s: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = y * (g - s);
                    }
                }
                accumulate(grads, a.0, &da);
            }
            Op::LogSoftmax(a) => {
                let (_, n) = dims(*a);
                let y = node.value.as_slice();
                let mut da = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(dy.chunks(n)).zip(da.chunks_mut(n)) {
                    let s: f64 = gr.iter().sum();
                    for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = g - y.exp() * s;
                    }
                }
                accumulate(grads, a.0, &da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = dims(*x);
                let g = val(*gain);
                if needs(*gain) {
                    let mut dg = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            dg[c] += dy[r * n + c] * xhat[r * n + c];
                        }
                    }
                    accumulate(grads, gain.0, &dg);
                }
                if needs(*bias) {
                    let mut db = vec![0.0; n];
                    for chunk in dy.chunks(n) {
                        for (d, v) in db.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    accumulate(grads, bias.0, &db);
                }
                if needs(*x) {
                    let mut dx = vec![0.0; m * n];
                    let nf = n as f64;
                    for r in 0..m {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..n {
                            let dh = dy[r * n + c] * g[c];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * n + c];
                        }
                        for c in 0..n {
                            let dh = dy[r * n + c] * g[c];
                            dx[r * n + c] =
                                inv_std[r] / nf * (nf * dh - sum_dh - xhat[r * n + c] * sum_dh_h);
                        }
                    }
                    accumulate(grads, x.0, &dx);
                }
            }
            Op::Embedding { table, ids } => {
                let (rows, d) = dims(*table);
                let slot = grads[table.0].get_or_insert_with(|| vec![0.0; rows * d]);
                for (k, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        slot[id * d + c] += dy[k * d + c];
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                let (m, n) = dims(*x);
                let slot = grads[x.0].get_or_insert_with(|| vec![0.0; m * n]);
                for (k, &r) in rows.iter().enumerate() {
                    for c in 0..n {
                        slot[r * n + c] += dy[k * n + c];
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = dims(*x);
                let len = dy.len() / m;
                let slot = grads[x.0].get_or_insert_with(|| vec![0.0; m * n]);
                for r in 0..m {
                    for c in 0..len {
                        slot[r * n + start + c] += dy[r * len + c];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = dims2(&node.shape);
                let mut offset = 0;
                for p in parts {
                    let (_, w) = dims(*p);
                    if needs(*p) {
                        let mut dp = vec![0.0; m * w];
                        for r in 0..m {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&dy[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(grads, p.0, &dp);
                    }
                    offset += w;
                }
            }
            Op::Gather { x, indices } => {
                let len = val(*x).len();
                let slot = grads[x.0].get_or_insert_with(|| vec![0.0; len]);
                for (k, &i) in indices.iter().enumerate() {
                    slot[i] += dy[k];
                }
            }
            Op::Sum(x) => {
                let len = val(*x).len();
                accumulate(grads, x.0, &vec![dy[0]; len]);
            }
            Op::Normalize(x) => {
                let xv = val(*x);
                let s: f64 = xv.iter().sum();
                let dot: f64 = dy.iter().zip(xv).map(|(g, v)| g * v).sum();
                let dx: Vec<f64> = dy.iter().map(|g| g / s - dot / (s * s)).collect();
                accumulate(grads, x.0, &dx);
            }
            Op::EntropyBits { p, indices } => {
                let pv = val(*p);
                let slot = grads[p.0].get_or_insert_with(|| vec![0.0; pv.len()]);
                for &i in indices {
                    if pv[i] > 0.0 {
                        slot[i] -= dy[0] * (kernels::log2(pv[i]) + 1.0 / LN_2);
                    }
                }
            }
            Op::LnFloor { x, floor } => {
                let dx = zip_map(dy, val(*x), |g, v| if v > *floor { g / v } else { 0.0 });
                accumulate(grads, x.0, &dx);
            }
            Op::Nll { x, targets } => {
                let (m, n) = dims(*x);
                let slot = grads[x.0].get_or_insert_with(|| vec![0.0; m * n]);
                for (r, &t) in targets.iter().enumerate() {
                    slot[r * n + t] -= dy[0] / m as f64;
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    match &mut grads[i] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}
