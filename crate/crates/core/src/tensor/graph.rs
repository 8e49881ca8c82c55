use std::ops::Range;
use std::sync::Arc;

use super::kernels::{self, gelu, gelu_grad};
use super::{Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    OverwriteRows(Var, Vec<Range<usize>>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Append-only computation graph.
///
/// Nodes are only ever pushed after their inputs, so the arena order is a
/// topological order. Leaf gradients accumulate across [`Graph::backward`]
/// calls until [`Graph::zero_grad`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn add_into(dst: &mut Option<Tensor>, src: &Tensor) {
    match dst {
        Some(d) => {
            for (a, b) in d.data_mut().iter_mut().zip(src.data()) {
                *a += b;
            }
        }
        None => *dst = Some(src.clone()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Arc<Tensor>) -> Var {
        self.push_arc(value, Op::Leaf, true)
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_arc(&mut self, value: Arc<Tensor>) -> Var {
        self.push_arc(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    /// Accumulated gradient of a leaf (or of the last backward for interior nodes).
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulNt(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(TensorError::Dimension {
                op,
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of an `[m×n]` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.len() != x.cols() || x.rank() != 2 {
            return Err(TensorError::Dimension {
                op: "add_row",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let c = x.cols();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let out = Tensor::new(x.shape(), data)?;
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Scale(a, s), rg))
    }

    /// Adds a constant tensor (masks, noise); gradient flows to `a` only.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let x = self.value(a);
        if x.shape() != c.shape() {
            return Err(TensorError::Dimension {
                op: "add_const",
                lhs: x.shape().to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let data = x.data().iter().zip(c.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::AddConst(a), rg))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Gelu(a), rg))
    }

    /// Per-row normalisation followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(TensorError::Parameter {
                op: "layer_norm",
                msg: format!("eps must be positive, got {eps}"),
            });
        }
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let c = xv.cols();
        if gv.len() != c || bv.len() != c {
            return Err(TensorError::Dimension {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        if c == 0 {
            return Err(TensorError::Dimension {
                op: "softmax",
                lhs: x.shape().to_vec(),
                rhs: vec![],
            });
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c) {
            kernels::softmax_in_place(row);
        }
        let out = Tensor::new(x.shape(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SoftmaxRows(a), rg))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        if x.rank() != 2 || start + len > c {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                extent: c,
            });
        }
        let rows = x.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let out = Tensor::new(&[rows, len], data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::Parameter {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let rows = self.value(*first).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 2 || v.rows() != rows {
                return Err(TensorError::Dimension {
                    op: "concat_cols",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(&[rows, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Embedding lookup: rows `ids` of `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= rows {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    extent: rows,
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(&[ids.len(), c], data)?;
        let rg = self.rg(table);
        Ok(self.push(out, Op::GatherRows(table, ids.to_vec()), rg))
    }

    /// Replaces the given row ranges of `a` with rows of `values` (stacked
    /// in range order). Gradient is blocked for the replaced rows.
    pub fn overwrite_rows(
        &mut self,
        a: Var,
        ranges: &[Range<usize>],
        values: &[&Tensor],
    ) -> Result<Var> {
        let mut out = self.value(a).clone();
        for (r, v) in ranges.iter().zip(values) {
            if v.rows() != r.len() || v.cols() != out.cols() {
                return Err(TensorError::Dimension {
                    op: "overwrite_rows",
                    lhs: vec![r.len(), out.cols()],
                    rhs: v.shape().to_vec(),
                });
            }
            out.set_rows(r.start, v)?;
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::OverwriteRows(a, ranges.to_vec()), rg))
    }

    /// Mean token cross-entropy of `logits[n×V]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        let (n, v) = (l.rows(), l.cols());
        if l.rank() != 2 || targets.len() != n || n == 0 {
            return Err(TensorError::Dimension {
                op: "cross_entropy",
                lhs: l.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut logp = l.data().to_vec();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: t,
                    extent: v,
                });
            }
            let row = &mut logp[r * v..(r + 1) * v];
            kernels::log_softmax_in_place(row);
            loss -= row[t];
        }
        let probs = logp.iter().map(|x| x.exp()).collect();
        let out = Tensor::scalar(loss / n as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), rg))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into leaf grads.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                add_into(&mut self.nodes[i].grad, &g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let send = |v: Var, t: Tensor, grads: &mut [Option<Tensor>]| {
            if self.rg(v) {
                add_into(&mut grads[v.0], &t);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    send(*a, kernels::matmul_nt(g, self.value(*b))?, grads);
                }
                if self.rg(*b) {
                    send(*b, kernels::matmul_tn(self.value(*a), g)?, grads);
                }
            }
            Op::MatMulNt(a, b) => {
                // c = a bᵀ: da = g b, db = gᵀ a
                if self.rg(*a) {
                    send(*a, kernels::matmul(g, self.value(*b))?, grads);
                }
                if self.rg(*b) {
                    send(*b, kernels::matmul_tn(g, self.value(*a))?, grads);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.clone(), grads);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    send(*a, Tensor::new(g.shape(), d)?, grads);
                }
                if self.rg(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    send(*b, Tensor::new(g.shape(), d)?, grads);
                }
            }
            Op::AddRow(a, bias) => {
                send(*a, g.clone(), grads);
                if self.rg(*bias) {
                    let c = g.cols();
                    let mut d = vec![0.0; c];
                    for row in g.data().chunks(c.max(1)) {
                        for (x, y) in d.iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                    send(*bias, Tensor::new(self.value(*bias).shape(), d)?, grads);
                }
            }
            Op::Scale(a, s) => send(*a, g.map(|v| v * s), grads),
            Op::AddConst(a) => send(*a, g.clone(), grads),
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gv, xv)| gv * gelu_grad(*xv))
                    .collect();
                send(*a, Tensor::new(g.shape(), d)?, grads);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = g.cols();
                let gv = self.value(*gain).data();
                if self.rg(*gain) || self.rg(*bias) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for (row, hrow) in g.data().chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += row[j] * hrow[j];
                            db[j] += row[j];
                        }
                    }
                    send(*gain, Tensor::new(self.value(*gain).shape(), dg)?, grads);
                    send(*bias, Tensor::new(self.value(*bias).shape(), db)?, grads);
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let cf = c as f64;
                    for r in 0..g.rows() {
                        let grow = &g.data()[r * c..(r + 1) * c];
                        let hrow = &xhat[r * c..(r + 1) * c];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let dh = grow[j] * gv[j];
                            s1 += dh;
                            s2 += dh * hrow[j];
                        }
                        for j in 0..c {
                            let dh = grow[j] * gv[j];
                            dx[r * c + j] = rstd[r] * (dh - s1 / cf - hrow[j] * s2 / cf);
                        }
                    }
                    send(*x, Tensor::new(g.shape(), dx)?, grads);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let c = y.cols();
                let mut d = vec![0.0; g.len()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        d[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(*a, Tensor::new(g.shape(), d)?, grads);
            }
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                let (rows, c, len) = (x.rows(), x.cols(), g.cols());
                let mut d = vec![0.0; x.len()];
                for r in 0..rows {
                    d[r * c + start..r * c + start + len].copy_from_slice(g.row(r));
                }
                send(*a, Tensor::new(x.shape(), d)?, grads);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let len = pv.cols();
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(pv.len());
                        for r in 0..g.rows() {
                            d.extend_from_slice(&g.row(r)[offset..offset + len]);
                        }
                        send(p, Tensor::new(pv.shape(), d)?, grads);
                    }
                    offset += len;
                }
            }
            Op::GatherRows(table, ids) => {
                let t = self.value(*table);
                let c = t.cols();
                let mut d = vec![0.0; t.len()];
                for (k, &id) in ids.iter().enumerate() {
                    for (x, y) in d[id * c..(id + 1) * c].iter_mut().zip(g.row(k)) {
                        *x += y;
                    }
                }
                send(*table, Tensor::new(t.shape(), d)?, grads);
            }
            Op::OverwriteRows(a, ranges) => {
                let mut d = g.clone();
                let c = d.cols();
                for r in ranges {
                    d.data_mut()[r.start * c..r.end * c].fill(0.0);
                }
                send(*a, d, grads);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let l = self.value(*logits);
                let (n, v) = (l.rows(), l.cols());
                let scale = g.item()? / n as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * v + t] -= scale;
                }
                send(*logits, Tensor::new(l.shape(), d)?, grads);
            }
            Op::Sum(a) => {
                let s = g.item()?;
                send(*a, Tensor::full(self.value(*a).shape(), s), grads);
            }
        }
        Ok(())
    }
}
