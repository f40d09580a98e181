//! Dynamic reverse-mode tape.
//!
//! Every operation evaluates eagerly, stores its output value, and records
//! what the backward rule needs. `backward` walks the records in reverse
//! insertion order, which is a valid reverse topological order because an
//! operation can only consume nodes that already exist.

use std::collections::BTreeMap;

use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};
use crate::error::{CkfError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    CausalSoftmax(Var),
    CrossEntropy {
        logits: Var,
        rows: Vec<(usize, usize)>,
        probs: Vec<f64>,
    },
    BceLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
    Sum(Var),
    SumRows(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ReplaceRows {
        base: Var,
        rows: Vec<(usize, Var)>,
    },
    Reshape(Var),
    OffDiagSqSum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every differentiable leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    map: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.map.get(&v)
    }

    pub fn contains(&self, v: Var) -> bool {
        self.map.contains_key(&v)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Tensor)> {
        self.map.iter()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> CkfError {
    CkfError::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn mat_dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a);
        let (k2, n) = self.mat_dims(b);
        if k != k2 {
            return Err(dim_err("matmul", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a);
        let (n, k2) = self.mat_dims(b);
        if k != k2 {
            return Err(dim_err("matmul_nt", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(t, Op::Transpose(a), rg)
    }

    fn zip_op(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(dim_err(name, x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op(a, b, "add", |p, q| p + q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op(a, b, "sub", |p, q| p - q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op(a, b, "mul", |p, q| p * q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds a bias vector (length = column count) to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        let n = x.cols();
        if b.len() != n {
            return Err(dim_err("add_row", x, b));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(t, Op::AddRow(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let t = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * c).collect()).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |v| v.max(0.0));
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    /// Normalizes each row over the last axis, then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(dim_err("layer_norm", xv, self.value(gain)));
        }
        let rows = xv.rows();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; rows * n];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            t,
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

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(CkfError::contract(format!(
                "softmax axis {axis} invalid for shape {shape:?}"
            )));
        }
        if !xv.all_finite() {
            return Err(CkfError::Numeric("softmax of non-finite input".into()));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let m = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (src[at(k)] - m).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[at(k)] /= z;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax { x, outer, len, inner }, rg))
    }

    /// Row softmax of a square score matrix where row `i` only sees columns `0..=i`.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (t, n) = (xv.rows(), xv.cols());
        if t != n {
            return Err(dim_err("causal_softmax", xv, xv));
        }
        let src = xv.data();
        let mut out = vec![0.0; t * t];
        for r in 0..t {
            let row = &src[r * t..r * t + r + 1];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (c, v) in row.iter().enumerate() {
                let e = (v - m).exp();
                out[r * t + c] = e;
                z += e;
            }
            for c in 0..=r {
                out[r * t + c] /= z;
            }
        }
        let tv = Tensor::new(vec![t, t], out)?;
        let rg = self.rg(x);
        Ok(self.push(tv, Op::CausalSoftmax(x), rg))
    }

    /// Mean negative log-likelihood over rows whose mask is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        let (t, v) = (lv.rows(), lv.cols());
        if targets.len() != t || mask.len() != t {
            return Err(CkfError::contract(format!(
                "cross_entropy: {t} rows but {} targets / {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let rows: Vec<(usize, usize)> = (0..t).filter(|&r| mask[r]).map(|r| (r, targets[r])).collect();
        if rows.is_empty() {
            return Err(CkfError::contract("cross_entropy: mask selects no positions"));
        }
        let mut probs = Vec::with_capacity(rows.len() * v);
        let mut loss = 0.0;
        for &(r, tgt) in &rows {
            if tgt >= v {
                return Err(CkfError::Index {
                    what: "vocabulary",
                    index: tgt,
                    len: v,
                });
            }
            let row = lv.row_slice(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            let lse = m + z.ln();
            loss += lse - row[tgt];
            probs.extend(row.iter().map(|x| (x - lse).exp()));
        }
        let n = rows.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss / n), Op::CrossEntropy { logits, rows, probs }, rg))
    }

    /// Mean sigmoid cross-entropy of logits against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != targets.len() {
            return Err(CkfError::contract("bce_with_logits: length mismatch"));
        }
        let loss: f64 = lv
            .data()
            .iter()
            .zip(targets)
            .map(|(&s, &y)| s.max(0.0) - s * y + (-s.abs()).exp().ln_1p())
            .sum::<f64>()
            / targets.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != target.len() {
            return Err(CkfError::contract("mse: length mismatch"));
        }
        let loss = pv
            .data()
            .iter()
            .zip(target)
            .map(|(p, y)| (p - y) * (p - y))
            .sum::<f64>()
            / target.len() as f64;
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums as an m×1 column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.cols();
        let data: Vec<f64> = x.data().chunks(n).map(|r| r.iter().sum()).collect();
        let m = data.len();
        let rg = self.rg(a);
        self.push(Tensor::new(vec![m, 1], data).expect("shape"), Op::SumRows(a), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        if start + len > n || len == 0 {
            return Err(CkfError::Index {
                what: "columns",
                index: start + len,
                len: n,
            });
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&xv.data()[r * n + start..r * n + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![m, len], data)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != m) {
            return Err(dim_err("concat_cols", self.value(parts[0]), self.value(parts[1])));
        }
        let n: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Rows `ids` of `table`, stacked.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, n) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            if i >= rows {
                return Err(CkfError::Index {
                    what: "gather rows",
                    index: i,
                    len: rows,
                });
            }
            data.extend_from_slice(tv.row_slice(i));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), n], data)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Copy of `base` with the listed rows overwritten by 1×n vectors.
    pub fn replace_rows(&mut self, base: Var, rows: &[(usize, Var)]) -> Result<Var> {
        let bv = self.value(base);
        let (m, n) = (bv.rows(), bv.cols());
        let mut data = bv.data().to_vec();
        for &(r, v) in rows {
            let vv = self.value(v);
            if r >= m {
                return Err(CkfError::Index {
                    what: "replace_rows",
                    index: r,
                    len: m,
                });
            }
            if vv.len() != n {
                return Err(dim_err("replace_rows", bv, vv));
            }
            data[r * n..(r + 1) * n].copy_from_slice(vv.data());
        }
        let rg = self.rg(base) || rows.iter().any(|&(_, v)| self.rg(v));
        Ok(self.push(
            Tensor::new(vec![m, n], data)?,
            Op::ReplaceRows {
                base,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Sum of squared off-diagonal entries of a square matrix.
    pub fn offdiag_sq_sum(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = (x.rows(), x.cols());
        if m != n {
            return Err(dim_err("offdiag_sq_sum", x, x));
        }
        let mut s = 0.0;
        for i in 0..m {
            for j in 0..n {
                if i != j {
                    s += x.get(i, j) * x.get(i, j);
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::OffDiagSqSum(a), rg))
    }

    /// Reverse sweep from a scalar. Returns a gradient for every leaf that
    /// requires one (zeros for leaves the loss does not depend on).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(CkfError::contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut map = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                if matches!(node.op, Op::Leaf) {
                    map.insert(Var(idx), Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                map.insert(
                    Var(idx),
                    Tensor::new(node.value.shape().to_vec(), g).expect("leaf grad shape"),
                );
            }
        }
        // Differentiable leaves created after the loss cannot influence it.
        for (idx, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                map.insert(Var(idx), Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { map })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.mat_dims(*a);
                let n = self.value(*b).cols();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // dA = g · Bᵀ ; dB = Aᵀ · g
                self.acc(grads, *a, |d| matmul_nt_into(g, bv, d, m, n, k));
                self.acc(grads, *b, |d| matmul_tn_into(av, g, d, m, k, n));
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.mat_dims(*a);
                let n = self.value(*b).rows();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // out = A Bᵀ: dA = g · B ; dB = gᵀ · A
                self.acc(grads, *a, |d| matmul_into(g, bv, d, m, n, k));
                self.acc(grads, *b, |d| matmul_tn_into(g, av, d, m, n, k));
            }
            Op::Transpose(a) => {
                let (m, n) = self.mat_dims(*a);
                self.acc(grads, *a, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow(a, bias) => {
                self.acc(grads, *a, |d| add_into(d, g));
                let n = self.value(*a).cols();
                self.acc(grads, *bias, |d| {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        if av[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        let x = av[i];
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        d[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = self.value(*x).cols();
                let gv = self.value(*gain).data();
                self.acc(grads, *bias, |d| {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
                self.acc(grads, *gain, |d| {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            d[j] += grow[j] * hrow[j];
                        }
                    }
                });
                self.acc(grads, *x, |d| {
                    for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let dh: Vec<f64> = (0..n).map(|j| grow[j] * gv[j]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dhh = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            d[r * n + j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dhh);
                        }
                    }
                });
            }
            Op::Softmax { x, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                self.acc(grads, *x, |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| o * len * inner + k * inner + i;
                            let dot: f64 = (0..len).map(|k| g[at(k)] * out[at(k)]).sum();
                            for k in 0..len {
                                d[at(k)] += out[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::CausalSoftmax(x) => {
                let t = self.value(*x).rows();
                self.acc(grads, *x, |d| {
                    for r in 0..t {
                        let s = r * t;
                        let dot: f64 = (0..=r).map(|c| g[s + c] * out[s + c]).sum();
                        for c in 0..=r {
                            d[s + c] += out[s + c] * (g[s + c] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, rows, probs } => {
                let v = self.value(*logits).cols();
                let scale = g[0] / rows.len() as f64;
                self.acc(grads, *logits, |d| {
                    for (k, &(r, tgt)) in rows.iter().enumerate() {
                        let p = &probs[k * v..(k + 1) * v];
                        for j in 0..v {
                            d[r * v + j] += scale * p[j];
                        }
                        d[r * v + tgt] -= scale;
                    }
                });
            }
            Op::BceLogits { logits, targets } => {
                let lv = self.value(*logits).data();
                let scale = g[0] / targets.len() as f64;
                self.acc(grads, *logits, |d| {
                    for i in 0..d.len() {
                        let sig = 1.0 / (1.0 + (-lv[i]).exp());
                        d[i] += scale * (sig - targets[i]);
                    }
                });
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred).data();
                let scale = 2.0 * g[0] / target.len() as f64;
                self.acc(grads, *pred, |d| {
                    for i in 0..d.len() {
                        d[i] += scale * (pv[i] - target[i]);
                    }
                });
            }
            Op::Sum(a) => {
                self.acc(grads, *a, |d| d.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::SumRows(a) => {
                let n = self.value(*a).cols();
                self.acc(grads, *a, |d| {
                    for (r, row) in d.chunks_mut(n).enumerate() {
                        row.iter_mut().for_each(|x| *x += g[r]);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let n = self.value(*x).cols();
                let len = node.value.cols();
                self.acc(grads, *x, |d| {
                    for (r, grow) in g.chunks(len).enumerate() {
                        add_into(&mut d[r * n + start..r * n + start + len], grow);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let n = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.acc(grads, p, |d| {
                        for (r, drow) in d.chunks_mut(w).enumerate() {
                            add_into(drow, &g[r * n + off..r * n + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::Gather { table, ids } => {
                let n = self.value(*table).cols();
                self.acc(grads, *table, |d| {
                    for (k, &i) in ids.iter().enumerate() {
                        add_into(&mut d[i * n..(i + 1) * n], &g[k * n..(k + 1) * n]);
                    }
                });
            }
            Op::ReplaceRows { base, rows } => {
                let n = node.value.cols();
                // Overwritten rows carry no gradient back to the base.
                self.acc(grads, *base, |d| {
                    for (r, (drow, grow)) in d.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                        if !rows.iter().any(|&(rr, _)| rr == r) {
                            add_into(drow, grow);
                        }
                    }
                });
                for &(r, v) in rows {
                    self.acc(grads, v, |d| add_into(d, &g[r * n..(r + 1) * n]));
                }
            }
            Op::Reshape(a) => {
                self.acc(grads, *a, |d| add_into(d, g));
            }
            Op::OffDiagSqSum(a) => {
                let av = self.value(*a);
                let (m, n) = (av.rows(), av.cols());
                self.acc(grads, *a, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            if i != j {
                                d[i * n + j] += 2.0 * g[0] * av.get(i, j);
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    for (x, y) in d.iter_mut().zip(g) {
        *x += y;
    }
}
