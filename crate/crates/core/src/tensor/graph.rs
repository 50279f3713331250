use std::collections::HashMap;

use super::kernels::{axpy, dot, gemm_nn, gemm_nt, gemm_tn, softmax_in_place};
use super::{Scalar, Tensor, TensorError};
use crate::instrument;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SoftmaxRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        rows: Vec<usize>,
        probs: Vec<T>,
        targets: Vec<usize>,
    },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    trainable: bool,
}

/// Reverse-mode tape. One graph per step; nodes are appended in
/// evaluation order so the reverse index order is a valid topological order.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    record: bool,
    backward_done: bool,
}

/// Gradients of the trainable leaves after [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A recording tape. Counted by [`instrument::tapes_created`].
    pub fn new() -> Self {
        instrument::count_tape();
        Self {
            nodes: Vec::new(),
            record: true,
            backward_done: false,
        }
    }

    /// An evaluation arena: same op surface, no backward information kept.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
            backward_done: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            trainable: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        let trainable = trainable && self.record;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: trainable,
            trainable,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf; its gradient is reported by `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var, TensorError> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var, TensorError> {
        self.leaf(value, false)
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 || self.value(b).shape().len() != 2 {
            return Err(mismatch("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), out.data_mut());
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `a[m,k] · b[n,k]ᵀ`: a linear layer with weight stored `[out, in]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        if k != k2 || self.value(b).shape().len() != 2 {
            return Err(mismatch("matmul_t", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm_nt(m, k, n, self.value(a).data(), self.value(b).data(), out.data_mut());
        self.push("matmul_t", out, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).add(self.value(b))?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `[1,n]` (or `[n]`) row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (ta, tr) = (self.value(a), self.value(row));
        let n = ta.cols();
        if tr.len() != n {
            return Err(mismatch("add_row", ta.shape(), tr.shape()));
        }
        let mut out = ta.clone();
        for r in out.data_mut().chunks_mut(n) {
            for (x, &b) in r.iter_mut().zip(tr.data()) {
                *x = *x + b;
            }
        }
        self.push("add_row", out, Op::AddRow(a, row), &[a, row])
    }

    /// Multiplies row `i` of `a` by `col[i]`; `col` is `[m,1]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var, TensorError> {
        let (ta, tc) = (self.value(a), self.value(col));
        let (m, n) = (ta.rows(), ta.cols());
        if tc.len() != m {
            return Err(mismatch("mul_col", ta.shape(), tc.shape()));
        }
        let mut out = ta.clone();
        for (r, &s) in out.data_mut().chunks_mut(n).zip(tc.data()) {
            for x in r.iter_mut() {
                *x = *x * s;
            }
        }
        self.push("mul_col", out, Op::MulCol(a, col), &[a, col])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let s = T::from_f64(s);
        let out = self.value(a).scale(s);
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    fn map(&mut self, name: &'static str, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, out, op, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map("sigmoid", a, Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map("relu", a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let c = T::from_f64(GELU_C);
        let k = T::from_f64(GELU_K);
        let half = T::from_f64(0.5);
        self.map("gelu", a, Op::Gelu(a), move |x| {
            half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
        })
    }

    /// Row-wise layer norm with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let (m, n) = (tx.rows(), tx.cols());
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(mismatch("layer_norm", tx.shape(), self.value(gain).shape()));
        }
        let eps = T::from_f64(LN_EPS);
        let inv_n = T::from_f64(1.0 / n as f64);
        let mut xhat = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        let mut out = Tensor::zeros(tx.shape());
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        for i in 0..m {
            let row = &tx.data()[i * n..(i + 1) * n];
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) * inv_n;
            let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) * inv_n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            let xh = &mut xhat[i * n..(i + 1) * n];
            let o = &mut out.data_mut()[i * n..(i + 1) * n];
            for j in 0..n {
                xh[j] = (row[j] - mean) * is;
                o[j] = xh[j] * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        self.push("layer_norm", out, op, &[x, gain, bias])
    }

    /// Gathers rows of `table` (`[V,d]`) by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let tt = self.value(table);
        let (v, d) = (tt.rows(), tt.cols());
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (i, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(TensorError::IndexOutOfRange { index: id, extent: v });
            }
            out.data_mut()[i * d..(i + 1) * d].copy_from_slice(tt.row(id));
        }
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        self.push("embedding", out, op, &[table])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let mut out = self.value(a).clone();
        let n = out.cols();
        for r in out.data_mut().chunks_mut(n) {
            softmax_in_place(r);
        }
        self.push("softmax", out, Op::SoftmaxRows(a), &[a])
    }

    /// Causal multi-head self-attention over `batch` sequences of length
    /// `seq`, laid out as `[batch*seq, d]` for each of q, k, v.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var, TensorError> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() || tq.rows() != batch * seq || d % heads != 0 {
            return Err(mismatch("attention", tq.shape(), tk.shape()));
        }
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = Tensor::zeros(tq.shape());
        let mut scores = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let qi = &tq.data()[(b * seq + i) * d + off..(b * seq + i) * d + off + dh];
                    for j in 0..=i {
                        let kj = &tk.data()[(b * seq + j) * d + off..(b * seq + j) * d + off + dh];
                        scores[j] = dot(qi, kj) * scale;
                    }
                    softmax_in_place(&mut scores[..=i]);
                    let base = ((b * heads + h) * seq + i) * seq;
                    probs[base..base + i + 1].copy_from_slice(&scores[..=i]);
                    let orow = &mut out.data_mut()[(b * seq + i) * d + off..(b * seq + i) * d + off + dh];
                    for j in 0..=i {
                        let vj = &tv.data()[(b * seq + j) * d + off..(b * seq + j) * d + off + dh];
                        axpy(orow, scores[j], vj);
                    }
                }
            }
        }
        let op = Op::Attention {
            q,
            k,
            v,
            batch,
            seq,
            heads,
            probs: if self.record { probs } else { Vec::new() },
        };
        self.push("attention", out, op, &[q, k, v])
    }

    /// Mean negative log-likelihood of `targets[i]` under row `rows[i]` of
    /// `logits`.
    pub fn cross_entropy(&mut self, logits: Var, rows: &[usize], targets: &[usize]) -> Result<Var, TensorError> {
        if rows.is_empty() {
            return Err(TensorError::EmptyMask);
        }
        if rows.len() != targets.len() {
            return Err(mismatch("cross_entropy", &[rows.len()], &[targets.len()]));
        }
        let tl = self.value(logits);
        let (m, v) = (tl.rows(), tl.cols());
        let mut probs = vec![T::zero(); rows.len() * v];
        let mut total = T::zero();
        for (i, (&r, &t)) in rows.iter().zip(targets).enumerate() {
            if r >= m {
                return Err(TensorError::IndexOutOfRange { index: r, extent: m });
            }
            if t >= v {
                return Err(TensorError::IndexOutOfRange { index: t, extent: v });
            }
            let p = &mut probs[i * v..(i + 1) * v];
            p.copy_from_slice(tl.row(r));
            let max = p.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for x in p.iter_mut() {
                *x = (*x - max).exp();
                sum = sum + *x;
            }
            // log-softmax at the target, computed from the shifted logits
            total = total + (sum.ln() - (tl.row(r)[t] - max));
            for x in p.iter_mut() {
                *x = *x / sum;
            }
        }
        let loss = total / T::from_f64(rows.len() as f64);
        let op = Op::CrossEntropy {
            logits,
            rows: rows.to_vec(),
            probs,
            targets: targets.to_vec(),
        };
        self.push("cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).data().iter().fold(T::zero(), |s, &x| s + x);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Clears a finished backward pass so the tape can be differentiated again.
    pub fn reset(&mut self) {
        self.backward_done = false;
    }

    /// Propagates d`loss` to every trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if !self.record {
            return Err(TensorError::NoGradTape);
        }
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(self.value(loss).shape().to_vec()));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if node.trainable {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }

        let mut out = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.trainable {
                let data = grads[i].take().unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                out.insert(Var(i), Tensor::new(node.value.shape().to_vec(), data)?);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[idx];
        let val = |v: Var| &nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                // dA = dC · Bᵀ ; dB = Aᵀ · dC
                acc(*a, &mut |ga| gemm_nt(m, n, k, g, val(*b).data(), ga));
                acc(*b, &mut |gb| gemm_tn(m, k, n, val(*a).data(), g, gb));
            }
            Op::MatMulT(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).rows();
                // C = A·Bᵀ: dA = dC · B ; dB = dCᵀ · A
                acc(*a, &mut |ga| gemm_nn(m, n, k, g, val(*b).data(), ga));
                acc(*b, &mut |gb| gemm_tn(m, n, k, g, val(*a).data(), gb));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| axpy(ga, T::one(), g));
                acc(*b, &mut |gb| axpy(gb, T::one(), g));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + g[i] * tb[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] = gb[i] + g[i] * ta[i];
                    }
                });
            }
            Op::AddRow(a, row) => {
                let n = val(*a).cols();
                acc(*a, &mut |ga| axpy(ga, T::one(), g));
                acc(*row, &mut |gr| {
                    for r in g.chunks(n) {
                        axpy(gr, T::one(), r);
                    }
                });
            }
            Op::MulCol(a, col) => {
                let n = val(*a).cols();
                let (ta, tc) = (val(*a).data(), val(*col).data());
                acc(*a, &mut |ga| {
                    for (i, &s) in tc.iter().enumerate() {
                        axpy(&mut ga[i * n..(i + 1) * n], s, &g[i * n..(i + 1) * n]);
                    }
                });
                acc(*col, &mut |gc| {
                    for i in 0..gc.len() {
                        gc[i] = gc[i] + dot(&g[i * n..(i + 1) * n], &ta[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| axpy(ga, *s, g)),
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + g[i] * y[i] * (T::one() - y[i]);
                    }
                });
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if x[i] > T::zero() {
                            ga[i] = ga[i] + g[i];
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = val(*a).data();
                let c = T::from_f64(GELU_C);
                let k = T::from_f64(GELU_K);
                let half = T::from_f64(0.5);
                let three = T::from_f64(3.0);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        let xi = x[i];
                        let t = (c * (xi + k * xi * xi * xi)).tanh();
                        let d = half * (T::one() + t)
                            + half * xi * (T::one() - t * t) * c * (T::one() + three * k * xi * xi);
                        ga[i] = ga[i] + g[i] * d;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = val(*x).cols();
                let m = val(*x).rows();
                let gv = val(*gain).data();
                acc(*gain, &mut |gg| {
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] = gg[j] + g[i * n + j] * xhat[i * n + j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for r in g.chunks(n) {
                        axpy(gb, T::one(), r);
                    }
                });
                let inv_n = T::from_f64(1.0 / n as f64);
                acc(*x, &mut |gx| {
                    let mut dxhat = vec![T::zero(); n];
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        let xh = &xhat[i * n..(i + 1) * n];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            dxhat[j] = gr[j] * gv[j];
                            s1 = s1 + dxhat[j];
                            s2 = s2 + dxhat[j] * xh[j];
                        }
                        let (m1, m2) = (s1 * inv_n, s2 * inv_n);
                        let out = &mut gx[i * n..(i + 1) * n];
                        for j in 0..n {
                            out[j] = out[j] + inv_std[i] * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = val(*table).cols();
                acc(*table, &mut |gt| {
                    for (i, &id) in ids.iter().enumerate() {
                        axpy(&mut gt[id * d..(id + 1) * d], T::one(), &g[i * d..(i + 1) * d]);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let n = node.value.cols();
                acc(*a, &mut |ga| {
                    for (r, (yr, gr)) in y.chunks(n).zip(g.chunks(n)).enumerate() {
                        let s = dot(yr, gr);
                        for j in 0..n {
                            ga[r * n + j] = ga[r * n + j] + yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let d = val(*q).cols();
                let dh = d / heads;
                let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                let (tq, tk, tv) = (val(*q).data(), val(*k).data(), val(*v).data());
                let mut dq = vec![T::zero(); tq.len()];
                let mut dk = vec![T::zero(); tk.len()];
                let mut dv = vec![T::zero(); tv.len()];
                let mut dp = vec![T::zero(); seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = h * dh;
                        for i in 0..seq {
                            let row_i = (b * seq + i) * d + off;
                            let go = &g[row_i..row_i + dh];
                            let base = ((b * heads + h) * seq + i) * seq;
                            let p = &probs[base..base + i + 1];
                            let mut s = T::zero();
                            for j in 0..=i {
                                let row_j = (b * seq + j) * d + off;
                                dp[j] = dot(go, &tv[row_j..row_j + dh]);
                                s = s + p[j] * dp[j];
                                axpy(&mut dv[row_j..row_j + dh], p[j], go);
                            }
                            for j in 0..=i {
                                let row_j = (b * seq + j) * d + off;
                                let ds = p[j] * (dp[j] - s) * scale;
                                axpy(&mut dq[row_i..row_i + dh], ds, &tk[row_j..row_j + dh]);
                                axpy(&mut dk[row_j..row_j + dh], ds, &tq[row_i..row_i + dh]);
                            }
                        }
                    }
                }
                acc(*q, &mut |x| axpy(x, T::one(), &dq));
                acc(*k, &mut |x| axpy(x, T::one(), &dk));
                acc(*v, &mut |x| axpy(x, T::one(), &dv));
            }
            Op::CrossEntropy {
                logits,
                rows,
                probs,
                targets,
            } => {
                let v = val(*logits).cols();
                let scale = g[0] / T::from_f64(rows.len() as f64);
                acc(*logits, &mut |gl| {
                    for (i, (&r, &t)) in rows.iter().zip(targets).enumerate() {
                        let dst = &mut gl[r * v..(r + 1) * v];
                        axpy(dst, scale, &probs[i * v..(i + 1) * v]);
                        dst[t] = dst[t] - scale;
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| {
                for x in ga.iter_mut() {
                    *x = *x + g[0];
                }
            }),
        }
    }

    /// True when `v` participates in differentiation on this tape.
    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(sum(w ⊙ f(inputs)))/d(inputs) against
    /// the tape, where `w` is a fixed random weighting.
    fn check(shapes: &[Vec<usize>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();

        let eval = |inputs: &[Tensor<f64>]| -> (f64, Option<Vec<Tensor<f64>>>) {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone()).unwrap()).collect();
            let out = f(&mut g, &vars);
            let mut wrng = ChaCha8Rng::seed_from_u64(99);
            let w = rand_tensor(&mut wrng, g.value(out).shape());
            let wv = g.constant(w).unwrap();
            let weighted = g.mul(out, wv).unwrap();
            let loss = g.sum(weighted).unwrap();
            let value = g.value(loss).data()[0];
            let grads = g.backward(loss).unwrap();
            (value, Some(vars.iter().map(|v| grads.get(*v).unwrap().clone()).collect()))
        };

        let (_, analytic) = eval(&inputs);
        let analytic = analytic.unwrap();
        let h = 1e-5;
        for (which, t) in inputs.iter().enumerate() {
            for idx in 0..t.len() {
                let mut plus = inputs.clone();
                plus[which].data_mut()[idx] += h;
                let mut minus = inputs.clone();
                minus[which].data_mut()[idx] -= h;
                let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let a = analytic[which].data()[idx];
                let denom = numeric.abs().max(a.abs()).max(1e-3);
                let rel = (numeric - a).abs() / denom;
                assert!(rel <= 1e-4, "input {which}[{idx}]: analytic {a} numeric {numeric} rel {rel}");
            }
        }
    }

    #[test]
    fn grad_matmul_variants() {
        check(&[vec![3, 4], vec![4, 2]], |g, v| g.matmul(v[0], v[1]).unwrap());
        check(&[vec![3, 4], vec![5, 4]], |g, v| g.matmul_t(v[0], v[1]).unwrap());
    }

    #[test]
    fn grad_elementwise_and_broadcast() {
        check(&[vec![2, 3], vec![2, 3]], |g, v| g.add(v[0], v[1]).unwrap());
        check(&[vec![2, 3], vec![2, 3]], |g, v| g.mul(v[0], v[1]).unwrap());
        check(&[vec![4, 3], vec![1, 3]], |g, v| g.add_row(v[0], v[1]).unwrap());
        check(&[vec![4, 3], vec![4, 1]], |g, v| g.mul_col(v[0], v[1]).unwrap());
        check(&[vec![2, 5]], |g, v| g.scale(v[0], -1.7).unwrap());
    }

    #[test]
    fn grad_activations() {
        check(&[vec![3, 4]], |g, v| g.sigmoid(v[0]).unwrap());
        check(&[vec![3, 4]], |g, v| g.gelu(v[0]).unwrap());
        check(&[vec![3, 5]], |g, v| g.softmax_rows(v[0]).unwrap());
    }

    #[test]
    fn grad_layer_norm() {
        check(&[vec![3, 6], vec![1, 6], vec![1, 6]], |g, v| g.layer_norm(v[0], v[1], v[2]).unwrap());
    }

    #[test]
    fn grad_embedding() {
        check(&[vec![5, 3]], |g, v| g.embedding(v[0], &[4, 0, 4, 2]).unwrap());
    }

    #[test]
    fn grad_attention() {
        check(&[vec![6, 4], vec![6, 4], vec![6, 4]], |g, v| {
            g.causal_attention(v[0], v[1], v[2], 2, 3, 2).unwrap()
        });
    }

    #[test]
    fn grad_cross_entropy() {
        check(&[vec![4, 5]], |g, v| g.cross_entropy(v[0], &[0, 2, 3], &[1, 4, 0]).unwrap());
    }

    #[test]
    fn linear_sum_gradient_is_outer_structure() {
        // loss = sum(W x) ⇒ dW[i,j] = x[j]
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]])).unwrap();
        let x = g.constant(Tensor::from_rows(&[&[0.5, -1.0, 2.0]])).unwrap();
        let y = g.matmul_t(x, w).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::from_rows(&[&[1.0, 2.0]])).unwrap();
        let c = g.constant(Tensor::scalar(3.0)).unwrap();
        let loss = g.sum(c).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_twice_requires_reset() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::from_rows(&[&[1.0, 2.0]])).unwrap();
        let loss = g.sum(w).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.backward(loss).unwrap_err(), TensorError::BackwardTwice);
        g.reset();
        assert!(g.backward(loss).is_ok());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::from_rows(&[&[1.0, 2.0]])).unwrap();
        assert!(matches!(g.backward(w), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn cross_entropy_limits() {
        let mut g = Graph::<f64>::new();
        let uniform = g.constant(Tensor::zeros(&[2, 8])).unwrap();
        let loss = g.cross_entropy(uniform, &[0, 1], &[3, 5]).unwrap();
        assert!((g.value(loss).data()[0] - 8f64.ln()).abs() < 1e-12);

        let peaked = g
            .constant(Tensor::from_rows(&[&[50.0, 0.0, 0.0]]))
            .unwrap();
        let loss = g.cross_entropy(peaked, &[0], &[0]).unwrap();
        assert!(g.value(loss).data()[0] < 1e-20);

        assert_eq!(g.cross_entropy(peaked, &[], &[]).unwrap_err(), TensorError::EmptyMask);
    }

    #[test]
    fn cross_entropy_three_class_hand_case() {
        // logits [1, 2, 0], target 1: -ln(e² / (e + e² + 1))
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::from_rows(&[&[1.0, 2.0, 0.0]])).unwrap();
        let loss = g.cross_entropy(l, &[0], &[1]).unwrap();
        let e = std::f64::consts::E;
        let want = -(e * e / (e + e * e + 1.0)).ln();
        assert!((g.value(loss).data()[0] - want).abs() < 1e-12);
        assert!((want - 0.407_605_964_444_380_3).abs() < 1e-12);
    }

    #[test]
    fn inference_tape_rejects_backward_and_is_not_counted() {
        let before = instrument::tapes_created();
        let mut g = Graph::<f32>::inference();
        let w = g.param(Tensor::scalar(1.0)).unwrap();
        let s = g.sum(w).unwrap();
        assert_eq!(g.backward(s).unwrap_err(), TensorError::NoGradTape);
        assert_eq!(instrument::tapes_created(), before);
    }

    #[test]
    fn non_finite_value_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::scalar(1e300)).unwrap();
        let y = g.constant(Tensor::scalar(1e300)).unwrap();
        assert!(matches!(g.mul(x, y), Err(TensorError::NonFinite { op: "mul" })));
    }
}
