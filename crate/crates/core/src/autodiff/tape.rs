//! Dynamic reverse-mode tape.
//!
//! Every forward op appends one node whose inputs already live on the tape, so the
//! node list is a topological order and `backward` is a single reverse sweep.

use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{gemm, gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor, TensorError, TensorResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for ops defined outside this module.
pub trait BackwardRule {
    /// One gradient buffer per input, each the length of that input's value
    /// (`None` when the input receives no gradient).
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf { param: Option<ParamId>, requires_grad: bool },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Log1p(Var),
    Sum(Var),
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    AddBiasRows(Var, Var),
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        valid: usize,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn BackwardRule>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    param_leaves: HashMap<ParamId, Var>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> TensorResult<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorResult<Var> {
        self.push(
            "leaf",
            value,
            Op::Leaf {
                param: None,
                requires_grad,
            },
        )
    }

    pub fn constant(&mut self, value: Tensor) -> TensorResult<Var> {
        self.leaf(value, false)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> TensorResult<Var> {
        if let Some(&v) = self.param_leaves.get(&id) {
            return Ok(v);
        }
        let v = self.push(
            "param",
            store.get(id).clone(),
            Op::Leaf {
                param: Some(id),
                requires_grad: true,
            },
        )?;
        self.param_leaves.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.expect_matrix("matmul")?;
        let (k2, n) = bv.expect_matrix("matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", av, bv));
        }
        let out = Tensor::matrix(m, n, gemm(av.data(), bv.data(), m, k, n))?;
        self.push("matmul", out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.expect_matrix("matmul_t")?;
        let (n, k2) = bv.expect_matrix("matmul_t")?;
        if k != k2 {
            return Err(mismatch("matmul_t", av, bv));
        }
        let mut data = vec![0.0; m * n];
        gemm_nt_acc(av.data(), bv.data(), m, k, n, &mut data);
        let out = Tensor::matrix(m, n, data)?;
        self.push("matmul_t", out, Op::MatMulT(a, b))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> TensorResult<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(av.shape().to_vec(), data)?
        } else if bv.len() == 1 {
            let y = bv.item();
            av.map(|x| f(x, y))
        } else if av.len() == 1 {
            let x = av.item();
            bv.map(|y| f(x, y))
        } else {
            return Err(mismatch(name, av, bv));
        };
        self.push(name, out, op)
    }

    /// Elementwise sum; either operand may be a single-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> TensorResult<Var> {
        let out = self.value(a).map(|x| x * factor);
        self.push("scale", out, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> TensorResult<Var> {
        let out = self.value(a).map(|x| x + offset);
        self.push("add_scalar", out, Op::AddScalar(a))
    }

    /// `1 − a`.
    pub fn one_minus(&mut self, a: Var) -> TensorResult<Var> {
        let neg = self.scale(a, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> TensorResult<Var> {
        let out = self.value(a).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> TensorResult<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push("tanh", out, Op::Tanh(a))
    }

    pub fn log1p(&mut self, a: Var) -> TensorResult<Var> {
        let out = self.value(a).map(f64::ln_1p);
        self.push("log1p", out, Op::Log1p(a))
    }

    /// Sum of all elements as a 1×1 tensor.
    pub fn sum(&mut self, a: Var) -> TensorResult<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    /// Column-wise mean over rows: `n×d → 1×d`.
    pub fn mean_rows(&mut self, a: Var) -> TensorResult<Var> {
        let av = self.value(a);
        let (n, d) = av.expect_matrix("mean_rows")?;
        if n == 0 {
            return Err(TensorError::EmptyInput { op: "mean_rows" });
        }
        let mut out = vec![0.0; d];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(av.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let out = Tensor::matrix(1, d, out)?;
        self.push("mean_rows", out, Op::MeanRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> TensorResult<Var> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat_cols" });
        }
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            let (r, c) = pv.expect_matrix("concat_cols")?;
            if r != rows {
                return Err(mismatch("concat_cols", self.value(parts[0]), pv));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> TensorResult<Var> {
        let av = self.value(a);
        let (_, cols) = av.expect_matrix("slice_cols")?;
        if start >= end || end > cols {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                bound: cols,
            });
        }
        let out = av.slice_cols(start, end);
        self.push("slice_cols", out, Op::SliceCols(a, start))
    }

    /// Splits the last dimension into `parts` equal, ordered slices.
    pub fn split_cols(&mut self, a: Var, parts: usize) -> TensorResult<Vec<Var>> {
        let width = self.value(a).cols();
        if parts == 0 || !width.is_multiple_of(parts) {
            return Err(TensorError::NotDivisible { width, parts });
        }
        let w = width / parts;
        (0..parts)
            .map(|h| self.slice_cols(a, h * w, (h + 1) * w))
            .collect()
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> TensorResult<Var> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat_rows" });
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            let (r, c) = pv.expect_matrix("concat_rows")?;
            if c != cols {
                return Err(mismatch("concat_rows", self.value(parts[0]), pv));
            }
            rows += r;
            data.extend_from_slice(pv.data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> TensorResult<Var> {
        let av = self.value(a);
        let (rows, cols) = av.expect_matrix("slice_rows")?;
        if start >= end || end > rows {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: end,
                bound: rows,
            });
        }
        let out = Tensor::matrix(end - start, cols, av.data()[start * cols..end * cols].to_vec())?;
        self.push("slice_rows", out, Op::SliceRows(a, start))
    }

    /// Row lookup `table[indices]` (embedding gather).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> TensorResult<Var> {
        let tv = self.value(table);
        let (rows, cols) = tv.expect_matrix("gather_rows")?;
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
            data.extend_from_slice(tv.row(i));
        }
        if indices.is_empty() {
            return Err(TensorError::EmptyInput { op: "gather_rows" });
        }
        let out = Tensor::matrix(indices.len(), cols, data)?;
        self.push("gather_rows", out, Op::GatherRows(table, indices.to_vec()))
    }

    /// Adds a `1×c` bias row to every row of an `n×c` matrix.
    pub fn add_bias_rows(&mut self, a: Var, bias: Var) -> TensorResult<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let (n, c) = av.expect_matrix("add_bias_rows")?;
        if bv.shape() != [1, c] {
            return Err(mismatch("add_bias_rows", av, bv));
        }
        let mut data = av.data().to_vec();
        for r in 0..n {
            for (o, b) in data[r * c..(r + 1) * c].iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let out = Tensor::matrix(n, c, data)?;
        self.push("add_bias_rows", out, Op::AddBiasRows(a, bias))
    }

    /// Mean over unmasked rows of `−log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> TensorResult<Var> {
        let lv = self.value(logits);
        let (n, c) = lv.expect_matrix("softmax_cross_entropy")?;
        if targets.len() != n || mask.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: vec![n],
                right: vec![targets.len(), mask.len()],
            });
        }
        let valid = mask.iter().filter(|&&m| m).count();
        if valid == 0 {
            return Err(TensorError::AllMasked {
                op: "softmax_cross_entropy",
            });
        }
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for r in 0..n {
            if !mask[r] {
                continue;
            }
            let t = targets[r];
            if t >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "softmax_cross_entropy",
                    index: t,
                    bound: c,
                });
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &x) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            probs[r * c..(r + 1) * c].iter_mut().for_each(|p| *p /= z);
            total += max + z.ln() - row[t];
        }
        let out = Tensor::scalar(total / valid as f64);
        self.push(
            "softmax_cross_entropy",
            out,
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                valid,
            },
        )
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        value: Tensor,
        rule: Box<dyn BackwardRule>,
    ) -> TensorResult<Var> {
        self.push(
            name,
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
        )
    }

    fn acc(grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
        match &mut grads[v.0] {
            Some(g) => {
                for (a, d) in g.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta.to_vec()),
        }
    }

    /// Gradient of a possibly broadcast operand: sums when the operand was a scalar.
    fn acc_broadcast(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if self.value(v).len() == 1 && delta.len() != 1 {
            let s: f64 = delta.iter().sum();
            Self::acc(grads, v, &[s]);
        } else {
            Self::acc(grads, v, &delta);
        }
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> TensorResult<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let out = &node.value;
            match &node.op {
                Op::Leaf { .. } => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = (av.rows(), av.cols());
                    let n = bv.cols();
                    let mut da = vec![0.0; m * k];
                    gemm_nt_acc(&g, bv.data(), m, n, k, &mut da);
                    let mut db = vec![0.0; k * n];
                    gemm_tn_acc(av.data(), &g, m, k, n, &mut db);
                    Self::acc(&mut grads, *a, &da);
                    Self::acc(&mut grads, *b, &db);
                }
                Op::MatMulT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = (av.rows(), av.cols());
                    let n = bv.rows();
                    let mut da = vec![0.0; m * k];
                    gemm_acc(&g, bv.data(), m, n, k, &mut da);
                    let mut db = vec![0.0; n * k];
                    gemm_tn_acc(&g, av.data(), m, n, k, &mut db);
                    Self::acc(&mut grads, *a, &da);
                    Self::acc(&mut grads, *b, &db);
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    self.acc_broadcast(&mut grads, *a, g.clone());
                    self.acc_broadcast(&mut grads, *b, g.iter().map(|x| sign * x).collect());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let pick = |t: &Tensor, i: usize| if t.len() == 1 { t.item() } else { t.data()[i] };
                    let da = (0..g.len()).map(|i| g[i] * pick(bv, i)).collect();
                    let db = (0..g.len()).map(|i| g[i] * pick(av, i)).collect();
                    self.acc_broadcast(&mut grads, *a, da);
                    self.acc_broadcast(&mut grads, *b, db);
                }
                Op::Scale(a, f) => {
                    let da: Vec<f64> = g.iter().map(|x| x * f).collect();
                    Self::acc(&mut grads, *a, &da);
                }
                Op::AddScalar(a) => Self::acc(&mut grads, *a, &g),
                Op::Sigmoid(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(out.data())
                        .map(|(g, s)| g * s * (1.0 - s))
                        .collect();
                    Self::acc(&mut grads, *a, &da);
                }
                Op::Tanh(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(out.data())
                        .map(|(g, t)| g * (1.0 - t * t))
                        .collect();
                    Self::acc(&mut grads, *a, &da);
                }
                Op::Log1p(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(g, x)| g / (1.0 + x))
                        .collect();
                    Self::acc(&mut grads, *a, &da);
                }
                Op::Sum(a) => {
                    let da = vec![g[0]; self.value(*a).len()];
                    Self::acc(&mut grads, *a, &da);
                }
                Op::MeanRows(a) => {
                    let av = self.value(*a);
                    let (n, d) = (av.rows(), av.cols());
                    let mut da = Vec::with_capacity(n * d);
                    for _ in 0..n {
                        da.extend(g.iter().map(|x| x / n as f64));
                    }
                    Self::acc(&mut grads, *a, &da);
                }
                Op::ConcatCols(parts) => {
                    let total = out.cols();
                    let mut offset = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let (r, c) = (pv.rows(), pv.cols());
                        let mut dp = Vec::with_capacity(r * c);
                        for row in 0..r {
                            dp.extend_from_slice(&g[row * total + offset..row * total + offset + c]);
                        }
                        Self::acc(&mut grads, *p, &dp);
                        offset += c;
                    }
                }
                Op::SliceCols(a, start) => {
                    let av = self.value(*a);
                    let (r, c) = (av.rows(), av.cols());
                    let w = out.cols();
                    let mut da = vec![0.0; r * c];
                    for row in 0..r {
                        da[row * c + start..row * c + start + w]
                            .copy_from_slice(&g[row * w..(row + 1) * w]);
                    }
                    Self::acc(&mut grads, *a, &da);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.value(*p).len();
                        Self::acc(&mut grads, *p, &g[offset..offset + len]);
                        offset += len;
                    }
                }
                Op::SliceRows(a, start) => {
                    let av = self.value(*a);
                    let c = av.cols();
                    let mut da = vec![0.0; av.len()];
                    da[start * c..start * c + g.len()].copy_from_slice(&g);
                    Self::acc(&mut grads, *a, &da);
                }
                Op::GatherRows(table, indices) => {
                    let tv = self.value(*table);
                    let c = tv.cols();
                    let mut dt = vec![0.0; tv.len()];
                    for (r, &i) in indices.iter().enumerate() {
                        for (d, x) in dt[i * c..(i + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                            *d += x;
                        }
                    }
                    Self::acc(&mut grads, *table, &dt);
                }
                Op::AddBiasRows(a, bias) => {
                    let c = out.cols();
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    Self::acc(&mut grads, *a, &g);
                    Self::acc(&mut grads, *bias, &db);
                }
                Op::SoftmaxCe {
                    logits,
                    targets,
                    mask,
                    probs,
                    valid,
                } => {
                    let c = self.value(*logits).cols();
                    let scale = g[0] / *valid as f64;
                    let mut dl = vec![0.0; probs.len()];
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            continue;
                        }
                        for j in 0..c {
                            dl[r * c + j] = scale * probs[r * c + j];
                        }
                        dl[r * c + targets[r]] -= scale;
                    }
                    Self::acc(&mut grads, *logits, &dl);
                }
                Op::Custom { inputs, rule } => {
                    let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                    let deltas = rule.backward(&values, out, &g);
                    for (v, d) in inputs.iter().zip(deltas) {
                        if let Some(d) = d {
                            Self::acc(&mut grads, *v, &d);
                        }
                    }
                }
            }
            grads[idx] = Some(g);
        }

        let mut result = Gradients::new();
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if let Op::Leaf {
                param,
                requires_grad,
            } = &self.nodes[i].op
            {
                if let Some(id) = param {
                    result.add(*id, &g);
                }
                if !requires_grad {
                    continue;
                }
            } else {
                continue;
            }
            if self.grads.len() < self.nodes.len() {
                self.grads.resize(self.nodes.len(), None);
            }
            Self::acc(&mut self.grads, Var(i), &g);
        }
        Ok(result)
    }
}
