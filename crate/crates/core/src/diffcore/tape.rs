//! Operation tape with reverse-mode accumulation.
//!
//! Every op evaluates eagerly and records enough to run its reverse rule.
//! Parameters are borrowed from a [`ParamBlock`] rather than copied.

use super::params::{Grads, ParamBlock, ParamId};
use super::tensor::{dot, mm, mm_at, mm_bt, sigmoid, silu, Tensor};
use crate::error::DiffError;

pub const RMS_EPS: f64 = 1e-8;
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean attention/softmax mask: `true` marks an allowed entry. This is the
/// additive `{0, -inf}` mask written as booleans.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allow: Vec<bool>) -> Self {
        assert_eq!(allow.len(), rows * cols);
        Self { rows, cols, allow }
    }

    pub fn all(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![true; rows * cols])
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        Self::new(rows.len(), cols, rows.iter().flatten().copied().collect())
    }

    /// Accepts an additive mask with entries `0` (allowed) or `-inf` (blocked).
    pub fn from_additive(t: &Tensor) -> Self {
        Self::new(t.rows(), t.cols(), t.data().iter().map(|&v| v != f64::NEG_INFINITY).collect())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.allow[r * self.cols..(r + 1) * self.cols]
    }

    pub fn allowed(&self, r: usize, c: usize) -> bool {
        self.allow[r * self.cols + c]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Silu,
    Relu,
    Tanh,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    RmsNorm { x: Var, gain: Var, inv: Vec<f64> },
    InstanceNorm { x: Var, gain: Var, bias: Var, xhat: Tensor, inv: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    LogSoftmax { x: Var, mask: Option<Mask> },
    GatherRows { x: Var, idx: Vec<usize> },
    MeanRows(Var),
    ConcatCols(Var, Var),
    PickSum { x: Var, picks: Vec<(usize, usize, f64)> },
    Sum(Vec<Var>),
    SumAll(Var),
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
}

/// Result of a reverse sweep.
pub struct Adjoints {
    grads: Vec<Option<Tensor>>,
    params: Grads,
}

impl Adjoints {
    /// Gradient with respect to a leaf or parameter node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn params(&self) -> &Grads {
        &self.params
    }

    pub fn into_params(self) -> Grads {
        self.params
    }
}

pub struct Tape<'p> {
    params: Option<&'p ParamBlock>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
    fault: Option<DiffError>,
    #[cfg(test)]
    corrupt: Option<Unary>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            params: None,
            param_vars: Vec::new(),
            nodes: Vec::new(),
            fault: None,
            #[cfg(test)]
            corrupt: None,
        }
    }

    pub fn with_params(params: &'p ParamBlock) -> Self {
        Self { params: Some(params), param_vars: vec![None; params.len()], ..Self::new() }
    }

    /// Breaks the reverse rule of one unary op; used to prove the gradient
    /// checker catches faulty derivatives.
    #[cfg(test)]
    pub(crate) fn corrupt_reverse_rule(&mut self, op: Unary) {
        self.corrupt = Some(op);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// First non-finite value produced on this tape, if any.
    pub fn status(&self) -> Result<(), DiffError> {
        match &self.fault {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.expect("param node without a parameter block").value(*id),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Var {
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some(DiffError::NonFinite(name));
        }
        self.nodes.push(Node { value: Value::Owned(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, "leaf")
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param(id) });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> DiffError {
        DiffError::Shape { op, lhs: self.value(a).shape(), rhs: self.value(b).shape() }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(self.shape_err("matmul", a, b));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Tensor::zeros(m, n);
        mm(ta.data(), tb.data(), out.data_mut(), m, k, n);
        Ok(self.push(out, Op::MatMul(a, b), "matmul"))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(self.shape_err("matmul_bt", a, b));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = Tensor::zeros(m, n);
        mm_bt(ta.data(), tb.data(), out.data_mut(), m, k, n);
        Ok(self.push(out, Op::MatMulBt(a, b), "matmul_bt"))
    }

    /// `x · W (+ b)`, the bias broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, DiffError> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(self.shape_err("add", a, b));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data);
        Ok(self.push(out, Op::Add(a, b), "add"))
    }

    /// Adds the `1 × c` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var, DiffError> {
        let (ta, tr) = (self.value(a), self.value(r));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(self.shape_err("add_row", a, r));
        }
        let mut out = ta.clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(tr.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, r), "add_row"))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(self.shape_err("mul", a, b));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data);
        Ok(self.push(out, Op::Mul(a, b), "mul"))
    }

    pub fn unary(&mut self, f: Unary, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .map(|&v| match f {
                Unary::Sigmoid => sigmoid(v),
                Unary::Silu => silu(v),
                Unary::Relu => v.max(0.0),
                Unary::Tanh => v.tanh(),
            })
            .collect();
        let out = Tensor::from_vec(tx.rows(), tx.cols(), data);
        self.push(out, Op::Unary(f, x), "unary")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(Unary::Silu, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale_assign(s);
        self.push(out, Op::Scale(x, s), "scale")
    }

    /// Row-wise `gain ⊙ x / sqrt(mean(x²) + ε)`.
    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var, DiffError> {
        let (tx, tg) = (self.value(x), self.value(gain));
        if tg.rows() != 1 || tg.cols() != tx.cols() || tx.cols() == 0 {
            return Err(self.shape_err("rmsnorm", x, gain));
        }
        let d = tx.cols() as f64;
        let mut out = Tensor::zeros(tx.rows(), tx.cols());
        let mut inv = Vec::with_capacity(tx.rows());
        for i in 0..tx.rows() {
            let row = tx.row(i);
            let r = 1.0 / (dot(row, row) / d + RMS_EPS).sqrt();
            inv.push(r);
            for ((o, &v), &g) in out.row_mut(i).iter_mut().zip(row).zip(tg.data()) {
                *o = g * v * r;
            }
        }
        Ok(self.push(out, Op::RmsNorm { x, gain, inv }, "rmsnorm"))
    }

    /// Per-feature normalization across rows (nodes) with affine gain/bias.
    pub fn instance_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, DiffError> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        if tg.shape() != (1, tx.cols()) || tb.shape() != (1, tx.cols()) {
            return Err(self.shape_err("instance_norm", x, gain));
        }
        let (n, c) = tx.shape();
        let mut xhat = Tensor::zeros(n, c);
        let mut inv = vec![0.0; c];
        for j in 0..c {
            let mean = (0..n).map(|i| tx.get(i, j)).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (tx.get(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
            inv[j] = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
            for i in 0..n {
                xhat.set(i, j, (tx.get(i, j) - mean) * inv[j]);
            }
        }
        let mut out = xhat.clone();
        for i in 0..n {
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = *o * tg.data()[j] + tb.data()[j];
            }
        }
        Ok(self.push(out, Op::InstanceNorm { x, gain, bias, xhat, inv }, "instance_norm"))
    }

    /// Multi-head scaled dot-product attention without the output projection:
    /// returns `Concat(Z_1..Z_H)` with `Z_j = softmax(Q_j K_jᵀ/√d_k + M) V_j`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&Mask>,
        heads: usize,
    ) -> Result<Var, DiffError> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        if heads == 0 || d % heads != 0 {
            return Err(DiffError::Heads { dim: d, heads });
        }
        if tk.cols() != d || tv.shape() != tk.shape() {
            return Err(self.shape_err("attention", q, k));
        }
        let (m, n) = (tq.rows(), tk.rows());
        if let Some(mask) = mask {
            if mask.shape() != (m, n) {
                return Err(DiffError::Shape { op: "attention mask", lhs: mask.shape(), rhs: (m, n) });
            }
            if let Some(r) = (0..m).find(|&r| !mask.row(r).iter().any(|&a| a)) {
                return Err(DiffError::AllMasked(r));
            }
        }
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut probs = vec![0.0; m * heads * n];
        let mut out = Tensor::zeros(m, d);
        let mut scores = vec![0.0; n];
        for i in 0..m {
            let qi = tq.row(i);
            for h in 0..heads {
                let span = h * dk..(h + 1) * dk;
                let qh = &qi[span.clone()];
                let mut mx = f64::NEG_INFINITY;
                for j in 0..n {
                    if mask.is_none_or(|mk| mk.allowed(i, j)) {
                        let s = dot(qh, &tk.row(j)[span.clone()]) * scale;
                        scores[j] = s;
                        mx = mx.max(s);
                    }
                }
                let p = &mut probs[(i * heads + h) * n..(i * heads + h + 1) * n];
                let mut z = 0.0;
                for j in 0..n {
                    if mask.is_none_or(|mk| mk.allowed(i, j)) {
                        p[j] = (scores[j] - mx).exp();
                        z += p[j];
                    }
                }
                let orow = &mut out.row_mut(i)[span.clone()];
                for j in 0..n {
                    if p[j] != 0.0 {
                        p[j] /= z;
                        for (o, &vv) in orow.iter_mut().zip(&tv.row(j)[span.clone()]) {
                            *o += p[j] * vv;
                        }
                    }
                }
            }
        }
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }, "attention"))
    }

    /// Attention probabilities recorded by an attention node, `[row][head][key]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Row-wise log-softmax. Masked entries come out as `-inf` (probability
    /// exactly zero) and receive no gradient.
    pub fn masked_log_softmax(&mut self, x: Var, mask: Option<Mask>) -> Result<Var, DiffError> {
        let tx = self.value(x);
        let (m, n) = tx.shape();
        if let Some(mk) = &mask {
            if mk.shape() != (m, n) {
                return Err(DiffError::Shape { op: "log_softmax mask", lhs: mk.shape(), rhs: (m, n) });
            }
        }
        let ok = |i: usize, j: usize| mask.as_ref().is_none_or(|mk| mk.allowed(i, j));
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let row = tx.row(i);
            let mut mx = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if ok(i, j) {
                    mx = mx.max(v);
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(DiffError::AllMasked(i));
            }
            let z: f64 = row.iter().enumerate().filter(|(j, _)| ok(i, *j)).map(|(_, &v)| (v - mx).exp()).sum();
            let lz = mx + z.ln();
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = if ok(i, j) { row[j] - lz } else { f64::NEG_INFINITY };
            }
        }
        let finite = (0..m).all(|i| (0..n).all(|j| !ok(i, j) || out.get(i, j).is_finite()));
        if self.fault.is_none() && !finite {
            self.fault = Some(DiffError::NonFinite("masked_log_softmax"));
        }
        self.nodes.push(Node { value: Value::Owned(out), op: Op::LogSoftmax { x, mask } });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let tx = self.value(x);
        let mut out = Tensor::zeros(idx.len(), tx.cols());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tx.row(i));
        }
        self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, "gather_rows")
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let mut out = Tensor::zeros(1, tx.cols());
        for i in 0..tx.rows() {
            for (o, &v) in out.data_mut().iter_mut().zip(tx.row(i)) {
                *o += v;
            }
        }
        out.scale_assign(1.0 / tx.rows() as f64);
        self.push(out, Op::MeanRows(x), "mean_rows")
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(self.shape_err("concat_cols", a, b));
        }
        let (ca, cb) = (ta.cols(), tb.cols());
        let mut out = Tensor::zeros(ta.rows(), ca + cb);
        for i in 0..ta.rows() {
            let row = out.row_mut(i);
            row[..ca].copy_from_slice(ta.row(i));
            row[ca..].copy_from_slice(tb.row(i));
        }
        Ok(self.push(out, Op::ConcatCols(a, b), "concat_cols"))
    }

    /// Scalar `Σ w · x[r, c]` over the listed entries.
    pub fn pick_sum(&mut self, x: Var, picks: Vec<(usize, usize, f64)>) -> Var {
        let tx = self.value(x);
        let s = picks.iter().map(|&(r, c, w)| w * tx.get(r, c)).sum();
        self.push(Tensor::scalar(s), Op::PickSum { x, picks }, "pick_sum")
    }

    /// Element-wise sum of equally shaped tensors.
    pub fn sum(&mut self, xs: Vec<Var>) -> Result<Var, DiffError> {
        let first = *xs.first().ok_or(DiffError::Shape { op: "sum", lhs: (0, 0), rhs: (0, 0) })?;
        let mut out = self.value(first).clone();
        for &x in &xs[1..] {
            if self.value(x).shape() != out.shape() {
                return Err(self.shape_err("sum", first, x));
            }
            out.add_assign(self.value(x));
        }
        Ok(self.push(out, Op::Sum(xs), "sum"))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), "sum_all")
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Adjoints, DiffError> {
        let tl = self.value(loss);
        if tl.shape() != (1, 1) {
            return Err(DiffError::Shape { op: "backward", lhs: tl.shape(), rhs: (1, 1) });
        }
        let n_params = self.params.map_or(0, |p| p.len());
        let mut params = match self.params {
            Some(p) => Grads::zeros_like(p),
            None => Grads::empty(),
        };
        debug_assert_eq!(params.len(), n_params);
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let g = match &self.nodes[idx].op {
                Op::Leaf => continue,
                Op::Param(id) => {
                    if let Some(g) = &grads[idx] {
                        params.get_mut(*id).add_assign(g);
                    }
                    continue;
                }
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.reverse(idx, &g, &mut grads);
        }
        Ok(Adjoints { grads, params })
    }

    fn reverse(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = self.value(Var(idx));
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                mm_bt(g.data(), tb.data(), acc(grads, *a, (m, k)).data_mut(), m, n, k);
                mm_at(ta.data(), g.data(), acc(grads, *b, (k, n)).data_mut(), m, k, n);
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                mm(g.data(), tb.data(), acc(grads, *a, (m, k)).data_mut(), m, n, k);
                mm_at(g.data(), ta.data(), acc(grads, *b, (n, k)).data_mut(), m, n, k);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.shape()).add_assign(g);
                acc(grads, *b, g.shape()).add_assign(g);
            }
            Op::AddRow(a, r) => {
                acc(grads, *a, g.shape()).add_assign(g);
                let gr = acc(grads, *r, (1, g.cols()));
                for i in 0..g.rows() {
                    for (o, &v) in gr.data_mut().iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = acc(grads, *a, g.shape());
                for ((o, &gv), &bv) in ga.data_mut().iter_mut().zip(g.data()).zip(tb.data()) {
                    *o += gv * bv;
                }
                let gb = acc(grads, *b, g.shape());
                for ((o, &gv), &av) in gb.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                    *o += gv * av;
                }
            }
            Op::Unary(f, x) => {
                let tx = self.value(*x);
                #[cfg(test)]
                let bias = if self.corrupt == Some(*f) { 0.25 } else { 0.0 };
                #[cfg(not(test))]
                let bias = 0.0;
                let gx = acc(grads, *x, g.shape());
                for (((o, &gv), &xv), &yv) in gx.data_mut().iter_mut().zip(g.data()).zip(tx.data()).zip(y.data()) {
                    let dydx = match f {
                        Unary::Sigmoid => yv * (1.0 - yv),
                        Unary::Silu => {
                            let s = sigmoid(xv);
                            s + xv * s * (1.0 - s)
                        }
                        Unary::Relu => {
                            if xv > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Tanh => 1.0 - yv * yv,
                    };
                    *o += gv * (dydx + bias);
                }
            }
            Op::Scale(x, s) => {
                let gx = acc(grads, *x, g.shape());
                for (o, &gv) in gx.data_mut().iter_mut().zip(g.data()) {
                    *o += gv * s;
                }
            }
            Op::RmsNorm { x, gain, inv } => {
                let (tx, tg) = (self.value(*x), self.value(*gain));
                let (m, d) = tx.shape();
                let mut dx = Tensor::zeros(m, d);
                let mut dg = vec![0.0; d];
                for i in 0..m {
                    let r = inv[i];
                    let xr = tx.row(i);
                    let gr = g.row(i);
                    let mut proj = 0.0;
                    for j in 0..d {
                        let xhat = xr[j] * r;
                        dg[j] += gr[j] * xhat;
                        proj += gr[j] * tg.data()[j] * xhat;
                    }
                    proj /= d as f64;
                    for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                        *o = r * (gr[j] * tg.data()[j] - xr[j] * r * proj);
                    }
                }
                acc(grads, *x, (m, d)).add_assign(&dx);
                let gg = acc(grads, *gain, (1, d));
                for (o, v) in gg.data_mut().iter_mut().zip(dg) {
                    *o += v;
                }
            }
            Op::InstanceNorm { x, gain, bias, xhat, inv } => {
                let tg = self.value(*gain);
                let (n, c) = xhat.shape();
                let mut dx = Tensor::zeros(n, c);
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                for j in 0..c {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for i in 0..n {
                        let gy = g.get(i, j);
                        dgain[j] += gy * xhat.get(i, j);
                        dbias[j] += gy;
                        let dxh = gy * tg.data()[j];
                        s1 += dxh;
                        s2 += dxh * xhat.get(i, j);
                    }
                    for i in 0..n {
                        let dxh = g.get(i, j) * tg.data()[j];
                        let v = inv[j] * (dxh - s1 / n as f64 - xhat.get(i, j) * s2 / n as f64);
                        dx.set(i, j, v);
                    }
                }
                acc(grads, *x, (n, c)).add_assign(&dx);
                for (o, v) in acc(grads, *gain, (1, c)).data_mut().iter_mut().zip(dgain) {
                    *o += v;
                }
                for (o, v) in acc(grads, *bias, (1, c)).data_mut().iter_mut().zip(dbias) {
                    *o += v;
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let (m, d) = tq.shape();
                let n = tk.rows();
                let heads = *heads;
                let dk = d / heads;
                let scale = 1.0 / (dk as f64).sqrt();
                let mut dq = Tensor::zeros(m, d);
                let mut dkm = Tensor::zeros(n, d);
                let mut dv = Tensor::zeros(n, d);
                let mut da = vec![0.0; n];
                for i in 0..m {
                    let gi = g.row(i);
                    for h in 0..heads {
                        let span = h * dk..(h + 1) * dk;
                        let p = &probs[(i * heads + h) * n..(i * heads + h + 1) * n];
                        let gh = &gi[span.clone()];
                        let mut inner = 0.0;
                        for j in 0..n {
                            if p[j] != 0.0 {
                                da[j] = dot(gh, &tv.row(j)[span.clone()]);
                                inner += p[j] * da[j];
                                for (o, &gv) in dv.row_mut(j)[span.clone()].iter_mut().zip(gh) {
                                    *o += p[j] * gv;
                                }
                            }
                        }
                        let qh = &tq.row(i)[span.clone()];
                        for j in 0..n {
                            if p[j] != 0.0 {
                                let ds = p[j] * (da[j] - inner) * scale;
                                let kj = &tk.row(j)[span.clone()];
                                for (o, &kv) in dq.row_mut(i)[span.clone()].iter_mut().zip(kj) {
                                    *o += ds * kv;
                                }
                                for (o, &qv) in dkm.row_mut(j)[span.clone()].iter_mut().zip(qh) {
                                    *o += ds * qv;
                                }
                            }
                        }
                    }
                }
                acc(grads, *q, (m, d)).add_assign(&dq);
                acc(grads, *k, (n, d)).add_assign(&dkm);
                acc(grads, *v, (n, d)).add_assign(&dv);
            }
            Op::LogSoftmax { x, mask } => {
                let (m, n) = y.shape();
                let gx = acc(grads, *x, (m, n));
                for i in 0..m {
                    let ok = |j: usize| mask.as_ref().is_none_or(|mk| mk.allowed(i, j));
                    let gs: f64 = (0..n).filter(|&j| ok(j)).map(|j| g.get(i, j)).sum();
                    let row = gx.row_mut(i);
                    for j in 0..n {
                        if ok(j) {
                            row[j] += g.get(i, j) - y.get(i, j).exp() * gs;
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let tx = self.value(*x);
                let gx = acc(grads, *x, tx.shape());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &v) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }
            Op::MeanRows(x) => {
                let tx = self.value(*x);
                let inv = 1.0 / tx.rows() as f64;
                let gx = acc(grads, *x, tx.shape());
                for i in 0..tx.rows() {
                    for (o, &v) in gx.row_mut(i).iter_mut().zip(g.data()) {
                        *o += v * inv;
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let rows = g.rows();
                let ga = acc(grads, *a, (rows, ca));
                for i in 0..rows {
                    for (o, &v) in ga.row_mut(i).iter_mut().zip(&g.row(i)[..ca]) {
                        *o += v;
                    }
                }
                let gb = acc(grads, *b, (rows, cb));
                for i in 0..rows {
                    for (o, &v) in gb.row_mut(i).iter_mut().zip(&g.row(i)[ca..]) {
                        *o += v;
                    }
                }
            }
            Op::PickSum { x, picks } => {
                let gy = g.item();
                let shape = self.value(*x).shape();
                let gx = acc(grads, *x, shape);
                for &(r, c, w) in picks {
                    let cur = gx.get(r, c);
                    gx.set(r, c, cur + w * gy);
                }
            }
            Op::Sum(xs) => {
                for &x in xs {
                    acc(grads, x, g.shape()).add_assign(g);
                }
            }
            Op::SumAll(x) => {
                let gy = g.item();
                let shape = self.value(*x).shape();
                for o in acc(grads, *x, shape).data_mut() {
                    *o += gy;
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, shape: (usize, usize)) -> &mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
}
