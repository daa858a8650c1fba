//! Reverse-mode differentiation over a fixed set of matrix primitives.
//!
//! A [`Tape`] borrows a parameter store (a slice of matrices), records every
//! operation eagerly together with its value, and on [`Tape::backward`]
//! walks the record in reverse to accumulate `∂out/∂x` for every parameter
//! and every input leaf. Parameters are never copied onto the tape; the
//! embedding lookup scatters its gradient straight into the table's slot.

use crate::error::{Error, Result};
use crate::tensor::{dot, matmul, matmul_acc, matmul_at_acc, matmul_bt, matmul_bt_acc, Matrix};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Lower clamp applied inside every logarithm of a probability.
pub const LOG_CLAMP: f64 = 1e-12;

const LAYER_NORM_EPS: f64 = 1e-8;
const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Param(usize),
    Input,
    Gather { table: usize, ids: Vec<usize> },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Matrix),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    MaskedSoftmax(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    SelectRows { x: Var, rows: Vec<usize> },
    Flatten(Var),
    WeightedRowSum { x: Var, weights: Vec<f64> },
    RowNormalize { x: Var, norms: Vec<f64> },
    RowDot(Var, Var),
    NegLogSigmoid(Var),
    Sum(Var),
    MaskedCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p [Matrix],
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Grads {
    /// One gradient per parameter tensor, same shape, zero where unused.
    pub params: Vec<Matrix>,
    nodes: Vec<Option<Matrix>>,
}

impl Grads {
    /// Gradient with respect to a recorded value, `None` if nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].as_ref()
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

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Matrix]) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match self.nodes[v.0].op {
            Op::Param(pid) => &self.params[pid],
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn param(&mut self, pid: usize) -> Var {
        if let Some(v) = self.param_vars[pid] {
            return v;
        }
        let v = self.push(Matrix::zeros(0, 0), Op::Param(pid));
        self.param_vars[pid] = Some(v);
        v
    }

    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input)
    }

    /// Rows `ids` of parameter table `table`.
    pub fn gather(&mut self, table: usize, ids: &[usize]) -> Result<Var> {
        let t = &self.params[table];
        let mut out = Matrix::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            if id >= t.rows {
                return Err(Error::Index(format!(
                    "id {id} outside embedding table of {} rows",
                    t.rows
                )));
            }
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds the `1×n` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "add_row expects a 1×n row");
        let mut out = self.value(a).clone();
        let r = self.value(row).data.clone();
        for chunk in out.data.chunks_mut(n) {
            for (o, b) in chunk.iter_mut().zip(&r) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let out = Matrix::from_vec(va.rows, va.cols, data);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_in_place(s);
        self.push(out, Op::Scale(a, s))
    }

    /// Elementwise product with a constant (dropout and pad masks).
    pub fn mul_const(&mut self, a: Var, c: Matrix) -> Var {
        assert_eq!(self.shape(a), c.shape(), "mul_const shape mismatch");
        let va = self.value(a);
        let data = va.data.iter().zip(&c.data).map(|(x, y)| x * y).collect();
        let out = Matrix::from_vec(va.rows, va.cols, data);
        self.push(out, Op::MulConst(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = matmul_bt(self.value(a), self.value(b));
        self.push(out, Op::MatMulBt(a, b))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in &mut out.data {
            *v = v.max(0.0);
        }
        self.push(out, Op::Relu(a))
    }

    /// Row-wise layer normalization with learned scale and shift (`1×n` each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let vx = self.value(x);
        let (rows, n) = vx.shape();
        let (g, b) = (self.value(gamma), self.value(beta));
        assert_eq!(g.shape(), (1, n));
        assert_eq!(b.shape(), (1, n));
        let mut xhat = Matrix::zeros(rows, n);
        let mut out = Matrix::zeros(rows, n);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g.data[c] + b.data[c]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Row softmax restricted to `allowed` entries (row-major, same shape as
    /// `x`). Disallowed entries are 0; a row with nothing allowed is all 0.
    pub fn masked_softmax(&mut self, x: Var, allowed: &[bool]) -> Var {
        let vx = self.value(x);
        let (rows, n) = vx.shape();
        assert_eq!(allowed.len(), rows * n);
        let mut out = Matrix::zeros(rows, n);
        for r in 0..rows {
            let row = vx.row(r);
            let ok = &allowed[r * n..(r + 1) * n];
            let max = row
                .iter()
                .zip(ok)
                .filter(|(_, &a)| a)
                .fold(f64::NEG_INFINITY, |m, (&v, _)| m.max(v));
            if max == f64::NEG_INFINITY {
                continue;
            }
            let o = out.row_mut(r);
            let mut z = 0.0;
            for c in 0..n {
                if ok[c] {
                    o[c] = (row[c] - max).exp();
                    z += o[c];
                }
            }
            for v in o.iter_mut() {
                *v /= z;
            }
        }
        self.push(out, Op::MaskedSoftmax(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        assert!(start + len <= vx.cols);
        let mut out = Matrix::zeros(vx.rows, len);
        for r in 0..vx.rows {
            out.row_mut(r)
                .copy_from_slice(&vx.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + vp.cols].copy_from_slice(vp.row(r));
            }
            off += vp.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.cols, cols, "stack_rows column mismatch");
            data.extend_from_slice(&vp.data);
            rows += vp.rows;
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::StackRows(parts.to_vec()))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let vx = self.value(x);
        let mut out = Matrix::zeros(rows.len(), vx.cols);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(vx.row(r));
        }
        self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    /// Row-major flattening to a `1×(rows·cols)` row.
    pub fn flatten(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let out = Matrix::row_vector(vx.data.clone());
        self.push(out, Op::Flatten(x))
    }

    /// `Σ_r weights[r] · x[r]` as a `1×cols` row.
    pub fn weighted_row_sum(&mut self, x: Var, weights: Vec<f64>) -> Var {
        let vx = self.value(x);
        assert_eq!(weights.len(), vx.rows);
        let mut out = vec![0.0; vx.cols];
        for (r, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                for (o, v) in out.iter_mut().zip(vx.row(r)) {
                    *o += w * v;
                }
            }
        }
        self.push(Matrix::row_vector(out), Op::WeightedRowSum { x, weights })
    }

    /// Scales every row to unit L2 norm.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let mut out = vx.clone();
        let mut norms = Vec::with_capacity(vx.rows);
        for r in 0..vx.rows {
            let n = dot(vx.row(r), vx.row(r)).sqrt().max(NORMALIZE_EPS);
            norms.push(n);
            for v in out.row_mut(r) {
                *v /= n;
            }
        }
        self.push(out, Op::RowNormalize { x, norms })
    }

    /// Row-wise dot products, `n×1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "row_dot shape mismatch");
        let data = (0..va.rows).map(|r| dot(va.row(r), vb.row(r))).collect();
        self.push(Matrix::from_vec(va.rows, 1, data), Op::RowDot(a, b))
    }

    /// Elementwise `−log(max(σ(x), LOG_CLAMP))`.
    pub fn neg_log_sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            *v = -sigmoid(*v).max(LOG_CLAMP).ln();
        }
        self.push(out, Op::NegLogSigmoid(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Matrix::scalar(s), Op::Sum(x))
    }

    /// `Σ_r −log softmax(logits[r, allowed])[targets[r]]` as a scalar.
    /// Each row's target must be allowed.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        allowed: &[bool],
    ) -> Result<Var> {
        let vl = self.value(logits);
        let (rows, n) = vl.shape();
        if targets.len() != rows || allowed.len() != rows * n {
            return Err(Error::arg("cross-entropy targets/mask do not match logits"));
        }
        let mut probs = Matrix::zeros(rows, n);
        let mut total = 0.0;
        for r in 0..rows {
            let t = targets[r];
            let ok = &allowed[r * n..(r + 1) * n];
            if t >= n || !ok[t] {
                return Err(Error::arg(format!("row {r}: target {t} is not an allowed column")));
            }
            let row = vl.row(r);
            let max = (0..n)
                .filter(|&c| ok[c])
                .fold(f64::NEG_INFINITY, |m, c| m.max(row[c]));
            let p = probs.row_mut(r);
            let mut z = 0.0;
            for c in 0..n {
                if ok[c] {
                    p[c] = (row[c] - max).exp();
                    z += p[c];
                }
            }
            for v in p.iter_mut() {
                *v /= z;
            }
            total -= p[t].max(LOG_CLAMP).ln();
        }
        Ok(self.push(
            Matrix::scalar(total),
            Op::MaskedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Per-row terms `−log p[r, target]` of a cross-entropy node.
    pub fn row_terms(&self, v: Var) -> Option<Vec<f64>> {
        match &self.nodes[v.0].op {
            Op::MaskedCrossEntropy { targets, probs, .. } => Some(
                targets
                    .iter()
                    .enumerate()
                    .map(|(r, &t)| -probs.get(r, t).max(LOG_CLAMP).ln())
                    .collect(),
            ),
            _ => None,
        }
    }

    /// Accumulates `∂out/∂·` for every recorded value; `out` must be `1×1`.
    pub fn backward(&self, out: Var) -> Result<Grads> {
        let v = self.value(out);
        if v.shape() != (1, 1) {
            return Err(Error::arg("backward needs a scalar output"));
        }
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", v.item())));
        }
        self.backward_seeded(&[(out, Matrix::scalar(1.0))])
    }

    /// Backward pass from arbitrary upstream gradients.
    pub fn backward_seeded(&self, seeds: &[(Var, Matrix)]) -> Result<Grads> {
        let mut g: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pg: Vec<Option<Matrix>> = (0..self.params.len()).map(|_| None).collect();
        let last = seeds.iter().map(|(v, _)| v.0).max().unwrap_or(0);
        for (v, s) in seeds {
            if s.shape() != self.shape(*v) {
                return Err(Error::arg("seed gradient shape mismatch"));
            }
            acc(&mut g, v.0, s.clone());
        }

        for i in (0..=last).rev() {
            let Some(gi) = g[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Param(pid) => {
                    acc(&mut pg, *pid, gi.clone());
                }
                Op::Input => {}
                Op::Gather { table, ids } => {
                    let t = &self.params[*table];
                    let slot = pg[*table].get_or_insert_with(|| Matrix::zeros(t.rows, t.cols));
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, s) in slot.row_mut(id).iter_mut().zip(gi.row(r)) {
                            *d += s;
                        }
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut g, a.0, gi.clone());
                    acc(&mut g, b.0, gi.clone());
                }
                Op::AddRow(a, row) => {
                    let mut gr = vec![0.0; gi.cols];
                    for chunk in gi.data.chunks(gi.cols) {
                        for (s, v) in gr.iter_mut().zip(chunk) {
                            *s += v;
                        }
                    }
                    acc(&mut g, row.0, Matrix::row_vector(gr));
                    acc(&mut g, a.0, gi.clone());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let da = gi.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
                    let db = gi.data.iter().zip(&va.data).map(|(x, y)| x * y).collect();
                    acc(&mut g, a.0, Matrix::from_vec(gi.rows, gi.cols, da));
                    acc(&mut g, b.0, Matrix::from_vec(gi.rows, gi.cols, db));
                }
                Op::Scale(a, s) => {
                    let mut d = gi.clone();
                    d.scale_in_place(*s);
                    acc(&mut g, a.0, d);
                }
                Op::MulConst(a, c) => {
                    let d = gi.data.iter().zip(&c.data).map(|(x, y)| x * y).collect();
                    acc(&mut g, a.0, Matrix::from_vec(gi.rows, gi.cols, d));
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let mut da = Matrix::zeros(va.rows, va.cols);
                    matmul_bt_acc(&gi, vb, &mut da);
                    let mut db = Matrix::zeros(vb.rows, vb.cols);
                    matmul_at_acc(va, &gi, &mut db);
                    acc(&mut g, a.0, da);
                    acc(&mut g, b.0, db);
                }
                Op::MatMulBt(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let mut da = Matrix::zeros(va.rows, va.cols);
                    matmul_acc(&gi, vb, &mut da);
                    let mut db = Matrix::zeros(vb.rows, vb.cols);
                    matmul_at_acc(&gi, va, &mut db);
                    acc(&mut g, a.0, da);
                    acc(&mut g, b.0, db);
                }
                Op::Relu(a) => {
                    let va = self.value(*a);
                    let d = gi
                        .data
                        .iter()
                        .zip(&va.data)
                        .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                        .collect();
                    acc(&mut g, a.0, Matrix::from_vec(gi.rows, gi.cols, d));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gm = &self.value(*gamma).data;
                    let (rows, n) = gi.shape();
                    let mut dx = Matrix::zeros(rows, n);
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for r in 0..rows {
                        let gr = gi.row(r);
                        let hr = xhat.row(r);
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..n {
                            dg[c] += gr[c] * hr[c];
                            db[c] += gr[c];
                            let dh = gr[c] * gm[c];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[c];
                        }
                        let nf = n as f64;
                        let out = dx.row_mut(r);
                        for c in 0..n {
                            let dh = gr[c] * gm[c];
                            out[c] = inv_std[r] * (dh - sum_dh / nf - hr[c] * sum_dh_h / nf);
                        }
                    }
                    acc(&mut g, x.0, dx);
                    acc(&mut g, gamma.0, Matrix::row_vector(dg));
                    acc(&mut g, beta.0, Matrix::row_vector(db));
                }
                Op::MaskedSoftmax(x) => {
                    let y = &node.value;
                    let (rows, n) = y.shape();
                    let mut dx = Matrix::zeros(rows, n);
                    for r in 0..rows {
                        let yr = y.row(r);
                        let gr = gi.row(r);
                        let s = dot(yr, gr);
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = yr[c] * (gr[c] - s);
                        }
                    }
                    acc(&mut g, x.0, dx);
                }
                Op::SliceCols { x, start } => {
                    let (rows, n) = self.shape(*x);
                    let mut dx = Matrix::zeros(rows, n);
                    for r in 0..rows {
                        dx.row_mut(r)[*start..*start + gi.cols].copy_from_slice(gi.row(r));
                    }
                    acc(&mut g, x.0, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (rows, n) = self.shape(*p);
                        let mut dp = Matrix::zeros(rows, n);
                        for r in 0..rows {
                            dp.row_mut(r).copy_from_slice(&gi.row(r)[off..off + n]);
                        }
                        off += n;
                        acc(&mut g, p.0, dp);
                    }
                }
                Op::StackRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (rows, n) = self.shape(*p);
                        let d = gi.data[off * n..(off + rows) * n].to_vec();
                        off += rows;
                        acc(&mut g, p.0, Matrix::from_vec(rows, n, d));
                    }
                }
                Op::SelectRows { x, rows } => {
                    let (xr, n) = self.shape(*x);
                    let mut dx = Matrix::zeros(xr, n);
                    for (i, &r) in rows.iter().enumerate() {
                        for (d, s) in dx.row_mut(r).iter_mut().zip(gi.row(i)) {
                            *d += s;
                        }
                    }
                    acc(&mut g, x.0, dx);
                }
                Op::Flatten(x) => {
                    let (rows, n) = self.shape(*x);
                    acc(&mut g, x.0, Matrix::from_vec(rows, n, gi.data.clone()));
                }
                Op::WeightedRowSum { x, weights } => {
                    let (rows, n) = self.shape(*x);
                    let mut dx = Matrix::zeros(rows, n);
                    for (r, &w) in weights.iter().enumerate() {
                        if w != 0.0 {
                            for (d, s) in dx.row_mut(r).iter_mut().zip(&gi.data) {
                                *d = w * s;
                            }
                        }
                    }
                    acc(&mut g, x.0, dx);
                }
                Op::RowNormalize { x, norms } => {
                    let y = &node.value;
                    let (rows, n) = y.shape();
                    let mut dx = Matrix::zeros(rows, n);
                    for r in 0..rows {
                        let yr = y.row(r);
                        let gr = gi.row(r);
                        let s = dot(yr, gr);
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = (gr[c] - yr[c] * s) / norms[r];
                        }
                    }
                    acc(&mut g, x.0, dx);
                }
                Op::RowDot(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (rows, n) = va.shape();
                    let mut da = Matrix::zeros(rows, n);
                    let mut db = Matrix::zeros(rows, n);
                    for r in 0..rows {
                        let s = gi.data[r];
                        for c in 0..n {
                            da.set(r, c, s * vb.get(r, c));
                            db.set(r, c, s * va.get(r, c));
                        }
                    }
                    acc(&mut g, a.0, da);
                    acc(&mut g, b.0, db);
                }
                Op::NegLogSigmoid(x) => {
                    let vx = self.value(*x);
                    let d = gi
                        .data
                        .iter()
                        .zip(&vx.data)
                        .map(|(s, &v)| {
                            let p = sigmoid(v);
                            if p > LOG_CLAMP {
                                -s * (1.0 - p)
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    acc(&mut g, x.0, Matrix::from_vec(gi.rows, gi.cols, d));
                }
                Op::Sum(x) => {
                    let (rows, n) = self.shape(*x);
                    acc(&mut g, x.0, Matrix::filled(rows, n, gi.item()));
                }
                Op::MaskedCrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let s = gi.item();
                    let mut d = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let p = probs.get(r, t);
                        if p > LOG_CLAMP {
                            d.row_mut(r)[t] -= 1.0;
                        } else {
                            d.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                    d.scale_in_place(s);
                    acc(&mut g, logits.0, d);
                }
            }
            g[i] = Some(gi);
        }

        let params = pg
            .into_iter()
            .zip(self.params)
            .map(|(p, t)| p.unwrap_or_else(|| Matrix::zeros(t.rows, t.cols)))
            .collect();
        Ok(Grads { params, nodes: g })
    }
}

fn acc(slots: &mut [Option<Matrix>], i: usize, m: Matrix) {
    match &mut slots[i] {
        Some(existing) => existing.add_assign(&m),
        slot => *slot = Some(m),
    }
}
