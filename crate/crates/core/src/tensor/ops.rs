//! Forward implementations and backward rules for every tape operation.

use super::kernels::gemm;
use super::tape::{BinaryOp, Node, Op, UnaryOp};
use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    let len = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

impl Tape {
    fn dims2_of(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .map_err(|_| Error::shape(format!("{what}: expected a matrix, got {:?}", self.value(v).shape())))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2_of(a, "matmul lhs")?;
        let (k2, n) = self.dims2_of(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: [{m}x{k}] x [{k2}x{n}]"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let (na, nb) = (self.value(a).len(), self.value(b).len());
        let shape = if sa == sb {
            sa
        } else if na == 1 {
            sb
        } else if nb == 1 {
            sa
        } else {
            return Err(Error::shape(format!(
                "{op:?}: shapes {sa:?} and {sb:?} are neither equal nor scalar-broadcastable"
            )));
        };
        let n = na.max(nb);
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let x = xa[if na == 1 { 0 } else { i }];
            let y = xb[if nb == 1 { 0 } else { i }];
            out.push(match op {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
                BinaryOp::Div => x / y,
            });
        }
        Ok(self.push(shape, out, Op::Binary(op, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().contains(&0.0) {
            return Err(Error::Domain("division by zero".into()));
        }
        self.binary(BinaryOp::Div, a, b)
    }

    /// `x[i, j] + bias[j]`; the bias must hold exactly `cols(x)` values.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2_of(x, "add_bias")?;
        if self.value(bias).len() != n {
            return Err(Error::shape(format!(
                "bias of {} values for {n} columns",
                self.value(bias).len()
            )));
        }
        let xb = self.value(x).data();
        let bb = self.value(bias).data();
        let mut out = xb.to_vec();
        for row in out.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bb) {
                *o += b;
            }
        }
        let _ = m;
        Ok(self.push(vec![m, n], out, Op::AddBias(x, bias), &[x, bias]))
    }

    fn unary(&mut self, op: UnaryOp, x: Var) -> Var {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let out: Vec<f64> = t
            .data()
            .iter()
            .map(|&v| match op {
                UnaryOp::Sigmoid => sigmoid(v),
                UnaryOp::Tanh => v.tanh(),
                UnaryOp::Exp => v.exp(),
                UnaryOp::Log => v.ln(),
                UnaryOp::Relu => v.max(0.0),
                UnaryOp::Neg => -v,
                UnaryOp::Sqrt => v.sqrt(),
                UnaryOp::LogSigmoid => log_sigmoid(v),
            })
            .collect();
        self.push(shape, out, Op::Unary(op, x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Tanh, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Neg, x)
    }

    /// `ln σ(x)`, stable for large |x|.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::LogSigmoid, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(UnaryOp::Log, x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain(format!("sqrt of non-positive value {bad}")));
        }
        Ok(self.unary(UnaryOp::Sqrt, x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v * c).collect();
        self.push(t.shape().to_vec(), out, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v + c).collect();
        self.push(t.shape().to_vec(), out, Op::Shift(x), &[x])
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let shape = self.value(x).shape();
        if axis >= shape.len() {
            return Err(Error::shape(format!("axis {axis} out of range for {shape:?}")));
        }
        Ok(axis_split(shape, axis))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis(x, axis)?;
        let t = self.value(x);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| src[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (src[at(l)] - max).exp();
                    out[at(l)] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[at(l)] /= sum;
                }
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push(shape, out, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis(x, axis)?;
        let t = self.value(x);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| src[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|l| (src[at(l)] - max).exp()).sum::<f64>().ln();
                for l in 0..len {
                    out[at(l)] = src[at(l)] - lse;
                }
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push(shape, out, Op::LogSoftmax { x, outer, len, inner }, &[x]))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits [T×V]`, over positions where `mask` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t_len, vocab) = self.dims2_of(logits, "cross_entropy")?;
        if targets.len() != t_len || mask.len() != t_len {
            return Err(Error::shape(format!(
                "cross_entropy: {t_len} rows but {} targets and {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        if let Some(&bad) = targets.iter().zip(mask).filter(|(_, &m)| m).map(|(t, _)| t).find(|&&t| t >= vocab) {
            return Err(Error::TokenRange { id: bad, size: vocab });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Degenerate("cross_entropy over an empty mask".into()));
        }
        let src = self.value(logits).data();
        let mut total = 0.0;
        for (t, row) in src.chunks(vocab).enumerate() {
            if !mask[t] {
                continue;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[targets[t]];
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            count,
        };
        Ok(self.push(vec![1], vec![total / count as f64], op, &[logits]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(vec![1], vec![s], Op::Mean(x), &[x])
    }

    /// Column means of a matrix, `[m×n] -> [1×n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2_of(x, "mean_rows")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; n];
        for row in src.chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        Ok(self.push(vec![1, n], out, Op::MeanRows(x), &[x]))
    }

    /// Row sums of a matrix, `[m×n] -> [m×1]`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2_of(x, "sum_cols")?;
        let out = self.value(x).data().chunks(n).map(|r| r.iter().sum()).collect();
        Ok(self.push(vec![m, 1], out, Op::SumCols(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2_of(x, "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], out, Op::Transpose(x), &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2_of(x, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::shape(format!("columns {start}..{} of {n}", start + len)));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for row in src.chunks(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        Ok(self.push(vec![m, len], out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2_of(x, "slice_rows")?;
        if len == 0 || start + len > m {
            return Err(Error::shape(format!("rows {start}..{} of {m}", start + len)));
        }
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        Ok(self.push(vec![len, n], out, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols of nothing"))?;
        let (m, _) = self.dims2_of(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2_of(p, "concat_cols")?;
            if r != m {
                return Err(Error::shape(format!("concat_cols: {r} rows vs {m}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(vec![m, total], out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows of nothing"))?;
        let (_, n) = self.dims2_of(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2_of(p, "concat_rows")?;
            if c != n {
                return Err(Error::shape(format!("concat_rows: {c} cols vs {n}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(vec![rows, n], out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Gathers rows of `table [V×d]`, i.e. an embedding lookup.
    pub fn rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2_of(table, "rows")?;
        if ids.is_empty() {
            return Err(Error::shape("rows: empty id list"));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenRange { id, size: v });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let op = Op::Rows {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(vec![ids.len(), d], out, op, &[table]))
    }

    /// Flat gather: `out[k] = x[idx[k]]`, shaped as `shape`.
    pub fn take(&mut self, x: Var, idx: &[usize], shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if idx.len() != shape.iter().product::<usize>() || shape.contains(&0) {
            return Err(Error::shape(format!("take: {} indices for shape {shape:?}", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape(format!("take: index {bad} out of {n}")));
        }
        let src = self.value(x).data();
        let out = idx.iter().map(|&i| src[i]).collect();
        let op = Op::Take {
            x,
            idx: idx.to_vec(),
        };
        Ok(self.push(shape.to_vec(), out, op, &[x]))
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2_of(x, "layer_norm")?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::shape("layer_norm: gain/bias width mismatch"));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = Vec::with_capacity(m * n);
        for row in src.chunks(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            out.extend(row.iter().enumerate().map(|(j, v)| (v - mu) * rstd * g[j] + b[j]));
        }
        let op = Op::LayerNorm { x, gamma, beta, eps };
        Ok(self.push(vec![m, n], out, op, &[x, gamma, beta]))
    }

    /// Zero-padded sliding windows over the rows of `x [F×C]`, producing
    /// `[F × kernel·C]`; a following matmul makes a same-length 1-D
    /// convolution.
    pub fn unfold1d(&mut self, x: Var, kernel: usize) -> Result<Var> {
        let (f, c) = self.dims2_of(x, "unfold1d")?;
        if kernel == 0 || kernel.is_multiple_of(2) {
            return Err(Error::shape(format!("unfold1d kernel must be odd, got {kernel}")));
        }
        let pad = kernel / 2;
        let src = self.value(x).data();
        let mut out = vec![0.0; f * kernel * c];
        for t in 0..f {
            for j in 0..kernel {
                let s = t + j;
                if s < pad || s - pad >= f {
                    continue;
                }
                let s = s - pad;
                let dst = t * kernel * c + j * c;
                out[dst..dst + c].copy_from_slice(&src[s * c..(s + 1) * c]);
            }
        }
        Ok(self.push(vec![f, kernel * c], out, Op::Unfold1d { x, kernel }, &[x]))
    }

    /// Scales each row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2_of(x, "l2_normalize_rows")?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * n);
        for row in src.chunks(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm.is_nan() || norm <= 1e-12 {
                return Err(Error::Degenerate(format!("cannot normalise a row of norm {norm}")));
            }
            out.extend(row.iter().map(|v| v / norm));
        }
        Ok(self.push(vec![m, n], out, Op::L2NormalizeRows(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let data = t.into_data();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), &[x]))
    }

    pub(crate) fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        match &nodes[i].op {
            Op::Leaf | Op::Param { .. } => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2().unwrap();
                let n = nodes[b.0].value.dims2().unwrap().1;
                if let Some(da) = slot(grads, nodes, *a) {
                    gemm(m, n, k, g, false, val(*b), true, da, true);
                }
                if let Some(db) = slot(grads, nodes, *b) {
                    gemm(k, m, n, val(*a), true, g, false, db, true);
                }
            }
            Op::Binary(op, a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                let (na, nb) = (xa.len(), xb.len());
                let pa = |k: usize| xa[if na == 1 { 0 } else { k }];
                let pb = |k: usize| xb[if nb == 1 { 0 } else { k }];
                let ia = |k: usize| if na == 1 { 0 } else { k };
                let ib = |k: usize| if nb == 1 { 0 } else { k };
                if let Some(da) = slot(grads, nodes, *a) {
                    for (k, &gk) in g.iter().enumerate() {
                        da[ia(k)] += match op {
                            BinaryOp::Add | BinaryOp::Sub => gk,
                            BinaryOp::Mul => gk * pb(k),
                            BinaryOp::Div => gk / pb(k),
                        };
                    }
                }
                if let Some(db) = slot(grads, nodes, *b) {
                    for (k, &gk) in g.iter().enumerate() {
                        db[ib(k)] += match op {
                            BinaryOp::Add => gk,
                            BinaryOp::Sub => -gk,
                            BinaryOp::Mul => gk * pa(k),
                            BinaryOp::Div => -gk * pa(k) / (pb(k) * pb(k)),
                        };
                    }
                }
            }
            Op::AddBias(x, bias) => {
                let n = nodes[bias.0].value.len();
                if let Some(dx) = slot(grads, nodes, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if let Some(db) = slot(grads, nodes, *bias) {
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Unary(op, x) => {
                let xs = val(*x);
                let ys = nodes[i].value.data();
                if let Some(dx) = slot(grads, nodes, *x) {
                    for k in 0..g.len() {
                        let (xv, yv) = (xs[k], ys[k]);
                        dx[k] += g[k]
                            * match op {
                                UnaryOp::Sigmoid => yv * (1.0 - yv),
                                UnaryOp::Tanh => 1.0 - yv * yv,
                                UnaryOp::Exp => yv,
                                UnaryOp::Log => 1.0 / xv,
                                UnaryOp::Relu => {
                                    if xv > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                UnaryOp::Neg => -1.0,
                                UnaryOp::Sqrt => 0.5 / yv,
                                UnaryOp::LogSigmoid => sigmoid(-xv),
                            };
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = slot(grads, nodes, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
                }
            }
            Op::Shift(x) | Op::Reshape(x) => {
                if let Some(dx) = slot(grads, nodes, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = nodes[i].value.data();
                if let Some(dx) = slot(grads, nodes, *x) {
                    for o in 0..*outer {
                        for c in 0..*inner {
                            let at = |l: usize| (o * len + l) * inner + c;
                            let dot: f64 = (0..*len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..*len {
                                dx[at(l)] += y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { x, outer, len, inner } => {
                let y = nodes[i].value.data();
                if let Some(dx) = slot(grads, nodes, *x) {
                    for o in 0..*outer {
                        for c in 0..*inner {
                            let at = |l: usize| (o * len + l) * inner + c;
                            let total: f64 = (0..*len).map(|l| g[at(l)]).sum();
                            for l in 0..*len {
                                dx[at(l)] += g[at(l)] - y[at(l)].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                count,
            } => {
                let vocab = nodes[logits.0].value.dims2().unwrap().1;
                let src = val(*logits);
                let scale = g[0] / *count as f64;
                if let Some(dl) = slot(grads, nodes, *logits) {
                    for (t, row) in src.chunks(vocab).enumerate() {
                        if !mask[t] {
                            continue;
                        }
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        let d = &mut dl[t * vocab..(t + 1) * vocab];
                        for (j, v) in row.iter().enumerate() {
                            d[j] += scale * (v - max).exp() / z;
                        }
                        d[targets[t]] -= scale;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = slot(grads, nodes, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(dx) = slot(grads, nodes, *x) {
                    let s = g[0] / dx.len() as f64;
                    dx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::MeanRows(x) => {
                let (m, n) = nodes[x.0].value.dims2().unwrap();
                if let Some(dx) = slot(grads, nodes, *x) {
                    for row in dx.chunks_mut(n) {
                        row.iter_mut().zip(g).for_each(|(d, s)| *d += s / m as f64);
                    }
                }
            }
            Op::SumCols(x) => {
                let n = nodes[x.0].value.dims2().unwrap().1;
                if let Some(dx) = slot(grads, nodes, *x) {
                    for (row, s) in dx.chunks_mut(n).zip(g) {
                        row.iter_mut().for_each(|d| *d += s);
                    }
                }
            }
            Op::Transpose(x) => {
                let (m, n) = nodes[x.0].value.dims2().unwrap();
                if let Some(dx) = slot(grads, nodes, *x) {
                    for r in 0..m {
                        for c in 0..n {
                            dx[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let n = nodes[x.0].value.dims2().unwrap().1;
                let w = nodes[i].value.dims2().unwrap().1;
                if let Some(dx) = slot(grads, nodes, *x) {
                    for (row, gr) in dx.chunks_mut(n).zip(g.chunks(w)) {
                        row[*start..start + w].iter_mut().zip(gr).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let n = nodes[x.0].value.dims2().unwrap().1;
                if let Some(dx) = slot(grads, nodes, *x) {
                    dx[start * n..start * n + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, s)| *d += s);
                }
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].value.dims2().unwrap().1;
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.dims2().unwrap().1;
                    if let Some(dp) = slot(grads, nodes, *p) {
                        for (row, gr) in dp.chunks_mut(w).zip(g.chunks(total)) {
                            row.iter_mut()
                                .zip(&gr[offset..offset + w])
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    if let Some(dp) = slot(grads, nodes, *p) {
                        dp.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(d, s)| *d += s);
                    }
                    offset += len;
                }
            }
            Op::Rows { table, ids } => {
                let d = nodes[table.0].value.dims2().unwrap().1;
                if let Some(dt) = slot(grads, nodes, *table) {
                    for (k, &id) in ids.iter().enumerate() {
                        dt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[k * d..(k + 1) * d])
                            .for_each(|(a, s)| *a += s);
                    }
                }
            }
            Op::Take { x, idx } => {
                if let Some(dx) = slot(grads, nodes, *x) {
                    for (k, &j) in idx.iter().enumerate() {
                        dx[j] += g[k];
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (_, n) = nodes[x.0].value.dims2().unwrap();
                let src = val(*x);
                let gam = val(*gamma);
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                let mut dx_all = vec![0.0; src.len()];
                for (r, row) in src.chunks(n).enumerate() {
                    let mu = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                    let rstd = 1.0 / (var + eps).sqrt();
                    let gr = &g[r * n..(r + 1) * n];
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mu) * rstd).collect();
                    let dxhat: Vec<f64> = (0..n).map(|j| gr[j] * gam[j]).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                        dx_all[r * n + j] = rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                    }
                }
                if let Some(dx) = slot(grads, nodes, *x) {
                    dx.iter_mut().zip(&dx_all).for_each(|(d, s)| *d += s);
                }
                if let Some(dg) = slot(grads, nodes, *gamma) {
                    dg.iter_mut().zip(&dgamma).for_each(|(d, s)| *d += s);
                }
                if let Some(db) = slot(grads, nodes, *beta) {
                    db.iter_mut().zip(&dbeta).for_each(|(d, s)| *d += s);
                }
            }
            Op::Unfold1d { x, kernel } => {
                let (f, c) = nodes[x.0].value.dims2().unwrap();
                let pad = kernel / 2;
                if let Some(dx) = slot(grads, nodes, *x) {
                    for t in 0..f {
                        for j in 0..*kernel {
                            let s = t + j;
                            if s < pad || s - pad >= f {
                                continue;
                            }
                            let s = s - pad;
                            let src = t * kernel * c + j * c;
                            dx[s * c..(s + 1) * c]
                                .iter_mut()
                                .zip(&g[src..src + c])
                                .for_each(|(d, v)| *d += v);
                        }
                    }
                }
            }
            Op::L2NormalizeRows(x) => {
                let n = nodes[x.0].value.dims2().unwrap().1;
                let src = val(*x);
                let y = nodes[i].value.data();
                if let Some(dx) = slot(grads, nodes, *x) {
                    for r in 0..src.len() / n {
                        let row = &src[r * n..(r + 1) * n];
                        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dx[r * n + j] += (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// Row-wise softmax of a matrix, outside any tape.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let x = tape.constant(self.clone());
        let y = tape.softmax(x, self.shape().len() - 1)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let id = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let c = tape.matmul(a, id).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
        let v = tape.constant(t(&[2, 1], &[5.0, 7.0]));
        let c = tape.matmul(id, v).unwrap();
        assert_eq!(tape.value(c).data(), &[5.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[0.0; 6]));
        let b = tape.constant(t(&[2, 3], &[0.0; 6]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn only_scalar_broadcasting() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[1.0; 6]));
        let s = tape.constant(Tensor::scalar(2.0));
        let r = tape.constant(t(&[1, 3], &[1.0; 3]));
        let m = tape.mul(a, s).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0; 6]);
        assert!(tape.add(a, r).is_err());
    }

    #[test]
    fn sigmoid_and_tanh_at_zero() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        let th = tape.tanh(z);
        assert_eq!(tape.scalar(s).unwrap(), 0.5);
        assert_eq!(tape.scalar(th).unwrap(), 0.0);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(Error::Domain(_))));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 1).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[1, 2], &[1000.0, 1000.0]));
        let y = tape.softmax(x, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_vocab() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 4], &[0.0; 12]));
        let l = tape.cross_entropy(x, &[0, 1, 3], &[true, true, true]).unwrap();
        assert!((tape.scalar(l).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_limit() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[0.0, 60.0, 0.0]));
        let l = tape.cross_entropy(x, &[1], &[true]).unwrap();
        assert!(tape.scalar(l).unwrap() < 1e-20);
    }

    #[test]
    fn cross_entropy_empty_mask_is_degenerate() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[0.0; 6]));
        assert!(matches!(
            tape.cross_entropy(x, &[0, 1], &[false, false]),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            tape.cross_entropy(x, &[0, 5], &[true, true]),
            Err(Error::TokenRange { .. })
        ));
    }

    #[test]
    fn backward_needs_scalar_root() {
        let mut tape = Tape::new();
        let mut x = t(&[1, 2], &[1.0, 2.0]);
        x.set_requires_grad(true);
        let v = tape.leaf(x);
        assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_identity_and_linear() {
        let mut tape = Tape::new();
        let mut x = Tensor::scalar(3.0);
        x.set_requires_grad(true);
        let v = tape.leaf(x);
        let g = tape.backward(v).unwrap();
        assert_eq!(g.wrt(v).unwrap(), &[1.0]);

        let mut tape = Tape::new();
        let mut x = t(&[2, 2], &[1.0, -2.0, 0.5, 4.0]);
        x.set_requires_grad(true);
        let v = tape.leaf(x);
        let y = tape.scale(v, 2.0);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(v).unwrap(), &[2.0; 4]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f(x) = (x·x + x)·x = x³ + x², f'(x) = 3x² + 2x
        let mut tape = Tape::new();
        let mut x = Tensor::scalar(1.5);
        x.set_requires_grad(true);
        let v = tape.leaf(x);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.add(sq, v).unwrap();
        let f = tape.mul(s, v).unwrap();
        let g = tape.backward(f).unwrap();
        let want = 3.0 * 1.5 * 1.5 + 2.0 * 1.5;
        assert!((g.wrt(v).unwrap()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn inference_tape_records_no_gradients() {
        let mut tape = Tape::inference();
        let mut x = Tensor::scalar(2.0);
        x.set_requires_grad(true);
        let v = tape.leaf(x);
        let y = tape.exp(v);
        let g = tape.backward(y).unwrap();
        assert!(g.wrt(v).is_none());
    }

    #[test]
    fn unfold_pads_with_zeros() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 1], &[1.0, 2.0, 3.0]));
        let u = tape.unfold1d(x, 3).unwrap();
        assert_eq!(
            tape.value(u).data(),
            &[0.0, 1.0, 2.0, 1.0, 2.0, 3.0, 2.0, 3.0, 0.0]
        );
    }

    #[test]
    fn l2_normalize_zero_row_is_degenerate() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        assert!(matches!(tape.l2_normalize_rows(x), Err(Error::Degenerate(_))));
    }
}
