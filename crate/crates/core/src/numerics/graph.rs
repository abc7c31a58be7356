//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each operation appends a
//! node whose parents have strictly smaller indices, so the node order is
//! already a topological order and `backward` is a single reverse sweep.

use super::{NumericsError, Result, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
}

/// Right-hand side of an elementwise op: another tensor of equal shape or a scalar.
#[derive(Debug, Clone, Copy)]
pub enum Operand {
    Var(Var),
    Scalar(f64),
}

impl From<Var> for Operand {
    fn from(v: Var) -> Self {
        Operand::Var(v)
    }
}

impl From<f64> for Operand {
    fn from(s: f64) -> Self {
        Operand::Scalar(s)
    }
}

/// Contiguous row range of one sequence inside a packed batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Elementwise(ElementwiseKind, Var, Var),
    ScalarAdd(Var),
    ScalarMul(Var, f64),
    AddRow(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CausalAttention {
        qkv: Var,
        heads: usize,
        segments: Vec<Segment>,
        // per (segment, head): row-major [len x len] lower-triangular probabilities
        probs: Vec<Vec<f64>>,
    },
    LogSoftmax(Var),
    MaskedCrossEntropy {
        logprobs: Var,
        picks: Vec<(usize, usize)>,
    },
    PickSum {
        logprobs: Var,
        picks: Vec<(usize, usize)>,
    },
    Sum(Var),
    Mean(Var),
    LogSigmoid(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Arena of tensors recorded during one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;

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

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated into `v`, if any flowed there.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Errors if `v` holds NaN or Inf. Called at loss boundaries.
    pub fn ensure_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).all_finite() {
            Ok(())
        } else {
            Err(NumericsError::NonFinite(what.to_string()))
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn as_matrix(&self, v: Var) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(NumericsError::Shape(format!(
                "expected a matrix, got shape {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.as_matrix(a)?;
        let (k2, n) = self.as_matrix(b)?;
        if k != k2 {
            return Err(NumericsError::Shape(format!(
                "matmul inner dimensions differ: [{m}x{k}] . [{k2}x{n}]"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul(a, b)))
    }

    pub fn elementwise(
        &mut self,
        a: Var,
        b: impl Into<Operand>,
        kind: ElementwiseKind,
    ) -> Result<Var> {
        match b.into() {
            Operand::Scalar(s) => match kind {
                ElementwiseKind::Add => self.add_scalar(a, s),
                ElementwiseKind::Sub => self.add_scalar(a, -s),
                ElementwiseKind::Mul => self.mul_scalar(a, s),
            },
            Operand::Var(b) => {
                let (va, vb) = (self.value(a), self.value(b));
                if va.shape() != vb.shape() {
                    return Err(NumericsError::Shape(format!(
                        "elementwise {:?} on shapes {:?} and {:?}",
                        kind,
                        va.shape(),
                        vb.shape()
                    )));
                }
                let f: fn(f64, f64) -> f64 = match kind {
                    ElementwiseKind::Add => |x, y| x + y,
                    ElementwiseKind::Sub => |x, y| x - y,
                    ElementwiseKind::Mul => |x, y| x * y,
                };
                let data = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect();
                let t = Tensor::new(va.shape().to_vec(), data)?;
                let rg = self.rg(&[a, b]);
                Ok(self.push(t, rg, Op::Elementwise(kind, a, b)))
            }
        }
    }

    pub fn add(&mut self, a: Var, b: impl Into<Operand>) -> Result<Var> {
        self.elementwise(a, b, ElementwiseKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: impl Into<Operand>) -> Result<Var> {
        self.elementwise(a, b, ElementwiseKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: impl Into<Operand>) -> Result<Var> {
        self.elementwise(a, b, ElementwiseKind::Mul)
    }

    fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let va = self.value(a);
        let t = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x + s).collect())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, rg, Op::ScalarAdd(a)))
    }

    fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let va = self.value(a);
        let t = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x * s).collect())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, rg, Op::ScalarMul(a, s)))
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.as_matrix(a)?;
        if self.value(row).shape() != [n] {
            return Err(NumericsError::Shape(format!(
                "add_row: row shape {:?} does not match [{m}x{n}]",
                self.value(row).shape()
            )));
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, b) in chunk.iter_mut().zip(r) {
                *x += b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, rg, Op::AddRow(a, row)))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| gelu(x)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, rg, Op::Gelu(a)))
    }

    /// Normalizes each row of `[m, n]` and applies per-column gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.as_matrix(x)?;
        if self.value(gain).shape() != [n] || self.value(bias).shape() != [n] {
            return Err(NumericsError::Shape(format!(
                "layer_norm: gain/bias must have shape [{n}]"
            )));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Gathers rows of `table` (`[vocab, d]`) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.as_matrix(table)?;
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(NumericsError::Shape(format!(
                    "embedding id {id} out of range for table with {vocab} rows"
                )));
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Multi-head causal self-attention over a packed `[rows, 3d]` query/key/value
    /// matrix. Each segment attends only within itself, position `i` seeing `0..=i`.
    pub fn causal_attention(&mut self, qkv: Var, heads: usize, segments: &[Segment]) -> Result<Var> {
        let (rows, three_d) = self.as_matrix(qkv)?;
        if heads == 0 || three_d % (3 * heads) != 0 {
            return Err(NumericsError::Shape(format!(
                "causal_attention: width {three_d} incompatible with {heads} heads"
            )));
        }
        let covered: usize = segments.iter().map(|s| s.len).sum();
        if segments.iter().any(|s| s.start + s.len > rows) || covered > rows {
            return Err(NumericsError::Shape(
                "causal_attention: segments exceed packed rows".into(),
            ));
        }
        let d = three_d / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let x = self.value(qkv).data();
        let mut out = vec![0.0; rows * d];
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in segments {
            let t = seg.len;
            for h in 0..heads {
                let qo = h * dh;
                let ko = d + h * dh;
                let vo = 2 * d + h * dh;
                let mut p = vec![0.0; t * t];
                for i in 0..t {
                    let qi = &x[(seg.start + i) * three_d + qo..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &x[(seg.start + j) * three_d + ko..][..dh];
                        let s = dot(qi, kj) * scale;
                        p[i * t + j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    let mut z = 0.0;
                    for j in 0..=i {
                        let e = (p[i * t + j] - max).exp();
                        p[i * t + j] = e;
                        z += e;
                    }
                    let orow = &mut out[(seg.start + i) * d + h * dh..][..dh];
                    for j in 0..=i {
                        let pij = p[i * t + j] / z;
                        p[i * t + j] = pij;
                        let vj = &x[(seg.start + j) * three_d + vo..][..dh];
                        for (o, v) in orow.iter_mut().zip(vj) {
                            *o += pij * v;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let rg = self.rg(&[qkv]);
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            rg,
            Op::CausalAttention {
                qkv,
                heads,
                segments: segments.to_vec(),
                probs,
            },
        ))
    }

    /// Log-softmax over the last axis, stabilized by max subtraction.
    pub fn log_softmax(&mut self, logits: Var) -> Result<Var> {
        let v = self.value(logits);
        let c = v.last_dim();
        if c < 2 {
            return Err(NumericsError::Shape(
                "log_softmax needs at least 2 classes".into(),
            ));
        }
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(c) {
            log_softmax_in_place(row);
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(t, rg, Op::LogSoftmax(logits)))
    }

    /// Mean negative log-probability of `targets` over the positions where `mask` is set.
    pub fn masked_cross_entropy(
        &mut self,
        logprobs: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let (t, v) = self.as_matrix(logprobs)?;
        if targets.len() != t || mask.len() != t {
            return Err(NumericsError::Shape(format!(
                "masked_cross_entropy: {t} rows but {} targets and {} mask bits",
                targets.len(),
                mask.len()
            )));
        }
        let picks: Vec<(usize, usize)> = targets
            .iter()
            .zip(mask)
            .enumerate()
            .filter(|(_, (_, &m))| m)
            .map(|(r, (&c, _))| (r, c))
            .collect();
        if picks.is_empty() {
            return Err(NumericsError::EmptyMask);
        }
        if let Some(&(_, c)) = picks.iter().find(|(_, c)| *c >= v) {
            return Err(NumericsError::Shape(format!(
                "target id {c} out of range for {v} classes"
            )));
        }
        let lp = self.value(logprobs).data();
        let total: f64 = picks.iter().map(|&(r, c)| lp[r * v + c]).sum();
        let loss = -total / picks.len() as f64;
        let rg = self.rg(&[logprobs]);
        let out = self.push(
            Tensor::scalar(loss),
            rg,
            Op::MaskedCrossEntropy { logprobs, picks },
        );
        self.ensure_finite(out, "masked cross-entropy")?;
        Ok(out)
    }

    /// Sum of selected `(row, column)` entries of a matrix.
    pub fn pick_sum(&mut self, logprobs: Var, picks: &[(usize, usize)]) -> Result<Var> {
        let (t, v) = self.as_matrix(logprobs)?;
        if picks.iter().any(|&(r, c)| r >= t || c >= v) {
            return Err(NumericsError::Shape("pick_sum index out of range".into()));
        }
        let lp = self.value(logprobs).data();
        let total: f64 = picks.iter().map(|&(r, c)| lp[r * v + c]).sum();
        let rg = self.rg(&[logprobs]);
        Ok(self.push(
            Tensor::scalar(total),
            rg,
            Op::PickSum {
                logprobs,
                picks: picks.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), rg, Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(NumericsError::Shape("mean of empty tensor".into()));
        }
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), rg, Op::Mean(a)))
    }

    /// Elementwise `ln(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| log_sigmoid(x)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, rg, Op::LogSigmoid(a)))
    }

    /// Reverse sweep from a scalar root. Leaf gradients accumulate across calls;
    /// intermediate gradients are recomputed each time.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(NumericsError::NonScalarRoot(
                self.value(root).shape().to_vec(),
            ));
        }
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.accumulate(root, &[1.0]);
        for i in (0..=root.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            self.propagate(i, &g)?;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, d) in g.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            None => node.grad = Some(delta.to_vec()),
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) -> Result<()> {
        let mut contributions: Vec<(Var, Vec<f64>)> = Vec::new();
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.as_matrix(*a)?;
                let n = self.value(*b).shape()[1];
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.value(*b).data(), true, &mut da, 0.0);
                    contributions.push((*a, da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, g, false, &mut db, 0.0);
                    contributions.push((*b, db));
                }
            }
            Op::Elementwise(kind, a, b) => match kind {
                ElementwiseKind::Add => {
                    contributions.push((*a, g.to_vec()));
                    contributions.push((*b, g.to_vec()));
                }
                ElementwiseKind::Sub => {
                    contributions.push((*a, g.to_vec()));
                    contributions.push((*b, g.iter().map(|x| -x).collect()));
                }
                ElementwiseKind::Mul => {
                    let va = self.value(*a).data();
                    let vb = self.value(*b).data();
                    contributions.push((*a, g.iter().zip(vb).map(|(g, y)| g * y).collect()));
                    contributions.push((*b, g.iter().zip(va).map(|(g, x)| g * x).collect()));
                }
            },
            Op::ScalarAdd(a) => contributions.push((*a, g.to_vec())),
            Op::ScalarMul(a, s) => contributions.push((*a, g.iter().map(|x| x * s).collect())),
            Op::AddRow(a, row) => {
                let n = self.value(*row).len();
                let mut dr = vec![0.0; n];
                for chunk in g.chunks(n) {
                    for (d, x) in dr.iter_mut().zip(chunk) {
                        *d += x;
                    }
                }
                contributions.push((*a, g.to_vec()));
                contributions.push((*row, dr));
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                contributions.push((
                    *a,
                    g.iter().zip(va).map(|(g, &x)| g * gelu_grad(x)).collect(),
                ));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = self.value(*gain).len();
                let gv = self.value(*gain).data();
                let m = rstd.len();
                let mut dx = vec![0.0; m * n];
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for r in 0..m {
                    let gr = &g[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for c in 0..n {
                        dg[c] += gr[c] * hr[c];
                        db[c] += gr[c];
                        dxhat[c] = gr[c] * gv[c];
                        mean_d += dxhat[c];
                        mean_dh += dxhat[c] * hr[c];
                    }
                    mean_d /= n as f64;
                    mean_dh /= n as f64;
                    for c in 0..n {
                        dx[r * n + c] = rstd[r] * (dxhat[c] - mean_d - hr[c] * mean_dh);
                    }
                }
                contributions.push((*x, dx));
                contributions.push((*gain, dg));
                contributions.push((*bias, db));
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).shape()[1];
                let mut dt = vec![0.0; self.value(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[id * d + c] += g[r * d + c];
                    }
                }
                contributions.push((*table, dt));
            }
            Op::CausalAttention {
                qkv,
                heads,
                segments,
                probs,
            } => {
                let x = self.value(*qkv).data();
                let three_d = self.value(*qkv).shape()[1];
                let d = three_d / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dx = vec![0.0; x.len()];
                let mut dp = Vec::new();
                for (si, seg) in segments.iter().enumerate() {
                    let t = seg.len;
                    for h in 0..*heads {
                        let p = &probs[si * heads + h];
                        let qo = h * dh;
                        let ko = d + h * dh;
                        let vo = 2 * d + h * dh;
                        dp.clear();
                        dp.resize(t, 0.0);
                        for i in 0..t {
                            let gi = &g[(seg.start + i) * d + h * dh..][..dh];
                            let mut acc = 0.0;
                            for j in 0..=i {
                                let vj = &x[(seg.start + j) * three_d + vo..][..dh];
                                let pij = p[i * t + j];
                                dp[j] = dot(gi, vj);
                                acc += pij * dp[j];
                                let dvj = &mut dx[(seg.start + j) * three_d + vo..][..dh];
                                for (dv, gg) in dvj.iter_mut().zip(gi) {
                                    *dv += pij * gg;
                                }
                            }
                            for j in 0..=i {
                                let ds = p[i * t + j] * (dp[j] - acc) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let (qrow, krow) = ((seg.start + i) * three_d, (seg.start + j) * three_d);
                                for c in 0..dh {
                                    let kc = x[krow + ko + c];
                                    let qc = x[qrow + qo + c];
                                    dx[qrow + qo + c] += ds * kc;
                                    dx[krow + ko + c] += ds * qc;
                                }
                            }
                        }
                    }
                }
                contributions.push((*qkv, dx));
            }
            Op::LogSoftmax(a) => {
                let out = node.value.data();
                let c = node.value.last_dim();
                let mut da = vec![0.0; out.len()];
                for ((drow, grow), orow) in da.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                    let s: f64 = grow.iter().sum();
                    for ((d, gg), o) in drow.iter_mut().zip(grow).zip(orow) {
                        *d = gg - o.exp() * s;
                    }
                }
                contributions.push((*a, da));
            }
            Op::MaskedCrossEntropy { logprobs, picks } => {
                let v = self.value(*logprobs).last_dim();
                let mut dl = vec![0.0; self.value(*logprobs).len()];
                let w = -g[0] / picks.len() as f64;
                for &(r, c) in picks {
                    dl[r * v + c] += w;
                }
                contributions.push((*logprobs, dl));
            }
            Op::PickSum { logprobs, picks } => {
                let v = self.value(*logprobs).last_dim();
                let mut dl = vec![0.0; self.value(*logprobs).len()];
                for &(r, c) in picks {
                    dl[r * v + c] += g[0];
                }
                contributions.push((*logprobs, dl));
            }
            Op::Sum(a) => contributions.push((*a, vec![g[0]; self.value(*a).len()])),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                contributions.push((*a, vec![g[0] / n as f64; n]));
            }
            Op::LogSigmoid(a) => {
                let va = self.value(*a).data();
                contributions.push((
                    *a,
                    g.iter().zip(va).map(|(g, &x)| g * sigmoid(-x)).collect(),
                ));
            }
        }
        for (v, d) in contributions {
            self.accumulate(v, &d);
        }
        Ok(())
    }
}

/// `c = a . b + beta * c` with optional transposes; all buffers row-major.
/// `a` is `[m x k]` after transposition, `b` is `[k x n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

// libm tanh is several times slower than exp and dominates the MLP cost
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = fast_tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// In-place log-softmax of one row.
pub fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
    let lz = max + z.ln();
    for v in row.iter_mut() {
        *v -= lz;
    }
}
