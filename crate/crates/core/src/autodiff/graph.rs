//! Define-by-run tape. Every forward op appends a node; `backward` walks the
//! tape in reverse append order, visiting each node at most once.

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Added to row norms before dividing in [`Graph::l2_normalize`].
pub const NORMALIZE_EPS: f64 = 1e-12;
/// Added to the variance in [`Graph::batch_norm`].
pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics observed by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (1/b) variance, as used for normalization.
    pub var: Vec<f64>,
    pub batch: usize,
}

/// How [`Graph::batch_norm`] obtains its statistics.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with fixed running statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Sum(Var),
    Mean(Var),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
        exclude_diagonal: bool,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward call, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when no gradient
    /// reached it (constants and nodes outside the loss's ancestry).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn has(&self, v: Var) -> bool {
        self.get(v).is_some()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    degenerate_rows: usize,
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

    /// Rows that hit the zero-norm guard in `l2_normalize` so far.
    pub fn degenerate_rows(&self) -> usize {
        self.degenerate_rows
    }

    /// Smallest `|input|` seen by any relu on the tape (`inf` if none), i.e.
    /// how far the current point is from a kink.
    pub fn relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(
                    self.nodes[x.0]
                        .value
                        .data()
                        .iter()
                        .fold(f64::INFINITY, |m, v| m.min(v.abs())),
                ),
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: receives no gradient and propagates none.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Stop-gradient: a constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, k2, n) = (av.rows(), av.cols(), bv.rows(), bv.cols());
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}×{k} · {k2}×{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n, k2) = (av.rows(), av.cols(), bv.rows(), bv.cols());
        if k != k2 {
            return Err(Error::shape("matmul_t", format!("{m}×{k} · ({n}×{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), true, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulT(a, b), rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        av.zip_map(bv, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of a `b × n` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.cols();
        if bv.len() != n {
            return Err(Error::shape(
                "add_row_bias",
                format!("width {n} vs bias {}", bv.len()),
            ));
        }
        let mut out = xv.as_matrix();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRowBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// Scales each row to unit Euclidean norm: `x / (‖x‖ + ε)`.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        let mut degenerate = 0;
        for r in 0..xv.rows() {
            let norm = xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= NORMALIZE_EPS {
                degenerate += 1;
            }
            let denom = norm + NORMALIZE_EPS;
            for v in out.row_mut(r) {
                *v /= denom;
            }
            norms.push(norm);
        }
        self.degenerate_rows += degenerate;
        let rg = self.rg(&[x]);
        self.push(out, Op::L2Normalize { x, norms }, rg)
    }

    /// Per-column normalization followed by the affine `gamma · x̂ + beta`.
    ///
    /// With [`NormStats::Batch`] the batch must hold at least two rows and the
    /// observed statistics are returned so the caller can update running
    /// averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xv = self.value(x);
        let (b, n) = (xv.rows(), xv.cols());
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::shape(
                "batch_norm",
                format!("width {n} vs affine params"),
            ));
        }
        let (mean, var, observed) = match stats {
            NormStats::Batch => {
                if b < 2 {
                    return Err(Error::InvalidArgument(
                        "batch_norm in train mode needs at least 2 rows".into(),
                    ));
                }
                let mut mean = vec![0.0; n];
                for r in 0..b {
                    for (m, v) in mean.iter_mut().zip(xv.row(r)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= b as f64);
                let mut var = vec![0.0; n];
                for r in 0..b {
                    for ((s, v), m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= b as f64);
                let observed = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    batch: b,
                };
                (mean, var, Some(observed))
            }
            NormStats::Running { mean, var } => {
                if mean.len() != n || var.len() != n {
                    return Err(Error::shape("batch_norm", "running stats width"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt())
            .collect();
        let mut xhat = vec![0.0; b * n];
        let mut out = vec![0.0; b * n];
        let (g, be) = (self.value(gamma).data(), self.value(beta).data());
        for r in 0..b {
            let row = xv.row(r);
            for c in 0..n {
                let h = (row[c] - mean[c]) * inv_std[c];
                xhat[r * n + c] = h;
                out[r * n + c] = g[c] * h + be[c];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats: observed.is_some(),
        };
        Ok((
            self.push(Tensor::from_parts(vec![b, n], out), op, rg),
            observed,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.sum() / v.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&values)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start >= end || end > xv.rows() {
            return Err(Error::shape(
                "slice_rows",
                format!("{start}..{end} of {} rows", xv.rows()),
            ));
        }
        let out = xv.slice_rows(start, end);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    /// Mean over rows of `-log softmax(logits_i)[targets_i]`.
    ///
    /// With `exclude_diagonal` (square logits) entry `(i, i)` is left out of
    /// each row's softmax; contrastive losses use this to drop
    /// self-similarity.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        exclude_diagonal: bool,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (r, c) = (lv.rows(), lv.cols());
        if targets.len() != r {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{r} rows vs {} targets", targets.len()),
            ));
        }
        if exclude_diagonal && r != c {
            return Err(Error::shape(
                "softmax_cross_entropy",
                "diagonal exclusion needs square logits",
            ));
        }
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for i in 0..r {
            let t = targets[i];
            if t >= c || (exclude_diagonal && t == i) {
                return Err(Error::InvalidArgument(format!(
                    "target {t} invalid for row {i}"
                )));
            }
            let row = lv.row(i);
            let allowed = |j: usize| !(exclude_diagonal && j == i);
            let max = (0..c)
                .filter(|&j| allowed(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in (0..c).filter(|&j| allowed(j)) {
                let e = (row[j] - max).exp();
                probs[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                probs[i * c + j] /= z;
            }
            loss += -(row[t] - max - z.ln());
        }
        loss /= r as f64;
        let rg = self.rg(&[logits]);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
            exclude_diagonal,
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot => *slot = Some(contribution),
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.requires_grad(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, bv.data(), true, &mut da, false);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g, false, &mut db, false);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatMulT(a, b) => {
                // C = A·Bᵀ, A: m×k, B: n×k
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, bv.data(), false, &mut da, false);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, g, true, av.data(), false, &mut db, false);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.iter().zip(av).map(|(g, a)| g * a).collect());
                }
            }
            Op::AddRowBias(x, bias) => {
                self.accumulate(grads, *x, g.to_vec());
                if self.requires_grad(*bias) {
                    let n = self.value(*bias).len();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Scale(x, factor) => {
                self.accumulate(grads, *x, g.iter().map(|v| v * factor).collect());
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::L2Normalize { x, norms } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let row = xv.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let s = norm + NORMALIZE_EPS;
                    // d/dx [x/(‖x‖+ε)] = I/s − x xᵀ/(s² ‖x‖)
                    let coef = if norm > 0.0 {
                        row.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / (s * s * norm)
                    } else {
                        0.0
                    };
                    for j in 0..c {
                        dx[r * c + j] = gr[j] / s - row[j] * coef;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let n = inv_std.len();
                let b = xhat.len() / n;
                let gv = self.value(*gamma).data();
                if self.requires_grad(*gamma) {
                    let mut dg = vec![0.0; n];
                    for r in 0..b {
                        for c in 0..n {
                            dg[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                }
                if self.requires_grad(*beta) {
                    let mut db = vec![0.0; n];
                    for r in 0..b {
                        for c in 0..n {
                            db[c] += g[r * n + c];
                        }
                    }
                    self.accumulate(grads, *beta, db);
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; b * n];
                    if *batch_stats {
                        let mut sum_dh = vec![0.0; n];
                        let mut sum_dh_h = vec![0.0; n];
                        for r in 0..b {
                            for c in 0..n {
                                let dh = g[r * n + c] * gv[c];
                                sum_dh[c] += dh;
                                sum_dh_h[c] += dh * xhat[r * n + c];
                            }
                        }
                        let bf = b as f64;
                        for r in 0..b {
                            for c in 0..n {
                                let dh = g[r * n + c] * gv[c];
                                dx[r * n + c] = inv_std[c] / bf
                                    * (bf * dh - sum_dh[c] - xhat[r * n + c] * sum_dh_h[c]);
                            }
                        }
                    } else {
                        for r in 0..b {
                            for c in 0..n {
                                dx[r * n + c] = g[r * n + c] * gv[c] * inv_std[c];
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.requires_grad(*p) {
                        self.accumulate(grads, *p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
                exclude_diagonal,
            } => {
                let r = targets.len();
                let c = probs.len() / r;
                let scale = g[0] / r as f64;
                let mut dl = probs.iter().map(|p| p * scale).collect::<Vec<_>>();
                for (i, &t) in targets.iter().enumerate() {
                    dl[i * c + t] -= scale;
                    if *exclude_diagonal {
                        dl[i * c + i] = 0.0;
                    }
                }
                self.accumulate(grads, *logits, dl);
            }
        }
    }
}
