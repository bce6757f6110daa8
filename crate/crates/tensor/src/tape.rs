use std::sync::Arc;

use rand::Rng;

use crate::kernels::{self, axpy, dot, masked_softmax_row, matmul_nn, matmul_nt, matmul_tn};
use crate::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One attention block inside a packed batch: queries
/// `q_start..q_start+q_len` attend keys `k_start..k_start+k_len` under a
/// query-major `allow` matrix of `q_len × k_len` cells.
#[derive(Clone, Debug)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    pub allow: Arc<[bool]>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Scale(Var, f32),
    LinComb(Vec<(Var, f32)>),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f32>,
    },
    MaskedSoftmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<AttnSegment>,
        probs: Vec<Vec<f32>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f32>,
        epsilon: f32,
        probs: Vec<f32>,
        weight_sum: f64,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    needs_grad: bool,
    op: Op,
}

/// Ordered record of primitive operations.
///
/// Nodes are appended in evaluation order, so replaying indices in reverse
/// is an exact reverse topological order. A tape supports one backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            backward_done: false,
        }
    }

    /// A tape for inference: nothing requires gradients and backward errors.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad: needs_grad && self.grad_enabled,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Record a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Record a constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`, used for the tied output projection.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul_t")?;
        let (n, k2) = self.value(b).dims2("matmul_t")?;
        if k != k2 {
            return Err(self.mismatch("matmul_t", a, b));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulT(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.mismatch("add", a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * s).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("shape preserved");
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// `Σ cᵢ·xᵢ` over same-shaped inputs.
    pub fn lin_comb(&mut self, terms: &[(Var, f32)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(TensorError::Invalid("lin_comb needs at least one term".into()));
        };
        let shape = self.value(first).shape().to_vec();
        let mut out = vec![0.0f32; self.value(first).numel()];
        for &(v, c) in terms {
            if self.value(v).shape() != shape.as_slice() {
                return Err(self.mismatch("lin_comb", first, v));
            }
            axpy(c, self.value(v).data(), &mut out);
        }
        let ng = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(Tensor::new(shape, out)?, Op::LinComb(terms.to_vec()), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x.max(0.0)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("shape preserved");
        let ng = self.needs(a);
        self.push(value, Op::Relu(a), ng)
    }

    /// Normalize each row to zero mean and unit variance, then apply the
    /// optional elementwise affine `gamma`, `beta` (each of length `cols`).
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: f32,
    ) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2("layer_norm")?;
        for p in [gamma, beta].into_iter().flatten() {
            if self.value(p).numel() != cols {
                return Err(self.mismatch("layer_norm", x, p));
            }
        }
        let xs = self.value(x).data();
        let mut xhat = vec![0.0f32; rows * cols];
        let mut rstd = vec![0.0f32; rows];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / cols as f64;
            let rs = (1.0 / (var + eps as f64).sqrt()) as f32;
            rstd[r] = rs;
            let mean = mean as f32;
            for (o, &v) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gamma {
            let g = self.value(g).data();
            for row in out.chunks_exact_mut(cols) {
                for (o, gv) in row.iter_mut().zip(g) {
                    *o *= gv;
                }
            }
        }
        if let Some(b) = beta {
            let b = self.value(b).data();
            for row in out.chunks_exact_mut(cols) {
                for (o, bv) in row.iter_mut().zip(b) {
                    *o += bv;
                }
            }
        }
        let ng = self.needs(x)
            || gamma.is_some_and(|g| self.needs(g))
            || beta.is_some_and(|b| self.needs(b));
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, op, ng))
    }

    /// Gather rows of `table` (`vocab × d`) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.value(table).dims2("embedding")?;
        if ids.is_empty() {
            return Err(TensorError::Invalid("embedding of an empty sequence".into()));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for (pos, &id) in ids.iter().enumerate() {
            if id >= vocab {
                return Err(TensorError::TargetOutOfRange { id, pos, vocab });
            }
            out.extend_from_slice(t.row(id));
        }
        let ng = self.needs(table);
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(Tensor::new(vec![ids.len(), d], out)?, op, ng))
    }

    /// Inverted dropout. With `p == 0` the input is returned unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f32, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid(format!("dropout probability {p}")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let t = self.value(x);
        let mask: Vec<f32> = (0..t.numel())
            .map(|_| if rng.gen::<f32>() < p { 0.0 } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Dropout { x, mask }, ng))
    }

    /// Row-wise softmax of `logits[q×k]` restricted to allowed cells.
    ///
    /// Blocked cells come out as exactly 0. A row without any allowed key is
    /// an error.
    pub fn masked_softmax(&mut self, logits: Var, allow: &[bool]) -> Result<Var> {
        let (q, k) = self.value(logits).dims2("masked_softmax")?;
        if allow.len() != q * k {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                lhs: vec![q, k],
                rhs: vec![allow.len()],
            });
        }
        let mut out = self.value(logits).data().to_vec();
        for (r, (row, arow)) in out.chunks_exact_mut(k).zip(allow.chunks_exact(k)).enumerate() {
            if !masked_softmax_row(row, arow) {
                return Err(TensorError::EmptyMaskRow { row: r });
            }
        }
        let ng = self.needs(logits);
        Ok(self.push(Tensor::new(vec![q, k], out)?, Op::MaskedSoftmax(logits), ng))
    }

    /// Scaled dot-product multi-head attention over packed segments.
    ///
    /// `q` is `Nq × d`, `k` and `v` are `Nk × d`; `d` splits into `heads`
    /// equal slices. Each segment maps a query span onto a key span under
    /// its own mask. Query rows outside every segment produce zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<AttnSegment>,
    ) -> Result<Var> {
        let (nq, d) = self.value(q).dims2("attention")?;
        let (nk, dk) = self.value(k).dims2("attention")?;
        if dk != d || self.value(v).shape() != self.value(k).shape() {
            return Err(self.mismatch("attention", q, k));
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid(format!(
                "model width {d} not divisible into {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qs, ks, vs) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![0.0f32; nq * d];
        let mut probs = Vec::with_capacity(segments.len());
        for seg in &segments {
            if seg.q_start + seg.q_len > nq
                || seg.k_start + seg.k_len > nk
                || seg.allow.len() != seg.q_len * seg.k_len
            {
                return Err(TensorError::Invalid(format!(
                    "attention segment {seg:?} out of bounds for {nq}×{nk}"
                )));
            }
            let mut p = vec![0.0f32; heads * seg.q_len * seg.k_len];
            for h in 0..heads {
                let off = h * dh;
                for qi in 0..seg.q_len {
                    let qrow = &qs[(seg.q_start + qi) * d + off..][..dh];
                    let arow = &seg.allow[qi * seg.k_len..(qi + 1) * seg.k_len];
                    let prow = &mut p[(h * seg.q_len + qi) * seg.k_len..][..seg.k_len];
                    for (kj, (pv, &a)) in prow.iter_mut().zip(arow).enumerate() {
                        if a {
                            let krow = &ks[(seg.k_start + kj) * d + off..][..dh];
                            *pv = dot(qrow, krow) * scale;
                        }
                    }
                    if !masked_softmax_row(prow, arow) {
                        return Err(TensorError::EmptyMaskRow { row: qi });
                    }
                    let orow = &mut out[(seg.q_start + qi) * d + off..][..dh];
                    for (kj, &pv) in prow.iter().enumerate() {
                        if pv != 0.0 {
                            axpy(pv, &vs[(seg.k_start + kj) * d + off..][..dh], orow);
                        }
                    }
                }
            }
            probs.push(p);
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        let op = Op::Attention {
            q,
            k,
            v,
            heads,
            segments,
            probs,
        };
        Ok(self.push(Tensor::new(vec![nq, d], out)?, op, ng))
    }

    /// Weighted mean of label-smoothed negative log-likelihood.
    ///
    /// Per row the loss is `-(1-ε)·log p[target] - (ε/V)·Σᵥ log p[v]`; rows
    /// are combined as `Σ wᵢ ℓᵢ / Σ wᵢ`. When every weight is zero the loss
    /// is 0 and contributes no gradient. Accumulation is in f64.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f32],
        epsilon: f32,
    ) -> Result<Var> {
        let (n, vocab) = self.value(logits).dims2("cross_entropy")?;
        if targets.len() != n || weights.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![n, vocab],
                rhs: vec![targets.len(), weights.len()],
            });
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(TensorError::Invalid(format!("label smoothing {epsilon}")));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
            return Err(TensorError::Invalid(format!("negative loss weight {w}")));
        }
        let xs = self.value(logits).data();
        let mut probs = vec![0.0f32; n * vocab];
        let mut total = 0.0f64;
        let mut weight_sum = 0.0f64;
        let mut logp = vec![0.0f32; vocab];
        for (pos, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if w == 0.0 {
                continue;
            }
            if t >= vocab {
                return Err(TensorError::TargetOutOfRange { id: t, pos, vocab });
            }
            let row = &xs[pos * vocab..(pos + 1) * vocab];
            kernels::log_softmax_row(row, &mut logp);
            let mean_logp = logp.iter().map(|&x| x as f64).sum::<f64>() / vocab as f64;
            let nll = -(1.0 - epsilon as f64) * logp[t] as f64 - epsilon as f64 * mean_logp;
            total += w as f64 * nll;
            weight_sum += w as f64;
            for (p, &lp) in probs[pos * vocab..(pos + 1) * vocab].iter_mut().zip(&logp) {
                *p = lp.exp();
            }
        }
        let loss = if weight_sum > 0.0 { total / weight_sum } else { 0.0 };
        if !loss.is_finite() {
            return Err(TensorError::NonFinite("cross_entropy".into()));
        }
        let ng = self.needs(logits) && weight_sum > 0.0;
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            epsilon,
            probs,
            weight_sum,
        };
        Ok(self.push(Tensor::scalar(loss as f32), op, ng))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    fn accumulate(&mut self, v: Var, delta: Vec<f32>) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&delta) {
                    *a += b;
                }
            }
            None => node.grad = Some(delta),
        }
    }

    /// Back-propagate from a single-element `loss`.
    ///
    /// Afterwards every node that requires a gradient and influences the
    /// loss holds one; [`Tape::grad`] reads it back.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.grad_enabled {
            return Err(TensorError::GradDisabled);
        }
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.is_finite() {
            return Err(TensorError::NonFinite("loss".into()));
        }
        self.backward_from(loss, vec![1.0])
    }

    /// Vector-Jacobian product: back-propagate `seed` as the gradient of `out`.
    pub fn backward_from(&mut self, out: Var, seed: Vec<f32>) -> Result<()> {
        if !self.grad_enabled {
            return Err(TensorError::GradDisabled);
        }
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if seed.len() != self.value(out).numel() {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                lhs: self.value(out).shape().to_vec(),
                rhs: vec![seed.len()],
            });
        }
        self.backward_done = true;
        if !self.needs(out) {
            return Ok(());
        }
        self.nodes[out.0].grad = Some(seed);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let updates = self.node_backward(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, delta) in updates {
                self.accumulate(v, delta);
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                if let Some(g) = &node.grad {
                    if g.iter().any(|x| !x.is_finite()) {
                        return Err(TensorError::NonFinite(format!("gradient of leaf {i}")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Input-gradient contributions of node `i` given its output gradient.
    fn node_backward(&self, i: usize, g: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let shape2 = |v: Var| self.nodes[v.0].value.dims2("backward").expect("rank 2");
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = shape2(*a);
                let (_, n) = shape2(*b);
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_nt(g, val(*b), &mut da, m, n, k);
                    out.push((*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    matmul_tn(val(*a), g, &mut db, m, k, n);
                    out.push((*b, db));
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = shape2(*a);
                let (n, _) = shape2(*b);
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_nn(g, val(*b), &mut da, m, n, k);
                    out.push((*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; n * k];
                    matmul_tn(g, val(*a), &mut db, m, n, k);
                    out.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Scale(a, s) => out.push((*a, g.iter().map(|x| x * s).collect())),
            Op::LinComb(terms) => {
                for &(v, c) in terms {
                    out.push((v, g.iter().map(|x| x * c).collect()));
                }
            }
            Op::Relu(a) => {
                let d = g
                    .iter()
                    .zip(val(*a))
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect();
                out.push((*a, d));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = shape2(*x);
                if let Some(b) = beta {
                    let mut db = vec![0.0; cols];
                    for grow in g.chunks_exact(cols) {
                        axpy(1.0, grow, &mut db);
                    }
                    out.push((*b, db));
                }
                if let Some(gm) = gamma {
                    let mut dg = vec![0.0; cols];
                    for (grow, hrow) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                        for ((d, gv), hv) in dg.iter_mut().zip(grow).zip(hrow) {
                            *d += gv * hv;
                        }
                    }
                    out.push((*gm, dg));
                }
                if self.needs(*x) {
                    let gam = gamma.map(|gm| val(gm));
                    let mut dx = vec![0.0f32; rows * cols];
                    let mut dxhat = vec![0.0f32; cols];
                    for r in 0..rows {
                        let grow = &g[r * cols..(r + 1) * cols];
                        let hrow = &xhat[r * cols..(r + 1) * cols];
                        match gam {
                            Some(gv) => {
                                for ((d, a), b) in dxhat.iter_mut().zip(grow).zip(gv) {
                                    *d = a * b;
                                }
                            }
                            None => dxhat.copy_from_slice(grow),
                        }
                        let mean_d = dxhat.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
                        let mean_dh = dxhat
                            .iter()
                            .zip(hrow)
                            .map(|(&a, &b)| a as f64 * b as f64)
                            .sum::<f64>()
                            / cols as f64;
                        let (mean_d, mean_dh) = (mean_d as f32, mean_dh as f32);
                        for ((o, &dh), &h) in dx[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .zip(&dxhat)
                            .zip(hrow)
                        {
                            *o = rstd[r] * (dh - mean_d - h * mean_dh);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Embedding { table, ids } => {
                let (vocab, d) = shape2(*table);
                let mut dt = vec![0.0f32; vocab * d];
                for (grow, &id) in g.chunks_exact(d).zip(ids) {
                    axpy(1.0, grow, &mut dt[id * d..(id + 1) * d]);
                }
                out.push((*table, dt));
            }
            Op::Dropout { x, mask } => {
                out.push((*x, g.iter().zip(mask).map(|(a, b)| a * b).collect()));
            }
            Op::MaskedSoftmax(x) => {
                let (_, k) = shape2(*x);
                let p = node.value.data();
                let mut dx = vec![0.0f32; p.len()];
                for ((drow, prow), grow) in dx
                    .chunks_exact_mut(k)
                    .zip(p.chunks_exact(k))
                    .zip(g.chunks_exact(k))
                {
                    let s = dot(prow, grow);
                    for ((d, &pv), &gv) in drow.iter_mut().zip(prow).zip(grow) {
                        *d = pv * (gv - s);
                    }
                }
                out.push((*x, dx));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                let (nq, d) = shape2(*q);
                let (nk, _) = shape2(*k);
                let dh = d / heads;
                let scale = 1.0 / (dh as f32).sqrt();
                let (qs, ks, vs) = (val(*q), val(*k), val(*v));
                let mut dq = vec![0.0f32; nq * d];
                let mut dk = vec![0.0f32; nk * d];
                let mut dv = vec![0.0f32; nk * d];
                for (seg, p) in segments.iter().zip(probs) {
                    let mut dp = vec![0.0f32; seg.k_len];
                    for h in 0..*heads {
                        let off = h * dh;
                        for qi in 0..seg.q_len {
                            let qrow_i = (seg.q_start + qi) * d + off;
                            let grow = &g[qrow_i..qrow_i + dh];
                            let prow = &p[(h * seg.q_len + qi) * seg.k_len..][..seg.k_len];
                            let mut s = 0.0f32;
                            for (kj, &pv) in prow.iter().enumerate() {
                                if pv == 0.0 {
                                    dp[kj] = 0.0;
                                    continue;
                                }
                                let kr = (seg.k_start + kj) * d + off;
                                dp[kj] = dot(grow, &vs[kr..kr + dh]);
                                s += pv * dp[kj];
                                axpy(pv, grow, &mut dv[kr..kr + dh]);
                            }
                            for (kj, &pv) in prow.iter().enumerate() {
                                if pv == 0.0 {
                                    continue;
                                }
                                let ds = pv * (dp[kj] - s) * scale;
                                let kr = (seg.k_start + kj) * d + off;
                                axpy(ds, &ks[kr..kr + dh], &mut dq[qrow_i..qrow_i + dh]);
                                axpy(ds, &qs[qrow_i..qrow_i + dh], &mut dk[kr..kr + dh]);
                            }
                        }
                    }
                }
                out.push((*q, dq));
                out.push((*k, dk));
                out.push((*v, dv));
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                epsilon,
                probs,
                weight_sum,
            } => {
                let (_, vocab) = shape2(*logits);
                let mut dl = vec![0.0f32; probs.len()];
                let smooth = epsilon / vocab as f32;
                for (pos, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let c = (w as f64 / weight_sum) as f32 * g[0];
                    let drow = &mut dl[pos * vocab..(pos + 1) * vocab];
                    let prow = &probs[pos * vocab..(pos + 1) * vocab];
                    for (d, &p) in drow.iter_mut().zip(prow) {
                        *d = c * (p - smooth);
                    }
                    drow[t] -= c * (1.0 - epsilon);
                }
                out.push((*logits, dl));
            }
        }
        out
    }
}
