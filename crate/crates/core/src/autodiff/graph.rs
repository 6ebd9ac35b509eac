// SPDX-License-Identifier: MIT OR Apache-2.0

//! Define-by-run tape. Every op appends a node whose inputs already exist,
//! so the node vector is a topological order and backward is a single reverse
//! sweep that visits each node once.

use super::tensor::{check_finite, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    SoftmaxRows(Var),
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
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        n_heads: usize,
        probs: Vec<f64>,
        mask: Option<Vec<f64>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    PickLogProb {
        logits: Var,
        picks: Vec<(usize, usize)>,
        probs: Vec<f64>,
    },
    SegmentSum {
        x: Var,
        segments: Vec<usize>,
    },
    BceWithLogits {
        z: Var,
        targets: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::MulConst(..) => "mul_const",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::GatherRows { .. } => "gather_rows",
            Op::CausalAttention { .. } => "causal_attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::PickLogProb { .. } => "pick_log_prob",
            Op::SegmentSum { .. } => "segment_sum",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumSquares(..) => "sum_squares",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A computation recorded for one forward pass.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    // Four output rows share each row of `b`; per element the sum still runs
    // over `p` in ascending order.
    let mut i = 0;
    while i + 4 <= m {
        let (o0, rest) = out[i * n..(i + 4) * n].split_at_mut(n);
        let (o1, rest) = rest.split_at_mut(n);
        let (o2, o3) = rest.split_at_mut(n);
        for p in 0..k {
            let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let bv = b_row[j];
                o0[j] += a0 * bv;
                o1[j] += a1 * bv;
                o2[j] += a2 * bv;
                o3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    for i in i..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four independent accumulators let the compiler vectorize the reduction
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the op that produced `v`, for diagnostics.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Input ids of every node, in tape order.
    pub fn edges(&self) -> Vec<Vec<usize>> {
        self.nodes.iter().map(|n| inputs(&n.op)).collect()
    }

    /// Adds an input tensor. Its `requires_grad` flag decides whether
    /// backward fills its gradient slot.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a tensor that never receives gradients.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        check_finite(&data, op.name())?;
        let requires_grad = inputs(&op).iter().any(|&i| self.nodes[i].requires_grad);
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.value(v).shape() {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::Shape(format!("{what} expects a matrix, got {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: [{m}x{k}] x [{k2}x{n}]"
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(vec![m, n], out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        self.push(self.value(a).shape().to_vec(), out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        self.push(self.value(a).shape().to_vec(), out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        self.push(self.value(a).shape().to_vec(), out, Op::Mul(a, b))
    }

    /// `x + bias` with `bias` broadcast over every leading dimension.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(bias).shape() != [d] {
            return Err(Error::Shape(format!(
                "bias shape {:?} does not match last dim {d}",
                self.value(bias).shape()
            )));
        }
        let b = self.value(bias).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(x, b)| x + b))
            .collect();
        self.push(self.value(x).shape().to_vec(), out, Op::AddBias(x, bias))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).data().iter().map(|v| v * c).collect();
        self.push(self.value(x).shape().to_vec(), out, Op::Scale(x, c))
    }

    /// Elementwise product with a constant array (dropout masks).
    pub fn mul_const(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        if factors.len() != self.value(x).len() {
            return Err(Error::Shape(format!(
                "mask of {} values for tensor of {}",
                factors.len(),
                self.value(x).len()
            )));
        }
        let out = zip_map(self.value(x).data(), &factors, |x, m| x * m);
        self.push(self.value(x).shape().to_vec(), out, Op::MulConst(x, factors))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        self.push(self.value(x).shape().to_vec(), out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).data().iter().map(|&v| sigmoid(v)).collect();
        self.push(self.value(x).shape().to_vec(), out, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).data().iter().map(|&v| softplus(v)).collect();
        self.push(self.value(x).shape().to_vec(), out, Op::Softplus(x))
    }

    /// Softmax over the last dimension, stabilized by row-max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        let mut out = vec![0.0; self.value(x).len()];
        for (row, o) in self.value(x).data().chunks(d).zip(out.chunks_mut(d)) {
            log_softmax_row(row, o);
        }
        self.push(self.value(x).shape().to_vec(), out, Op::SoftmaxRows(x))
    }

    /// Normalizes each vector along the last dimension, then applies
    /// `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if d < 2 {
            return Err(Error::Shape("layer_norm needs at least 2 features".into()));
        }
        if self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(Error::Shape(format!("layer_norm affine params must be [{d}]")));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let xs = self.value(x).data();
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// Gathers rows of `table` (shape `[vocab, d]`) by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "embedding table")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index(format!("token {bad} outside vocabulary of {v}")));
        }
        let t = self.value(table);
        let out: Vec<f64> = ids.iter().flat_map(|&i| t.row(i).to_vec()).collect();
        self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Selects rows of a matrix.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, d) = self.dims2(x, "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Index(format!("row {bad} outside {m} rows")));
        }
        let t = self.value(x);
        let out: Vec<f64> = rows.iter().flat_map(|&r| t.row(r).to_vec()).collect();
        self.push(vec![rows.len(), d], out, Op::GatherRows { x, rows: rows.to_vec() })
    }

    /// Multi-head causal self-attention over `q`, `k`, `v` of shape
    /// `[n_seq * seq_len, d]` (sequences stacked). `prob_mask`, when present,
    /// multiplies the attention probabilities elementwise and is laid out as
    /// `[n_seq, n_heads, seq_len, seq_len]`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        n_heads: usize,
        prob_mask: Option<Vec<f64>>,
    ) -> Result<Var> {
        let (rows, d) = self.dims2(q, "attention q")?;
        self.same_shape(q, k, "attention k")?;
        self.same_shape(q, v, "attention v")?;
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::Shape(format!("{rows} rows not divisible by seq_len {seq_len}")));
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::Shape(format!("d={d} not divisible by {n_heads} heads")));
        }
        let n_seq = rows / seq_len;
        let t = seq_len;
        if let Some(m) = &prob_mask {
            if m.len() != n_seq * n_heads * t * t {
                return Err(Error::Shape("attention mask has wrong size".into()));
            }
        }
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; n_seq * n_heads * t * t];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; t];
        for s in 0..n_seq {
            for h in 0..n_heads {
                let off = h * dh;
                for i in 0..t {
                    let qi = &qd[(s * t + i) * d + off..(s * t + i) * d + off + dh];
                    for j in 0..=i {
                        let kj = &kd[(s * t + j) * d + off..(s * t + j) * d + off + dh];
                        scores[j] = dot(qi, kj) * scale;
                    }
                    let base = ((s * n_heads + h) * t + i) * t;
                    log_softmax_row(&scores[..=i], &mut probs[base..base + i + 1]);
                    let o = &mut out[(s * t + i) * d + off..(s * t + i) * d + off + dh];
                    for j in 0..=i {
                        let mut p = probs[base + j];
                        if let Some(m) = &prob_mask {
                            p *= m[base + j];
                        }
                        if p == 0.0 {
                            continue;
                        }
                        let vj = &vd[(s * t + j) * d + off..(s * t + j) * d + off + dh];
                        for (o, &x) in o.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        self.push(
            vec![rows, d],
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                seq_len,
                n_heads,
                probs,
                mask: prob_mask,
            },
        )
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`.
    pub fn cross_entropy_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t: Vec<Option<usize>> = targets.iter().map(|&t| Some(t)).collect();
        self.masked_cross_entropy(logits, &t)
    }

    /// Cross-entropy averaged over the rows whose target is `Some`.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (m, v) = self.dims2(logits, "cross_entropy logits")?;
        if targets.len() != m {
            return Err(Error::Shape(format!("{} targets for {m} rows", targets.len())));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::Index(format!("target {bad} outside [0, {v})")));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Contract("cross-entropy with every target masked".into()));
        }
        let mut probs = vec![0.0; m * v];
        let mut loss = 0.0;
        let ld = self.value(logits).data();
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &ld[r * v..(r + 1) * v];
            log_softmax_row(row, &mut probs[r * v..(r + 1) * v]);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        self.push(
            vec![],
            vec![loss / count as f64],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        )
    }

    /// `log softmax(logits)[row, class]` for each pick, as a vector.
    pub fn pick_log_prob(&mut self, logits: Var, picks: &[(usize, usize)]) -> Result<Var> {
        let (m, v) = self.dims2(logits, "pick_log_prob logits")?;
        if let Some(bad) = picks.iter().find(|&&(r, c)| r >= m || c >= v) {
            return Err(Error::Index(format!("pick {bad:?} outside [{m}x{v}]")));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; m * v];
        let mut done = vec![false; m];
        let mut out = Vec::with_capacity(picks.len());
        for &(r, c) in picks {
            let row = &ld[r * v..(r + 1) * v];
            if !done[r] {
                log_softmax_row(row, &mut probs[r * v..(r + 1) * v]);
                done[r] = true;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            out.push(row[c] - lse);
        }
        self.push(
            vec![picks.len()],
            out,
            Op::PickLogProb {
                logits,
                picks: picks.to_vec(),
                probs,
            },
        )
    }

    /// Sums entries of a vector into `n_segments` buckets.
    pub fn segment_sum(&mut self, x: Var, segments: &[usize], n_segments: usize) -> Result<Var> {
        if segments.len() != self.value(x).len() {
            return Err(Error::Shape("segment ids must match vector length".into()));
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= n_segments) {
            return Err(Error::Index(format!("segment {bad} >= {n_segments}")));
        }
        let mut out = vec![0.0; n_segments];
        for (&s, &v) in segments.iter().zip(self.value(x).data()) {
            out[s] += v;
        }
        self.push(
            vec![n_segments],
            out,
            Op::SegmentSum {
                x,
                segments: segments.to_vec(),
            },
        )
    }

    /// Mean binary cross-entropy of logits `z` against 0/1 targets.
    pub fn bce_with_logits(&mut self, z: Var, targets: &[f64]) -> Result<Var> {
        let zs = self.value(z).data();
        if zs.len() != targets.len() || zs.is_empty() {
            return Err(Error::Shape(format!(
                "{} logits vs {} targets",
                zs.len(),
                targets.len()
            )));
        }
        let loss = zs.iter().zip(targets).map(|(&z, &y)| softplus(z) - y * z).sum::<f64>() / zs.len() as f64;
        self.push(
            vec![],
            vec![loss],
            Op::BceWithLogits {
                z,
                targets: targets.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(vec![], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::Shape("mean of empty tensor".into()));
        }
        let s = self.value(x).data().iter().sum::<f64>() / n as f64;
        self.push(vec![], vec![s], Op::Mean(x))
    }

    /// Squared Euclidean norm of all entries.
    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(vec![], vec![s], Op::SumSquares(x))
    }

    /// Reverse sweep from a scalar `loss`. Afterwards every node that
    /// requires grad holds `d loss / d node` in its grad slot; nodes the loss
    /// does not depend on hold zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                let len = node.value.len();
                let g = g.unwrap_or_else(|| vec![0.0; len]);
                check_finite(&g, "gradient")?;
                node.value.set_grad(g);
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        // Each arm borrows at most one input slot at a time through `with`.
        fn with(grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
            if let Some(slot) = grads[v.0].as_mut() {
                f(slot);
            }
        }
        let ensure = |v: Var, grads: &mut [Option<Vec<f64>>]| -> bool {
            if !needs(v) {
                return false;
            }
            let len = self.nodes[v.0].value.len();
            grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            true
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(&self.nodes[a.0].value);
                let n = self.nodes[b.0].value.last_dim();
                let (ad, bd) = (val(*a), val(*b));
                if ensure(*a, grads) {
                    let bt = transpose(bd, k, n);
                    with(grads, *a, |da| matmul_into(g, &bt, da, m, n, k));
                }
                if ensure(*b, grads) {
                    let at = transpose(ad, m, k);
                    with(grads, *b, |db| matmul_into(&at, g, db, k, m, n));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if ensure(*a, grads) {
                    with(grads, *a, |da| add_scaled(da, g, 1.0));
                }
                if ensure(*b, grads) {
                    with(grads, *b, |db| add_scaled(db, g, sign));
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                if ensure(*a, grads) {
                    with(grads, *a, |da| {
                        for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(bd) {
                            *d += gv * bv;
                        }
                    });
                }
                if ensure(*b, grads) {
                    with(grads, *b, |db| {
                        for ((d, &gv), &av) in db.iter_mut().zip(g).zip(ad) {
                            *d += gv * av;
                        }
                    });
                }
            }
            Op::AddBias(x, b) => {
                if ensure(*x, grads) {
                    with(grads, *x, |dx| add_scaled(dx, g, 1.0));
                }
                if ensure(*b, grads) {
                    let d = self.nodes[b.0].value.len();
                    with(grads, *b, |db| {
                        for row in g.chunks(d) {
                            add_scaled(db, row, 1.0);
                        }
                    });
                }
            }
            Op::Scale(x, c) => {
                if ensure(*x, grads) {
                    with(grads, *x, |dx| add_scaled(dx, g, *c));
                }
            }
            Op::MulConst(x, m) => {
                if ensure(*x, grads) {
                    with(grads, *x, |dx| {
                        for ((d, &gv), &mv) in dx.iter_mut().zip(g).zip(m) {
                            *d += gv * mv;
                        }
                    });
                }
            }
            Op::Relu(x) => {
                let xd = val(*x);
                if ensure(*x, grads) {
                    with(grads, *x, |dx| {
                        for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(xd) {
                            if xv > 0.0 {
                                *d += gv;
                            }
                        }
                    });
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if ensure(*x, grads) {
                    with(grads, *x, |dx| {
                        for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                            *d += gv * yv * (1.0 - yv);
                        }
                    });
                }
            }
            Op::Softplus(x) => {
                let xd = val(*x);
                if ensure(*x, grads) {
                    with(grads, *x, |dx| {
                        for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(xd) {
                            *d += gv * sigmoid(xv);
                        }
                    });
                }
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                if ensure(*x, grads) {
                    with(grads, *x, |dx| {
                        for ((dr, gr), yr) in dx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                            let s = dot(gr, yr);
                            for ((o, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                                *o += yv * (gv - s);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gd = val(*gain);
                if ensure(*x, grads) {
                    with(grads, *x, |dx| {
                        let mut dxhat = vec![0.0; d];
                        for (r, &s) in rstd.iter().enumerate() {
                            let gr = &g[r * d..(r + 1) * d];
                            let hr = &xhat[r * d..(r + 1) * d];
                            for j in 0..d {
                                dxhat[j] = gr[j] * gd[j];
                            }
                            let m1 = dxhat.iter().sum::<f64>() / d as f64;
                            let m2 = dot(&dxhat, hr) / d as f64;
                            for j in 0..d {
                                dx[r * d + j] += s * (dxhat[j] - m1 - hr[j] * m2);
                            }
                        }
                    });
                }
                if ensure(*gain, grads) {
                    with(grads, *gain, |dg| {
                        for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                dg[j] += gr[j] * hr[j];
                            }
                        }
                    });
                }
                if ensure(*bias, grads) {
                    with(grads, *bias, |db| {
                        for gr in g.chunks(d) {
                            add_scaled(db, gr, 1.0);
                        }
                    });
                }
            }
            Op::Embedding { table, ids } => {
                let d = node.value.last_dim();
                if ensure(*table, grads) {
                    with(grads, *table, |dt| {
                        for (r, &id) in ids.iter().enumerate() {
                            add_scaled(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d], 1.0);
                        }
                    });
                }
            }
            Op::GatherRows { x, rows } => {
                let d = node.value.last_dim();
                if ensure(*x, grads) {
                    with(grads, *x, |dx| {
                        for (r, &src) in rows.iter().enumerate() {
                            add_scaled(&mut dx[src * d..(src + 1) * d], &g[r * d..(r + 1) * d], 1.0);
                        }
                    });
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                seq_len,
                n_heads,
                probs,
                mask,
            } => {
                let (rows, d) = dims(&node.value);
                let t = *seq_len;
                let n_seq = rows / t;
                let dh = d / n_heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (val(*q), val(*k), val(*v));
                let mut dq = vec![0.0; rows * d];
                let mut dk = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                let mut dp = vec![0.0; t];
                for s in 0..n_seq {
                    for h in 0..*n_heads {
                        let off = h * dh;
                        for i in 0..t {
                            let base = ((s * n_heads + h) * t + i) * t;
                            let gi = &g[(s * t + i) * d + off..(s * t + i) * d + off + dh];
                            // d/dP' and dv
                            for j in 0..=i {
                                let vr = (s * t + j) * d + off;
                                let mv = mask.as_ref().map_or(1.0, |m| m[base + j]);
                                dp[j] = dot(gi, &vd[vr..vr + dh]) * mv;
                                let pm = probs[base + j] * mv;
                                if pm != 0.0 {
                                    add_scaled(&mut dv[vr..vr + dh], gi, pm);
                                }
                            }
                            let p = &probs[base..base + i + 1];
                            let sdot = dot(&dp[..=i], p);
                            let qr = (s * t + i) * d + off;
                            for j in 0..=i {
                                let ds = p[j] * (dp[j] - sdot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kr = (s * t + j) * d + off;
                                for e in 0..dh {
                                    dq[qr + e] += ds * kd[kr + e];
                                    dk[kr + e] += ds * qd[qr + e];
                                }
                            }
                        }
                    }
                }
                for (var, delta) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if ensure(var, grads) {
                        with(grads, var, |acc| add_scaled(acc, &delta, 1.0));
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let v = self.nodes[logits.0].value.last_dim();
                let c = g[0] / *count as f64;
                if ensure(*logits, grads) {
                    with(grads, *logits, |dl| {
                        for (r, t) in targets.iter().enumerate() {
                            let Some(t) = *t else { continue };
                            for j in 0..v {
                                dl[r * v + j] += c * probs[r * v + j];
                            }
                            dl[r * v + t] -= c;
                        }
                    });
                }
            }
            Op::PickLogProb { logits, picks, probs } => {
                let v = self.nodes[logits.0].value.last_dim();
                if ensure(*logits, grads) {
                    with(grads, *logits, |dl| {
                        for (&(r, c), &gv) in picks.iter().zip(g) {
                            for j in 0..v {
                                dl[r * v + j] -= gv * probs[r * v + j];
                            }
                            dl[r * v + c] += gv;
                        }
                    });
                }
            }
            Op::SegmentSum { x, segments } => {
                if ensure(*x, grads) {
                    with(grads, *x, |dx| {
                        for (d, &s) in dx.iter_mut().zip(segments) {
                            *d += g[s];
                        }
                    });
                }
            }
            Op::BceWithLogits { z, targets } => {
                let zd = val(*z);
                let c = g[0] / targets.len() as f64;
                if ensure(*z, grads) {
                    with(grads, *z, |dz| {
                        for ((d, &zv), &y) in dz.iter_mut().zip(zd).zip(targets) {
                            *d += c * (sigmoid(zv) - y);
                        }
                    });
                }
            }
            Op::Sum(x) => {
                if ensure(*x, grads) {
                    with(grads, *x, |dx| dx.iter_mut().for_each(|d| *d += g[0]));
                }
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len() as f64;
                if ensure(*x, grads) {
                    with(grads, *x, |dx| dx.iter_mut().for_each(|d| *d += g[0] / n));
                }
            }
            Op::SumSquares(x) => {
                let xd = val(*x);
                if ensure(*x, grads) {
                    with(grads, *x, |dx| {
                        for (d, &xv) in dx.iter_mut().zip(xd) {
                            *d += 2.0 * xv * g[0];
                        }
                    });
                }
            }
        }
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [m, n] => (*m, *n),
        _ => (t.rows(), t.last_dim()),
    }
}

fn add_scaled(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn inputs(op: &Op) -> Vec<usize> {
    let ids: Vec<Var> = match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => {
            vec![*a, *b]
        }
        Op::Scale(x, _)
        | Op::MulConst(x, _)
        | Op::Relu(x)
        | Op::Sigmoid(x)
        | Op::Softplus(x)
        | Op::SoftmaxRows(x)
        | Op::Sum(x)
        | Op::Mean(x)
        | Op::SumSquares(x) => vec![*x],
        Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        Op::Embedding { table, .. } => vec![*table],
        Op::GatherRows { x, .. } => vec![*x],
        Op::CausalAttention { q, k, v, .. } => vec![*q, *k, *v],
        Op::CrossEntropy { logits, .. } | Op::PickLogProb { logits, .. } => vec![*logits],
        Op::SegmentSum { x, .. } => vec![*x],
        Op::BceWithLogits { z, .. } => vec![*z],
    };
    ids.into_iter().map(Var::index).collect()
}
