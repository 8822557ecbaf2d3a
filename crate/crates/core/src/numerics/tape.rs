//! Reverse-mode differentiation over a flat computation record.
//!
//! Every operation appends one node whose inputs are strictly earlier nodes, so
//! the node order is already topological and `backward` is a single reverse sweep.

use std::sync::Arc;

use super::tensor::{dot, matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};
use crate::error::{AtaError, Result};
use crate::permutation::Permutation;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Partition of token rows into independent attention groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grouping {
    rows: usize,
    groups: Vec<Vec<usize>>,
}

impl Grouping {
    pub fn new(rows: usize, groups: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = vec![false; rows];
        for g in &groups {
            if g.is_empty() {
                return Err(AtaError::invalid("empty attention group"));
            }
            for &r in g {
                if r >= rows || seen[r] {
                    return Err(AtaError::invalid(format!(
                        "row {r} is out of range or appears in two groups"
                    )));
                }
                seen[r] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(AtaError::invalid("grouping does not cover every row"));
        }
        Ok(Self { rows, groups })
    }

    /// All rows attend to each other.
    pub fn single(rows: usize) -> Self {
        Self {
            rows,
            groups: vec![(0..rows).collect()],
        }
    }

    /// Consecutive blocks of `size` rows (one frame of a `[T·HW, d]` token matrix).
    pub fn contiguous(rows: usize, size: usize) -> Result<Self> {
        if size == 0 || rows % size != 0 {
            return Err(AtaError::invalid(format!(
                "{rows} rows cannot be split into blocks of {size}"
            )));
        }
        Ok(Self {
            rows,
            groups: (0..rows / size)
                .map(|b| (b * size..(b + 1) * size).collect())
                .collect(),
        })
    }

    /// Rows `{t·stride + p}` for each `p < stride` (one spatial location across time).
    pub fn strided(rows: usize, stride: usize) -> Result<Self> {
        if stride == 0 || rows % stride != 0 {
            return Err(AtaError::invalid(format!(
                "{rows} rows cannot be strided by {stride}"
            )));
        }
        let t = rows / stride;
        Ok(Self {
            rows,
            groups: (0..stride)
                .map(|p| (0..t).map(|ti| ti * stride + p).collect())
                .collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    IndexRows {
        x: Var,
        index: Arc<[usize]>,
    },
    Reshape(Var),
    Sum(Var),
    MeanRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        grouping: Arc<Grouping>,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddBias(..) => "add_bias",
            Op::Softmax(..) => "softmax_lastdim",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::IndexRows { .. } => "index_rows",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::MeanRows(..) => "mean_rows",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `like`'s shape when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input that is not differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Trainable leaf; receives a gradient from `backward`.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        let idx = self.nodes.len();
        if !value.is_finite() {
            return Err(AtaError::NonFinite {
                op: op.name(),
                node: Some(idx),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(idx))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(AtaError::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(AtaError::shape(
                "matmul",
                format!("[{m}x{k}] times [{k2}x{n}]"),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = map(self.value(a), |x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = map(self.value(a), |x| x + s);
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// Adds a bias vector `b[n]` to every row of `x[m×n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, n) = self.value(x).dims2("add_bias")?;
        if self.value(b).numel() != n {
            return Err(AtaError::shape(
                "add_bias",
                format!("bias of {} for width {n}", self.value(b).numel()),
            ));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        self.push(out, Op::AddBias(x, b), &[x, b])
    }

    /// Softmax over the last dimension with max subtraction.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        let n = out.last_dim();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push(out, Op::Softmax(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(AtaError::shape(
                "layer_norm",
                format!(
                    "gamma {} / beta {} for last dimension {n}",
                    self.value(gamma).numel(),
                    self.value(beta).numel()
                ),
            ));
        }
        let xv = self.value(x);
        let rows = xv.rows();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
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
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = map(self.value(a), |x| 0.5 * x * (1.0 + gelu_inner(x).tanh()));
        self.push(out, Op::Gelu(a), &[a])
    }

    /// `out[j] = x[index[j]]` over rows; repeated indices accumulate in the backward pass.
    pub fn index_rows(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var> {
        let (m, n) = self.value(x).dims2("index_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(AtaError::shape(
                "index_rows",
                format!("row {bad} out of range for {m} rows"),
            ));
        }
        if index.is_empty() {
            return Err(AtaError::shape("index_rows", "empty index"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * n);
        for &i in index.iter() {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let out = Tensor::new(vec![index.len(), n], out)?;
        self.push(out, Op::IndexRows { x, index }, &[x])
    }

    /// `out[j] = x[perm(j)]`; the backward pass scatters through the inverse.
    pub fn gather_rows(&mut self, x: Var, perm: &Permutation) -> Result<Var> {
        let (m, _) = self.value(x).dims2("gather_rows")?;
        if perm.len() != m {
            return Err(AtaError::InvalidPermutation(format!(
                "permutation of {} for {m} rows",
                perm.len()
            )));
        }
        self.index_rows(x, perm.map().into())
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).reshaped(shape)?;
        self.push(out, Op::Reshape(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Column means of `x[m×n]` as a `[1×n]` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2("mean_rows")?;
        let mut out = vec![0.0; n];
        for row in self.value(x).data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        self.push(Tensor::new(vec![1, n], out)?, Op::MeanRows(x), &[x])
    }

    /// Multi-head scaled dot-product attention restricted to row groups.
    ///
    /// `q`, `k`, `v` are `[rows × d]`; head `h` uses columns `h·d/heads .. (h+1)·d/heads`.
    pub fn grouped_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        grouping: Arc<Grouping>,
        heads: usize,
    ) -> Result<Var> {
        let (rows, d) = self.value(q).dims2("attention")?;
        for other in [k, v] {
            if self.value(other).shape() != [rows, d] {
                return Err(AtaError::shape(
                    "attention",
                    format!(
                        "q is [{rows}x{d}], got {:?}",
                        self.value(other).shape()
                    ),
                ));
            }
        }
        if grouping.rows() != rows {
            return Err(AtaError::shape(
                "attention",
                format!("grouping over {} rows for {rows} tokens", grouping.rows()),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(AtaError::invalid(format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let total: usize = grouping.groups().iter().map(|g| g.len() * g.len()).sum();
        let mut probs = Vec::with_capacity(total * heads);
        let mut out = vec![0.0; rows * d];
        for g in grouping.groups() {
            let l = g.len();
            for h in 0..heads {
                let c0 = h * dh;
                let base = probs.len();
                for &ri in g {
                    let qi = &qd[ri * d + c0..ri * d + c0 + dh];
                    for &rj in g {
                        probs.push(dot(qi, &kd[rj * d + c0..rj * d + c0 + dh]) * scale);
                    }
                }
                for (a, &ri) in g.iter().enumerate() {
                    let p = &mut probs[base + a * l..base + (a + 1) * l];
                    softmax_in_place(p);
                    let orow = &mut out[ri * d + c0..ri * d + c0 + dh];
                    for (b, &rj) in g.iter().enumerate() {
                        let w = p[b];
                        for (o, vv) in orow.iter_mut().zip(&vd[rj * d + c0..rj * d + c0 + dh]) {
                            *o += w * vv;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![rows, d], out)?;
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                grouping,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Mean softmax cross-entropy of `logits[B×K]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.value(logits).dims2("cross_entropy")?;
        if labels.len() != b {
            return Err(AtaError::shape(
                "cross_entropy",
                format!("{} labels for {b} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(AtaError::invalid(format!("label {bad} out of range {k}")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(k).zip(labels) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            softmax_in_place(row);
        }
        let out = Tensor::scalar(loss / b as f64);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Exact reverse-mode gradients of a scalar `loss` for every node that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(AtaError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(node, &g, &mut adj)?;
            if !g.iter().all(|x| x.is_finite()) {
                return Err(AtaError::NonFinite {
                    op: node.op.name(),
                    node: Some(idx),
                });
            }
            adj[idx] = Some(g);
        }

        let grads = adj
            .into_iter()
            .enumerate()
            .map(|(i, a)| {
                let node = &self.nodes[i];
                match (&node.op, a) {
                    (Op::Leaf, Some(g)) if node.requires_grad => {
                        Some(Tensor::new(node.value.shape().to_vec(), g).expect("shape"))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn acc<'a>(&self, adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(adj[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2("matmul")?;
                let (_, n) = self.value(*b).dims2("matmul")?;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(adj, *a) {
                    matmul_bt_acc(g, bv, ga, m, n, k);
                }
                if let Some(gb) = self.acc(adj, *b) {
                    matmul_at_acc(av, g, gb, m, k, n);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2("transpose")?;
                if let Some(ga) = self.acc(adj, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(adj, v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(adj, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(adj, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(adj, *a) {
                    for ((x, gy), bb) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gy * bb;
                    }
                }
                if let Some(gb) = self.acc(adj, *b) {
                    for ((x, gy), aa) in gb.iter_mut().zip(g).zip(av) {
                        *x += gy * aa;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(adj, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = self.acc(adj, *a) {
                    add_into(ga, g);
                }
            }
            Op::AddBias(x, b) => {
                let n = self.value(*b).numel();
                if let Some(gx) = self.acc(adj, *x) {
                    add_into(gx, g);
                }
                if let Some(gb) = self.acc(adj, *b) {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                if let Some(ga) = self.acc(adj, *a) {
                    for ((gr, yr), dr) in ga.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let s = dot(yr, dr);
                        for j in 0..n {
                            gr[j] += yr[j] * (dr[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.value(*x).last_dim();
                let gam = self.value(*gamma).data();
                if let Some(gg) = self.acc(adj, *gamma) {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(adj, *beta) {
                    for gr in g.chunks(n) {
                        add_into(gb, gr);
                    }
                }
                if let Some(gx) = self.acc(adj, *x) {
                    let nf = n as f64;
                    let mut dh = vec![0.0; n];
                    for (r, ((gxr, gr), hr)) in gx
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(xhat.chunks(n))
                        .enumerate()
                    {
                        for j in 0..n {
                            dh[j] = gr[j] * gam[j];
                        }
                        let s1: f64 = dh.iter().sum();
                        let s2 = dot(&dh, hr);
                        for j in 0..n {
                            gxr[j] += rstd[r] / nf * (nf * dh[j] - s1 - hr[j] * s2);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                if let Some(ga) = self.acc(adj, *a) {
                    for ((o, gy), &x) in ga.iter_mut().zip(g).zip(xv) {
                        let t = gelu_inner(x).tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *o += gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                    }
                }
            }
            Op::IndexRows { x, index } => {
                let (_, n) = self.value(*x).dims2("index_rows")?;
                if let Some(gx) = self.acc(adj, *x) {
                    for (j, &i) in index.iter().enumerate() {
                        add_into(&mut gx[i * n..(i + 1) * n], &g[j * n..(j + 1) * n]);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(adj, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::MeanRows(x) => {
                let (m, _) = self.value(*x).dims2("mean_rows")?;
                if let Some(gx) = self.acc(adj, *x) {
                    let inv = 1.0 / m as f64;
                    for row in gx.chunks_mut(g.len()) {
                        row.iter_mut().zip(g).for_each(|(o, y)| *o += y * inv);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                grouping,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, grouping, *heads, probs, g, adj)?,
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (b, k) = self.value(*logits).dims2("cross_entropy")?;
                if let Some(gl) = self.acc(adj, *logits) {
                    let s = g[0] / b as f64;
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            gl[r * k + j] += s * (probs[r * k + j] - onehot);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        grouping: &Grouping,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        adj: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let (_, d) = self.value(q).dims2("attention")?;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let rows = grouping.rows();
        let mut gq = vec![0.0; rows * d];
        let mut gk = vec![0.0; rows * d];
        let mut gv = vec![0.0; rows * d];
        let mut offset = 0;
        for grp in grouping.groups() {
            let l = grp.len();
            let mut ds = vec![0.0; l * l];
            for h in 0..heads {
                let c0 = h * dh;
                let p = &probs[offset..offset + l * l];
                offset += l * l;
                for (a, &ri) in grp.iter().enumerate() {
                    let go = &g[ri * d + c0..ri * d + c0 + dh];
                    let prow = &p[a * l..(a + 1) * l];
                    let dsrow = &mut ds[a * l..(a + 1) * l];
                    for (b, &rj) in grp.iter().enumerate() {
                        dsrow[b] = dot(go, &vd[rj * d + c0..rj * d + c0 + dh]);
                        let w = prow[b];
                        for (x, gy) in gv[rj * d + c0..rj * d + c0 + dh].iter_mut().zip(go) {
                            *x += w * gy;
                        }
                    }
                    let s = dot(prow, dsrow);
                    for b in 0..l {
                        dsrow[b] = prow[b] * (dsrow[b] - s) * scale;
                    }
                }
                for (a, &ri) in grp.iter().enumerate() {
                    for (b, &rj) in grp.iter().enumerate() {
                        let w = ds[a * l + b];
                        if w == 0.0 {
                            continue;
                        }
                        for c in c0..c0 + dh {
                            gq[ri * d + c] += w * kd[rj * d + c];
                            gk[rj * d + c] += w * qd[ri * d + c];
                        }
                    }
                }
            }
        }
        for (var, grad) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(acc) = self.acc(adj, var) {
                add_into(acc, &grad);
            }
        }
        Ok(())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu_inner(x: f64) -> f64 {
    GELU_C * (x + GELU_A * x * x * x)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
        .expect("same shape")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("same shape")
}
