//! Reverse-mode differentiation over a linear tape.
//!
//! Values are computed eagerly as nodes are pushed; `backward` replays the
//! tape in reverse. Nodes whose inputs never reach a gradient-requiring leaf
//! are skipped entirely, which is what makes frozen base weights cheap.

use super::tensor::{gemm, Tensor};
use super::LOG_FLOOR;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    /// a [n,k] · b [m,k]ᵀ
    MatMulNT(Var, Var),
    /// a [n,k] · b [k,m]
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    CausalSoftmax(Var),
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    PoolTopK {
        probs: Var,
        order: Vec<Vec<usize>>,
    },
    KlToConst {
        q: Var,
        p: Tensor,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A tape of tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0[v.0].take()
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = super::tensor::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMulNT(a, b), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = super::tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!("add {:?} + {:?}", ta.shape(), tb.shape())));
        }
        let mut value = ta.clone();
        value.add_assign(tb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a row vector `b [m]` to every row of `a [n,m]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let m = ta.cols();
        if tb.numel() != m {
            return Err(Error::Shape(format!("add_row {:?} + {:?}", ta.shape(), tb.shape())));
        }
        let mut value = ta.clone();
        for i in 0..value.rows() {
            for (v, bias) in value.row_mut(i).iter_mut().zip(tb.data()) {
                *v += bias;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::AddRow(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().for_each(|v| *v *= s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// tanh-approximated GeLU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for v in value.data_mut() {
            let x = *v;
            *v = 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh());
        }
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, m) = (tx.rows(), tx.cols());
        if self.value(gain).numel() != m || self.value(bias).numel() != m {
            return Err(Error::Shape("layer_norm gain/bias width".into()));
        }
        let mut xhat = vec![0.0; n * m];
        let mut rstd = vec![0.0; n];
        for i in 0..n {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for j in 0..m {
                xhat[i * m + j] = (row[j] - mean) * r;
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = xhat[i * m + j] * g[j] + b[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Selects rows of `table [V,h]` by id.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, h) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange { id, vocab: v });
            }
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(vec![ids.len(), h], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (n, m) = (t.rows(), t.cols());
        if start + len > m {
            return Err(Error::Shape(format!("slice {start}+{len} of width {m}")));
        }
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let value = Tensor::new(vec![n, len], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        if parts.iter().any(|&p| self.value(p).rows() != n) {
            return Err(Error::Shape("concat_cols row mismatch".into()));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![n, total], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Row `i` of a square score matrix is softmaxed over columns `0..=i`;
    /// later columns are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, m) = (t.rows(), t.cols());
        if n != m {
            return Err(Error::Shape(format!("causal_softmax needs square, got {n}x{m}")));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &t.row(i)[..=i];
            softmax_into(row, &mut out[i * m..i * m + i + 1]);
        }
        let value = Tensor::new(vec![n, m], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::CausalSoftmax(x), rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, m) = (t.rows(), t.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            softmax_into(t.row(i), &mut out[i * m..(i + 1) * m]);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SoftmaxRows(x), rg))
    }

    /// Mean next-token cross-entropy over rows that carry a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let t = self.value(logits);
        let (n, v) = (t.rows(), t.cols());
        if targets.len() != n {
            return Err(Error::Shape(format!(
                "cross_entropy: {} targets for {n} rows",
                targets.len()
            )));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::InvalidArgument("cross_entropy needs at least one target".into()));
        }
        let mut probs = vec![0.0; n * v];
        let mut total = 0.0;
        for (i, target) in targets.iter().enumerate() {
            let Some(target) = *target else { continue };
            if target >= v {
                return Err(Error::TokenOutOfRange { id: target, vocab: v });
            }
            let row = t.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[target];
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
        }
        let value = Tensor::scalar(total / count as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Per row: the `k` largest entries in descending order followed by the sum
    /// of the remainder. Ties are ordered by ascending index.
    pub fn pool_top_k(&mut self, probs: Var, k: usize) -> Result<Var> {
        let t = self.value(probs);
        let (n, v) = (t.rows(), t.cols());
        if k == 0 || k >= v {
            return Err(Error::InvalidArgument(format!(
                "pooling needs 1 <= K < V, got K={k}, V={v}"
            )));
        }
        let mut out = Vec::with_capacity(n * (k + 1));
        let mut order = Vec::with_capacity(n);
        for i in 0..n {
            let row = t.row(i);
            let top = top_k_indices(row, k);
            out.extend(top.iter().map(|&j| row[j]));
            // Sum the remainder directly rather than 1 - kept: the latter
            // cancels catastrophically when the top-K mass is close to 1.
            let mut is_top = vec![false; v];
            top.iter().for_each(|&j| is_top[j] = true);
            let rest: f64 = row
                .iter()
                .zip(&is_top)
                .filter(|(_, &top)| !top)
                .map(|(p, _)| p)
                .sum();
            out.push(rest);
            order.push(top);
        }
        let value = Tensor::new(vec![n, k + 1], out)?;
        let rg = self.rg(probs);
        Ok(self.push(value, Op::PoolTopK { probs, order }, rg))
    }

    /// `Σ_rows Σ_j p_ij · (ln p_ij − ln q_ij)` with `p` held constant. Terms
    /// with `p_ij = 0` contribute nothing; log arguments are floored.
    pub fn kl_to_const(&mut self, p: Tensor, q: Var) -> Result<Var> {
        let tq = self.value(q);
        if p.shape() != tq.shape() {
            return Err(Error::Shape(format!(
                "kl teacher {:?} vs student {:?}",
                p.shape(),
                tq.shape()
            )));
        }
        let total: f64 = p
            .data()
            .iter()
            .zip(tq.data())
            .filter(|(&pj, _)| pj > 0.0)
            .map(|(&pj, &qj)| pj * (pj.max(LOG_FLOOR).ln() - qj.max(LOG_FLOOR).ln()))
            .sum();
        if !total.is_finite() {
            return Err(Error::NonFinite("kl divergence".into()));
        }
        let rg = self.rg(q);
        Ok(self.push(Tensor::scalar(total), Op::KlToConst { q, p }, rg))
    }

    /// `Σ w_i · x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.numel() != 1 {
                return Err(Error::Shape("weighted_sum expects scalars".into()));
            }
            total += w * t.item();
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), rg))
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        if !self.value(loss).is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backprop_node(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Grads(grads))
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.rows());
                if self.rg(*a) {
                    // da [n,k] = dy [n,m] · b [m,k]
                    let mut da = Tensor::zeros(&[n, k]);
                    gemm(n, m, k, dy.data(), (m as isize, 1), tb.data(), (k as isize, 1), da.data_mut(), 0.0);
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    // db [m,k] = dyᵀ [m,n] · a [n,k]
                    let mut db = Tensor::zeros(&[m, k]);
                    gemm(m, n, k, dy.data(), (1, m as isize), ta.data(), (k as isize, 1), db.data_mut(), 0.0);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                if self.rg(*a) {
                    // da [n,k] = dy [n,m] · bᵀ [m,k]
                    let mut da = Tensor::zeros(&[n, k]);
                    gemm(n, m, k, dy.data(), (m as isize, 1), tb.data(), (1, m as isize), da.data_mut(), 0.0);
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    // db [k,m] = aᵀ [k,n] · dy [n,m]
                    let mut db = Tensor::zeros(&[k, m]);
                    gemm(k, n, m, ta.data(), (1, k as isize), dy.data(), (m as isize, 1), db.data_mut(), 0.0);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                if self.rg(*b) {
                    let tb = self.value(*b);
                    let mut db = Tensor::zeros(tb.shape());
                    for i in 0..dy.rows() {
                        for (acc, g) in db.data_mut().iter_mut().zip(dy.row(i)) {
                            *acc += g;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(a, s) => {
                let mut da = dy.clone();
                da.data_mut().iter_mut().for_each(|v| *v *= s);
                self.accumulate(grads, *a, da);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut da = dy.clone();
                for (g, &x) in da.data_mut().iter_mut().zip(x.data()) {
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let th = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    *g *= 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
                }
                self.accumulate(grads, *a, da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let tx = self.value(*x);
                let (n, m) = (tx.rows(), tx.cols());
                let g = self.value(*gain).data();
                if self.rg(*gain) || self.rg(*bias) {
                    let mut dg = vec![0.0; m];
                    let mut db = vec![0.0; m];
                    for i in 0..n {
                        for j in 0..m {
                            dg[j] += dy.data()[i * m + j] * xhat[i * m + j];
                            db[j] += dy.data()[i * m + j];
                        }
                    }
                    let shape = self.value(*gain).shape().to_vec();
                    self.accumulate(grads, *gain, Tensor::new(shape.clone(), dg).expect("shape"));
                    self.accumulate(grads, *bias, Tensor::new(shape, db).expect("shape"));
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; n * m];
                    for i in 0..n {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..m {
                            let d = dy.data()[i * m + j] * g[j];
                            mean_d += d;
                            mean_dx += d * xhat[i * m + j];
                        }
                        mean_d /= m as f64;
                        mean_dx /= m as f64;
                        for j in 0..m {
                            let d = dy.data()[i * m + j] * g[j];
                            dx[i * m + j] = rstd[i] * (d - mean_d - xhat[i * m + j] * mean_dx);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx).expect("shape"));
                }
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let mut dt = Tensor::zeros(t.shape());
                for (i, &id) in ids.iter().enumerate() {
                    for (acc, g) in dt.row_mut(id).iter_mut().zip(dy.row(i)) {
                        *acc += g;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::SliceCols { x, start } => {
                let t = self.value(*x);
                let len = dy.cols();
                let mut dx = Tensor::zeros(t.shape());
                for i in 0..dy.rows() {
                    dx.row_mut(i)[*start..*start + len].copy_from_slice(dy.row(i));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let t = self.value(p);
                    let w = t.cols();
                    if self.rg(p) {
                        let mut dp = Tensor::zeros(t.shape());
                        for i in 0..dy.rows() {
                            dp.row_mut(i).copy_from_slice(&dy.row(i)[offset..offset + w]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += w;
                }
            }
            Op::CausalSoftmax(x) | Op::SoftmaxRows(x) => {
                let y = &node.value;
                let m = y.cols();
                let mut dx = Tensor::zeros(y.shape());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), dy.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let out = dx.row_mut(i);
                    for j in 0..m {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let t = self.value(*logits);
                let v = t.cols();
                let scale = dy.item() / *count as f64;
                let mut dl = Tensor::zeros(t.shape());
                for (i, target) in targets.iter().enumerate() {
                    let Some(target) = *target else { continue };
                    let row = dl.row_mut(i);
                    for j in 0..v {
                        row[j] = probs[i * v + j] * scale;
                    }
                    row[target] -= scale;
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::PoolTopK { probs, order } => {
                let t = self.value(*probs);
                let k = dy.cols() - 1;
                let mut dp = Tensor::zeros(t.shape());
                for (i, top) in order.iter().enumerate() {
                    let g = dy.row(i);
                    let row = dp.row_mut(i);
                    row.iter_mut().for_each(|v| *v = g[k]);
                    for (r, &j) in top.iter().enumerate() {
                        row[j] = g[r];
                    }
                }
                self.accumulate(grads, *probs, dp);
            }
            Op::KlToConst { q, p } => {
                let tq = self.value(*q);
                let s = dy.item();
                let mut dq = Tensor::zeros(tq.shape());
                for ((d, &pj), &qj) in dq.data_mut().iter_mut().zip(p.data()).zip(tq.data()) {
                    if pj > 0.0 && qj > LOG_FLOOR {
                        *d = -s * pj / qj;
                    }
                }
                self.accumulate(grads, *q, dq);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, Tensor::scalar(w * dy.item()));
                }
            }
        }
    }
}

/// Indices of the `k` largest values, descending; ties resolved by index.
pub(crate) fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    let cmp = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}
