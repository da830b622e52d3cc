//! Dense tensors, parameters, reverse-mode differentiation and gradient
//! verification. All arithmetic is `f64`.

mod graph;
mod tensor;

pub use graph::{Grads, Graph, Var};
pub(crate) use graph::top_k_indices;
pub use tensor::{matmul, matmul_nt, Tensor};

use crate::error::{Error, Result};

/// Floor applied inside logarithms of KL terms.
pub const LOG_FLOOR: f64 = 1e-30;

/// A trainable tensor together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(value: Tensor, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            trainable,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Adds `g` into the gradient buffer; frozen parameters ignore it.
    pub fn accumulate_grad(&mut self, g: &Tensor) {
        if self.trainable {
            self.grad.add_assign(g);
        }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Anything that owns named parameters in a stable order.
pub trait Parameterized {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Parameter));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter));

    fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, p| p.zero_grad());
    }

    fn trainable_scalars(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| {
            if p.trainable {
                n += p.numel()
            }
        });
        n
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// `KL(p ‖ q) = Σ p_j ln(p_j / q_j)`; terms with `p_j = 0` contribute zero.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "kl_divergence lengths {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut total = 0.0;
    for (j, (&pj, &qj)) in p.iter().zip(q).enumerate() {
        if pj > 0.0 {
            if qj <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "q[{j}] = {qj} where p[{j}] = {pj} > 0"
                )));
            }
            total += pj * (pj.max(LOG_FLOOR).ln() - qj.max(LOG_FLOOR).ln());
        }
    }
    Ok(total.max(0.0))
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over trainable scalars of |analytic − numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    pub checked_scalars: usize,
    /// Frozen scalars whose analytic gradient was not exactly zero.
    pub frozen_nonzero: usize,
}

/// Compares analytic gradients against central finite differences.
///
/// `loss_and_grad` must run forward and backward, accumulating into the
/// parameters' gradient buffers; `loss` only evaluates.
pub fn grad_check<M, L, G>(
    model: &mut M,
    eps: f64,
    mut loss: L,
    mut loss_and_grad: G,
) -> Result<GradCheckReport>
where
    M: Parameterized,
    L: FnMut(&M) -> Result<f64>,
    G: FnMut(&mut M) -> Result<f64>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "grad_check eps {eps} outside [1e-7, 1e-4]"
        )));
    }
    model.zero_grads();
    let base = loss_and_grad(model)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("loss at base point".into()));
    }

    let mut analytic: Vec<(bool, Vec<f64>)> = Vec::new();
    model.visit_params(&mut |_, p| analytic.push((p.trainable, p.grad.data().to_vec())));

    let frozen_nonzero = analytic
        .iter()
        .filter(|(trainable, _)| !trainable)
        .map(|(_, g)| g.iter().filter(|v| **v != 0.0).count())
        .sum();

    let mut max_rel = 0.0f64;
    let mut checked = 0;
    for (pi, (trainable, grad)) in analytic.iter().enumerate() {
        if !trainable {
            continue;
        }
        for (si, &a) in grad.iter().enumerate() {
            let orig = nudge(model, pi, si, None);
            nudge(model, pi, si, Some(orig + eps));
            let plus = loss(model)?;
            nudge(model, pi, si, Some(orig - eps));
            let minus = loss(model)?;
            nudge(model, pi, si, Some(orig));
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at probe of parameter {pi}, scalar {si}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        checked_scalars: checked,
        frozen_nonzero,
    })
}

/// Reads (and optionally overwrites) one scalar of the `pi`-th parameter.
fn nudge<M: Parameterized>(model: &mut M, pi: usize, si: usize, set: Option<f64>) -> f64 {
    let mut idx = 0;
    let mut old = 0.0;
    model.visit_params_mut(&mut |_, p| {
        if idx == pi {
            old = p.value.data()[si];
            if let Some(v) = set {
                p.value.data_mut()[si] = v;
            }
        }
        idx += 1;
    });
    old
}

/// A flat list of named parameters; handy for small hand-built losses.
#[derive(Clone, Debug, Default)]
pub struct ParamList(pub Vec<(String, Parameter)>);

impl Parameterized for ParamList {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        for (name, p) in &self.0 {
            f(name, p);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        for (name, p) in &mut self.0 {
            f(name, p);
        }
    }
}
