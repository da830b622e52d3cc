//! Logits pooling and the knowledge-transfer losses used by mutual learning.
//!
//! Pooling keeps the `K` largest softmax probabilities in descending order and
//! folds the rest into one remainder bucket. Because the buckets are ranks, not
//! vocabulary entries, two models with different vocabularies produce
//! comparable `(K+1)`-point distributions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kl_divergence, softmax, top_k_indices, Graph, Tensor, Var};

pub const DEFAULT_TOP_K: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledDistribution {
    /// `K` descending probabilities followed by the remainder mass.
    pub values: Vec<f64>,
    pub k: usize,
}

impl PooledDistribution {
    pub fn remainder(&self) -> f64 {
        self.values[self.k]
    }
}

fn check_k(k: usize, vocab: usize) -> Result<()> {
    if k == 0 || k >= vocab {
        return Err(Error::InvalidArgument(format!(
            "pooling needs 1 <= K < V, got K={k}, V={vocab}"
        )));
    }
    Ok(())
}

/// `f_pool(y)`: softmax, top-`K` in descending order, then the summed remainder.
pub fn pool_logits(y: &[f64], k: usize) -> Result<PooledDistribution> {
    check_k(k, y.len())?;
    let probs = softmax(y)?;
    Ok(pool_probs(&probs, k))
}

fn pool_probs(probs: &[f64], k: usize) -> PooledDistribution {
    let top = top_k_indices(probs, k);
    let mut is_top = vec![false; probs.len()];
    let mut values: Vec<f64> = top
        .iter()
        .map(|&j| {
            is_top[j] = true;
            probs[j]
        })
        .collect();
    let rest = probs.iter().zip(&is_top).filter(|(_, &t)| !t).map(|(p, _)| p).sum();
    values.push(rest);
    PooledDistribution { values, k }
}

/// Pools every row of a `[S, V]` logits matrix into a `[S, K+1]` matrix.
pub fn pool_rows(logits: &Tensor, k: usize) -> Result<Tensor> {
    check_k(k, logits.cols())?;
    let mut out = Vec::with_capacity(logits.rows() * (k + 1));
    for i in 0..logits.rows() {
        out.extend(pool_logits(logits.row(i), k)?.values);
    }
    Tensor::new(vec![logits.rows(), k + 1], out)
}

/// `L_kt = Σ_{i<S} KL(pool(teacher_i) ‖ pool(student_i))` with `S` the shorter
/// of the two sequence lengths. The teacher is expected to be aligned already.
pub fn kt_loss(teacher: &Tensor, student: &Tensor, k: usize) -> Result<f64> {
    if teacher.numel() == 0 || student.numel() == 0 {
        return Err(Error::InvalidArgument("kt_loss on an empty sequence".into()));
    }
    check_k(k, teacher.cols())?;
    check_k(k, student.cols())?;
    let s = teacher.rows().min(student.rows());
    let mut total = 0.0;
    for i in 0..s {
        let p = pool_logits(teacher.row(i), k)?;
        let q = pool_logits(student.row(i), k)?;
        total += kl_divergence(&p.values, &q.values)?;
    }
    Ok(total)
}

/// Mean cross-entropy over the positions that carry a target.
pub fn cross_entropy(logits: &Tensor, targets: &[Option<usize>]) -> Result<f64> {
    if targets.len() != logits.rows() {
        return Err(Error::Shape(format!(
            "{} targets for {} logit rows",
            targets.len(),
            logits.rows()
        )));
    }
    let mut total = 0.0;
    let mut count = 0;
    for (i, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        if t >= logits.cols() {
            return Err(Error::TokenOutOfRange { id: t, vocab: logits.cols() });
        }
        total -= softmax(logits.row(i))?[t].ln();
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidArgument("no supervised positions".into()));
    }
    Ok(total / count as f64)
}

fn check_weight(name: &str, w: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::InvalidArgument(format!("{name} = {w} outside [0, 1]")));
    }
    Ok(())
}

fn mixed_loss(
    own: &Tensor,
    aligned_peer: &Tensor,
    targets: &[Option<usize>],
    weight: f64,
    k: usize,
) -> Result<f64> {
    let mut total = 0.0;
    if weight > 0.0 {
        total += weight * kt_loss(aligned_peer, own, k)?;
    }
    if weight < 1.0 {
        total += (1.0 - weight) * cross_entropy(own, targets)?;
    }
    Ok(total)
}

/// Proxy-side objective: `α·L_kt(aligned LLM, proxy) + (1−α)·L_lb(proxy)`.
pub fn saml_loss_dpm(
    dpm_logits: &Tensor,
    lm_aligned: &Tensor,
    targets: &[Option<usize>],
    alpha: f64,
    k: usize,
) -> Result<f64> {
    check_weight("alpha", alpha)?;
    mixed_loss(dpm_logits, lm_aligned, targets, alpha, k)
}

/// Language-model-side objective: `β·L_kt(aligned proxy, LM) + (1−β)·L_lb(LM)`.
pub fn saml_loss_lm(
    lm_logits: &Tensor,
    dpm_aligned: &Tensor,
    targets: &[Option<usize>],
    beta: f64,
    k: usize,
) -> Result<f64> {
    check_weight("beta", beta)?;
    mixed_loss(lm_logits, dpm_aligned, targets, beta, k)
}

/// Graph form of [`kt_loss`]; gradients reach only `student`.
pub fn kt_loss_graph(g: &mut Graph, teacher: &Tensor, student: Var, k: usize) -> Result<Var> {
    let (s_rows, s_cols) = (g.value(student).rows(), g.value(student).cols());
    if teacher.numel() == 0 || s_rows == 0 {
        return Err(Error::InvalidArgument("kt_loss on an empty sequence".into()));
    }
    check_k(k, teacher.cols())?;
    check_k(k, s_cols)?;
    let s = teacher.rows().min(s_rows);
    let student = if s < s_rows {
        g.gather(student, &(0..s).collect::<Vec<_>>())?
    } else {
        student
    };
    let mut pooled_teacher = Vec::with_capacity(s * (k + 1));
    for i in 0..s {
        pooled_teacher.extend(pool_logits(teacher.row(i), k)?.values);
    }
    let p = Tensor::new(vec![s, k + 1], pooled_teacher)?;
    let probs = g.softmax_rows(student)?;
    let q = g.pool_top_k(probs, k)?;
    g.kl_to_const(p, q)
}

/// Graph form of the mixed objective. A zero weight omits the transfer term
/// entirely and a unit weight omits the supervised term, so the endpoints are
/// bitwise identical to the single-term losses.
pub fn saml_loss_graph(
    g: &mut Graph,
    own_logits: Var,
    aligned_peer: &Tensor,
    targets: &[Option<usize>],
    weight: f64,
    k: usize,
) -> Result<Var> {
    check_weight("mixing weight", weight)?;
    if weight == 0.0 {
        return g.cross_entropy(own_logits, targets);
    }
    let kt = kt_loss_graph(g, aligned_peer, own_logits, k)?;
    if weight == 1.0 {
        return Ok(kt);
    }
    let lb = g.cross_entropy(own_logits, targets)?;
    g.weighted_sum(&[(kt, weight), (lb, 1.0 - weight)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Parameter, ParamList};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Full descending sort of the probability vector, then split at `k`.
    fn sort_split_oracle(y: &[f64], k: usize) -> Vec<f64> {
        let m = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = y.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut p: Vec<f64> = e.iter().map(|v| v / z).collect();
        let mut rest_mask: Vec<(f64, usize)> = p.iter().cloned().zip(0..).collect();
        rest_mask.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut out: Vec<f64> = rest_mask[..k].iter().map(|x| x.0).collect();
        for (_, idx) in &rest_mask[..k] {
            p[*idx] = 0.0;
        }
        out.push(p.iter().sum());
        out
    }

    #[test]
    fn uniform_pooling() {
        let p = pool_logits(&[0.0; 4], 2).unwrap();
        assert_eq!(p.values, vec![0.25, 0.25, 0.5]);
    }

    #[test]
    fn hand_computed_pooling() {
        let y = [6f64.ln(), 3f64.ln(), 1f64.ln()];
        let p = pool_logits(&y, 2).unwrap();
        for (a, b) in p.values.iter().zip([0.6, 0.3, 0.1]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn pooling_k_bounds() {
        assert!(pool_logits(&[0.0; 4], 0).is_err());
        assert!(pool_logits(&[0.0; 4], 4).is_err());
        assert!(pool_logits(&[0.0, f64::NAN], 1).is_err());
    }

    #[test]
    fn kt_loss_truncates_to_shorter_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let s = Tensor::randn(&[5, 9], 1.0, &mut rng);
        let expected: f64 = (0..3)
            .map(|i| {
                let p = sort_split_oracle(t.row(i), 4);
                let q = sort_split_oracle(s.row(i), 4);
                p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>()
            })
            .sum();
        assert!((kt_loss(&t, &s, 4).unwrap() - expected).abs() < 1e-12);
        assert!(kt_loss(&t, &t, 4).unwrap().abs() < 1e-15);
        assert!(kt_loss(&t, &s, 6).is_err());
    }

    #[test]
    fn hand_built_two_position_kl() {
        let t = Tensor::matrix(2, 3, vec![0.0, 0.0, 0.0, 2f64.ln(), 0.0, 0.0]).unwrap();
        let s = Tensor::matrix(2, 3, vec![3f64.ln(), 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        // position 0: p=[1/3, 2/3], q=[3/5, 2/5]; position 1: p=[1/2, 1/2], q=[1/3, 2/3]
        let kl0 = (1.0 / 3.0) * ((1.0 / 3.0) / 0.6f64).ln() + (2.0 / 3.0) * ((2.0 / 3.0) / 0.4f64).ln();
        let kl1 = 0.5 * (0.5f64 / (1.0 / 3.0)).ln() + 0.5 * (0.5f64 / (2.0 / 3.0)).ln();
        assert!((kt_loss(&t, &s, 1).unwrap() - (kl0 + kl1)).abs() < 1e-14);
    }

    #[test]
    fn mixture_endpoints_and_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let own = Tensor::randn(&[4, 7], 1.0, &mut rng);
        let peer = Tensor::randn(&[4, 11], 1.0, &mut rng);
        let targets = [None, Some(3), Some(1), Some(6)];
        let kt = kt_loss(&peer, &own, 3).unwrap();
        let ce = cross_entropy(&own, &targets).unwrap();
        assert_eq!(saml_loss_dpm(&own, &peer, &targets, 0.0, 3).unwrap(), ce);
        assert_eq!(saml_loss_dpm(&own, &peer, &targets, 1.0, 3).unwrap(), kt);
        let mid = saml_loss_dpm(&own, &peer, &targets, 0.5, 3).unwrap();
        assert!((mid - 0.5 * (kt + ce)).abs() < 1e-14);
        for a in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let v = saml_loss_lm(&own, &peer, &targets, a, 3).unwrap();
            assert!((v - (a * kt + (1.0 - a) * ce)).abs() < 1e-13);
        }
        assert!(saml_loss_dpm(&own, &peer, &targets, 1.5, 3).is_err());
        assert!(saml_loss_lm(&own, &peer, &targets, -0.1, 3).is_err());
    }

    #[test]
    fn role_swap_mirrors_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 12], 1.0, &mut rng);
        let ta = [Some(1), Some(2), None];
        let tb = [None, Some(9), Some(4)];
        let d = saml_loss_dpm(&a, &b, &ta, 0.3, 4).unwrap();
        let l = saml_loss_lm(&b, &a, &tb, 0.7, 4).unwrap();
        assert_eq!(saml_loss_lm(&a, &b, &ta, 0.3, 4).unwrap(), d);
        assert_eq!(saml_loss_dpm(&b, &a, &tb, 0.7, 4).unwrap(), l);
    }

    #[test]
    fn graph_loss_matches_value_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let own = Tensor::randn(&[4, 9], 1.0, &mut rng);
        let peer = Tensor::randn(&[6, 5], 1.0, &mut rng);
        let targets = [Some(0), None, Some(8), Some(2)];
        for w in [0.0, 0.4, 1.0] {
            let mut g = Graph::new();
            let x = g.leaf(own.clone(), true);
            let l = saml_loss_graph(&mut g, x, &peer, &targets, w, 3).unwrap();
            let expect = saml_loss_dpm(&own, &peer, &targets, w, 3).unwrap();
            assert!((g.value(l).item() - expect).abs() < 1e-13);
        }
    }

    #[test]
    fn teacher_perturbation_does_not_change_gradient_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let own = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let peer = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let mut g = Graph::new();
        let t = g.leaf(peer.clone(), true);
        let x = g.leaf(own, true);
        let teacher_value = g.value(t).clone();
        let l = kt_loss_graph(&mut g, &teacher_value, x, 2).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(t).is_none());
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn kt_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let peer = Tensor::randn(&[3, 7], 1.5, &mut rng);
            let own = Tensor::randn(&[4, 5], 1.5, &mut rng);
            let targets = [Some(1), None, Some(4), Some(0)];
            let mut params = ParamList(vec![("y".into(), Parameter::new(own, true))]);
            let report = grad_check(
                &mut params,
                1e-6,
                |m| saml_loss_dpm(&m.0[0].1.value, &peer, &targets, 0.6, 2),
                |m| {
                    let mut g = Graph::new();
                    let x = g.leaf(m.0[0].1.value.clone(), true);
                    let l = saml_loss_graph(&mut g, x, &peer, &targets, 0.6, 2)?;
                    let grads = g.backward(l)?;
                    m.0[0].1.accumulate_grad(grads.get(x).unwrap());
                    Ok(g.value(l).item())
                },
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "seed {seed}: {}", report.max_rel_error);
        }
    }

    proptest! {
        #[test]
        fn pooling_matches_sort_split(
            y in prop::collection::vec(-8.0f64..8.0, 2..32),
            k_seed in 0usize..1000,
        ) {
            let k = 1 + k_seed % (y.len() - 1);
            let p = pool_logits(&y, k).unwrap();
            let o = sort_split_oracle(&y, k);
            for (a, b) in p.values.iter().zip(&o) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert!(p.values[..k].windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(p.remainder() > 0.0);
            prop_assert!((p.values.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn kt_loss_finite_and_nonnegative_across_vocabularies(
            a in prop::collection::vec(-30.0f64..30.0, 12),
            b in prop::collection::vec(-30.0f64..30.0, 20),
        ) {
            let t = Tensor::matrix(2, 6, a).unwrap();
            let s = Tensor::matrix(2, 10, b).unwrap();
            let v = kt_loss(&t, &s, 3).unwrap();
            prop_assert!(v.is_finite() && v >= 0.0);
        }
    }
}
