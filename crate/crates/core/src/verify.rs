//! Oracle suite: each check compares an implementation against an independent
//! brute-force or closed-form reference. Implementations are passed in so a
//! deliberately broken one can be shown to fail its check.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::alignment::{align_tokens, project_logits};
use crate::data::generate_corpus;
use crate::error::Result;
use crate::evaluation::lcs_len;
use crate::federation::aggregate_lora;
use crate::model::{Binding, LoraTarget, ModelConfig, ParamBlock, TinyTransformer};
use crate::numerics::{grad_check, kl_divergence, Graph, Tensor, Var};
use crate::tokenizers::{train_bpe, Tokenizer};
use crate::training::{pair_samples, PairedSample};
use crate::transfer::{cross_entropy, kt_loss, kt_loss_graph, pool_logits, saml_loss_dpm, saml_loss_graph, saml_loss_lm};

pub type AlignCostFn = fn(&[String], &[String]) -> Result<f64>;
pub type PoolFn = fn(&[f64], usize) -> Result<Vec<f64>>;
pub type KlFn = fn(&[f64], &[f64]) -> Result<f64>;
pub type AggregateFn = fn(&[ParamBlock]) -> Result<ParamBlock>;
pub type LcsFn = fn(&[&str], &[&str]) -> usize;

/// The implementations under test.
#[derive(Clone, Copy)]
pub struct Implementations {
    pub align_cost: AlignCostFn,
    pub pool: PoolFn,
    pub kl: KlFn,
    pub aggregate: AggregateFn,
    pub lcs: LcsFn,
}

impl Default for Implementations {
    fn default() -> Self {
        Self {
            align_cost: |a, b| Ok(align_tokens(a, b)?.cost),
            pool: |y, k| Ok(pool_logits(y, k)?.values),
            kl: kl_divergence,
            aggregate: aggregate_lora,
            lcs: |a, b| lcs_len(a, b),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

pub const ALIGNMENT_TOLERANCE: f64 = 1e-12;
pub const POOLING_TOLERANCE: f64 = 1e-12;
pub const KL_TOLERANCE: f64 = 1e-12;
pub const AGGREGATE_TOLERANCE: f64 = 1e-15;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

pub const CHECK_NAMES: [&str; 9] = [
    "alignment_exhaustive",
    "pooling_sort_split",
    "kl_summation",
    "lcs_enumeration",
    "aggregate_mean",
    "gradient_supervised",
    "gradient_transfer",
    "gradient_proxy_mixed",
    "gradient_peer_mixed",
];

/// Every check of the suite. `gradient_seeds` sets how many random toy models
/// each gradient check covers.
pub fn run_suite(imp: &Implementations, gradient_seeds: u64) -> Vec<CheckOutcome> {
    run_checks(imp, gradient_seeds, |_| true)
}

/// The checks whose names satisfy `select`, in suite order.
pub fn run_checks(imp: &Implementations, gradient_seeds: u64, select: impl Fn(&str) -> bool) -> Vec<CheckOutcome> {
    CHECK_NAMES
        .iter()
        .filter(|n| select(n))
        .map(|&name| {
            timed(name, || match name {
                "alignment_exhaustive" => check_alignment(imp.align_cost, 6),
                "pooling_sort_split" => check_pooling(imp.pool, 1000),
                "kl_summation" => check_kl(imp.kl, 1000),
                "lcs_enumeration" => check_lcs(imp.lcs, 6),
                "aggregate_mean" => check_aggregate(imp.aggregate, 200),
                _ => {
                    let kind = GradientLoss::ALL
                        .into_iter()
                        .find(|k| k.check_name() == name)
                        .expect("every name is a check");
                    check_gradients(kind, gradient_seeds)
                }
            })
        })
        .collect()
}

fn timed(name: &str, f: impl FnOnce() -> std::result::Result<String, String>) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    CheckOutcome {
        name: name.to_string(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// All sequences with length in `min_len..=max_len` over `alphabet`.
fn all_sequences<T: Clone>(alphabet: &[T], min_len: usize, max_len: usize) -> Vec<Vec<T>> {
    let mut out = Vec::new();
    let mut layer: Vec<Vec<T>> = vec![Vec::new()];
    for len in 0..=max_len {
        if len >= min_len {
            out.extend(layer.iter().cloned());
        }
        layer = layer
            .iter()
            .flat_map(|s| {
                alphabet.iter().map(move |a| {
                    let mut t = s.clone();
                    t.push(a.clone());
                    t
                })
            })
            .collect();
    }
    out
}

fn naive_levenshtein(a: &[u8], b: &[u8]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = naive_levenshtein(ra, rb) + usize::from(x != y);
            sub.min(naive_levenshtein(ra, b) + 1).min(naive_levenshtein(a, rb) + 1)
        }
    }
}

/// Minimum over every edit script (substitute, insert, delete), explored
/// depth-first with a cost bound.
fn exhaustive_script_min(src: &[usize], tgt: &[usize], sub: &[Vec<f64>]) -> f64 {
    fn go(src: &[usize], tgt: &[usize], sub: &[Vec<f64>], spent: f64, best: &mut f64) {
        let bound = (src.len() as f64 - tgt.len() as f64).abs();
        if spent + bound >= *best {
            return;
        }
        if src.is_empty() && tgt.is_empty() {
            *best = spent;
            return;
        }
        if !src.is_empty() && !tgt.is_empty() {
            go(&src[1..], &tgt[1..], sub, spent + sub[src[0]][tgt[0]], best);
        }
        if !tgt.is_empty() {
            go(src, &tgt[1..], sub, spent + 1.0, best);
        }
        if !src.is_empty() {
            go(&src[1..], tgt, sub, spent + 1.0, best);
        }
    }
    let mut best = f64::INFINITY;
    go(src, tgt, sub, 0.0, &mut best);
    best
}

fn check_alignment(imp: AlignCostFn, max_len: usize) -> std::result::Result<String, String> {
    let alphabet = ["a", "ab", "b"];
    let sub: Vec<Vec<f64>> = alphabet
        .iter()
        .map(|x| {
            alphabet
                .iter()
                .map(|y| naive_levenshtein(x.as_bytes(), y.as_bytes()) as f64 / x.len().max(y.len()) as f64)
                .collect()
        })
        .collect();
    let seqs = all_sequences(&[0usize, 1, 2], 1, max_len);
    let strings: Vec<Vec<String>> = seqs
        .iter()
        .map(|s| s.iter().map(|&i| alphabet[i].to_string()).collect())
        .collect();
    let mut pairs = 0usize;
    for (a, sa) in seqs.iter().zip(&strings) {
        for (b, sb) in seqs.iter().zip(&strings) {
            let want = exhaustive_script_min(a, b, &sub);
            let got = imp(sa, sb).map_err(|e| format!("{sa:?} vs {sb:?}: {e}"))?;
            if (got - want).abs() >= ALIGNMENT_TOLERANCE {
                return Err(format!("{sa:?} vs {sb:?}: cost {got}, exhaustive minimum {want}"));
            }
            pairs += 1;
        }
    }
    Ok(format!("{pairs} pairs, lengths 1..={max_len} over {alphabet:?}"))
}

/// Softmax by direct exponentiation, a full descending sort, then a split.
pub fn sort_split_pool(y: &[f64], k: usize) -> Vec<f64> {
    let m = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = y.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let mut p: Vec<f64> = e.iter().map(|v| v / z).collect();
    p.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    let mut out = p[..k].to_vec();
    out.push(p[k..].iter().sum());
    out
}

fn check_pooling(imp: PoolFn, cases: usize) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9001);
    let mut worst = 0.0f64;
    for c in 0..cases {
        let v = rng.gen_range(2..=32);
        let k = rng.gen_range(1..v);
        let scale = rng.gen_range(0.1..6.0);
        let y: Vec<f64> = (0..v).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        let got = imp(&y, k).map_err(|e| format!("case {c}: {e}"))?;
        let want = sort_split_pool(&y, k);
        if got.len() != want.len() {
            return Err(format!("case {c} (V={v}, K={k}): {} entries, expected {}", got.len(), want.len()));
        }
        let diff = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(diff);
        if !(diff < POOLING_TOLERANCE) {
            return Err(format!("case {c} (V={v}, K={k}): max abs diff {diff:e}"));
        }
    }
    Ok(format!("{cases} vectors, max abs diff {worst:e}"))
}

fn random_simplex(rng: &mut ChaCha8Rng, v: usize, zeros: bool) -> Vec<f64> {
    let mut w: Vec<f64> = (0..v).map(|_| rng.gen_range(0.01..1.0)).collect();
    if zeros {
        for x in w.iter_mut().skip(1) {
            if rng.gen_bool(0.3) {
                *x = 0.0;
            }
        }
    }
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

fn check_kl(imp: KlFn, cases: usize) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4b4c);
    let mut worst = 0.0f64;
    for c in 0..cases {
        let v = rng.gen_range(2..=32);
        let p = random_simplex(&mut rng, v, c % 2 == 1);
        let q = random_simplex(&mut rng, v, false);
        let mut want = 0.0;
        for i in 0..v {
            if p[i] != 0.0 {
                want += p[i] * p[i].ln() - p[i] * q[i].ln();
            }
        }
        let got = imp(&p, &q).map_err(|e| format!("case {c}: {e}"))?;
        let diff = (got - want).abs();
        worst = worst.max(diff);
        if !(diff < KL_TOLERANCE) {
            return Err(format!("case {c} (V={v}): {got} vs {want}"));
        }
    }
    Ok(format!("{cases} distribution pairs, max abs diff {worst:e}"))
}

/// Length of the longest subsequence of `a` that is also a subsequence of
/// `b`, by trying every subsequence of `a`.
fn enumerated_lcs(a: &[&str], b: &[&str]) -> usize {
    let is_sub = |mask: u32| {
        let mut it = b.iter();
        (0..a.len()).filter(|i| mask & (1 << i) != 0).all(|i| it.any(|w| *w == a[i]))
    };
    (0..1u32 << a.len())
        .filter(|&m| is_sub(m))
        .map(|m| m.count_ones() as usize)
        .max()
        .unwrap_or(0)
}

fn check_lcs(imp: LcsFn, max_len: usize) -> std::result::Result<String, String> {
    let seqs = all_sequences(&["x", "y", "z"], 0, max_len);
    let mut pairs = 0usize;
    for a in &seqs {
        for b in &seqs {
            let (got, want) = (imp(a, b), enumerated_lcs(a, b));
            if got != want {
                return Err(format!("{a:?} vs {b:?}: {got}, enumeration {want}"));
            }
            pairs += 1;
        }
    }
    Ok(format!("{pairs} word-sequence pairs, lengths 0..={max_len}"))
}

fn check_aggregate(imp: AggregateFn, cases: usize) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa66);
    let mut worst = 0.0f64;
    for c in 0..cases {
        let n = rng.gen_range(1..=5);
        let shapes: Vec<Vec<usize>> = (0..rng.gen_range(1..=4))
            .map(|_| vec![rng.gen_range(1..=6), rng.gen_range(1..=6)])
            .collect();
        let blocks: Vec<ParamBlock> = (0..n)
            .map(|_| {
                ParamBlock::new(
                    shapes
                        .iter()
                        .enumerate()
                        .map(|(e, s)| {
                            let vals = (0..s[0] * s[1]).map(|_| rng.gen_range(-2.0..2.0)).collect();
                            (format!("p{e}"), Tensor::new(s.clone(), vals).expect("shape matches"))
                        })
                        .collect(),
                )
            })
            .collect();
        let got = imp(&blocks).map_err(|e| format!("case {c}: {e}"))?;
        for (e, s) in shapes.iter().enumerate() {
            for idx in 0..s[0] * s[1] {
                let mut sum = 0.0;
                for b in &blocks {
                    sum += b.entries[e].1.data()[idx];
                }
                let want = sum / n as f64;
                let have = got.entries.get(e).and_then(|(_, t)| t.data().get(idx)).copied();
                let diff = have.map_or(f64::INFINITY, |h| (h - want).abs());
                worst = worst.max(diff);
                if !(diff < AGGREGATE_TOLERANCE) {
                    return Err(format!("case {c}, entry {e}, index {idx}: {have:?} vs {want}"));
                }
            }
        }
    }
    Ok(format!("{cases} block sets, max abs diff {worst:e}"))
}

/// The four differentiable training objectives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradientLoss {
    Supervised,
    Transfer,
    ProxyMixed,
    PeerMixed,
}

impl GradientLoss {
    pub const ALL: [GradientLoss; 4] = [Self::Supervised, Self::Transfer, Self::ProxyMixed, Self::PeerMixed];

    pub fn check_name(self) -> &'static str {
        match self {
            Self::Supervised => "gradient_supervised",
            Self::Transfer => "gradient_transfer",
            Self::ProxyMixed => "gradient_proxy_mixed",
            Self::PeerMixed => "gradient_peer_mixed",
        }
    }
}

struct ToyPair {
    proxy: TinyTransformer,
    peer: TinyTransformer,
    sample: PairedSample,
}

const GRAD_K: usize = 4;
const GRAD_WEIGHT: f64 = 0.5;
const GRAD_EPS: f64 = 1e-5;

/// A 1-layer proxy on a small BPE vocabulary and a 1-layer peer on characters,
/// both with LoRA whose `B` factors are randomized so every path carries
/// gradient.
fn toy_pair(seed: u64) -> Result<ToyPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = generate_corpus(&["travel", "cooking"], 4, seed)?;
    let texts: Vec<String> = samples.iter().map(|s| format!("{}{}", s.prompt(), s.answer())).collect();
    let proxy_tok = train_bpe(&texts, 12)?;
    let peer_tok = Tokenizer::char_level();
    let cfg = |vocab, tag: &str| ModelConfig {
        layers: 1,
        heads: 2,
        hidden: 8,
        ffn: 16,
        vocab,
        max_seq: 48,
        arch_tag: tag.to_string(),
    };
    let mut proxy = TinyTransformer::new(cfg(proxy_tok.vocab_size(), "proxy"), &mut rng)?;
    let mut peer = TinyTransformer::new(cfg(peer_tok.vocab_size(), "peer"), &mut rng)?;
    for m in [&mut proxy, &mut peer] {
        m.attach_lora(&[LoraTarget::Wq, LoraTarget::Wv], 2, &mut rng)?;
        for b in &mut m.blocks {
            for l in &mut b.lora {
                l.b.value = Tensor::randn(l.b.value.shape(), 0.3, &mut rng);
            }
        }
    }
    let sample = pair_samples(&samples[..1], &proxy_tok, &peer_tok)?.remove(0);
    Ok(ToyPair { proxy, peer, sample })
}

fn gradient_error(kind: GradientLoss, seed: u64) -> Result<f64> {
    let ToyPair {
        mut proxy,
        mut peer,
        sample: s,
    } = toy_pair(seed)?;
    let (pi, pt) = proxy.sft_example(&s.proxy.prompt, &s.proxy.answer)?;
    let (qi, qt) = peer.sft_example(&s.peer.prompt, &s.peer.answer)?;
    let peer_aligned = project_logits(&peer.forward(&qi)?, &s.peer_to_proxy)?;
    let proxy_aligned = project_logits(&proxy.forward(&pi)?, &s.proxy_to_peer)?;

    let graph_loss = |m: &mut TinyTransformer, inputs: &[usize], f: &dyn Fn(&mut Graph, Var) -> Result<Var>| -> Result<f64> {
        let mut g = Graph::new();
        let mut bind = Binding::training();
        let logits = m.forward_graph(&mut g, &mut bind, inputs)?;
        let loss = f(&mut g, logits)?;
        let value = g.value(loss).item();
        let grads = g.backward(loss)?;
        m.apply_grads(&bind, &grads);
        Ok(value)
    };

    let report = match kind {
        GradientLoss::Supervised => {
            proxy.set_trainable(|_| true);
            grad_check(
                &mut proxy,
                GRAD_EPS,
                |m| cross_entropy(&m.forward(&pi)?, &pt),
                |m| graph_loss(m, &pi, &|g, l| g.cross_entropy(l, &pt)),
            )?
        }
        GradientLoss::Transfer => grad_check(
            &mut proxy,
            GRAD_EPS,
            |m| kt_loss(&peer_aligned, &m.forward(&pi)?, GRAD_K),
            |m| graph_loss(m, &pi, &|g, l| kt_loss_graph(g, &peer_aligned, l, GRAD_K)),
        )?,
        GradientLoss::ProxyMixed => grad_check(
            &mut proxy,
            GRAD_EPS,
            |m| saml_loss_dpm(&m.forward(&pi)?, &peer_aligned, &pt, GRAD_WEIGHT, GRAD_K),
            |m| graph_loss(m, &pi, &|g, l| saml_loss_graph(g, l, &peer_aligned, &pt, GRAD_WEIGHT, GRAD_K)),
        )?,
        GradientLoss::PeerMixed => grad_check(
            &mut peer,
            GRAD_EPS,
            |m| saml_loss_lm(&m.forward(&qi)?, &proxy_aligned, &qt, GRAD_WEIGHT, GRAD_K),
            |m| graph_loss(m, &qi, &|g, l| saml_loss_graph(g, l, &proxy_aligned, &qt, GRAD_WEIGHT, GRAD_K)),
        )?,
    };
    if report.frozen_nonzero != 0 {
        return Err(crate::Error::ModelState(format!(
            "{} frozen scalars received gradient",
            report.frozen_nonzero
        )));
    }
    Ok(report.max_rel_error)
}

/// Worst relative error of `kind` over `seeds` random toy models.
pub fn gradient_max_error(kind: GradientLoss, seeds: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        worst = worst.max(gradient_error(kind, seed)?);
    }
    Ok(worst)
}

fn check_gradients(kind: GradientLoss, seeds: u64) -> std::result::Result<String, String> {
    let worst = gradient_max_error(kind, seeds).map_err(|e| e.to_string())?;
    if worst < GRADIENT_TOLERANCE {
        Ok(format!("{seeds} seeds, max relative error {worst:e}"))
    } else {
        Err(format!("max relative error {worst:e} over {seeds} seeds"))
    }
}
