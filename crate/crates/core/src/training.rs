//! Training procedures: supervised finetuning, proxy-model distillation,
//! domain-specific tuning of adapters, and mutual learning between a proxy
//! model and a peer language model.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{align_tokens, project_logits, TokenAlignmentMap};
use crate::data::QASample;
use crate::error::{Error, Result, ResultExt};
use crate::evaluation::encode_prompt;
use crate::model::{Binding, ModelConfig, ParamBlock, ParamKind, TinyTransformer};
use crate::numerics::{Graph, Parameterized, Tensor};
use crate::tokenizers::{Tokenizer, EOS};
use crate::transfer::saml_loss_graph;

/// Plain SGD with a fixed learning rate; gradients are averaged over a
/// mini-batch of samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for Sgd {
    fn default() -> Self {
        Self { lr: 0.05, batch_size: 4 }
    }
}

impl Sgd {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 {
            return Err(Error::InvalidArgument(format!(
                "optimizer needs lr > 0 and batch_size >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// `θ ← θ − lr · g / n` for trainable parameters, then clears gradients.
    pub fn step<M: Parameterized>(&self, model: &mut M, n: usize) {
        let scale = self.lr / n.max(1) as f64;
        model.visit_params_mut(&mut |_, p| {
            if p.trainable {
                for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                    *v -= scale * g;
                }
            }
            p.zero_grad();
        });
    }
}

/// A sample tokenized for one model: `<bos> prompt` and `answer <eos>`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSample {
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
}

impl EncodedSample {
    pub fn new(tok: &Tokenizer, sample: &QASample) -> Self {
        let mut answer = tok.encode(&sample.answer());
        answer.push(EOS);
        Self {
            prompt: encode_prompt(tok, sample),
            answer,
        }
    }

    /// The full `prompt ++ answer` id sequence.
    pub fn sequence(&self) -> Vec<usize> {
        self.prompt.iter().chain(&self.answer).copied().collect()
    }

    /// Surface strings of the model inputs (the sequence minus its last id),
    /// one per logits row.
    pub fn input_tokens(&self, tok: &Tokenizer) -> Result<Vec<String>> {
        let seq = self.sequence();
        seq[..seq.len() - 1]
            .iter()
            .map(|&id| tok.token_str(id).map(str::to_string))
            .collect()
    }
}

pub fn encode_all(tok: &Tokenizer, samples: &[QASample]) -> Vec<EncodedSample> {
    samples.iter().map(|s| EncodedSample::new(tok, s)).collect()
}

/// Mean training loss for each epoch.
pub type EpochLosses = Vec<f64>;

fn shuffled<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Supervised finetuning of whatever is currently trainable.
pub fn sft_train<R: Rng + ?Sized>(
    model: &mut TinyTransformer,
    data: &[EncodedSample],
    epochs: usize,
    opt: &Sgd,
    rng: &mut R,
) -> Result<EpochLosses> {
    opt.validate()?;
    let mut losses = Vec::with_capacity(epochs);
    model.zero_grads();
    for _ in 0..epochs {
        let order = shuffled(data.len(), rng);
        let mut total = 0.0;
        for batch in order.chunks(opt.batch_size) {
            for &i in batch {
                total += model
                    .accumulate_sft_grads(&data[i].prompt, &data[i].answer)
                    .context(|| format!("training sample {i}"))?;
            }
            opt.step(model, batch.len());
        }
        losses.push(total / data.len().max(1) as f64);
    }
    Ok(losses)
}

/// Full-parameter finetuning; used to give base models their starting
/// competence before any parameter-efficient tuning.
pub fn pretrain<R: Rng + ?Sized>(
    model: &mut TinyTransformer,
    data: &[EncodedSample],
    epochs: usize,
    opt: &Sgd,
    rng: &mut R,
) -> Result<EpochLosses> {
    if model.has_lora() || model.has_adapters() {
        return Err(Error::ModelState("pretraining expects a bare model".into()));
    }
    model.set_trainable(|_| true);
    sft_train(model, data, epochs, opt, rng)
}

fn with_trainable<T>(
    model: &mut TinyTransformer,
    select: impl Fn(ParamKind) -> bool,
    f: impl FnOnce(&mut TinyTransformer) -> Result<T>,
) -> Result<T> {
    let saved = model.trainable_flags();
    model.set_trainable(select);
    let out = f(model);
    let mut flags = saved.into_iter();
    model.visit_params_mut(&mut |_, p| p.trainable = flags.next().unwrap_or(false));
    out
}

/// Supervised LoRA finetuning: only LoRA parameters move.
pub fn lora_sft<R: Rng + ?Sized>(
    model: &mut TinyTransformer,
    data: &[EncodedSample],
    epochs: usize,
    opt: &Sgd,
    rng: &mut R,
) -> Result<EpochLosses> {
    if !model.has_lora() {
        return Err(Error::ModelState("LoRA is not attached".into()));
    }
    with_trainable(model, |k| k == ParamKind::Lora, |m| sft_train(m, data, epochs, opt, rng))
}

/// Domain-specific tuning: supervised finetuning where only the domain
/// adapters are trainable.
pub fn dst<R: Rng + ?Sized>(
    dpm: &mut TinyTransformer,
    data: &[EncodedSample],
    epochs: usize,
    opt: &Sgd,
    rng: &mut R,
) -> Result<EpochLosses> {
    if !dpm.has_adapters() {
        return Err(Error::ModelState("domain adapters are not attached".into()));
    }
    with_trainable(dpm, |k| k == ParamKind::Adapter, |m| sft_train(m, data, epochs, opt, rng))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
}

/// Number of fixed sequences used to measure distillation loss.
const DISTILL_PROBE: usize = 16;

/// Mean per-position `KL(softmax(teacher) ‖ softmax(student))` over `seqs`.
pub fn distill_loss(teacher: &TinyTransformer, student: &TinyTransformer, seqs: &[Vec<usize>]) -> Result<f64> {
    let mut total = 0.0;
    let mut positions = 0usize;
    for s in seqs {
        let p = softmax_rows(&teacher.forward(s)?)?;
        let q = softmax_rows(&student.forward(s)?)?;
        for (pr, qr) in p.data().chunks(p.cols()).zip(q.data().chunks(q.cols())) {
            total += crate::numerics::kl_divergence(pr, qr)?;
        }
        positions += s.len();
    }
    Ok(total / positions.max(1) as f64)
}

fn softmax_rows(t: &Tensor) -> Result<Tensor> {
    let mut out = Vec::with_capacity(t.numel());
    for i in 0..t.rows() {
        out.extend(crate::numerics::softmax(t.row(i))?);
    }
    Tensor::new(t.shape().to_vec(), out)
}

/// Forward-KL logit matching of `student` to `teacher` on `seqs`, one
/// sequence per step, cycling through a shuffled order.
pub fn distill<R: Rng + ?Sized>(
    teacher: &TinyTransformer,
    student: &mut TinyTransformer,
    seqs: &[Vec<usize>],
    steps: usize,
    opt: &Sgd,
    rng: &mut R,
) -> Result<DistillReport> {
    opt.validate()?;
    if seqs.is_empty() {
        return Err(Error::Data("distillation corpus is empty".into()));
    }
    if teacher.config().vocab != student.config().vocab {
        return Err(Error::InvalidArgument(format!(
            "teacher vocab {} != student vocab {}",
            teacher.config().vocab,
            student.config().vocab
        )));
    }
    let probe = &seqs[..seqs.len().min(DISTILL_PROBE)];
    let initial_loss = distill_loss(teacher, student, probe)?;
    student.zero_grads();
    let mut order = Vec::new();
    let mut done = 0;
    while done < steps {
        if order.is_empty() {
            order = shuffled(seqs.len(), rng);
            order.reverse();
        }
        let mut batch = 0;
        while batch < opt.batch_size && done < steps {
            let Some(i) = order.pop() else { break };
            let s = &seqs[i];
            let p = softmax_rows(&teacher.forward(s)?)?;
            let mut g = Graph::new();
            let mut bind = Binding::training();
            let logits = student.forward_graph(&mut g, &mut bind, s)?;
            let q = g.softmax_rows(logits)?;
            let kl = g.kl_to_const(p, q)?;
            let loss = g.scale(kl, 1.0 / s.len() as f64);
            let grads = g.backward(loss)?;
            student.apply_grads(&bind, &grads);
            batch += 1;
            done += 1;
        }
        opt.step(student, batch);
    }
    Ok(DistillReport {
        initial_loss,
        final_loss: distill_loss(teacher, student, probe)?,
        steps,
    })
}

/// Builds a fresh proxy model from `dpm_config` and distills `llm` into it.
pub fn distill_init<R: Rng + ?Sized>(
    llm: &TinyTransformer,
    dpm_config: ModelConfig,
    seqs: &[Vec<usize>],
    steps: usize,
    opt: &Sgd,
    rng: &mut R,
) -> Result<(TinyTransformer, DistillReport)> {
    let lc = llm.config();
    if dpm_config.vocab != lc.vocab {
        return Err(Error::InvalidArgument(format!(
            "proxy vocab {} must equal LLM vocab {}",
            dpm_config.vocab, lc.vocab
        )));
    }
    if dpm_config.layers >= lc.layers || dpm_config.hidden >= lc.hidden {
        return Err(Error::InvalidArgument(
            "proxy must be strictly smaller than the LLM in layers and hidden width".into(),
        ));
    }
    let mut dpm = TinyTransformer::new(dpm_config, rng)?;
    let report = distill(llm, &mut dpm, seqs, steps, opt, rng)?;
    Ok((dpm, report))
}

/// One sample as seen by both participants of mutual learning, with the
/// alignments in both directions.
#[derive(Clone, Debug)]
pub struct PairedSample {
    pub proxy: EncodedSample,
    pub peer: EncodedSample,
    /// Source: peer input tokens; target: proxy input tokens.
    pub peer_to_proxy: TokenAlignmentMap,
    /// Source: proxy input tokens; target: peer input tokens.
    pub proxy_to_peer: TokenAlignmentMap,
}

pub fn pair_samples(
    samples: &[QASample],
    proxy_tok: &Tokenizer,
    peer_tok: &Tokenizer,
) -> Result<Vec<PairedSample>> {
    samples
        .iter()
        .map(|s| {
            let proxy = EncodedSample::new(proxy_tok, s);
            let peer = EncodedSample::new(peer_tok, s);
            let a = proxy.input_tokens(proxy_tok)?;
            let b = peer.input_tokens(peer_tok)?;
            Ok(PairedSample {
                peer_to_proxy: align_tokens(&b, &a)?,
                proxy_to_peer: align_tokens(&a, &b)?,
                proxy,
                peer,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamlWeights {
    /// Transfer weight in the proxy's objective.
    pub alpha: f64,
    /// Transfer weight in the peer's objective.
    pub beta: f64,
    /// Pooling size.
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamlReport {
    pub proxy_losses: EpochLosses,
    pub peer_losses: EpochLosses,
}

struct Pass {
    graph: Graph,
    bind: Binding,
    logits: crate::numerics::Var,
    targets: Vec<Option<usize>>,
}

fn forward_pass(model: &TinyTransformer, s: &EncodedSample) -> Result<Pass> {
    let (inputs, targets) = model.sft_example(&s.prompt, &s.answer)?;
    let mut graph = Graph::new();
    let mut bind = Binding::training();
    let logits = model.forward_graph(&mut graph, &mut bind, &inputs)?;
    Ok(Pass {
        graph,
        bind,
        logits,
        targets,
    })
}

fn finish_pass(model: &mut TinyTransformer, mut pass: Pass, teacher: &Tensor, weight: f64, k: usize) -> Result<f64> {
    let loss = saml_loss_graph(&mut pass.graph, pass.logits, teacher, &pass.targets, weight, k)?;
    let value = pass.graph.value(loss).item();
    let grads = pass.graph.backward(loss)?;
    model.apply_grads(&pass.bind, &grads);
    Ok(value)
}

/// Mutual learning: per sample both models run forward, each one's logits are
/// projected onto the other's tokenization, and each takes its own mixed loss
/// (`α` for the proxy, `β` for the peer). Only LoRA parameters move. Returns
/// the proxy's LoRA block.
pub fn saml<R: Rng + ?Sized>(
    proxy: &mut TinyTransformer,
    peer: &mut TinyTransformer,
    data: &[PairedSample],
    w: &SamlWeights,
    epochs: usize,
    opt: &Sgd,
    rng: &mut R,
) -> Result<(ParamBlock, SamlReport)> {
    opt.validate()?;
    if !proxy.has_lora() || !peer.has_lora() {
        return Err(Error::ModelState("both models need LoRA attached".into()));
    }
    let mut report = SamlReport {
        proxy_losses: Vec::with_capacity(epochs),
        peer_losses: Vec::with_capacity(epochs),
    };
    with_trainable(proxy, |k| k == ParamKind::Lora, |proxy| {
        with_trainable(peer, |k| k == ParamKind::Lora, |peer| {
            proxy.zero_grads();
            peer.zero_grads();
            for _ in 0..epochs {
                let order = shuffled(data.len(), rng);
                let (mut lp, mut lq) = (0.0, 0.0);
                for batch in order.chunks(opt.batch_size) {
                    for &i in batch {
                        let s = &data[i];
                        let pp = forward_pass(proxy, &s.proxy).context(|| format!("proxy, sample {i}"))?;
                        let qp = forward_pass(peer, &s.peer).context(|| format!("peer, sample {i}"))?;
                        let peer_aligned = project_logits(qp.graph.value(qp.logits), &s.peer_to_proxy)?;
                        let proxy_aligned = project_logits(pp.graph.value(pp.logits), &s.proxy_to_peer)?;
                        lp += finish_pass(proxy, pp, &peer_aligned, w.alpha, w.k)?;
                        lq += finish_pass(peer, qp, &proxy_aligned, w.beta, w.k)?;
                    }
                    opt.step(proxy, batch.len());
                    opt.step(peer, batch.len());
                }
                let n = data.len().max(1) as f64;
                report.proxy_losses.push(lp / n);
                report.peer_losses.push(lq / n);
            }
            Ok(())
        })
    })?;
    Ok((proxy.lora_block(), report))
}

/// Mean supervised loss over a dataset, without updating anything.
pub fn mean_sft_loss(model: &TinyTransformer, data: &[EncodedSample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("loss over an empty dataset".into()));
    }
    let mut total = 0.0;
    for s in data {
        total += model.sft_loss(&s.prompt, &s.answer)?;
    }
    Ok(total / data.len() as f64)
}

#[cfg(test)]
mod tests;
