//! Tiny decoder-only transformer with attachable LoRA modules and per-layer
//! domain adapters.
//!
//! Linear weights are stored `[out, in]`, so a LoRA update on a target
//! weight `W0 ∈ R^{n×m}` is exactly `W0 + B·A` with `B ∈ R^{n×r}`,
//! `A ∈ R^{r×m}`, and no scaling factor.

mod blocks;
mod checkpoint;

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use blocks::{BlockDescriptor, ParamBlock, BLOCK_FORMAT_VERSION};
pub(crate) use blocks::Reader;
pub use checkpoint::CHECKPOINT_VERSION;

use crate::error::{Error, Result};
use crate::numerics::{Grads, Graph, Parameter, Parameterized, Tensor, Var};
use crate::tokenizers::EOS;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub arch_tag: String,
}

impl ModelConfig {
    /// Device-scale defaults (also used for the proxy model).
    pub fn small(vocab: usize, arch_tag: &str) -> Self {
        Self {
            layers: 2,
            heads: 2,
            hidden: 64,
            ffn: 128,
            vocab,
            max_seq: 64,
            arch_tag: arch_tag.to_string(),
        }
    }

    /// Server-scale defaults.
    pub fn large(vocab: usize, arch_tag: &str) -> Self {
        Self {
            layers: 4,
            heads: 4,
            hidden: 128,
            ffn: 256,
            vocab,
            max_seq: 64,
            arch_tag: arch_tag.to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.layers == 0 {
            problems.push("layers must be >= 1".to_string());
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            problems.push(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.ffn == 0 || self.hidden == 0 {
            problems.push("hidden and ffn must be positive".to_string());
        }
        if self.vocab < 8 {
            problems.push(format!("vocab {} < 8", self.vocab));
        }
        if self.max_seq < 2 {
            problems.push("max_seq must be >= 2".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Wq,
    Wk,
    Wv,
}

impl LoraTarget {
    pub fn name(self) -> &'static str {
        match self {
            LoraTarget::Wq => "wq",
            LoraTarget::Wk => "wk",
            LoraTarget::Wv => "wv",
        }
    }
}

impl fmt::Display for LoraTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which trainable group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Base,
    Lora,
    Adapter,
}

impl ParamKind {
    pub fn of(name: &str) -> Self {
        if name.contains(".lora.") {
            ParamKind::Lora
        } else if name.contains(".adapter.") {
            ParamKind::Adapter
        } else {
            ParamKind::Base
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    fn random<R: Rng + ?Sized>(out: usize, inp: usize, gain: f64, rng: &mut R) -> Self {
        Self {
            weight: Parameter::new(Tensor::randn(&[out, inp], gain / (inp as f64).sqrt(), rng), true),
            bias: Parameter::new(Tensor::zeros(&[out]), true),
        }
    }

    fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Parameter::new(Tensor::zeros(&[out, inp]), true),
            bias: Parameter::new(Tensor::zeros(&[out]), true),
        }
    }

    fn apply(&self, g: &mut Graph, bind: &mut Binding, x: Var) -> Result<Var> {
        let w = bind.var(g, &self.weight);
        let b = bind.var(g, &self.bias);
        let y = g.matmul_nt(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: Parameter,
    pub bias: Parameter,
}

impl LayerNorm {
    fn new(width: usize) -> Self {
        Self {
            gain: Parameter::new(Tensor::full(&[width], 1.0), true),
            bias: Parameter::new(Tensor::zeros(&[width]), true),
        }
    }

    fn apply(&self, g: &mut Graph, bind: &mut Binding, x: Var) -> Result<Var> {
        let gain = bind.var(g, &self.gain);
        let bias = bind.var(g, &self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Low-rank update `ΔW = B·A` on one attention projection.
#[derive(Clone, Debug)]
pub struct LoraModule {
    pub target: LoraTarget,
    pub rank: usize,
    /// `r × m`
    pub a: Parameter,
    /// `n × r`, zero at attach time
    pub b: Parameter,
}

/// Bottleneck MLP with GeLU and a residual connection; the up-projection is
/// zero-initialised so a fresh adapter is the identity.
#[derive(Clone, Debug)]
pub struct DomainAdapter {
    pub down: Linear,
    pub up: Linear,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    /// Sorted by target.
    pub lora: Vec<LoraModule>,
    pub adapter: Option<DomainAdapter>,
}

impl Block {
    fn projection(&self, target: LoraTarget) -> &Linear {
        match target {
            LoraTarget::Wq => &self.wq,
            LoraTarget::Wk => &self.wk,
            LoraTarget::Wv => &self.wv,
        }
    }

    fn projection_mut(&mut self, target: LoraTarget) -> &mut Linear {
        match target {
            LoraTarget::Wq => &mut self.wq,
            LoraTarget::Wk => &mut self.wk,
            LoraTarget::Wv => &mut self.wv,
        }
    }

    fn project(&self, g: &mut Graph, bind: &mut Binding, x: Var, target: LoraTarget) -> Result<Var> {
        let base = self.projection(target).apply(g, bind, x)?;
        match self.lora.iter().find(|l| l.target == target) {
            None => Ok(base),
            Some(lora) => {
                let a = bind.var(g, &lora.a);
                let b = bind.var(g, &lora.b);
                let xa = g.matmul_nt(x, a)?;
                let delta = g.matmul_nt(xa, b)?;
                g.add(base, delta)
            }
        }
    }

    fn forward(&self, g: &mut Graph, bind: &mut Binding, x: Var, heads: usize) -> Result<Var> {
        let h = self.ln1.apply(g, bind, x)?;
        let q = self.project(g, bind, h, LoraTarget::Wq)?;
        let k = self.project(g, bind, h, LoraTarget::Wk)?;
        let v = self.project(g, bind, h, LoraTarget::Wv)?;
        let width = g.value(q).cols() / heads;
        let scale = 1.0 / (width as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let qh = g.slice_cols(q, head * width, width)?;
            let kh = g.slice_cols(k, head * width, width)?;
            let vh = g.slice_cols(v, head * width, width)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let att = g.causal_softmax(scores)?;
            outs.push(g.matmul(att, vh)?);
        }
        let att = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
        let att = self.wo.apply(g, bind, att)?;
        let x = g.add(x, att)?;

        let h = self.ln2.apply(g, bind, x)?;
        let f = self.fc1.apply(g, bind, h)?;
        let f = g.gelu(f);
        let f = self.fc2.apply(g, bind, f)?;
        let mut x = g.add(x, f)?;

        if let Some(adapter) = &self.adapter {
            let a = adapter.down.apply(g, bind, x)?;
            let a = g.gelu(a);
            let a = adapter.up.apply(g, bind, a)?;
            x = g.add(x, a)?;
        }
        Ok(x)
    }
}

/// Maps parameters to graph leaves for one forward pass.
///
/// Parameters are identified by address, which is stable for as long as the
/// owning model is borrowed; `TinyTransformer::apply_grads` relies on the model
/// not having been moved or restructured between forward and backward.
pub struct Binding {
    vars: HashMap<usize, Var>,
    track_grads: bool,
}

impl Binding {
    /// Leaves require gradients according to each parameter's trainable flag.
    pub fn training() -> Self {
        Self {
            vars: HashMap::new(),
            track_grads: true,
        }
    }

    /// No leaf requires gradients.
    pub fn inference() -> Self {
        Self {
            vars: HashMap::new(),
            track_grads: false,
        }
    }

    pub fn var(&mut self, g: &mut Graph, p: &Parameter) -> Var {
        let key = p as *const Parameter as usize;
        let track = self.track_grads && p.trainable;
        *self
            .vars
            .entry(key)
            .or_insert_with(|| g.leaf(p.value.clone(), track))
    }

    fn lookup(&self, p: &Parameter) -> Option<Var> {
        self.vars.get(&(p as *const Parameter as usize)).copied()
    }
}

#[derive(Clone, Debug)]
pub struct TinyTransformer {
    config: ModelConfig,
    pub tok_emb: Parameter,
    pub pos_emb: Parameter,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub head: Parameter,
    /// Trainable flags captured when LoRA was attached.
    saved_trainable: Option<Vec<bool>>,
}

impl TinyTransformer {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (h, f, v) = (config.hidden, config.ffn, config.vocab);
        let blocks = (0..config.layers)
            .map(|_| Block {
                ln1: LayerNorm::new(h),
                wq: Linear::random(h, h, 1.0, rng),
                wk: Linear::random(h, h, 1.0, rng),
                wv: Linear::random(h, h, 1.0, rng),
                wo: Linear::random(h, h, 0.5, rng),
                ln2: LayerNorm::new(h),
                fc1: Linear::random(f, h, 1.0, rng),
                fc2: Linear::random(h, f, 0.5, rng),
                lora: Vec::new(),
                adapter: None,
            })
            .collect();
        Ok(Self {
            tok_emb: Parameter::new(Tensor::randn(&[v, h], 0.3, rng), true),
            pos_emb: Parameter::new(Tensor::randn(&[config.max_seq, h], 0.1, rng), true),
            blocks,
            ln_f: LayerNorm::new(h),
            head: Parameter::new(Tensor::randn(&[v, h], 1.0 / (h as f64).sqrt(), rng), true),
            saved_trainable: None,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn has_lora(&self) -> bool {
        self.blocks.iter().any(|b| !b.lora.is_empty())
    }

    pub fn has_adapters(&self) -> bool {
        self.blocks.iter().any(|b| b.adapter.is_some())
    }

    pub fn lora_targets(&self) -> Vec<LoraTarget> {
        self.blocks
            .first()
            .map(|b| b.lora.iter().map(|l| l.target).collect())
            .unwrap_or_default()
    }

    pub fn lora_rank(&self) -> Option<usize> {
        self.blocks.first().and_then(|b| b.lora.first()).map(|l| l.rank)
    }

    pub fn adapter_bottleneck(&self) -> Option<usize> {
        self.blocks
            .first()
            .and_then(|b| b.adapter.as_ref())
            .map(|a| a.down.weight.value.rows())
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if ids.len() > self.config.max_seq {
            return Err(Error::Overlength {
                len: ids.len(),
                max: self.config.max_seq,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.config.vocab) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab,
            });
        }
        Ok(())
    }

    /// Records the forward pass on `g`; returns logits `[len, V]`.
    pub fn forward_graph(&self, g: &mut Graph, bind: &mut Binding, ids: &[usize]) -> Result<Var> {
        self.check_ids(ids)?;
        let tok = bind.var(g, &self.tok_emb);
        let pos = bind.var(g, &self.pos_emb);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let te = g.gather(tok, ids)?;
        let pe = g.gather(pos, &positions)?;
        let mut x = g.add(te, pe)?;
        for block in &self.blocks {
            x = block.forward(g, bind, x, self.config.heads)?;
        }
        let x = self.ln_f.apply(g, bind, x)?;
        let head = bind.var(g, &self.head);
        g.matmul_nt(x, head)
    }

    /// Logits `[len, V]`; row `i` predicts token `i + 1`.
    pub fn forward(&self, ids: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut bind = Binding::inference();
        let logits = self.forward_graph(&mut g, &mut bind, ids)?;
        Ok(g.value(logits).clone())
    }

    /// Moves gradients from a finished backward pass into parameter buffers.
    pub fn apply_grads(&mut self, bind: &Binding, grads: &Grads) {
        self.visit_params_mut(&mut |_, p| {
            if let Some(g) = bind.lookup(p).and_then(|v| grads.get(v)) {
                p.accumulate_grad(g);
            }
        });
    }

    /// Makes exactly the parameter kinds selected by `select` trainable.
    pub fn set_trainable(&mut self, select: impl Fn(ParamKind) -> bool) {
        self.visit_params_mut(&mut |name, p| p.trainable = select(ParamKind::of(name)));
    }

    pub fn trainable_flags(&self) -> Vec<bool> {
        let mut out = Vec::new();
        self.visit_params(&mut |_, p| out.push(p.trainable));
        out
    }

    pub fn attach_lora<R: Rng + ?Sized>(
        &mut self,
        targets: &[LoraTarget],
        rank: usize,
        rng: &mut R,
    ) -> Result<()> {
        if self.has_lora() {
            return Err(Error::ModelState("LoRA already attached".into()));
        }
        if targets.is_empty() {
            return Err(Error::InvalidArgument("no LoRA targets given".into()));
        }
        let mut sorted = targets.to_vec();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != targets.len() {
            return Err(Error::InvalidArgument("duplicate LoRA target".into()));
        }
        let h = self.config.hidden;
        let max_rank = h / 2;
        if rank == 0 || rank > max_rank {
            return Err(Error::InvalidArgument(format!(
                "LoRA rank {rank} outside 1..={max_rank} for {h}x{h} projections"
            )));
        }
        self.saved_trainable = Some(self.trainable_flags());
        for block in &mut self.blocks {
            for &target in &sorted {
                let w = &block.projection(target).weight.value;
                let (n, m) = (w.rows(), w.cols());
                block.lora.push(LoraModule {
                    target,
                    rank,
                    a: Parameter::new(Tensor::randn(&[rank, m], 1.0 / (m as f64).sqrt(), rng), true),
                    b: Parameter::new(Tensor::zeros(&[n, rank]), true),
                });
            }
        }
        self.set_trainable(|k| k == ParamKind::Lora);
        Ok(())
    }

    /// Removes LoRA modules and restores the trainable flags from before attach.
    pub fn detach_lora(&mut self) -> Result<()> {
        if !self.has_lora() {
            return Err(Error::ModelState("no LoRA attached".into()));
        }
        for block in &mut self.blocks {
            block.lora.clear();
        }
        if let Some(flags) = self.saved_trainable.take() {
            let mut i = 0;
            self.visit_params_mut(&mut |_, p| {
                if let Some(&f) = flags.get(i) {
                    p.trainable = f;
                }
                i += 1;
            });
        }
        Ok(())
    }

    /// One adapter per layer, after the feed-forward residual. Adapters start
    /// frozen; training procedures select what is trainable.
    pub fn attach_domain_adapters<R: Rng + ?Sized>(&mut self, bottleneck: usize, rng: &mut R) -> Result<()> {
        if self.has_adapters() {
            return Err(Error::ModelState("domain adapters already attached".into()));
        }
        if bottleneck == 0 {
            return Err(Error::InvalidArgument("adapter bottleneck must be positive".into()));
        }
        let h = self.config.hidden;
        for block in &mut self.blocks {
            let mut adapter = DomainAdapter {
                down: Linear::random(bottleneck, h, 1.0, rng),
                up: Linear::zeros(h, bottleneck),
            };
            for p in [
                &mut adapter.down.weight,
                &mut adapter.down.bias,
                &mut adapter.up.weight,
                &mut adapter.up.bias,
            ] {
                p.trainable = false;
            }
            block.adapter = Some(adapter);
        }
        Ok(())
    }

    /// Parameters of one kind, in visit order.
    pub fn block_of(&self, kind: ParamKind) -> ParamBlock {
        let mut entries = Vec::new();
        self.visit_params(&mut |name, p| {
            if ParamKind::of(name) == kind {
                entries.push((name.to_string(), p.value.clone()));
            }
        });
        ParamBlock::new(entries)
    }

    /// `φ_lora`: every LoRA A and B matrix.
    pub fn lora_block(&self) -> ParamBlock {
        self.block_of(ParamKind::Lora)
    }

    /// Overwrites the values of a block whose layout matches `block_of(kind)`.
    pub fn load_block(&mut self, kind: ParamKind, block: &ParamBlock) -> Result<()> {
        let current = self.block_of(kind);
        if !current.same_layout(block) {
            return Err(Error::Shape(format!(
                "{kind:?} block layout mismatch ({} entries expected, {} given)",
                current.len(),
                block.len()
            )));
        }
        let mut it = block.entries.iter();
        self.visit_params_mut(&mut |name, p| {
            if ParamKind::of(name) == kind {
                let (_, t) = it.next().expect("layout checked");
                p.value = t.clone();
            }
        });
        Ok(())
    }

    pub fn load_lora_block(&mut self, block: &ParamBlock) -> Result<()> {
        self.load_block(ParamKind::Lora, block)
    }

    pub fn count(&self, kind: ParamKind) -> usize {
        self.block_of(kind).scalar_count()
    }

    pub fn total_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.numel());
        n
    }

    /// A copy with each LoRA target weight replaced by `W0 + B·A` and the
    /// LoRA modules removed.
    pub fn merged(&self) -> Result<Self> {
        let mut out = self.clone();
        for block in &mut out.blocks {
            let modules = std::mem::take(&mut block.lora);
            for lora in modules {
                let delta = crate::numerics::matmul(&lora.b.value, &lora.a.value)?;
                block.projection_mut(lora.target).weight.value.add_assign(&delta);
            }
        }
        out.saved_trainable = None;
        Ok(out)
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        let mut found: Option<*const Parameter> = None;
        self.visit_params(&mut |n, p| {
            if n == name {
                found = Some(p as *const Parameter);
            }
        });
        // SAFETY: the pointer was taken from a parameter owned by `self`,
        // which stays borrowed for the returned lifetime.
        found.map(|p| unsafe { &*p })
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        let mut found: Option<*mut Parameter> = None;
        self.visit_params_mut(&mut |n, p| {
            if n == name {
                found = Some(p as *mut Parameter);
            }
        });
        // SAFETY: as in `param`, with `self` mutably borrowed.
        found.map(|p| unsafe { &mut *p })
    }

    /// Inputs and per-position targets for next-token training on
    /// `prompt ++ answer`: only positions that predict answer tokens carry a target.
    pub fn sft_example(&self, prompt: &[usize], answer: &[usize]) -> Result<(Vec<usize>, Vec<Option<usize>>)> {
        if prompt.is_empty() {
            return Err(Error::InvalidArgument("empty prompt".into()));
        }
        if answer.is_empty() {
            return Err(Error::InvalidArgument("empty answer".into()));
        }
        let total = prompt.len() + answer.len();
        if total > self.config.max_seq {
            return Err(Error::Overlength {
                len: total,
                max: self.config.max_seq,
            });
        }
        let seq: Vec<usize> = prompt.iter().chain(answer).copied().collect();
        let inputs = seq[..total - 1].to_vec();
        let targets = (0..total - 1)
            .map(|i| (i + 1 >= prompt.len()).then(|| seq[i + 1]))
            .collect();
        Ok((inputs, targets))
    }

    /// Supervised finetuning loss `L_lb`: mean next-token cross-entropy over
    /// the answer positions.
    pub fn sft_loss(&self, prompt: &[usize], answer: &[usize]) -> Result<f64> {
        let (inputs, targets) = self.sft_example(prompt, answer)?;
        let mut g = Graph::new();
        let mut bind = Binding::inference();
        let logits = self.forward_graph(&mut g, &mut bind, &inputs)?;
        let loss = g.cross_entropy(logits, &targets)?;
        Ok(g.value(loss).item())
    }

    /// Runs forward and backward on the SFT loss, accumulating gradients into
    /// trainable parameters. Returns the loss.
    pub fn accumulate_sft_grads(&mut self, prompt: &[usize], answer: &[usize]) -> Result<f64> {
        let (inputs, targets) = self.sft_example(prompt, answer)?;
        let mut g = Graph::new();
        let mut bind = Binding::training();
        let logits = self.forward_graph(&mut g, &mut bind, &inputs)?;
        let loss = g.cross_entropy(logits, &targets)?;
        let value = g.value(loss).item();
        let grads = g.backward(loss)?;
        self.apply_grads(&bind, &grads);
        Ok(value)
    }

    /// Greedy decoding; stops at `<eos>`, after `max_new` tokens, or at
    /// `max_seq`. The returned ids exclude the prompt and the `<eos>`.
    pub fn generate(&self, prompt: &[usize], max_new: usize) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(Error::InvalidArgument("empty prompt".into()));
        }
        let mut ids = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new {
            if ids.len() >= self.config.max_seq {
                break;
            }
            let logits = self.forward(&ids)?;
            let last = logits.row(logits.rows() - 1);
            let next = argmax(last);
            if next == EOS {
                break;
            }
            ids.push(next);
            out.push(next);
        }
        Ok(out)
    }
}

/// First index of the maximum.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn visit_linear<'a>(prefix: &str, l: &'a Linear, f: &mut dyn FnMut(&str, &'a Parameter)) {
    f(&format!("{prefix}.weight"), &l.weight);
    f(&format!("{prefix}.bias"), &l.bias);
}

fn visit_linear_mut(prefix: &str, l: &mut Linear, f: &mut dyn FnMut(&str, &mut Parameter)) {
    f(&format!("{prefix}.weight"), &mut l.weight);
    f(&format!("{prefix}.bias"), &mut l.bias);
}

impl Parameterized for TinyTransformer {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        f("tok_emb", &self.tok_emb);
        f("pos_emb", &self.pos_emb);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            f(&format!("{p}.ln1.gain"), &b.ln1.gain);
            f(&format!("{p}.ln1.bias"), &b.ln1.bias);
            visit_linear(&format!("{p}.attn.wq"), &b.wq, f);
            visit_linear(&format!("{p}.attn.wk"), &b.wk, f);
            visit_linear(&format!("{p}.attn.wv"), &b.wv, f);
            visit_linear(&format!("{p}.attn.wo"), &b.wo, f);
            f(&format!("{p}.ln2.gain"), &b.ln2.gain);
            f(&format!("{p}.ln2.bias"), &b.ln2.bias);
            visit_linear(&format!("{p}.ffn.fc1"), &b.fc1, f);
            visit_linear(&format!("{p}.ffn.fc2"), &b.fc2, f);
            for l in &b.lora {
                f(&format!("{p}.lora.{}.a", l.target), &l.a);
                f(&format!("{p}.lora.{}.b", l.target), &l.b);
            }
            if let Some(a) = &b.adapter {
                visit_linear(&format!("{p}.adapter.down"), &a.down, f);
                visit_linear(&format!("{p}.adapter.up"), &a.up, f);
            }
        }
        f("ln_f.gain", &self.ln_f.gain);
        f("ln_f.bias", &self.ln_f.bias);
        f("head", &self.head);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f("tok_emb", &mut self.tok_emb);
        f("pos_emb", &mut self.pos_emb);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{i}");
            f(&format!("{p}.ln1.gain"), &mut b.ln1.gain);
            f(&format!("{p}.ln1.bias"), &mut b.ln1.bias);
            visit_linear_mut(&format!("{p}.attn.wq"), &mut b.wq, f);
            visit_linear_mut(&format!("{p}.attn.wk"), &mut b.wk, f);
            visit_linear_mut(&format!("{p}.attn.wv"), &mut b.wv, f);
            visit_linear_mut(&format!("{p}.attn.wo"), &mut b.wo, f);
            f(&format!("{p}.ln2.gain"), &mut b.ln2.gain);
            f(&format!("{p}.ln2.bias"), &mut b.ln2.bias);
            visit_linear_mut(&format!("{p}.ffn.fc1"), &mut b.fc1, f);
            visit_linear_mut(&format!("{p}.ffn.fc2"), &mut b.fc2, f);
            for l in &mut b.lora {
                f(&format!("{p}.lora.{}.a", l.target), &mut l.a);
                f(&format!("{p}.lora.{}.b", l.target), &mut l.b);
            }
            if let Some(a) = &mut b.adapter {
                visit_linear_mut(&format!("{p}.adapter.down"), &mut a.down, f);
                visit_linear_mut(&format!("{p}.adapter.up"), &mut a.up, f);
            }
        }
        f("ln_f.gain", &mut self.ln_f.gain);
        f("ln_f.bias", &mut self.ln_f.bias);
        f("head", &mut self.head);
    }
}
