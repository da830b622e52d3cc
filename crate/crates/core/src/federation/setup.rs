//! Everything a run needs before the first round: data, tokenizers, and the
//! pretrained and distilled base models. Shared by all methods for a seed.

use rand::RngCore;

use super::stream;
use crate::config::{ExperimentConfig, TokenizerConfig};
use crate::data::{dirichlet_partition, generate_corpus, load_jsonl, Partition, QASample};
use crate::error::{Result, ResultExt};
use crate::model::TinyTransformer;
use crate::tokenizers::{train_bpe, Tokenizer, TokenizerKind};
use crate::training::{distill_init, encode_all, pretrain, DistillReport};

const ROLE_PRETRAIN_CORPUS: u64 = 1;
const ROLE_LLM: u64 = 2;
const ROLE_DISTILL: u64 = 3;
const ROLE_SLM: u64 = 1000;

#[derive(Clone, Debug)]
pub struct Setup {
    pub server_tokenizer: Tokenizer,
    pub slm_tokenizers: Vec<Tokenizer>,
    pub partition: Partition,
    /// Pretrained, without LoRA.
    pub llm: TinyTransformer,
    /// Pretrained, without LoRA, one per device.
    pub slms: Vec<TinyTransformer>,
    /// Distilled from `llm`, without LoRA or adapters.
    pub dpm: TinyTransformer,
    pub distill: DistillReport,
    pub llm_pretrain_losses: Vec<f64>,
    pub slm_pretrain_losses: Vec<Vec<f64>>,
}

fn build_tokenizer(cfg: &TokenizerConfig, texts: &[String]) -> Result<Tokenizer> {
    match cfg.kind {
        TokenizerKind::Char => Ok(Tokenizer::char_level()),
        TokenizerKind::Bpe => train_bpe(texts, cfg.merges),
    }
}

/// The pretraining corpus is disjoint in origin from the federated corpus:
/// a fresh draw from the generator, or the server's training split when the
/// corpus comes from a file.
fn pretrain_corpus(cfg: &ExperimentConfig, seed: u64, partition: &Partition) -> Result<Vec<QASample>> {
    if cfg.data.jsonl.is_some() {
        return Ok(partition.server.train.clone());
    }
    let corpus_seed = stream(seed, ROLE_PRETRAIN_CORPUS).next_u64();
    generate_corpus(&cfg.data.domains, cfg.data.pretrain_per_domain, corpus_seed)
}

pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Setup> {
    cfg.validate()?;
    let corpus = match &cfg.data.jsonl {
        Some(path) => load_jsonl(path)?,
        None => generate_corpus(&cfg.data.domains, cfg.data.per_domain, seed)?,
    };
    let partition = dirichlet_partition(&corpus, &cfg.partition_spec(seed)).context(|| "partitioning".to_string())?;
    let pre = pretrain_corpus(cfg, seed, &partition)?;
    let texts: Vec<String> = pre.iter().map(|s| format!("{}{}", s.prompt(), s.answer())).collect();

    let opt = cfg.optimizer.sgd();
    let server_tokenizer = build_tokenizer(&cfg.models.server_tokenizer, &texts)?;
    let server_seqs = encode_all(&server_tokenizer, &pre);
    let mut rng = stream(seed, ROLE_LLM);
    let mut llm = TinyTransformer::new(cfg.models.llm.with_vocab(server_tokenizer.vocab_size()), &mut rng)?;
    let llm_pretrain_losses = pretrain(&mut llm, &server_seqs, cfg.optimizer.pretrain_llm_epochs, &opt, &mut rng)
        .context(|| "pretraining the server LLM".to_string())?;

    let seqs: Vec<Vec<usize>> = server_seqs.iter().map(|s| s.sequence()).collect();
    let (dpm, distill) = distill_init(
        &llm,
        cfg.models.dpm.with_vocab(server_tokenizer.vocab_size()),
        &seqs,
        cfg.optimizer.distill_steps,
        &cfg.optimizer.distill_sgd(),
        &mut stream(seed, ROLE_DISTILL),
    )
    .context(|| "distilling the proxy model".to_string())?;

    let mut slm_tokenizers = Vec::with_capacity(cfg.devices);
    let mut slms = Vec::with_capacity(cfg.devices);
    let mut slm_pretrain_losses = Vec::with_capacity(cfg.devices);
    for (i, s) in cfg.models.slm.iter().enumerate() {
        let tok = build_tokenizer(&s.tokenizer, &texts)?;
        let mut rng = stream(seed, ROLE_SLM + i as u64);
        let mut slm = TinyTransformer::new(s.arch.with_vocab(tok.vocab_size()), &mut rng)?;
        let losses = pretrain(&mut slm, &encode_all(&tok, &pre), cfg.optimizer.pretrain_slm_epochs, &opt, &mut rng)
            .context(|| format!("pretraining device {i} model"))?;
        slm_tokenizers.push(tok);
        slms.push(slm);
        slm_pretrain_losses.push(losses);
    }

    Ok(Setup {
        server_tokenizer,
        slm_tokenizers,
        partition,
        llm,
        slms,
        dpm,
        distill,
        llm_pretrain_losses,
        slm_pretrain_losses,
    })
}
