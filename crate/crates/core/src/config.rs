//! Experiment configuration. Every field has a default, and the resolved
//! config is written next to run outputs so a run directory is self-describing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{builtin_domains, PartitionSpec};
use crate::error::{Error, Result};
use crate::model::{LoraTarget, ModelConfig};
use crate::tokenizers::TokenizerKind;
use crate::training::{SamlWeights, Sgd};
use crate::transfer::DEFAULT_TOP_K;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Coplms,
    Standalone,
    Fedlora,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Coplms => "coplms",
            Method::Standalone => "standalone",
            Method::Fedlora => "fedlora",
        }
    }
}

/// Architecture without the vocabulary size, which comes from the tokenizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub arch_tag: String,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub max_seq: usize,
}

impl ArchConfig {
    pub fn with_vocab(&self, vocab: usize) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            heads: self.heads,
            hidden: self.hidden,
            ffn: self.ffn,
            vocab,
            max_seq: self.max_seq,
            arch_tag: self.arch_tag.clone(),
        }
    }

    fn new(tag: &str, layers: usize, heads: usize, hidden: usize, ffn: usize) -> Self {
        Self {
            arch_tag: tag.to_string(),
            layers,
            heads,
            hidden,
            ffn,
            max_seq: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    pub kind: TokenizerKind,
    /// Merge count for `bpe`; ignored for `char`.
    pub merges: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlmConfig {
    pub arch: ArchConfig,
    pub tokenizer: TokenizerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsConfig {
    pub llm: ArchConfig,
    pub dpm: ArchConfig,
    /// Tokenizer shared by the LLM and the proxy model.
    pub server_tokenizer: TokenizerConfig,
    /// One entry per device.
    pub slm: Vec<SlmConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub targets: Vec<LoraTarget>,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Full-parameter epochs for the server LLM before federation.
    pub pretrain_llm_epochs: usize,
    /// Full-parameter epochs for each device SLM before federation.
    pub pretrain_slm_epochs: usize,
    pub distill_steps: usize,
    pub distill_lr: f64,
    /// Per round.
    pub dst_epochs: usize,
    /// Per round, for mutual learning and for the baselines' local finetuning.
    pub local_epochs: usize,
    /// Per round, for the server's mutual learning.
    pub server_epochs: usize,
}

impl OptimizerConfig {
    pub fn sgd(&self) -> Sgd {
        Sgd {
            lr: self.lr,
            batch_size: self.batch_size,
        }
    }

    pub fn distill_sgd(&self) -> Sgd {
        Sgd {
            lr: self.distill_lr,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub domains: Vec<String>,
    pub per_domain: usize,
    pub per_device_size: usize,
    pub server_size: usize,
    pub train_fraction: f64,
    /// Samples per domain in the separate corpus used for pretraining base
    /// models and learning BPE merges.
    pub pretrain_per_domain: usize,
    /// Load the global corpus from this file instead of generating it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jsonl: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablations {
    pub no_dst: bool,
    pub no_server_saml: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    /// Number of devices.
    pub devices: usize,
    /// Number of communication rounds.
    pub rounds: usize,
    /// Dirichlet concentration of per-device domain mixtures.
    pub lambda: f64,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub adapter_bottleneck: usize,
    pub alpha: f64,
    pub beta: f64,
    pub top_k: usize,
    pub models: ModelsConfig,
    pub lora: LoraConfig,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    pub ablations: Ablations,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let slm = |tag: &str, layers, hidden, kind, merges| SlmConfig {
            arch: ArchConfig::new(tag, layers, 2, hidden, 2 * hidden),
            tokenizer: TokenizerConfig { kind, merges },
        };
        Self {
            method: Method::Coplms,
            devices: 3,
            rounds: 10,
            lambda: 0.1,
            seeds: vec![0],
            output_dir: PathBuf::from("runs"),
            adapter_bottleneck: 8,
            alpha: 0.5,
            beta: 0.5,
            top_k: DEFAULT_TOP_K,
            models: ModelsConfig {
                llm: ArchConfig::new("llm", 4, 4, 128, 256),
                dpm: ArchConfig::new("dpm", 1, 2, 32, 64),
                server_tokenizer: TokenizerConfig {
                    kind: TokenizerKind::Bpe,
                    merges: 120,
                },
                slm: vec![
                    slm("slm-char", 2, 64, TokenizerKind::Char, 0),
                    slm("slm-bpe", 2, 64, TokenizerKind::Bpe, 60),
                    slm("slm-wide", 2, 96, TokenizerKind::Bpe, 200),
                ],
            },
            lora: LoraConfig {
                targets: vec![LoraTarget::Wq, LoraTarget::Wv],
                rank: 8,
            },
            optimizer: OptimizerConfig {
                lr: 0.05,
                batch_size: 4,
                pretrain_llm_epochs: 8,
                pretrain_slm_epochs: 2,
                distill_steps: 600,
                distill_lr: 0.1,
                dst_epochs: 1,
                local_epochs: 1,
                server_epochs: 1,
            },
            data: DataConfig {
                domains: ["travel", "cooking", "sports"].map(String::from).to_vec(),
                per_domain: 1500,
                per_device_size: 1000,
                server_size: 1000,
                train_fraction: 0.8,
                pretrain_per_domain: 200,
                jsonl: None,
            },
            ablations: Ablations::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML; absent fields take their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut value: toml::Value =
            toml::from_str(text).map_err(|e| Error::Config(vec![format!("toml: {e}")]))?;
        let defaults = toml::Value::try_from(ExperimentConfig::default())
            .map_err(|e| Error::Config(vec![format!("defaults: {e}")]))?;
        merge_defaults(&mut value, &defaults);
        let cfg: ExperimentConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// The fully materialized config.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn saml_weights(&self) -> SamlWeights {
        SamlWeights {
            alpha: self.alpha,
            beta: self.beta,
            k: self.top_k,
        }
    }

    pub fn partition_spec(&self, seed: u64) -> PartitionSpec {
        PartitionSpec {
            devices: self.devices,
            lambda: self.lambda,
            per_device_size: self.data.per_device_size,
            server_size: self.data.server_size,
            train_fraction: self.data.train_fraction,
            seed,
        }
    }

    /// Checks every field, reporting all problems with their paths.
    pub fn validate(&self) -> Result<()> {
        let mut p: Vec<String> = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                p.push(msg);
            }
        };
        check(self.devices >= 1, "devices: must be >= 1".into());
        check(
            self.lambda > 0.0 && self.lambda.is_finite(),
            format!("lambda: must be positive, got {}", self.lambda),
        );
        check(!self.seeds.is_empty(), "seeds: at least one seed required".into());
        check(self.adapter_bottleneck >= 1, "adapter_bottleneck: must be >= 1".into());
        check((0.0..=1.0).contains(&self.alpha), format!("alpha: {} outside [0,1]", self.alpha));
        check((0.0..=1.0).contains(&self.beta), format!("beta: {} outside [0,1]", self.beta));
        check(self.top_k >= 1, "top_k: must be >= 1".into());

        let arch = |path: &str, a: &ArchConfig, p: &mut Vec<String>| {
            if a.layers == 0 {
                p.push(format!("{path}.layers: must be >= 1"));
            }
            if a.heads == 0 || a.hidden % a.heads != 0 {
                p.push(format!("{path}.hidden: {} not divisible by heads {}", a.hidden, a.heads));
            }
            if a.ffn == 0 {
                p.push(format!("{path}.ffn: must be >= 1"));
            }
            if a.max_seq < 8 {
                p.push(format!("{path}.max_seq: must be >= 8"));
            }
            let max_rank = a.hidden / 2;
            if self.lora.rank == 0 || self.lora.rank > max_rank {
                p.push(format!(
                    "lora.rank: {} outside 1..={max_rank} allowed by {path}.hidden = {}",
                    self.lora.rank, a.hidden
                ));
            }
        };
        arch("models.llm", &self.models.llm, &mut p);
        arch("models.dpm", &self.models.dpm, &mut p);
        for (i, s) in self.models.slm.iter().enumerate() {
            arch(&format!("models.slm[{i}]"), &s.arch, &mut p);
        }
        let (l, d) = (&self.models.llm, &self.models.dpm);
        if d.layers >= l.layers || d.hidden >= l.hidden {
            p.push("models.dpm: must be strictly smaller than models.llm in layers and hidden".into());
        }
        if self.models.slm.len() != self.devices {
            p.push(format!(
                "models.slm: {} entries for {} devices",
                self.models.slm.len(),
                self.devices
            ));
        }
        if self.lora.targets.is_empty() {
            p.push("lora.targets: at least one target required".into());
        }
        let mut t = self.lora.targets.clone();
        t.sort();
        t.dedup();
        if t.len() != self.lora.targets.len() {
            p.push("lora.targets: duplicate entry".into());
        }

        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            p.push(format!("optimizer.lr: must be positive, got {}", o.lr));
        }
        if !(o.distill_lr > 0.0 && o.distill_lr.is_finite()) {
            p.push(format!("optimizer.distill_lr: must be positive, got {}", o.distill_lr));
        }
        if o.batch_size == 0 {
            p.push("optimizer.batch_size: must be >= 1".into());
        }

        let dc = &self.data;
        if dc.jsonl.is_none() {
            if dc.domains.len() < 2 {
                p.push("data.domains: at least 2 domains required".into());
            }
            for d in &dc.domains {
                if !builtin_domains().contains(&d.as_str()) {
                    p.push(format!("data.domains: unknown domain {d:?}"));
                }
            }
            if dc.per_domain == 0 {
                p.push("data.per_domain: must be >= 1".into());
            }
        }
        if dc.pretrain_per_domain == 0 {
            p.push("data.pretrain_per_domain: must be >= 1".into());
        }
        if dc.per_device_size == 0 || dc.server_size == 0 {
            p.push("data.per_device_size / data.server_size: must be >= 1".into());
        }
        if !(dc.train_fraction > 0.0 && dc.train_fraction < 1.0) {
            p.push(format!("data.train_fraction: {} outside (0,1)", dc.train_fraction));
        }
        let split_ok = |n: usize| {
            let train = ((n as f64) * dc.train_fraction).round() as usize;
            train >= 1 && train < n
        };
        if dc.per_device_size > 0 && !split_ok(dc.per_device_size) {
            p.push("data.per_device_size: too small for a non-empty train/test split".into());
        }
        if dc.server_size > 0 && !split_ok(dc.server_size) {
            p.push("data.server_size: too small for a non-empty train/test split".into());
        }

        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

/// Fills keys missing from `value` with those of `defaults`, recursively
/// through tables. Arrays are taken whole.
fn merge_defaults(value: &mut toml::Value, defaults: &toml::Value) {
    if let (toml::Value::Table(v), toml::Value::Table(d)) = (value, defaults) {
        for (k, dv) in d {
            match v.get_mut(k) {
                Some(existing) => merge_defaults(existing, dv),
                None => {
                    v.insert(k.clone(), dv.clone());
                }
            }
        }
    }
}
