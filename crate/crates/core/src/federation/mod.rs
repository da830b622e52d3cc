//! Round orchestration for cloud-edge co-tuning, the baselines, LoRA
//! aggregation and communication accounting.

mod ledger;
mod setup;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ledger::{CommLedger, CommTotals, Direction, Message, MessageBus};
pub use setup::{prepare, Setup};

use crate::config::{ArchConfig, ExperimentConfig, LoraConfig, Method};
use crate::data::{LocalDataset, PartitionManifest};
use crate::error::{Error, Result, ResultExt};
use crate::evaluation::evaluate;
use crate::model::{ParamBlock, ParamKind, TinyTransformer};
use crate::numerics::Tensor;
use crate::tokenizers::Tokenizer;
use crate::training::{
    dst, encode_all, lora_sft, mean_sft_loss, pair_samples, saml, DistillReport, EncodedSample, PairedSample,
};

pub const SERVER: &str = "server";

pub fn device_name(i: usize) -> String {
    format!("device{i}")
}

/// Independent random stream for one role within a seeded run.
pub fn stream(seed: u64, role: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(role);
    rng
}

/// Elementwise mean of shape-identical blocks.
pub fn aggregate_lora(blocks: &[ParamBlock]) -> Result<ParamBlock> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to aggregate".into()))?;
    if let Some(i) = blocks.iter().position(|b| !b.same_layout(first)) {
        return Err(Error::Shape(format!("block {i} layout differs from block 0")));
    }
    let n = blocks.len() as f64;
    let entries = first
        .entries
        .iter()
        .enumerate()
        .map(|(e, (name, t))| {
            let mut sum = vec![0.0; t.numel()];
            for b in blocks {
                for (s, v) in sum.iter_mut().zip(b.entries[e].1.data()) {
                    *s += v;
                }
            }
            let mean = sum.into_iter().map(|s| s / n).collect();
            Ok((name.clone(), Tensor::new(t.shape().to_vec(), mean)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ParamBlock::new(entries))
}

/// Per-round scalars sent or received by `endpoint`, averaged over the rounds
/// present in the ledger, divided by the scalars resident on the endpoint.
pub fn comm_ratio(ledger: &CommLedger, endpoint: &str, resident_scalars: usize) -> f64 {
    let rounds = ledger.rounds();
    if rounds == 0 || resident_scalars == 0 {
        return 0.0;
    }
    let per_round = ledger.endpoint_totals(endpoint).scalars as f64 / rounds as f64;
    per_round / resident_scalars as f64
}

/// Closed-form LoRA block size for square attention projections:
/// `layers · |targets| · 2 · rank · hidden`.
pub fn lora_scalar_count(arch: &ArchConfig, lora: &LoraConfig) -> usize {
    arch.layers * lora.targets.len() * 2 * lora.rank * arch.hidden
}

/// Closed-form base parameter count of a model.
pub fn base_scalar_count(arch: &ArchConfig, vocab: usize) -> usize {
    let (h, f) = (arch.hidden, arch.ffn);
    let per_layer = 2 * h + 4 * (h * h + h) + 2 * h + (f * h + f) + (h * f + h);
    vocab * h + arch.max_seq * h + arch.layers * per_layer + 2 * h + vocab * h
}

/// Closed-form domain-adapter parameter count.
pub fn adapter_scalar_count(arch: &ArchConfig, bottleneck: usize) -> usize {
    arch.layers * (bottleneck * arch.hidden + bottleneck + arch.hidden * bottleneck + arch.hidden)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndpointMetrics {
    pub endpoint: String,
    pub arch_tag: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub em: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_loss: Option<f64>,
    pub test_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub endpoints: Vec<EndpointMetrics>,
    pub comm: CommTotals,
}

impl RoundReport {
    pub fn endpoint(&self, name: &str) -> Option<&EndpointMetrics> {
        self.endpoints.iter().find(|e| e.endpoint == name)
    }

    /// Mean Rouge-L over the device language models.
    pub fn mean_device_rouge(&self) -> f64 {
        let v: Vec<f64> = self
            .endpoints
            .iter()
            .filter(|e| e.endpoint.starts_with("device") && e.endpoint.ends_with("/slm"))
            .filter_map(|e| e.rouge_l)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitReport {
    pub llm_pretrain_losses: Vec<f64>,
    pub slm_pretrain_losses: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distill: Option<DistillReport>,
    /// Resident scalars per device, all models included.
    pub device_resident_scalars: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub seed: u64,
    pub ablations: crate::config::Ablations,
    pub init: InitReport,
    pub rounds: Vec<RoundReport>,
    /// Per device, in device order.
    pub comm_ratio: Vec<f64>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Which parameter kinds changed between two snapshots of a model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeSet {
    pub base: bool,
    pub lora: bool,
    pub adapter: bool,
}

impl ChangeSet {
    pub fn between(before: &TinyTransformer, after: &TinyTransformer) -> Self {
        let diff = |k| !before.block_of(k).bitwise_eq(&after.block_of(k));
        Self {
            base: diff(ParamKind::Base),
            lora: diff(ParamKind::Lora),
            adapter: diff(ParamKind::Adapter),
        }
    }
}

/// Parameter movement observed during one round.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundAudit {
    pub round: usize,
    pub device_dst: Vec<ChangeSet>,
    pub device_saml_dpm: Vec<ChangeSet>,
    pub device_saml_slm: Vec<ChangeSet>,
    /// Each device proxy from just before its upload to the end of the round.
    pub device_dpm_across_round: Vec<ChangeSet>,
    pub server_saml_dpm: Option<ChangeSet>,
    pub server_saml_llm: Option<ChangeSet>,
}

pub struct Device {
    pub id: usize,
    pub name: String,
    pub tokenizer: Tokenizer,
    pub slm: TinyTransformer,
    /// Absent for methods without a proxy model.
    pub dpm: Option<TinyTransformer>,
    pub data: LocalDataset,
    pub slm_train: Vec<EncodedSample>,
    pub slm_test: Vec<EncodedSample>,
    pub dpm_train: Vec<EncodedSample>,
    pub dpm_test: Vec<EncodedSample>,
    pub paired: Vec<PairedSample>,
    rng: ChaCha8Rng,
    last_train_loss: Option<f64>,
}

pub struct Server {
    pub tokenizer: Tokenizer,
    pub llm: Option<TinyTransformer>,
    pub dpm: Option<TinyTransformer>,
    pub data: LocalDataset,
    pub train: Vec<EncodedSample>,
    pub test: Vec<EncodedSample>,
    pub paired: Vec<PairedSample>,
    rng: ChaCha8Rng,
    last_train_loss: Option<f64>,
}

/// Running state of one (method, seed) experiment.
pub struct Federation {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub devices: Vec<Device>,
    pub server: Server,
    pub bus: MessageBus,
    pub init: InitReport,
    pub manifest: PartitionManifest,
    pub reports: Vec<RoundReport>,
    pub audits: Vec<RoundAudit>,
}

const ROLE_SERVER_LORA: u64 = 10;
const ROLE_SERVER_TRAIN: u64 = 11;
const ROLE_DEVICE_LORA: u64 = 100;
const ROLE_DEVICE_ADAPTER: u64 = 200;
const ROLE_DEVICE_TRAIN: u64 = 300;

impl Federation {
    /// Attaches LoRA and adapters as the method requires; for co-tuning the
    /// proxy model is given LoRA at the server and then copied to every device
    /// before each device attaches its own adapters.
    pub fn new(config: &ExperimentConfig, setup: &Setup, seed: u64) -> Result<Self> {
        config.validate()?;
        let method = config.method;
        if method == Method::Fedlora {
            let tags: Vec<&str> = config.models.slm.iter().map(|s| s.arch.arch_tag.as_str()).collect();
            if tags.windows(2).any(|w| w[0] != w[1]) || config.models.slm.windows(2).any(|w| w[0] != w[1]) {
                return Err(Error::InvalidArgument(format!(
                    "fedlora needs identical device models, got arch tags {tags:?}"
                )));
            }
        }
        let lora = &config.lora;
        let sgd_seq = |tok: &Tokenizer, d: &LocalDataset| (encode_all(tok, &d.train), encode_all(tok, &d.test));

        let mut server_dpm = None;
        let mut llm = None;
        if method != Method::Fedlora {
            let mut l = setup.llm.clone();
            l.attach_lora(&lora.targets, lora.rank, &mut stream(seed, ROLE_SERVER_LORA))?;
            llm = Some(l);
        }
        if method == Method::Coplms {
            let mut d = setup.dpm.clone();
            d.attach_lora(&lora.targets, lora.rank, &mut stream(seed, ROLE_SERVER_LORA + 1))?;
            server_dpm = Some(d);
        }

        let mut devices = Vec::with_capacity(config.devices);
        for i in 0..config.devices {
            let tok = setup.slm_tokenizers[i].clone();
            let mut slm = setup.slms[i].clone();
            slm.attach_lora(&lora.targets, lora.rank, &mut stream(seed, ROLE_DEVICE_LORA + i as u64))?;
            let data = setup.partition.devices[i].clone();
            let (slm_train, slm_test) = sgd_seq(&tok, &data);
            let (mut dpm_train, mut dpm_test, mut paired) = (Vec::new(), Vec::new(), Vec::new());
            let dpm = match &server_dpm {
                Some(sd) => {
                    let mut d: TinyTransformer = sd.clone();
                    d.attach_domain_adapters(
                        config.adapter_bottleneck,
                        &mut stream(seed, ROLE_DEVICE_ADAPTER + i as u64),
                    )?;
                    (dpm_train, dpm_test) = sgd_seq(&setup.server_tokenizer, &data);
                    paired = pair_samples(&data.train, &setup.server_tokenizer, &tok)?;
                    Some(d)
                }
                None => None,
            };
            devices.push(Device {
                id: i,
                name: device_name(i),
                tokenizer: tok,
                slm,
                dpm,
                data,
                slm_train,
                slm_test,
                dpm_train,
                dpm_test,
                paired,
                rng: stream(seed, ROLE_DEVICE_TRAIN + i as u64),
                last_train_loss: None,
            });
        }

        let sdata = setup.partition.server.clone();
        let (train, test) = sgd_seq(&setup.server_tokenizer, &sdata);
        let paired = if method == Method::Coplms {
            pair_samples(&sdata.train, &setup.server_tokenizer, &setup.server_tokenizer)?
        } else {
            Vec::new()
        };
        let server = Server {
            tokenizer: setup.server_tokenizer.clone(),
            llm,
            dpm: server_dpm,
            data: sdata,
            train,
            test,
            paired,
            rng: stream(seed, ROLE_SERVER_TRAIN),
            last_train_loss: None,
        };

        let device_resident_scalars = devices
            .iter()
            .map(|d| d.slm.total_params() + d.dpm.as_ref().map_or(0, |m| m.total_params()))
            .collect();
        let init = InitReport {
            llm_pretrain_losses: if method == Method::Fedlora {
                Vec::new()
            } else {
                setup.llm_pretrain_losses.clone()
            },
            slm_pretrain_losses: setup.slm_pretrain_losses.clone(),
            distill: (method == Method::Coplms).then(|| setup.distill.clone()),
            device_resident_scalars,
        };
        Ok(Self {
            config: config.clone(),
            seed,
            devices,
            server,
            bus: MessageBus::new(),
            init,
            manifest: setup.partition.manifest.clone(),
            reports: Vec::new(),
            audits: Vec::new(),
        })
    }

    /// Runs round `t` (1-based) of the configured method.
    pub fn run_round(&mut self, t: usize) -> Result<RoundReport> {
        let audit = match self.config.method {
            Method::Coplms => self.coplms_round(t)?,
            Method::Standalone => self.standalone_round()?,
            Method::Fedlora => self.fedlora_round(t)?,
        };
        self.audits.push(RoundAudit { round: t, ..audit });
        let report = self.evaluate(t)?;
        self.reports.push(report.clone());
        Ok(report)
    }

    pub fn run(&mut self) -> Result<()> {
        for t in 1..=self.config.rounds {
            self.run_round(t).context(|| format!("round {t}"))?;
        }
        Ok(())
    }

    fn coplms_round(&mut self, t: usize) -> Result<RoundAudit> {
        let cfg = &self.config;
        let opt = cfg.optimizer.sgd();
        let w = cfg.saml_weights();
        let mut audit = RoundAudit::default();
        let mut snapshots = Vec::with_capacity(self.devices.len());

        for d in &mut self.devices {
            let ctx = d.name.clone();
            let dpm = d.dpm.as_mut().expect("co-tuning device has a proxy");
            let before = dpm.clone();
            if !cfg.ablations.no_dst {
                dst(dpm, &d.dpm_train, cfg.optimizer.dst_epochs, &opt, &mut d.rng)
                    .context(|| format!("{ctx}: domain-specific tuning"))?;
            }
            audit.device_dst.push(ChangeSet::between(&before, dpm));

            let (dpm_before, slm_before) = (dpm.clone(), d.slm.clone());
            let (block, rep) = saml(dpm, &mut d.slm, &d.paired, &w, cfg.optimizer.local_epochs, &opt, &mut d.rng)
                .context(|| format!("{ctx}: mutual learning"))?;
            audit.device_saml_dpm.push(ChangeSet::between(&dpm_before, dpm));
            audit.device_saml_slm.push(ChangeSet::between(&slm_before, &d.slm));
            d.last_train_loss = rep.peer_losses.last().copied();
            snapshots.push(dpm.clone());
            self.bus.send(t, Direction::Upload, &d.name, SERVER, &block);
        }

        let uploads = (0..self.devices.len())
            .map(|_| self.bus.receive(SERVER))
            .collect::<Result<Vec<_>>>()?;
        let aggregated = aggregate_lora(&uploads).context(|| "server: aggregation".to_string())?;
        let server_dpm = self.server.dpm.as_mut().expect("co-tuning server has a proxy");
        server_dpm.load_lora_block(&aggregated)?;
        if !cfg.ablations.no_server_saml {
            let llm = self.server.llm.as_mut().expect("co-tuning server has an LLM");
            let (dpm_before, llm_before) = (server_dpm.clone(), llm.clone());
            let (_, rep) = saml(
                server_dpm,
                llm,
                &self.server.paired,
                &w,
                cfg.optimizer.server_epochs,
                &opt,
                &mut self.server.rng,
            )
            .context(|| "server: mutual learning".to_string())?;
            audit.server_saml_dpm = Some(ChangeSet::between(&dpm_before, server_dpm));
            audit.server_saml_llm = Some(ChangeSet::between(&llm_before, llm));
            self.server.last_train_loss = rep.peer_losses.last().copied();
        }
        let download = server_dpm.lora_block();
        for d in &self.devices {
            self.bus.send(t, Direction::Download, SERVER, &d.name, &download);
        }
        for (d, snap) in self.devices.iter_mut().zip(snapshots) {
            let block = self.bus.receive(&d.name)?;
            let dpm = d.dpm.as_mut().expect("co-tuning device has a proxy");
            dpm.load_lora_block(&block).context(|| format!("{}: download", d.name))?;
            audit.device_dpm_across_round.push(ChangeSet::between(&snap, dpm));
        }
        Ok(audit)
    }

    fn standalone_round(&mut self) -> Result<RoundAudit> {
        let opt = self.config.optimizer.sgd();
        let epochs = self.config.optimizer.local_epochs;
        for d in &mut self.devices {
            let losses = lora_sft(&mut d.slm, &d.slm_train, epochs, &opt, &mut d.rng)
                .context(|| format!("{}: local finetuning", d.name))?;
            d.last_train_loss = losses.last().copied();
        }
        if let Some(llm) = self.server.llm.as_mut() {
            let losses = lora_sft(llm, &self.server.train, self.config.optimizer.server_epochs, &opt, &mut self.server.rng)
                .context(|| "server: local finetuning".to_string())?;
            self.server.last_train_loss = losses.last().copied();
        }
        Ok(RoundAudit::default())
    }

    fn fedlora_round(&mut self, t: usize) -> Result<RoundAudit> {
        let opt = self.config.optimizer.sgd();
        let epochs = self.config.optimizer.local_epochs;
        for d in &mut self.devices {
            let losses = lora_sft(&mut d.slm, &d.slm_train, epochs, &opt, &mut d.rng)
                .context(|| format!("{}: local finetuning", d.name))?;
            d.last_train_loss = losses.last().copied();
            self.bus.send(t, Direction::Upload, &d.name, SERVER, &d.slm.lora_block());
        }
        let uploads = (0..self.devices.len())
            .map(|_| self.bus.receive(SERVER))
            .collect::<Result<Vec<_>>>()?;
        let aggregated = aggregate_lora(&uploads)?;
        for d in &self.devices {
            self.bus.send(t, Direction::Download, SERVER, &d.name, &aggregated);
        }
        for d in &mut self.devices {
            let block = self.bus.receive(&d.name)?;
            d.slm.load_lora_block(&block)?;
        }
        Ok(RoundAudit::default())
    }

    fn evaluate(&self, t: usize) -> Result<RoundReport> {
        let mut endpoints = Vec::new();
        for d in &self.devices {
            let r = evaluate(&d.slm, &d.tokenizer, &d.data.test).context(|| format!("{}: evaluation", d.name))?;
            endpoints.push(EndpointMetrics {
                endpoint: format!("{}/slm", d.name),
                arch_tag: d.slm.config().arch_tag.clone(),
                rouge_l: Some(r.rouge_l),
                em: Some(r.em),
                train_loss: d.last_train_loss,
                test_loss: mean_sft_loss(&d.slm, &d.slm_test)?,
            });
            if let Some(dpm) = &d.dpm {
                endpoints.push(EndpointMetrics {
                    endpoint: format!("{}/dpm", d.name),
                    arch_tag: dpm.config().arch_tag.clone(),
                    rouge_l: None,
                    em: None,
                    train_loss: None,
                    test_loss: mean_sft_loss(dpm, &d.dpm_test)?,
                });
            }
        }
        if let Some(llm) = &self.server.llm {
            let r = evaluate(llm, &self.server.tokenizer, &self.server.data.test)
                .context(|| "server: evaluation".to_string())?;
            endpoints.push(EndpointMetrics {
                endpoint: format!("{SERVER}/llm"),
                arch_tag: llm.config().arch_tag.clone(),
                rouge_l: Some(r.rouge_l),
                em: Some(r.em),
                train_loss: self.server.last_train_loss,
                test_loss: mean_sft_loss(llm, &self.server.test)?,
            });
        }
        if let Some(dpm) = &self.server.dpm {
            endpoints.push(EndpointMetrics {
                endpoint: format!("{SERVER}/dpm"),
                arch_tag: dpm.config().arch_tag.clone(),
                rouge_l: None,
                em: None,
                train_loss: None,
                test_loss: mean_sft_loss(dpm, &self.server.test)?,
            });
        }
        Ok(RoundReport {
            round: t,
            endpoints,
            comm: self.bus.ledger.round_totals(t),
        })
    }

    pub fn report(&self) -> RunReport {
        RunReport {
            method: self.config.method,
            seed: self.seed,
            ablations: self.config.ablations.clone(),
            init: self.init.clone(),
            rounds: self.reports.clone(),
            comm_ratio: self
                .devices
                .iter()
                .zip(&self.init.device_resident_scalars)
                .map(|(d, &n)| comm_ratio(&self.bus.ledger, &d.name, n))
                .collect(),
        }
    }
}

/// Builds the shared setup and runs every round of the configured method.
pub fn run_experiment(config: &ExperimentConfig, seed: u64) -> Result<Federation> {
    let setup = prepare(config, seed)?;
    run_with_setup(config, &setup, seed)
}

pub fn run_with_setup(config: &ExperimentConfig, setup: &Setup, seed: u64) -> Result<Federation> {
    let mut fed = Federation::new(config, setup, seed)?;
    fed.run()?;
    Ok(fed)
}

/// Each device LoRA-finetunes its own model; the server LLM does the same on
/// the server data. No messages are exchanged.
pub fn baseline_standalone(config: &ExperimentConfig, setup: &Setup, seed: u64) -> Result<Federation> {
    let cfg = ExperimentConfig {
        method: Method::Standalone,
        ..config.clone()
    };
    run_with_setup(&cfg, setup, seed)
}

/// Devices LoRA-finetune identical models and the server averages their LoRA
/// blocks each round.
pub fn baseline_fedlora(config: &ExperimentConfig, setup: &Setup, seed: u64) -> Result<Federation> {
    let cfg = ExperimentConfig {
        method: Method::Fedlora,
        ..config.clone()
    };
    run_with_setup(&cfg, setup, seed)
}
