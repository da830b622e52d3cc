//! Command-line entry points: data generation, runs, reports and the oracle
//! suite.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::data::{dirichlet_partition, generate_corpus, load_jsonl, write_jsonl};
use crate::error::{Error, Result, ResultExt};
use crate::federation::{prepare, Federation, RunReport};
use crate::verify::{run_suite, Implementations};

#[derive(Parser, Debug)]
#[command(name = "coplms", version, about = "Cloud-edge co-tuning simulator for tiny language models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the corpus, per-device and server splits, and the partition manifest.
    GenerateData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the configured method once per seed.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run only this seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Parent directory for run directories.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate one or more run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Where to write report.csv (default: current directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle suite.
    Verify {
        /// Random toy models per gradient check.
        #[arg(long, default_value_t = 20)]
        gradient_seeds: u64,
    },
}

pub const REPORT_FILE: &str = "reports.json";
pub const LEDGER_FILE: &str = "ledger.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "partition.json";
pub const FAILURE_FILE: &str = "failure.txt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn load_config(path: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = out {
        cfg.output_dir = o.to_path_buf();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `global.jsonl`, `device{i}_{train,test}.jsonl`,
/// `server_{train,test}.jsonl` and the manifest for the first configured seed.
pub fn generate_data(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let seed = cfg.seeds[0];
    let corpus = match &cfg.data.jsonl {
        Some(p) => load_jsonl(p)?,
        None => generate_corpus(&cfg.data.domains, cfg.data.per_domain, seed)?,
    };
    let partition = dirichlet_partition(&corpus, &cfg.partition_spec(seed))?;
    let dir = cfg.output_dir.join(format!("data-seed{seed}"));
    create_dir(&dir)?;
    write_jsonl(&dir.join("global.jsonl"), &corpus)?;
    for (i, d) in partition.devices.iter().enumerate() {
        write_jsonl(&dir.join(format!("device{i}_train.jsonl")), &d.train)?;
        write_jsonl(&dir.join(format!("device{i}_test.jsonl")), &d.test)?;
    }
    write_jsonl(&dir.join("server_train.jsonl"), &partition.server.train)?;
    write_jsonl(&dir.join("server_test.jsonl"), &partition.server.test)?;
    write(&dir.join(MANIFEST_FILE), &serde_json::to_string_pretty(&partition.manifest)?)?;
    Ok(dir)
}

/// `{method}[-no-dst][-no-server-saml]-seed{seed}`.
pub fn run_dir_name(cfg: &ExperimentConfig, seed: u64) -> String {
    let mut name = cfg.method.name().to_string();
    if cfg.ablations.no_dst {
        name.push_str("-no-dst");
    }
    if cfg.ablations.no_server_saml {
        name.push_str("-no-server-saml");
    }
    format!("{name}-seed{seed}")
}

fn write_outputs(dir: &Path, fed: &Federation) -> Result<()> {
    write(&dir.join(REPORT_FILE), &fed.report().to_json()?)?;
    fed.bus.ledger.write_csv(&dir.join(LEDGER_FILE))
}

fn write_checkpoints(dir: &Path, fed: &Federation) -> Result<()> {
    let ck = dir.join(CHECKPOINT_DIR);
    create_dir(&ck)?;
    if let Some(m) = &fed.server.llm {
        m.save(&ck.join("server_llm.ckpt"))?;
    }
    if let Some(m) = &fed.server.dpm {
        m.save(&ck.join("server_dpm.ckpt"))?;
    }
    for d in &fed.devices {
        d.slm.save(&ck.join(format!("{}_slm.ckpt", d.name)))?;
        if let Some(m) = &d.dpm {
            m.save(&ck.join(format!("{}_dpm.ckpt", d.name)))?;
        }
    }
    Ok(())
}

/// Runs one seed into `{output_dir}/{run_dir_name}`. On failure the directory
/// holds whatever completed plus a failure note.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<PathBuf> {
    let dir = cfg.output_dir.join(run_dir_name(cfg, seed));
    create_dir(&dir)?;
    let resolved = ExperimentConfig {
        seeds: vec![seed],
        ..cfg.clone()
    };
    write(&dir.join(CONFIG_FILE), &resolved.to_toml())?;

    let mut fed: Option<Federation> = None;
    let mut attempt = || -> Result<()> {
        let setup = prepare(cfg, seed).context(|| "initialization".to_string())?;
        write(&dir.join(MANIFEST_FILE), &serde_json::to_string_pretty(&setup.partition.manifest)?)?;
        let f = fed.insert(Federation::new(cfg, &setup, seed)?);
        for t in 1..=cfg.rounds {
            f.run_round(t).context(|| format!("round {t}"))?;
        }
        Ok(())
    };
    let outcome = attempt();
    if let Err(e) = outcome {
        let rounds_done = fed.as_ref().map_or(0, |f| f.reports.len());
        if let Some(f) = &fed {
            write_outputs(&dir, f)?;
        }
        let note = format!(
            "run failed after {rounds_done} of {} rounds\nseed: {seed}\nerror: {}\n",
            cfg.rounds,
            e
        );
        write(&dir.join(FAILURE_FILE), &note)?;
        return Err(e);
    }
    let fed = fed.expect("set on success");
    write_outputs(&dir, &fed)?;
    write_checkpoints(&dir, &fed)?;
    Ok(dir)
}

pub fn run(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.seeds.iter().map(|&s| run_seed(cfg, s)).collect()
}

pub fn load_report(dir: &Path) -> Result<RunReport> {
    let path = dir.join(REPORT_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(Error::from).context(|| format!("parsing {}", path.display()))
}

pub const REPORT_CSV_HEADER: [&str; 11] = [
    "run",
    "method",
    "seed",
    "round",
    "endpoint",
    "arch_tag",
    "rouge_l",
    "em",
    "train_loss",
    "test_loss",
    "comm_ratio",
];

fn device_index(endpoint: &str) -> Option<usize> {
    endpoint.strip_prefix("device")?.split('/').next()?.parse().ok()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One CSV row per endpoint per round per run, and a text table of the final
/// round.
pub fn report(runs: &[PathBuf]) -> Result<(String, String)> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_CSV_HEADER)?;
    let mut table = format!(
        "{:<32} {:<14} {:>8} {:>8} {:>10} {:>10}\n",
        "run", "endpoint", "rouge_l", "em", "test_loss", "comm_ratio"
    );
    for dir in runs {
        let r = load_report(dir)?;
        let name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let ratio = |endpoint: &str| device_index(endpoint).and_then(|i| r.comm_ratio.get(i).copied());
        for round in &r.rounds {
            for e in &round.endpoints {
                w.write_record([
                    name.clone(),
                    r.method.name().to_string(),
                    r.seed.to_string(),
                    round.round.to_string(),
                    e.endpoint.clone(),
                    e.arch_tag.clone(),
                    opt(e.rouge_l),
                    opt(e.em),
                    opt(e.train_loss),
                    e.test_loss.to_string(),
                    opt(ratio(&e.endpoint)),
                ])?;
            }
        }
        if let Some(last) = r.rounds.last() {
            for e in &last.endpoints {
                let f = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.prec$}", prec = p));
                let _ = writeln!(
                    table,
                    "{:<32} {:<14} {:>8} {:>8} {:>10.4} {:>10}",
                    name,
                    e.endpoint,
                    f(e.rouge_l, 4),
                    f(e.em, 4),
                    e.test_loss,
                    f(ratio(&e.endpoint), 6)
                );
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok((String::from_utf8(bytes).expect("csv output is utf-8"), table))
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenerateData { config, seed, out } => {
            let cfg = load_config(config.as_deref(), seed, out.as_deref())?;
            let dir = generate_data(&cfg)?;
            println!("wrote {}", dir.display());
        }
        Command::Run { config, seed, out } => {
            let cfg = load_config(config.as_deref(), seed, out.as_deref())?;
            for &s in &cfg.seeds {
                let dir = run_seed(&cfg, s)?;
                println!("wrote {}", dir.display());
            }
        }
        Command::Report { runs, out } => {
            let (csv, table) = report(&runs)?;
            let dir = out.unwrap_or_else(|| PathBuf::from("."));
            create_dir(&dir)?;
            write(&dir.join("report.csv"), &csv)?;
            print!("{table}");
        }
        Command::Verify { gradient_seeds } => {
            let results = run_suite(&Implementations::default(), gradient_seeds);
            let mut ok = true;
            for c in &results {
                println!(
                    "{} {:<22} {:>7.2}s  {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.seconds,
                    c.detail
                );
                ok &= c.passed;
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

pub fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}
