//! Synthetic multi-domain QA corpus, Dirichlet domain partitioning, and JSONL
//! ingestion.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QASample {
    pub instruction: String,
    pub input: String,
    pub output: String,
    pub domain: String,
}

impl QASample {
    /// Text the model is conditioned on.
    pub fn prompt(&self) -> String {
        format!("{}: {} =", self.instruction, self.input)
    }

    /// Text the model is trained to produce after the prompt.
    pub fn answer(&self) -> String {
        format!(" {}", self.output)
    }
}

/// One domain's template: the answer is `first[a] second[b]` for input `a b`.
struct DomainTable {
    name: &'static str,
    instruction: &'static str,
    first: &'static [(&'static str, &'static str)],
    second: &'static [(&'static str, &'static str)],
}

const DOMAINS: &[DomainTable] = &[
    DomainTable {
        name: "travel",
        instruction: "trip",
        first: &[
            ("rome", "italy"),
            ("paris", "france"),
            ("oslo", "norway"),
            ("lima", "peru"),
            ("cairo", "egypt"),
            ("tokyo", "japan"),
            ("delhi", "india"),
            ("quito", "ecuador"),
        ],
        second: &[
            ("bus", "slow"),
            ("jet", "fast"),
            ("boat", "calm"),
            ("bike", "green"),
            ("car", "easy"),
            ("train", "quick"),
        ],
    },
    DomainTable {
        name: "cooking",
        instruction: "cook",
        first: &[
            ("soup", "broth"),
            ("bread", "flour"),
            ("salad", "greens"),
            ("curry", "spice"),
            ("pasta", "wheat"),
            ("pie", "apple"),
            ("stew", "beef"),
            ("sushi", "rice"),
        ],
        second: &[
            ("bake", "crisp"),
            ("boil", "soft"),
            ("fry", "golden"),
            ("grill", "smoky"),
            ("steam", "tender"),
            ("roast", "brown"),
        ],
    },
    DomainTable {
        name: "sports",
        instruction: "play",
        first: &[
            ("golf", "club"),
            ("tennis", "racket"),
            ("hockey", "stick"),
            ("soccer", "ball"),
            ("boxing", "gloves"),
            ("rowing", "oar"),
            ("archery", "bow"),
            ("fencing", "foil"),
        ],
        second: &[
            ("rookie", "easy"),
            ("pro", "hard"),
            ("junior", "light"),
            ("senior", "heavy"),
            ("amateur", "casual"),
            ("elite", "fierce"),
        ],
    },
    DomainTable {
        name: "science",
        instruction: "sci",
        first: &[
            ("gold", "au"),
            ("iron", "fe"),
            ("neon", "ne"),
            ("zinc", "zn"),
            ("lead", "pb"),
            ("tin", "sn"),
            ("copper", "cu"),
            ("silver", "ag"),
        ],
        second: &[
            ("frozen", "solid"),
            ("molten", "liquid"),
            ("boiling", "vapor"),
            ("charged", "ion"),
            ("heated", "hot"),
            ("cooled", "cold"),
        ],
    },
    DomainTable {
        name: "music",
        instruction: "tune",
        first: &[
            ("violin", "strings"),
            ("flute", "winds"),
            ("drum", "beats"),
            ("trumpet", "brass"),
            ("harp", "pluck"),
            ("organ", "pipes"),
            ("cello", "bow"),
            ("piano", "keys"),
        ],
        second: &[
            ("largo", "slow"),
            ("presto", "fast"),
            ("andante", "walk"),
            ("allegro", "lively"),
            ("adagio", "calm"),
            ("vivace", "brisk"),
        ],
    },
    DomainTable {
        name: "finance",
        instruction: "fund",
        first: &[
            ("stock", "shares"),
            ("bond", "debt"),
            ("loan", "credit"),
            ("index", "basket"),
            ("option", "right"),
            ("bill", "note"),
            ("swap", "hedge"),
            ("coin", "crypto"),
        ],
        second: &[
            ("rise", "gain"),
            ("fall", "loss"),
            ("flat", "hold"),
            ("spike", "jump"),
            ("crash", "panic"),
            ("drift", "wait"),
        ],
    },
];

/// Names of the built-in synthetic domains.
pub fn builtin_domains() -> Vec<&'static str> {
    DOMAINS.iter().map(|d| d.name).collect()
}

/// `per_domain` templated samples for each named domain, grouped by domain in
/// the order given.
pub fn generate_corpus<S: AsRef<str>>(domains: &[S], per_domain: usize, seed: u64) -> Result<Vec<QASample>> {
    if domains.len() < 2 {
        return Err(Error::Data(format!("need at least 2 domains, got {}", domains.len())));
    }
    let mut tables = Vec::with_capacity(domains.len());
    for d in domains {
        let name = d.as_ref();
        let table = DOMAINS
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Data(format!("unknown domain {name:?} (known: {:?})", builtin_domains())))?;
        if tables.iter().any(|t: &&DomainTable| t.name == name) {
            return Err(Error::Data(format!("domain {name:?} listed twice")));
        }
        tables.push(table);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(per_domain * tables.len());
    for t in tables {
        for _ in 0..per_domain {
            let (a, fa) = t.first[rng.gen_range(0..t.first.len())];
            let (b, fb) = t.second[rng.gen_range(0..t.second.len())];
            out.push(QASample {
                instruction: t.instruction.to_string(),
                input: format!("{a} {b}"),
                output: format!("{fa} {fb}"),
                domain: t.name.to_string(),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub devices: usize,
    /// Dirichlet concentration
    pub lambda: f64,
    pub per_device_size: usize,
    pub server_size: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.devices == 0 {
            problems.push("devices must be >= 1".to_string());
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            problems.push(format!("lambda must be positive, got {}", self.lambda));
        }
        if self.per_device_size == 0 || self.server_size == 0 {
            problems.push("dataset sizes must be positive".to_string());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            problems.push(format!("train_fraction must be in (0,1), got {}", self.train_fraction));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    fn train_count(&self, size: usize) -> usize {
        ((size as f64) * self.train_fraction).round() as usize
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalDataset {
    pub train: Vec<QASample>,
    pub test: Vec<QASample>,
}

impl LocalDataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceManifest {
    pub device: usize,
    /// Dirichlet draw over domains, in corpus domain order.
    pub mixture: Vec<f64>,
    pub domain_counts: BTreeMap<String, usize>,
    pub train: usize,
    pub test: usize,
    /// Corpus indices, train part first.
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub spec: PartitionSpec,
    pub domains: Vec<String>,
    pub devices: Vec<DeviceManifest>,
    pub server_indices: Vec<usize>,
    pub server_train: usize,
    pub server_test: usize,
}

impl PartitionManifest {
    pub fn max_domain_shares(&self) -> Vec<f64> {
        self.devices
            .iter()
            .map(|d| {
                let total: usize = d.domain_counts.values().sum();
                let max = d.domain_counts.values().copied().max().unwrap_or(0);
                max as f64 / total.max(1) as f64
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub devices: Vec<LocalDataset>,
    pub server: LocalDataset,
    pub manifest: PartitionManifest,
}

/// Symmetric Dirichlet draw through normalized Gamma variates. When every
/// variate underflows to zero (tiny concentrations), all mass goes to one
/// uniformly chosen component, the distribution's limit as concentration → 0.
pub fn sample_dirichlet<R: Rng + ?Sized>(lambda: f64, dims: usize, rng: &mut R) -> Result<Vec<f64>> {
    if !(lambda > 0.0 && lambda.is_finite()) || dims == 0 {
        return Err(Error::InvalidArgument(format!("Dirichlet({lambda}) over {dims} components")));
    }
    let gamma = Gamma::new(lambda, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let draws: Vec<f64> = (0..dims).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        Ok(draws.into_iter().map(|x| x / total).collect())
    } else {
        let mut out = vec![0.0; dims];
        out[rng.gen_range(0..dims)] = 1.0;
        Ok(out)
    }
}

/// Splits `corpus` into disjoint per-device datasets with Dirichlet domain
/// mixtures, plus a server dataset drawn uniformly from the whole corpus.
pub fn dirichlet_partition(corpus: &[QASample], spec: &PartitionSpec) -> Result<Partition> {
    spec.validate()?;
    let mut domains: Vec<String> = Vec::new();
    for s in corpus {
        if !domains.contains(&s.domain) {
            domains.push(s.domain.clone());
        }
    }
    if domains.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pools: Vec<Vec<usize>> = domains
        .iter()
        .map(|d| (0..corpus.len()).filter(|&i| &corpus[i].domain == d).collect())
        .collect();
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }

    let train_n = spec.train_count(spec.per_device_size);
    let mut devices = Vec::with_capacity(spec.devices);
    let mut manifests = Vec::with_capacity(spec.devices);
    for device in 0..spec.devices {
        let mixture = sample_dirichlet(spec.lambda, domains.len(), &mut rng)?;
        let mut indices = Vec::with_capacity(spec.per_device_size);
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for _ in 0..spec.per_device_size {
            let weights: Vec<f64> = mixture
                .iter()
                .zip(&pools)
                .map(|(&w, p)| if p.is_empty() { 0.0 } else { w })
                .collect();
            let total: f64 = weights.iter().sum();
            let d = if total > 0.0 {
                let mut u = rng.gen::<f64>() * total;
                let mut pick = weights.iter().rposition(|&w| w > 0.0).expect("positive total");
                for (i, &w) in weights.iter().enumerate() {
                    if w > 0.0 && u < w {
                        pick = i;
                        break;
                    }
                    u -= w;
                }
                pick
            } else {
                // The draw's domains are exhausted: fall back to the remaining
                // domains, weighted by what is left.
                let left: usize = pools.iter().map(Vec::len).sum();
                if left == 0 {
                    return Err(Error::Data(format!(
                        "corpus of {} samples exhausted while filling device {device}",
                        corpus.len()
                    )));
                }
                let mut u = rng.gen_range(0..left);
                let mut pick = 0;
                for (i, p) in pools.iter().enumerate() {
                    if u < p.len() {
                        pick = i;
                        break;
                    }
                    u -= p.len();
                }
                pick
            };
            let idx = pools[d].pop().expect("non-empty pool");
            *counts.entry(domains[d].clone()).or_default() += 1;
            indices.push(idx);
        }
        let local = LocalDataset {
            train: indices[..train_n].iter().map(|&i| corpus[i].clone()).collect(),
            test: indices[train_n..].iter().map(|&i| corpus[i].clone()).collect(),
        };
        manifests.push(DeviceManifest {
            device,
            mixture,
            domain_counts: counts,
            train: local.train.len(),
            test: local.test.len(),
            indices,
        });
        devices.push(local);
    }

    if spec.server_size > corpus.len() {
        return Err(Error::Data(format!(
            "server size {} exceeds corpus size {}",
            spec.server_size,
            corpus.len()
        )));
    }
    let server_indices = rand::seq::index::sample(&mut rng, corpus.len(), spec.server_size).into_vec();
    let server_train = spec.train_count(spec.server_size);
    let server = LocalDataset {
        train: server_indices[..server_train].iter().map(|&i| corpus[i].clone()).collect(),
        test: server_indices[server_train..].iter().map(|&i| corpus[i].clone()).collect(),
    };

    Ok(Partition {
        manifest: PartitionManifest {
            spec: spec.clone(),
            domains,
            devices: manifests,
            server_train: server.train.len(),
            server_test: server.test.len(),
            server_indices,
        },
        devices,
        server,
    })
}

/// One JSON object per line; blank lines are skipped.
pub fn load_jsonl(path: &Path) -> Result<Vec<QASample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: QASample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        if sample.output.trim().is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: "empty output".into(),
            });
        }
        out.push(sample);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(lambda: f64, seed: u64) -> PartitionSpec {
        PartitionSpec {
            devices: 3,
            lambda,
            per_device_size: 1000,
            server_size: 1000,
            train_fraction: 0.8,
            seed,
        }
    }

    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }

    #[test]
    fn corpus_counts_and_determinism() {
        let c = generate_corpus(&["travel", "cooking", "sports"], 10, 1).unwrap();
        assert_eq!(c.len(), 30);
        for d in ["travel", "cooking", "sports"] {
            assert_eq!(c.iter().filter(|s| s.domain == d).count(), 10);
        }
        assert_eq!(c, generate_corpus(&["travel", "cooking", "sports"], 10, 1).unwrap());
        assert!(generate_corpus(&["travel"], 10, 1).is_err());
        assert!(generate_corpus(&["travel", "nope"], 10, 1).is_err());
        assert!(generate_corpus(&["travel", "travel"], 10, 1).is_err());
    }

    #[test]
    fn domains_use_distinct_vocabularies() {
        let c = generate_corpus(&builtin_domains(), 400, 2).unwrap();
        let words = |d: &str| -> std::collections::BTreeSet<String> {
            c.iter()
                .filter(|s| s.domain == d)
                .flat_map(|s| s.prompt().split_whitespace().map(str::to_string).collect::<Vec<_>>())
                .collect()
        };
        let names = builtin_domains();
        for (i, a) in names.iter().enumerate() {
            for b in &names[i + 1..] {
                let (wa, wb) = (words(a), words(b));
                let shared = wa.intersection(&wb).filter(|w| *w != "=").count();
                assert_eq!(shared, 0, "{a} and {b} share prompt words");
            }
        }
    }

    #[test]
    fn partition_bookkeeping() {
        let c = generate_corpus(&["travel", "cooking", "sports"], 2000, 3).unwrap();
        let p = dirichlet_partition(&c, &spec(0.5, 4)).unwrap();
        let mut seen = std::collections::HashSet::new();
        for (d, m) in p.devices.iter().zip(&p.manifest.devices) {
            assert_eq!(d.train.len(), 800);
            assert_eq!(d.test.len(), 200);
            assert_eq!(m.domain_counts.values().sum::<usize>(), 1000);
            assert!((m.mixture.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for &i in &m.indices {
                assert!(seen.insert(i), "sample {i} on two devices");
            }
        }
        assert_eq!(p.server.train.len(), 800);
        assert_eq!(p.server.test.len(), 200);
        assert_eq!(p, dirichlet_partition(&c, &spec(0.5, 4)).unwrap());
    }

    #[test]
    fn exhausted_domain_falls_back_then_errors() {
        let c = generate_corpus(&["travel", "cooking"], 5, 3).unwrap();
        let mut s = spec(0.01, 1);
        s.devices = 1;
        s.per_device_size = 10;
        s.server_size = 2;
        let p = dirichlet_partition(&c, &s).unwrap();
        assert_eq!(p.manifest.devices[0].domain_counts.values().sum::<usize>(), 10);
        s.devices = 2;
        assert!(matches!(dirichlet_partition(&c, &s), Err(Error::Data(_))));
    }

    #[test]
    fn skew_follows_concentration() {
        let c = generate_corpus(&["travel", "cooking", "sports"], 4000, 5).unwrap();
        let shares = |lambda: f64| {
            median(
                (0..20)
                    .flat_map(|seed| dirichlet_partition(&c, &spec(lambda, seed)).unwrap().manifest.max_domain_shares())
                    .collect(),
            )
        };
        let (sharp, mid, flat, uniform) = (shares(0.01), shares(0.1), shares(1.0), shares(1000.0));
        assert!(sharp >= 0.9, "{sharp}");
        assert!(sharp > flat && mid > flat);
        assert!((uniform - 1.0 / 3.0).abs() <= 0.1, "{uniform}");
    }

    #[test]
    fn jsonl_round_trip_and_line_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let c = generate_corpus(&["music", "finance"], 3, 9).unwrap();
        write_jsonl(&path, &c).unwrap();
        assert_eq!(load_jsonl(&path).unwrap(), c);

        std::fs::write(&path, "").unwrap();
        assert!(load_jsonl(&path).unwrap().is_empty());

        let good = serde_json::to_string(&c[0]).unwrap();
        std::fs::write(&path, format!("{good}\n{good}\n{{\"instruction\": 1}}\n")).unwrap();
        match load_jsonl(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn dirichlet_draws_are_simplex_points(lambda in 0.005f64..50.0, dims in 1usize..8, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = sample_dirichlet(lambda, dims, &mut rng).unwrap();
            prop_assert_eq!(p.len(), dims);
            prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
