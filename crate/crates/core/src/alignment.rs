//! Token alignment between two tokenizations of the same text, and projection
//! of per-position logits through that alignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// For every target position, the source position whose logits it receives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenAlignmentMap {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub mapping: Vec<usize>,
    pub cost: f64,
}

impl TokenAlignmentMap {
    pub fn identity(tokens: &[String]) -> Self {
        Self {
            source: tokens.to_vec(),
            target: tokens.to_vec(),
            mapping: (0..tokens.len()).collect(),
            cost: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.source.len() == self.target.len() && self.mapping.iter().enumerate().all(|(j, &i)| i == j)
    }
}

/// Character-level Levenshtein distance.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Levenshtein distance normalized by the longer token, in `[0, 1]`.
pub fn substitution_cost(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        0.0
    } else {
        levenshtein(a, b) as f64 / longest as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Step {
    Sub,
    Ins,
    Del,
}

/// Minimum edit distance alignment; substitution costs the normalized
/// character distance of the two tokens, insertion and deletion cost 1.
///
/// Walking the optimal script forwards: a substitution maps the target to the
/// source; a deleted source token re-points the most recent target at itself
/// (so the last participating source wins); an inserted target token takes the
/// most recent source, or position 0 before any source has been consumed.
pub fn align_tokens<S: AsRef<str>, T: AsRef<str>>(src: &[S], tgt: &[T]) -> Result<TokenAlignmentMap> {
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::InvalidArgument("cannot align an empty token list".into()));
    }
    let (n, m) = (src.len(), tgt.len());
    let w = m + 1;
    let mut cost = vec![0.0f64; (n + 1) * w];
    let mut step = vec![Step::Sub; (n + 1) * w];
    for j in 1..=m {
        cost[j] = j as f64;
        step[j] = Step::Ins;
    }
    for i in 1..=n {
        cost[i * w] = i as f64;
        step[i * w] = Step::Del;
        for j in 1..=m {
            let sub = cost[(i - 1) * w + j - 1] + substitution_cost(src[i - 1].as_ref(), tgt[j - 1].as_ref());
            let ins = cost[i * w + j - 1] + 1.0;
            let del = cost[(i - 1) * w + j] + 1.0;
            let (c, s) = if sub <= ins && sub <= del {
                (sub, Step::Sub)
            } else if ins <= del {
                (ins, Step::Ins)
            } else {
                (del, Step::Del)
            };
            cost[i * w + j] = c;
            step[i * w + j] = s;
        }
    }

    let mut script = Vec::with_capacity(n + m);
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let s = step[i * w + j];
        script.push(s);
        match s {
            Step::Sub => {
                i -= 1;
                j -= 1;
            }
            Step::Ins => j -= 1,
            Step::Del => i -= 1,
        }
    }
    script.reverse();

    let mut mapping = vec![0usize; m];
    let (mut i, mut j) = (0usize, 0usize);
    for s in script {
        match s {
            Step::Sub => {
                mapping[j] = i;
                i += 1;
                j += 1;
            }
            Step::Ins => {
                mapping[j] = i.saturating_sub(1);
                j += 1;
            }
            Step::Del => {
                if j > 0 {
                    mapping[j - 1] = i;
                }
                i += 1;
            }
        }
    }

    Ok(TokenAlignmentMap {
        source: src.iter().map(|s| s.as_ref().to_string()).collect(),
        target: tgt.iter().map(|s| s.as_ref().to_string()).collect(),
        mapping,
        cost: cost[n * w + m],
    })
}

/// Gathers source rows into target order: row `j` of the result is row
/// `mapping[j]` of `src`.
pub fn project_logits(src: &Tensor, map: &TokenAlignmentMap) -> Result<Tensor> {
    if src.shape().len() != 2 || src.rows() != map.source.len() {
        return Err(Error::Shape(format!(
            "logits {:?} do not match {} source tokens",
            src.shape(),
            map.source.len()
        )));
    }
    let v = src.cols();
    let mut data = Vec::with_capacity(map.mapping.len() * v);
    for &i in &map.mapping {
        data.extend_from_slice(src.row(i));
    }
    Tensor::new(vec![map.mapping.len(), v], data)
}
