//! Rouge-L and exact-match metrics, and greedy-decoding evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{write_jsonl, QASample};
use crate::error::{Error, Result, ResultExt};
use crate::model::TinyTransformer;
use crate::tokenizers::{Tokenizer, BOS};

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// Word-level LCS F1; 0 when either side has no words.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c: Vec<&str> = candidate.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let l = lcs_len(&c, &r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / c.len() as f64;
    let rec = l / r.len() as f64;
    2.0 * p * rec / (p + rec)
}

/// Trim, collapse internal whitespace, lowercase.
pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

pub fn exact_match_one(candidate: &str, reference: &str) -> bool {
    normalize_answer(candidate) == normalize_answer(reference)
}

/// Fraction of positions whose normalized strings agree.
pub fn exact_match<S: AsRef<str>, T: AsRef<str>>(candidates: &[S], references: &[T]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "{} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("exact_match on empty lists".into()));
    }
    let hits = candidates
        .iter()
        .zip(references)
        .filter(|(c, r)| exact_match_one(c.as_ref(), r.as_ref()))
        .count();
    Ok(hits as f64 / candidates.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: usize,
    pub prediction: String,
    pub reference: String,
    pub rouge_l: f64,
    pub em: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub rouge_l: f64,
    pub em: f64,
    pub predictions: Vec<Prediction>,
}

/// Maximum tokens generated per answer.
pub const MAX_NEW_TOKENS: usize = 32;

/// Prompt ids as seen by a model: `<bos>` followed by the encoded prompt.
pub fn encode_prompt(tok: &Tokenizer, sample: &QASample) -> Vec<usize> {
    let mut ids = vec![BOS];
    ids.extend(tok.encode(&sample.prompt()));
    ids
}

/// Greedy generation on every sample; Rouge-L is averaged and EM is the
/// matched fraction.
pub fn evaluate(model: &TinyTransformer, tok: &Tokenizer, test: &[QASample]) -> Result<EvalResult> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let mut predictions = Vec::with_capacity(test.len());
    for (i, sample) in test.iter().enumerate() {
        let prompt = encode_prompt(tok, sample);
        let out = model
            .generate(&prompt, MAX_NEW_TOKENS)
            .and_then(|ids| tok.decode(&ids))
            .context(|| format!("sample {i}"))?;
        let prediction = out.trim().to_string();
        let r = rouge_l(&prediction, &sample.output);
        let em = if exact_match_one(&prediction, &sample.output) { 1.0 } else { 0.0 };
        predictions.push(Prediction {
            sample_id: i,
            prediction,
            reference: sample.output.clone(),
            rouge_l: r,
            em,
        });
    }
    Ok(summarize(predictions))
}

pub fn summarize(predictions: Vec<Prediction>) -> EvalResult {
    let n = predictions.len().max(1) as f64;
    EvalResult {
        rouge_l: predictions.iter().map(|p| p.rouge_l).sum::<f64>() / n,
        em: predictions.iter().map(|p| p.em).sum::<f64>() / n,
        predictions,
    }
}

pub fn dump_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    write_jsonl(path, predictions)
}
