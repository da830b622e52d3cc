//! Character-level and greedy-BPE tokenizers over printable ASCII.
//!
//! Both kinds share the same base alphabet, so any printable-ASCII text is
//! encodable by either; they differ only in how the text is segmented.
//!
//! # File format
//!
//! ```text
//! coplms-tokenizer v1
//! kind bpe
//! vocab 103
//! <pad>
//! <bos>
//! ...            one escaped token per line, in id order
//! merges 4
//! t h            one escaped (left, right) pair per line, in rank order
//! ```
//!
//! Escapes: `\\` for a backslash, `\s` for a space, `\n` for a newline.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
const HEADER: &str = "coplms-tokenizer v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    Char,
    Bpe,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), id).is_some() {
                return Err(Error::Tokenizer(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        if tokens.len() < 8 {
            return Err(Error::Tokenizer(format!("vocabulary of size {} < 8", tokens.len())));
        }
        if tokens[..4] != SPECIALS {
            return Err(Error::Tokenizer("special tokens must occupy ids 0..4".into()));
        }
        Ok(Self {
            id_to_token: tokens,
            token_to_id,
        })
    }

    /// Specials followed by printable ASCII (0x20..=0x7e).
    fn base() -> Vec<String> {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend((0x20u8..=0x7e).map(|b| (b as char).to_string()));
        tokens
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    kind: TokenizerKind,
    vocab: Vocabulary,
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

/// Splits text into maximal runs of non-space characters and single spaces.
/// Merges never cross chunk boundaries.
fn chunks(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c == ' ' {
            if let Some(s) = start.take() {
                out.push(&text[s..i]);
            }
            out.push(&text[i..i + 1]);
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(&text[s..]);
    }
    out
}

/// Greedy BPE training: repeatedly merge the most frequent adjacent pair,
/// breaking count ties by the lexicographically smallest `(left, right)`.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], num_merges: usize) -> Result<Tokenizer> {
    if corpus.is_empty() {
        return Err(Error::Tokenizer("cannot train BPE on an empty corpus".into()));
    }
    let mut words: BTreeMap<Vec<String>, usize> = BTreeMap::new();
    for text in corpus {
        for chunk in chunks(text.as_ref()) {
            let symbols = chunk.chars().map(|c| c.to_string()).collect();
            *words.entry(symbols).or_insert(0) += 1;
        }
    }

    let mut vocab = Vocabulary::base();
    let mut merges = Vec::with_capacity(num_merges);
    for _ in 0..num_merges {
        let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (symbols, freq) in &words {
            for pair in symbols.windows(2) {
                *counts.entry((&pair[0], &pair[1])).or_insert(0) += freq;
            }
        }
        // BTreeMap iterates in lexicographic order, so the first maximum wins ties.
        let Some((best, _)) = counts
            .iter()
            .filter(|((l, r), _)| !SPECIALS.contains(&format!("{l}{r}").as_str()))
            .fold(None, |acc: Option<(&(&str, &str), usize)>, (pair, &c)| match acc {
                Some((_, best)) if best >= c => acc,
                _ => Some((pair, c)),
            })
        else {
            break;
        };
        let (left, right) = (best.0.to_string(), best.1.to_string());
        drop(counts);

        let merged = format!("{left}{right}");
        words = words
            .into_iter()
            .fold(BTreeMap::new(), |mut acc, (symbols, freq)| {
                *acc.entry(merge_pair(&symbols, &left, &right)).or_insert(0) += freq;
                acc
            });
        if !vocab.contains(&merged) {
            vocab.push(merged);
        }
        merges.push((left, right));
    }
    Tokenizer::from_parts(TokenizerKind::Bpe, vocab, merges)
}

fn merge_pair(symbols: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

impl Tokenizer {
    /// One token per printable ASCII character.
    pub fn char_level() -> Self {
        Self::from_parts(TokenizerKind::Char, Vocabulary::base(), Vec::new())
            .expect("base vocabulary is valid")
    }

    fn from_parts(
        kind: TokenizerKind,
        tokens: Vec<String>,
        merges: Vec<(String, String)>,
    ) -> Result<Self> {
        if kind == TokenizerKind::Char && !merges.is_empty() {
            return Err(Error::Tokenizer("char tokenizer cannot have merges".into()));
        }
        let vocab = Vocabulary::from_tokens(tokens)?;
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, (l, r)) in merges.iter().enumerate() {
            if vocab.id(&format!("{l}{r}")).is_none() {
                return Err(Error::Tokenizer(format!("merge output {l:?}+{r:?} not in vocabulary")));
            }
            ranks.entry((l.clone(), r.clone())).or_insert(rank);
        }
        Ok(Self {
            kind,
            vocab,
            merges,
            ranks,
        })
    }

    pub fn kind(&self) -> TokenizerKind {
        self.kind
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Token surface strings for `text`, before id lookup.
    pub fn segment(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for chunk in chunks(text) {
            let mut symbols: Vec<String> = chunk.chars().map(|c| c.to_string()).collect();
            if !self.ranks.is_empty() {
                // Apply the lowest-ranked applicable merge until none applies.
                loop {
                    let best = symbols
                        .windows(2)
                        .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, w)))
                        .min_by_key(|(r, _)| *r)
                        .map(|(_, w)| (w[0].clone(), w[1].clone()));
                    let Some((l, r)) = best else { break };
                    symbols = merge_pair(&symbols, &l, &r);
                }
            }
            out.extend(symbols);
        }
        out
    }

    /// Unknown characters map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        self.segment(text)
            .iter()
            .map(|t| self.vocab.id(t).unwrap_or(UNK))
            .collect()
    }

    /// Specials render as the empty string.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self
                .vocab
                .token(id)
                .ok_or(Error::TokenOutOfRange { id, vocab: self.vocab.len() })?;
            if id >= SPECIALS.len() {
                out.push_str(tok);
            }
        }
        Ok(out)
    }

    /// Surface string of one id for alignment; specials keep their `<name>`.
    pub fn token_str(&self, id: usize) -> Result<&str> {
        self.vocab
            .token(id)
            .ok_or(Error::TokenOutOfRange { id, vocab: self.vocab.len() })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let kind = match self.kind {
            TokenizerKind::Char => "char",
            TokenizerKind::Bpe => "bpe",
        };
        let _ = writeln!(s, "{HEADER}\nkind {kind}\nvocab {}", self.vocab.len());
        for t in &self.vocab.id_to_token {
            let _ = writeln!(s, "{}", escape(t));
        }
        let _ = writeln!(s, "merges {}", self.merges.len());
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{} {}", escape(l), escape(r));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Tokenizer(format!("line {line}: {msg}"));
        let lines: Vec<&str> = text.lines().collect();
        let mut it = lines.iter().enumerate().map(|(i, l)| (i + 1, *l));
        let mut next = |what: &str| it.next().ok_or_else(|| Error::Tokenizer(format!("missing {what}")));

        let (n, header) = next("header")?;
        if header != HEADER {
            return Err(bad(n, "bad header"));
        }
        let (n, kind) = next("kind")?;
        let kind = match kind.strip_prefix("kind ") {
            Some("char") => TokenizerKind::Char,
            Some("bpe") => TokenizerKind::Bpe,
            _ => return Err(bad(n, "expected `kind char|bpe`")),
        };
        let (n, count) = next("vocab count")?;
        let count: usize = count
            .strip_prefix("vocab ")
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| bad(n, "expected `vocab <n>`"))?;
        let mut tokens = Vec::with_capacity(count);
        for _ in 0..count {
            let (n, t) = next("vocabulary entry")?;
            tokens.push(unescape(t).map_err(|m| bad(n, &m))?);
        }
        let (n, count) = next("merge count")?;
        let count: usize = count
            .strip_prefix("merges ")
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| bad(n, "expected `merges <n>`"))?;
        let mut merges = Vec::with_capacity(count);
        for _ in 0..count {
            let (n, line) = next("merge entry")?;
            let (l, r) = line.split_once(' ').ok_or_else(|| bad(n, "expected `left right`"))?;
            merges.push((
                unescape(l).map_err(|m| bad(n, &m))?,
                unescape(r).map_err(|m| bad(n, &m))?,
            ));
        }
        Self::from_parts(kind, tokens, merges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            ' ' => out.push_str("\\s"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> std::result::Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('\\') => out.push('\\'),
                Some('s') => out.push(' '),
                Some('n') => out.push('\n'),
                other => return Err(format!("bad escape \\{other:?}")),
            }
        } else {
            out.push(c);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn with_merges(merges: &[(&str, &str)]) -> Tokenizer {
        let mut vocab = Vocabulary::base();
        for (l, r) in merges {
            vocab.push(format!("{l}{r}"));
        }
        let merges = merges.iter().map(|(l, r)| (l.to_string(), r.to_string())).collect();
        Tokenizer::from_parts(TokenizerKind::Bpe, vocab, merges).unwrap()
    }

    #[test]
    fn char_encodes_one_id_per_character() {
        let t = Tokenizer::char_level();
        let ids = t.encode("map");
        assert_eq!(ids.len(), 3);
        assert_eq!(t.decode(&ids).unwrap(), "map");
        assert!(t.encode("").is_empty());
        assert_eq!(t.decode(&[]).unwrap(), "");
    }

    #[test]
    fn zero_merges_behaves_as_char() {
        let bpe = train_bpe(&["hello world"], 0).unwrap();
        let ch = Tokenizer::char_level();
        assert_eq!(bpe.encode("hello there"), ch.encode("hello there"));
    }

    #[test]
    fn single_merge_on_aaab() {
        let t = train_bpe(&["aaab"], 1).unwrap();
        assert_eq!(t.merges(), &[("a".to_string(), "a".to_string())]);
        assert_eq!(t.segment("aaab"), vec!["aa", "a", "b"]);
        assert_eq!(t.encode("aaab").len(), 3);
    }

    #[test]
    fn hand_merge_ma() {
        let t = with_merges(&[("m", "a")]);
        assert_eq!(t.segment("map"), vec!["ma", "p"]);
    }

    #[test]
    fn lexicographic_tie_break() {
        // ("a","b") and ("c","d") both occur once; ("a","b") sorts first.
        let t = train_bpe(&["ab cd"], 1).unwrap();
        assert_eq!(t.merges()[0], ("a".to_string(), "b".to_string()));
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = ["the map to travel", "utilize the map", "travel light"];
        let a = train_bpe(&corpus, 12).unwrap();
        let b = train_bpe(&corpus, 12).unwrap();
        assert_eq!(a.merges(), b.merges());
        assert_eq!(a, b);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(train_bpe::<&str>(&[], 3).is_err());
    }

    #[test]
    fn specials_decode_empty_and_unknown_ids_fail() {
        let t = Tokenizer::char_level();
        assert_eq!(t.decode(&[BOS, t.encode("a")[0], EOS, PAD]).unwrap(), "a");
        assert!(t.decode(&[10_000]).is_err());
        assert_eq!(t.encode("é"), vec![UNK]);
    }

    #[test]
    fn text_format_round_trips() {
        let t = train_bpe(&["a b\\c  tab", "back\\slash and spaces"], 10).unwrap();
        let back = Tokenizer::from_text(&t.to_text()).unwrap();
        assert_eq!(t, back);
        assert!(Tokenizer::from_text("nonsense").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_alphabet_pure(s in "[ -~]{0,40}") {
            let ch = Tokenizer::char_level();
            prop_assert_eq!(ch.decode(&ch.encode(&s)).unwrap(), s.clone());
            let bpe = train_bpe(&["the quick brown fox", "jumps over the lazy dog", &s], 20).unwrap();
            prop_assert_eq!(bpe.decode(&bpe.encode(&s)).unwrap(), s.clone());
            prop_assert!(ch.encode(&s).len() >= bpe.encode(&s).len());
            prop_assert_eq!(bpe.encode(&s), bpe.encode(&s));
        }
    }
}
