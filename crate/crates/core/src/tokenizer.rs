//! Sub-word (pair-merge) and character tokenizers.
//!
//! Sub-word training starts from the character inventory plus a word
//! boundary marker `▁` and repeatedly merges the most frequent adjacent
//! symbol pair (ties broken lexicographically). Encoding is greedy
//! longest-match over the learned vocabulary, word by word, with the
//! marker prefixed to every word.
//!
//! Id 0 is always `<unk>`. The CTC blank is not part of the vocabulary;
//! the model places it at index `vocab_size`.
//!
//! # File format
//!
//! ```text
//! <kind> <vocab_size>          kind is "subword" or "char"
//! <token 0>                    one token per line, in id order
//! ...
//! <token vocab_size-1>
//! <left> <right>               zero or more merge records, in merge order
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const BOUNDARY: char = '▁';
pub const UNK_TOKEN: &str = "<unk>";
/// Text emitted when decoding the unknown token.
pub const UNK_RENDER: &str = "⁇";
/// Vocabulary sizes studied for sub-word models.
pub const STUDIED_SIZES: [usize; 6] = [128, 256, 512, 1024, 2048, 4096];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenizerKind {
    Subword,
    Char,
}

impl fmt::Display for TokenizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenizerKind::Subword => "subword",
            TokenizerKind::Char => "char",
        })
    }
}

impl FromStr for TokenizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subword" => Ok(TokenizerKind::Subword),
            "char" => Ok(TokenizerKind::Char),
            other => Err(Error::InvalidArgument(format!("unknown tokenizer kind {other:?}"))),
        }
    }
}

/// Lowercases, maps everything except alphanumerics and apostrophes to
/// spaces, and collapses runs of whitespace.
pub fn normalize_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for word in text
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|w| !w.is_empty())
    {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars().flat_map(char::to_lowercase));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerModel {
    kind: TokenizerKind,
    vocab: Vec<String>,
    merges: Vec<(String, String)>,
    index: HashMap<String, u32>,
    max_token_chars: usize,
}

impl TokenizerModel {
    fn from_parts(kind: TokenizerKind, vocab: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        if vocab.first().map(String::as_str) != Some(UNK_TOKEN) {
            return Err(Error::format("tokenizer", "id 0 must be <unk>"));
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, tok) in vocab.iter().enumerate() {
            if tok.is_empty() || tok.contains(char::is_whitespace) {
                return Err(Error::format("tokenizer", format!("invalid token {tok:?}")));
            }
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::format("tokenizer", format!("duplicate token {tok:?}")));
            }
        }
        let max_token_chars = vocab.iter().skip(1).map(|t| t.chars().count()).max().unwrap_or(1);
        Ok(Self {
            kind,
            vocab,
            merges,
            index,
            max_token_chars,
        })
    }

    /// Trains a tokenizer on normalized `corpus` lines.
    ///
    /// Sub-word training stops early when no pair is left to merge.
    pub fn train<S: AsRef<str>>(corpus: &[S], vocab_size: usize, kind: TokenizerKind) -> Result<Self> {
        let lines: Vec<String> = corpus
            .iter()
            .map(|l| normalize_text(l.as_ref()))
            .filter(|l| !l.is_empty())
            .collect();
        if lines.is_empty() {
            return Err(Error::Empty("tokenizer corpus"));
        }
        let mut chars: Vec<char> = lines
            .iter()
            .flat_map(|l| l.chars())
            .filter(|&c| c != ' ')
            .collect();
        chars.sort_unstable();
        chars.dedup();
        // alphabet = characters + boundary marker
        let alphabet = chars.len() + 1;
        if vocab_size < alphabet + 1 {
            return Err(Error::InvalidArgument(format!(
                "vocab size {vocab_size} below alphabet size {alphabet} plus <unk>"
            )));
        }
        let mut vocab = vec![UNK_TOKEN.to_string(), BOUNDARY.to_string()];
        vocab.extend(chars.iter().map(char::to_string));
        if kind == TokenizerKind::Char {
            return Self::from_parts(kind, vocab, Vec::new());
        }

        let mut word_freq: BTreeMap<&str, usize> = BTreeMap::new();
        for w in lines.iter().flat_map(|l| l.split(' ')) {
            *word_freq.entry(w).or_default() += 1;
        }
        // symbols are interned; ids index `symbols`, not the vocabulary
        let mut symbols: Vec<String> = vocab.clone();
        let mut symbol_id: HashMap<String, u32> =
            symbols.iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect();
        let mut words: Vec<(Vec<u32>, usize)> = word_freq
            .into_iter()
            .map(|(w, n)| {
                let seq = std::iter::once(BOUNDARY)
                    .chain(w.chars())
                    .map(|c| symbol_id[&c.to_string()])
                    .collect();
                (seq, n)
            })
            .collect();
        let mut merges = Vec::new();
        while vocab.len() < vocab_size {
            words.retain(|(seq, _)| seq.len() > 1);
            let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
            for (seq, n) in &words {
                for pair in seq.windows(2) {
                    *counts.entry((pair[0], pair[1])).or_default() += n;
                }
            }
            let best = counts.into_iter().max_by(|&(pa, ca), &(pb, cb)| {
                ca.cmp(&cb).then_with(|| {
                    let a = (&symbols[pa.0 as usize], &symbols[pa.1 as usize]);
                    let b = (&symbols[pb.0 as usize], &symbols[pb.1 as usize]);
                    b.cmp(&a)
                })
            });
            let Some(((left, right), _)) = best else {
                log::warn!("tokenizer: merges exhausted at {} tokens (requested {vocab_size})", vocab.len());
                break;
            };
            let merged = format!("{}{}", symbols[left as usize], symbols[right as usize]);
            let merged_id = match symbol_id.get(&merged) {
                Some(&id) => id,
                None => {
                    let id = symbols.len() as u32;
                    symbols.push(merged.clone());
                    symbol_id.insert(merged.clone(), id);
                    vocab.push(merged);
                    id
                }
            };
            for (seq, _) in words.iter_mut() {
                apply_merge(seq, left, right, merged_id);
            }
            merges.push((symbols[left as usize].clone(), symbols[right as usize].clone()));
        }
        Self::from_parts(kind, vocab, merges)
    }

    pub fn kind(&self) -> TokenizerKind {
        self.kind
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn unk_id(&self) -> u32 {
        0
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Normalizes `text` and maps it to token ids.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let text = normalize_text(text);
        let mut ids = Vec::new();
        match self.kind {
            TokenizerKind::Char => {
                let mut buf = [0u8; 4];
                for c in text.chars() {
                    let c = if c == ' ' { BOUNDARY } else { c };
                    ids.push(self.id(c.encode_utf8(&mut buf)).unwrap_or(0));
                }
            }
            TokenizerKind::Subword => {
                for word in text.split(' ').filter(|w| !w.is_empty()) {
                    let symbols: Vec<char> = std::iter::once(BOUNDARY).chain(word.chars()).collect();
                    self.encode_word(&symbols, &mut ids);
                }
            }
        }
        ids
    }

    fn encode_word(&self, symbols: &[char], ids: &mut Vec<u32>) {
        let mut pos = 0;
        let mut piece = String::new();
        while pos < symbols.len() {
            let longest = self.max_token_chars.min(symbols.len() - pos);
            let mut matched = None;
            for len in (1..=longest).rev() {
                piece.clear();
                piece.extend(&symbols[pos..pos + len]);
                if let Some(id) = self.id(&piece).filter(|&id| id != 0) {
                    matched = Some((id, len));
                    break;
                }
            }
            let (id, len) = matched.unwrap_or((0, 1));
            ids.push(id);
            pos += len;
        }
    }

    /// Inverse of [`encode`](Self::encode) on in-alphabet, normalized text.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self
                .token(id)
                .ok_or_else(|| Error::InvalidArgument(format!("token id {id} outside vocabulary of {}", self.vocab.len())))?;
            if id == 0 {
                out.push_str(UNK_RENDER);
            } else {
                out.extend(tok.chars().map(|c| if c == BOUNDARY { ' ' } else { c }));
            }
        }
        Ok(match self.kind {
            TokenizerKind::Subword => out.strip_prefix(' ').map(str::to_string).unwrap_or(out),
            TokenizerKind::Char => out,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.kind, self.vocab.len());
        for tok in &self.vocab {
            s.push_str(tok);
            s.push('\n');
        }
        for (l, r) in &self.merges {
            s.push_str(&format!("{l} {r}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format("tokenizer", "missing header"))?;
        let (kind, size) = header
            .split_once(' ')
            .ok_or_else(|| Error::format("tokenizer", format!("bad header {header:?}")))?;
        let kind: TokenizerKind = kind.parse()?;
        let size: usize = size
            .trim()
            .parse()
            .map_err(|_| Error::format("tokenizer", format!("bad vocab size in {header:?}")))?;
        let vocab: Vec<String> = lines.by_ref().take(size).map(str::to_string).collect();
        if vocab.len() != size {
            return Err(Error::format("tokenizer", format!("expected {size} tokens, found {}", vocab.len())));
        }
        let merges = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.split_once(' ')
                    .map(|(a, b)| (a.to_string(), b.to_string()))
                    .ok_or_else(|| Error::format("tokenizer", format!("bad merge record {l:?}")))
            })
            .collect::<Result<_>>()?;
        Self::from_parts(kind, vocab, merges)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn apply_merge(seq: &mut Vec<u32>, left: u32, right: u32, merged: u32) {
    let mut out = 0;
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == left && seq[i + 1] == right {
            seq[out] = merged;
            i += 2;
        } else {
            seq[out] = seq[i];
            i += 1;
        }
        out += 1;
    }
    seq.truncate(out);
}

/// Minimum number of frames a CTC alignment of `target` needs: one per
/// token plus a separating blank between equal neighbours.
pub fn min_ctc_frames(target: &[u32]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

pub fn ctc_feasible(target: &[u32], output_frames: usize) -> bool {
    output_frames >= min_ctc_frames(target)
}
