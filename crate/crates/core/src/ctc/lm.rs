//! Token-level n-gram model with stupid backoff.
//!
//! Text format: a header line `ngram order=<n> vocab=<V>`, then one line
//! per n-gram (orders 1..=n), `<space-separated token ids>\t<count>`,
//! sorted as strings.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Multiplier applied each time a context is shortened.
pub const BACKOFF: f64 = 0.4;

#[derive(Clone, Debug, PartialEq)]
pub struct NGramLM {
    order: usize,
    vocab_size: usize,
    counts: HashMap<Vec<u32>, u64>,
    total: u64,
}

/// Counts every n-gram of order `1..=order` inside each sequence.
/// Sequences are not padded with boundary symbols.
pub fn train_lm(corpus: &[Vec<u32>], order: usize, vocab_size: usize) -> Result<NGramLM> {
    if order == 0 {
        return Err(Error::InvalidArgument("n-gram order must be at least 1".into()));
    }
    let mut counts = HashMap::new();
    let mut total = 0;
    for seq in corpus {
        if let Some(&bad) = seq.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::InvalidArgument(format!("token id {bad} outside vocabulary of {vocab_size}")));
        }
        total += seq.len() as u64;
        for n in 1..=order.min(seq.len()) {
            for gram in seq.windows(n) {
                *counts.entry(gram.to_vec()).or_insert(0) += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Empty("language model corpus has no tokens"));
    }
    Ok(NGramLM {
        order,
        vocab_size,
        counts,
        total,
    })
}

impl NGramLM {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn count(&self, gram: &[u32]) -> u64 {
        self.counts.get(gram).copied().unwrap_or(0)
    }

    /// `log p(token | context)`; only the last `order - 1` context tokens
    /// are used. Unigrams are add-one smoothed, so every in-vocabulary
    /// token gets a finite score.
    pub fn score(&self, context: &[u32], token: u32) -> f64 {
        let keep = context.len().min(self.order - 1);
        let mut ctx = &context[context.len() - keep..];
        let mut penalty = 0.0;
        loop {
            if ctx.is_empty() {
                let c = self.count(&[token]) as f64;
                return penalty + ((c + 1.0) / (self.total + self.vocab_size as u64) as f64).ln();
            }
            let mut gram = ctx.to_vec();
            gram.push(token);
            let joint = self.count(&gram);
            if joint > 0 {
                return penalty + (joint as f64 / self.count(ctx) as f64).ln();
            }
            penalty += BACKOFF.ln();
            ctx = &ctx[1..];
        }
    }

    /// Sum of per-token scores, each conditioned on its predecessors.
    pub fn sequence_score(&self, tokens: &[u32]) -> f64 {
        (0..tokens.len()).map(|i| self.score(&tokens[..i], tokens[i])).sum()
    }

    pub fn to_text(&self) -> String {
        let mut lines: Vec<String> = self
            .counts
            .iter()
            .map(|(gram, count)| {
                let ids: Vec<String> = gram.iter().map(u32::to_string).collect();
                format!("{}\t{count}", ids.join(" "))
            })
            .collect();
        lines.sort();
        let mut out = format!("ngram order={} vocab={}\n", self.order, self.vocab_size);
        for line in lines {
            let _ = writeln!(out, "{line}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::format("n-gram model", msg);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("ngram") {
            return Err(bad(format!("bad header {header:?}")));
        }
        let mut field = |key: &str| -> Result<usize> {
            fields
                .next()
                .and_then(|f| f.strip_prefix(key))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(format!("header lacks {key}")))
        };
        let order = field("order=")?;
        let vocab_size = field("vocab=")?;
        if order == 0 {
            return Err(bad("order 0".into()));
        }
        let mut counts = HashMap::new();
        let mut total = 0;
        for line in lines.filter(|l| !l.is_empty()) {
            let (gram, count) = line.split_once('\t').ok_or_else(|| bad(format!("bad line {line:?}")))?;
            let gram: Vec<u32> = gram
                .split(' ')
                .map(|id| id.parse().map_err(|_| bad(format!("bad token id in {line:?}"))))
                .collect::<Result<_>>()?;
            let count: u64 = count.parse().map_err(|_| bad(format!("bad count in {line:?}")))?;
            if gram.is_empty() || gram.len() > order || gram.iter().any(|&id| id as usize >= vocab_size) {
                return Err(bad(format!("n-gram out of range: {line:?}")));
            }
            if gram.len() == 1 {
                total += count;
            }
            counts.insert(gram, count);
        }
        if total == 0 {
            return Err(Error::Empty("language model has no unigrams"));
        }
        Ok(Self {
            order,
            vocab_size,
            counts,
            total,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}
