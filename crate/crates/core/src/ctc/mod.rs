//! Connectionist temporal classification: the loss, greedy and prefix
//! beam-search decoders, and the n-gram language model used for fusion.
//!
//! Classes are token ids `0..V` followed by the blank at index `V`.

mod beam;
mod lm;
mod loss;

pub use beam::{beam_search, BeamConfig, FusionMode, Hypothesis};
pub use lm::{train_lm, NGramLM, BACKOFF};
pub use loss::{ctc_loss, ctc_loss_graph};

use crate::model::LogProbMatrix;

/// `log(exp(a) + exp(b))` without overflow; `-inf` is the additive identity.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Merges repeats, then drops blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p as u32);
        }
        prev = Some(p);
    }
    out
}

/// Per-frame argmax path, collapsed.
pub fn greedy_decode(logp: &LogProbMatrix) -> Vec<u32> {
    let path: Vec<usize> = (0..logp.frames()).map(|t| argmax(logp.frame(t))).collect();
    collapse(&path, logp.blank())
}
