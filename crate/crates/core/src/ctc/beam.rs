use std::cmp::Ordering;
use std::collections::BTreeMap;

use super::{log_add, NGramLM};
use crate::error::{Error, Result};
use crate::model::LogProbMatrix;

const NEG_INF: f64 = f64::NEG_INFINITY;

/// When the language model enters the score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FusionMode {
    /// LM and length bonus take part in pruning at every frame.
    #[default]
    Shallow,
    /// Search on acoustic scores alone, then re-rank the final beam.
    Rescore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamConfig {
    pub width: usize,
    /// LM weight.
    pub alpha: f64,
    /// Per-token length bonus.
    pub beta: f64,
    pub mode: FusionMode,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            width: 16,
            alpha: 0.5,
            beta: 1.0,
            mode: FusionMode::Shallow,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub acoustic_logp: f64,
    pub lm_logp: f64,
    pub combined: f64,
}

impl Hypothesis {
    pub fn combine(acoustic: f64, lm: f64, len: usize, alpha: f64, beta: f64) -> f64 {
        // keep a zero-weighted LM from turning -inf into NaN
        let lm_term = if alpha == 0.0 { 0.0 } else { alpha * lm };
        acoustic + lm_term + beta * len as f64
    }
}

#[derive(Clone, Copy)]
struct Prefix {
    /// Paths ending in blank.
    blank: f64,
    /// Paths ending in the prefix's last token.
    non_blank: f64,
    lm: f64,
}

impl Prefix {
    fn total(&self) -> f64 {
        log_add(self.blank, self.non_blank)
    }
}

/// Prefix beam search. Returns up to `width` hypotheses sorted by combined
/// score, best first; ties go to the lexicographically smaller sequence.
///
/// At each frame only the `width` most probable classes are expanded, so a
/// beam of width 1 follows the greedy path exactly.
pub fn beam_search(logp: &LogProbMatrix, cfg: &BeamConfig, lm: Option<&NGramLM>) -> Result<Vec<Hypothesis>> {
    if cfg.width < 1 {
        return Err(Error::InvalidArgument("beam width must be at least 1".into()));
    }
    if let Some(lm) = lm {
        if lm.vocab_size() != logp.blank() {
            return Err(Error::VocabMismatch {
                model: logp.blank(),
                tokenizer: lm.vocab_size(),
            });
        }
    }
    let blank = logp.blank();
    let (alpha, beta) = match cfg.mode {
        FusionMode::Shallow => (cfg.alpha, cfg.beta),
        FusionMode::Rescore => (0.0, 0.0),
    };
    let score = |tokens: &[u32], p: &Prefix| Hypothesis::combine(p.total(), p.lm, tokens.len(), alpha, beta);

    let mut beams: BTreeMap<Vec<u32>, Prefix> = BTreeMap::new();
    beams.insert(
        Vec::new(),
        Prefix {
            blank: 0.0,
            non_blank: NEG_INF,
            lm: 0.0,
        },
    );
    let mut classes: Vec<usize> = (0..logp.classes()).collect();
    for t in 0..logp.frames() {
        let row = logp.frame(t);
        classes.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let expand = &classes[..cfg.width.min(classes.len())];

        let mut next: BTreeMap<Vec<u32>, Prefix> = BTreeMap::new();
        let slot = |next: &mut BTreeMap<Vec<u32>, Prefix>, tokens: Vec<u32>, lm_score: f64| -> Prefix {
            *next.entry(tokens).or_insert(Prefix {
                blank: NEG_INF,
                non_blank: NEG_INF,
                lm: lm_score,
            })
        };
        for (tokens, beam) in &beams {
            for &k in expand {
                let lp = row[k];
                if lp == NEG_INF {
                    continue;
                }
                if k == blank {
                    let mut p = slot(&mut next, tokens.clone(), beam.lm);
                    p.blank = log_add(p.blank, beam.total() + lp);
                    next.insert(tokens.clone(), p);
                    continue;
                }
                let token = k as u32;
                let mut extended = tokens.clone();
                extended.push(token);
                let lm_score = beam.lm + lm.map_or(0.0, |lm| lm.score(tokens, token));
                let mut e = slot(&mut next, extended.clone(), lm_score);
                if tokens.last() == Some(&token) {
                    // a repeat only extends after a blank; otherwise it merges
                    e.non_blank = log_add(e.non_blank, beam.blank + lp);
                    let mut same = slot(&mut next, tokens.clone(), beam.lm);
                    same.non_blank = log_add(same.non_blank, beam.non_blank + lp);
                    next.insert(tokens.clone(), same);
                } else {
                    e.non_blank = log_add(e.non_blank, beam.total() + lp);
                }
                next.insert(extended, e);
            }
        }
        let mut ranked: Vec<(Vec<u32>, Prefix)> = next.into_iter().filter(|(_, p)| p.total() > NEG_INF).collect();
        ranked.sort_by(|(ta, pa), (tb, pb)| {
            score(tb, pb)
                .partial_cmp(&score(ta, pa))
                .unwrap_or(Ordering::Equal)
                .then_with(|| ta.cmp(tb))
        });
        ranked.truncate(cfg.width);
        beams = ranked.into_iter().collect();
    }

    let mut hyps: Vec<Hypothesis> = beams
        .into_iter()
        .map(|(tokens, p)| {
            let lm_logp = lm.map_or(0.0, |lm| lm.sequence_score(&tokens));
            let acoustic = p.total();
            Hypothesis {
                combined: Hypothesis::combine(acoustic, lm_logp, tokens.len(), cfg.alpha, cfg.beta),
                tokens,
                acoustic_logp: acoustic,
                lm_logp,
            }
        })
        .collect();
    hyps.sort_by(|a, b| {
        b.combined
            .partial_cmp(&a.combined)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    Ok(hyps)
}
