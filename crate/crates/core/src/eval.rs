//! Word and character error rates, and corpus evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctc::{beam_search, greedy_decode, BeamConfig, FusionMode, NGramLM};
use crate::data::ManifestEntry;
use crate::error::{Error, Result};
use crate::frontend::{log_mel, read_wav, FeatureMatrix, SAMPLE_RATE};
use crate::model::{Citrinet, LogProbMatrix};
use crate::tokenizer::{normalize_text, TokenizerModel};

/// Edit counts of a minimum-cost alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    /// Length of the reference.
    pub reference_len: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Percentage of reference units; an empty reference counts as one unit.
    pub fn rate(&self) -> f64 {
        100.0 * self.errors() as f64 / self.reference_len.max(1) as f64
    }

    fn add(&mut self, other: EditCounts) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.reference_len += other.reference_len;
    }
}

/// Levenshtein alignment of `hyp` against `reference`. Among alignments of
/// equal cost, substitutions are preferred over deletion+insertion pairs.
pub fn align<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditCounts {
    // each cell: (cost, subs, dels, ins)
    type Cell = (usize, usize, usize, usize);
    let (n, m) = (reference.len(), hyp.len());
    let mut prev: Vec<Cell> = (0..=m).map(|j| (j, 0, 0, j)).collect();
    let mut cur = vec![(0, 0, 0, 0); m + 1];
    for i in 1..=n {
        cur[0] = (i, 0, i, 0);
        for j in 1..=m {
            let d = prev[j - 1];
            let diag = if reference[i - 1] == hyp[j - 1] {
                d
            } else {
                (d.0 + 1, d.1 + 1, d.2, d.3)
            };
            let del = (prev[j].0 + 1, prev[j].1, prev[j].2 + 1, prev[j].3);
            let ins = (cur[j - 1].0 + 1, cur[j - 1].1, cur[j - 1].2, cur[j - 1].3 + 1);
            cur[j] = [diag, del, ins].into_iter().min_by_key(|c| c.0).expect("three candidates");
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let (_, substitutions, deletions, insertions) = prev[m];
    EditCounts {
        substitutions,
        deletions,
        insertions,
        reference_len: n,
    }
}

pub fn word_edits(reference: &str, hyp: &str) -> EditCounts {
    let r = normalize_text(reference);
    let h = normalize_text(hyp);
    let words = |s: &str| s.split(' ').filter(|w| !w.is_empty()).map(str::to_string).collect::<Vec<_>>();
    align(&words(&r), &words(&h))
}

/// Character edits over normalized text, spaces included.
pub fn char_edits(reference: &str, hyp: &str) -> EditCounts {
    let r: Vec<char> = normalize_text(reference).chars().collect();
    let h: Vec<char> = normalize_text(hyp).chars().collect();
    align(&r, &h)
}

pub fn wer(reference: &str, hyp: &str) -> f64 {
    word_edits(reference, hyp).rate()
}

pub fn cer(reference: &str, hyp: &str) -> f64 {
    char_edits(reference, hyp).rate()
}

/// How log-probabilities are turned into tokens.
#[derive(Clone, Debug, Default)]
pub enum Decoder {
    #[default]
    Greedy,
    Beam { config: BeamConfig, lm: Option<NGramLM> },
}

impl Decoder {
    pub fn decode(&self, logp: &LogProbMatrix) -> Result<Vec<u32>> {
        match self {
            Decoder::Greedy => Ok(greedy_decode(logp)),
            Decoder::Beam { config, lm } => {
                let beams = beam_search(logp, config, lm.as_ref())?;
                Ok(beams.into_iter().next().map(|h| h.tokens).unwrap_or_default())
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Decoder::Greedy => "greedy".into(),
            Decoder::Beam { config, lm } => format!(
                "beam width={} alpha={} beta={} fusion={} lm={}",
                config.width,
                config.alpha,
                config.beta,
                match config.mode {
                    FusionMode::Shallow => "shallow",
                    FusionMode::Rescore => "rescore",
                },
                lm.as_ref().map_or("none".to_string(), |lm| format!("{}-gram", lm.order()))
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub reference: String,
    pub hypothesis: String,
    pub word_errors: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub wer: f64,
    pub cer: f64,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_words: usize,
    pub char_errors: usize,
    pub reference_chars: usize,
    pub utterances: usize,
    pub decoding: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hypotheses: Vec<UtteranceResult>,
}

impl EvalReport {
    /// Scores `(reference, hypothesis)` pairs.
    pub fn from_pairs(pairs: &[(String, String)], decoding: impl Into<String>) -> Self {
        let mut words = EditCounts::default();
        let mut chars = EditCounts::default();
        let mut hypotheses = Vec::with_capacity(pairs.len());
        for (r, h) in pairs {
            let w = word_edits(r, h);
            words.add(w);
            chars.add(char_edits(r, h));
            hypotheses.push(UtteranceResult {
                reference: r.clone(),
                hypothesis: h.clone(),
                word_errors: w.errors(),
            });
        }
        Self {
            wer: words.rate(),
            cer: chars.rate(),
            substitutions: words.substitutions,
            deletions: words.deletions,
            insertions: words.insertions,
            reference_words: words.reference_len,
            char_errors: chars.errors(),
            reference_chars: chars.reference_len,
            utterances: pairs.len(),
            decoding: decoding.into(),
            hypotheses,
        }
    }
}

/// Log-mel features of a manifest entry's audio.
pub fn load_features(entry: &ManifestEntry) -> Result<FeatureMatrix> {
    log_mel(&read_wav(&entry.audio_filepath)?, SAMPLE_RATE)
}

pub fn check_vocab(model: &Citrinet<f32>, tokenizer: &TokenizerModel) -> Result<()> {
    if model.config().vocab_size != tokenizer.vocab_size() {
        return Err(Error::VocabMismatch {
            model: model.config().vocab_size,
            tokenizer: tokenizer.vocab_size(),
        });
    }
    Ok(())
}

/// Decodes one utterance to text.
pub fn transcribe(
    model: &Citrinet<f32>,
    tokenizer: &TokenizerModel,
    features: &FeatureMatrix,
    decoder: &Decoder,
) -> Result<String> {
    let logp = model.infer(features)?;
    tokenizer.decode(&decoder.decode(&logp)?)
}

/// Decodes `(features, reference)` pairs in parallel and scores them.
pub fn evaluate_features(
    model: &Citrinet<f32>,
    tokenizer: &TokenizerModel,
    utterances: &[(FeatureMatrix, String)],
    decoder: &Decoder,
) -> Result<EvalReport> {
    check_vocab(model, tokenizer)?;
    let pairs = utterances
        .par_iter()
        .map(|(feats, reference)| Ok((reference.clone(), transcribe(model, tokenizer, feats, decoder)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_pairs(&pairs, decoder.describe()))
}

/// Loads the audio of every entry and evaluates it.
pub fn evaluate(
    model: &Citrinet<f32>,
    tokenizer: &TokenizerModel,
    entries: &[ManifestEntry],
    decoder: &Decoder,
) -> Result<EvalReport> {
    check_vocab(model, tokenizer)?;
    if entries.is_empty() {
        return Err(Error::Empty("evaluation manifest"));
    }
    let utterances = entries
        .par_iter()
        .map(|e| Ok((load_features(e)?, e.text.clone())))
        .collect::<Result<Vec<_>>>()?;
    evaluate_features(model, tokenizer, &utterances, decoder)
}
