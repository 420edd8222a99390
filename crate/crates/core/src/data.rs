//! Manifests and the synthetic tone-word corpus.

use std::f32::consts::TAU;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{num_frames, write_wav, SAMPLE_RATE};
use crate::model::output_frames;
use crate::tokenizer::normalize_text;

/// One line of a JSON-lines manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative paths are resolved against the manifest's directory.
    pub audio_filepath: PathBuf,
    /// Seconds.
    pub duration: f64,
    pub text: String,
}

/// Reads a manifest, resolving relative audio paths and normalizing text.
/// Blank lines are skipped; an entry whose text normalizes to nothing is an
/// error.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut entries = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("{}:{}", path.display(), n + 1), e.to_string()))?;
        entry.text = normalize_text(&entry.text);
        if entry.text.is_empty() {
            return Err(Error::format(
                format!("{}:{}", path.display(), n + 1),
                "transcript is empty after normalization",
            ));
        }
        if entry.audio_filepath.is_relative() {
            entry.audio_filepath = base.join(&entry.audio_filepath);
        }
        entries.push(entry);
    }
    Ok(entries)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Word list for [`synth_data`]; the first five share the letters
/// `o n e t`, so a five-word corpus needs a six-token char vocabulary.
pub const SYNTH_WORDS: [&str; 30] = [
    "one", "ten", "net", "toe", "note", "tone", "nine", "tin", "ant", "eat", "tea", "sea", "sun", "moon", "star",
    "tree", "fish", "bird", "rain", "snow", "wind", "fire", "stone", "light", "red", "blue", "green", "cat", "dog",
    "hat",
];

/// Seconds per letter, and per silence gap between words.
pub const SYNTH_SEGMENT: f64 = 0.16;
const FADE: f64 = 0.005;
const MAX_WORDS_PER_UTTERANCE: usize = 3;

/// Tone of a letter: 26 log-spaced pitches from 250 Hz to 4 kHz.
pub fn letter_frequency(c: char) -> Option<f32> {
    let i = (c as u32).checked_sub('a' as u32).filter(|&i| i < 26)?;
    Some(250.0 * 16f32.powf(i as f32 / 25.0))
}

/// Renders `text` (lowercase words over `a-z`) as a sequence of letter
/// tones separated by silences.
pub fn render_utterance<R: Rng + ?Sized>(text: &str, rng: &mut R) -> Result<Vec<f32>> {
    let seg = (SYNTH_SEGMENT * SAMPLE_RATE as f64).round() as usize;
    let fade = (FADE * SAMPLE_RATE as f64).round() as usize;
    let amp = rng.gen_range(0.2f32..0.4);
    let detune = rng.gen_range(0.99f32..1.01);
    let mut out = Vec::new();
    for word in text.split(' ') {
        out.extend(std::iter::repeat(0.0).take(seg));
        for c in word.chars() {
            let f = letter_frequency(c)
                .ok_or_else(|| Error::InvalidArgument(format!("synthetic words use a-z only, got {c:?}")))?
                * detune;
            let phase = rng.gen_range(0.0..TAU);
            out.extend((0..seg).map(|n| {
                let t = n as f32 / SAMPLE_RATE as f32;
                let env = (n.min(seg - 1 - n) as f32 / fade as f32).min(1.0);
                let x = (TAU * f * t + phase).sin() + 0.3 * (2.0 * TAU * f * t + phase).sin();
                amp * env * x / 1.3
            }));
        }
    }
    out.extend(std::iter::repeat(0.0).take(seg));
    for s in &mut out {
        *s += rng.gen_range(-0.005..0.005);
    }
    Ok(out)
}

/// Writes `num_utterances` WAVs of 1 to 3 words drawn from the first
/// `num_words` entries of [`SYNTH_WORDS`] plus `manifest.json` into
/// `out_dir`, and returns the entries (paths relative to `out_dir`).
///
/// Every letter and every gap lasts 16 feature frames, so the encoder
/// output has about two frames per character token, enough for any CTC
/// alignment.
pub fn synth_data(num_utterances: usize, num_words: usize, out_dir: impl AsRef<Path>, seed: u64) -> Result<Vec<ManifestEntry>> {
    if num_words == 0 || num_words > SYNTH_WORDS.len() {
        return Err(Error::InvalidArgument(format!(
            "synthetic vocabulary must have 1..={} words, got {num_words}",
            SYNTH_WORDS.len()
        )));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let words = &SYNTH_WORDS[..num_words];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(num_utterances);
    for i in 0..num_utterances {
        let n = rng.gen_range(1..=MAX_WORDS_PER_UTTERANCE);
        let text = (0..n)
            .map(|_| *words.choose(&mut rng).expect("non-empty"))
            .collect::<Vec<_>>()
            .join(" ");
        let samples = render_utterance(&text, &mut rng)?;
        // char tokens: letters plus one boundary per space
        let tokens = text.chars().count();
        debug_assert!(output_frames(num_frames(samples.len())) >= 2 * tokens);
        let name = PathBuf::from(format!("utt_{i:04}.wav"));
        write_wav(out_dir.join(&name), &samples)?;
        entries.push(ManifestEntry {
            audio_filepath: name,
            duration: samples.len() as f64 / SAMPLE_RATE as f64,
            text,
        });
    }
    write_manifest(out_dir.join("manifest.json"), &entries)?;
    Ok(entries)
}
