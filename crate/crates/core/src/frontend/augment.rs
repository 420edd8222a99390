use rand::Rng;

use super::mel::{FeatureMatrix, N_MELS};
use crate::error::{Error, Result};

/// Frequency and time masking applied to normalized features in training.
#[derive(Clone, Debug, PartialEq)]
pub struct SpecAugmentConfig {
    pub freq_masks: usize,
    /// Maximum width of a frequency mask, in mel bins.
    pub freq_width: usize,
    pub time_masks: usize,
    /// Maximum width of a time mask as a fraction of the utterance length.
    pub time_width_fraction: f64,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self {
            freq_masks: 2,
            freq_width: 27,
            time_masks: 2,
            time_width_fraction: 0.05,
        }
    }
}

impl SpecAugmentConfig {
    pub fn disabled() -> Self {
        Self {
            freq_masks: 0,
            time_masks: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.freq_width > N_MELS {
            return Err(Error::InvalidArgument(format!(
                "frequency mask width {} exceeds {N_MELS} bins",
                self.freq_width
            )));
        }
        if !(0.0..=1.0).contains(&self.time_width_fraction) {
            return Err(Error::InvalidArgument(format!(
                "time mask fraction {} outside [0, 1]",
                self.time_width_fraction
            )));
        }
        Ok(())
    }

    /// Largest time mask for an utterance of `frames` frames.
    pub fn max_time_width(&self, frames: usize) -> usize {
        (self.time_width_fraction * frames as f64).floor() as usize
    }
}

/// Zeroes mel rows `start..start+width`.
pub fn mask_freq(feats: &mut FeatureMatrix, start: usize, width: usize) {
    let t = feats.frames();
    let end = (start + width).min(N_MELS);
    for m in start.min(end)..end {
        feats.values_mut()[m * t..(m + 1) * t].fill(0.0);
    }
}

/// Zeroes frames `start..start+width` in every mel row.
pub fn mask_time(feats: &mut FeatureMatrix, start: usize, width: usize) {
    let t = feats.frames();
    let end = (start + width).min(t);
    if start >= end {
        return;
    }
    for row in feats.values_mut().chunks_mut(t) {
        row[start..end].fill(0.0);
    }
}

/// Applies independently sampled masks; widths are uniform over
/// `0..=max`, including zero.
pub fn spec_augment<R: Rng + ?Sized>(feats: &FeatureMatrix, cfg: &SpecAugmentConfig, rng: &mut R) -> FeatureMatrix {
    let mut out = feats.clone();
    let t = feats.frames();
    for _ in 0..cfg.freq_masks {
        let width = rng.gen_range(0..=cfg.freq_width.min(N_MELS));
        let start = rng.gen_range(0..=N_MELS - width);
        mask_freq(&mut out, start, width);
    }
    let max_t = cfg.max_time_width(t).min(t);
    for _ in 0..cfg.time_masks {
        let width = rng.gen_range(0..=max_t);
        let start = rng.gen_range(0..=t - width);
        mask_time(&mut out, start, width);
    }
    out
}
