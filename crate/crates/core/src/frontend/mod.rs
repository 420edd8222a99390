//! Acoustic front-end: WAV input, 80-bin log-mel features and SpecAugment.

mod augment;
mod mel;
mod wav;

pub use augment::{mask_freq, mask_time, spec_augment, SpecAugmentConfig};
pub use mel::{
    hz_to_mel, log_mel, mel_centers, mel_to_hz, normalize_per_bin, num_frames, FeatureMatrix, MelExtractor,
    HOP_LENGTH, LOG_FLOOR, N_FFT, N_MELS, SAMPLE_RATE, WIN_LENGTH,
};
pub use wav::{read_wav, write_wav};
