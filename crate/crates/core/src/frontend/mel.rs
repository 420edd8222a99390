use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_MELS: usize = 80;
pub const WIN_LENGTH: usize = 400;
pub const HOP_LENGTH: usize = 160;
pub const N_FFT: usize = 512;
/// Floor applied to filterbank energies before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;
const NORM_EPS: f64 = 1e-5;

/// Log-mel features laid out `[N_MELS × frames]`, mel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(frames: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != N_MELS * frames {
            return Err(Error::Shape(format!(
                "feature buffer of {} values is not {N_MELS}×{frames}",
                values.len()
            )));
        }
        Ok(Self { frames, values })
    }

    pub fn mels(&self) -> usize {
        N_MELS
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn get(&self, mel: usize, frame: usize) -> f32 {
        self.values[mel * self.frames + frame]
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            &[N_MELS, self.frames],
            self.values.iter().map(|&v| T::lit(v as f64)).collect(),
        )
        .expect("feature shape is consistent")
    }
}

/// Frame count under center padding.
pub fn num_frames(num_samples: usize) -> usize {
    1 + num_samples / HOP_LENGTH
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Computes log-mel filterbank features.
pub struct MelExtractor {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    /// `[N_MELS × (N_FFT/2+1)]` triangular weights.
    filters: Vec<f64>,
}

impl Default for MelExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl MelExtractor {
    pub fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(N_FFT);
        // periodic Hann, centered inside the FFT frame
        let offset = (N_FFT - WIN_LENGTH) / 2;
        let mut window = vec![0.0; N_FFT];
        for n in 0..WIN_LENGTH {
            window[offset + n] = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WIN_LENGTH as f64).cos();
        }
        Self {
            fft,
            window,
            filters: mel_filterbank(),
        }
    }

    /// Un-normalized natural-log mel energies.
    pub fn log_mel_raw(&self, samples: &[f32], sample_rate: u32) -> Result<FeatureMatrix> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::Audio(format!("sample rate {sample_rate} Hz, expected {SAMPLE_RATE}")));
        }
        if samples.is_empty() {
            return Err(Error::Empty("waveform has no samples"));
        }
        let n = samples.len();
        let frames = num_frames(n);
        let pad = (N_FFT / 2) as isize;
        let n_bins = N_FFT / 2 + 1;
        let mut values = vec![0f32; N_MELS * frames];
        let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
        let mut power = vec![0.0; n_bins];
        for f in 0..frames {
            let start = (f * HOP_LENGTH) as isize - pad;
            for (i, slot) in buf.iter_mut().enumerate() {
                let s = samples[reflect(start + i as isize, n)] as f64;
                *slot = Complex::new(s * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for m in 0..N_MELS {
                let row = &self.filters[m * n_bins..(m + 1) * n_bins];
                let e: f64 = row.iter().zip(&power).map(|(w, p)| w * p).sum();
                values[m * frames + f] = e.max(LOG_FLOOR).ln() as f32;
            }
        }
        FeatureMatrix::new(frames, values)
    }

    /// Log-mel features with per-utterance mean/variance normalization of
    /// every mel bin.
    pub fn log_mel(&self, samples: &[f32], sample_rate: u32) -> Result<FeatureMatrix> {
        let mut feats = self.log_mel_raw(samples, sample_rate)?;
        normalize_per_bin(&mut feats);
        Ok(feats)
    }
}

/// Convenience wrapper building a fresh [`MelExtractor`].
pub fn log_mel(samples: &[f32], sample_rate: u32) -> Result<FeatureMatrix> {
    MelExtractor::new().log_mel(samples, sample_rate)
}

pub fn normalize_per_bin(feats: &mut FeatureMatrix) {
    let t = feats.frames;
    for row in feats.values.chunks_mut(t) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / t as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / t as f64;
        let denom = var.sqrt() + NORM_EPS;
        for v in row.iter_mut() {
            *v = ((*v as f64 - mean) / denom) as f32;
        }
    }
}

/// Reflects an out-of-range index back into `0..n` (repeatedly if needed).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Center frequency in Hz of every mel band.
pub fn mel_centers() -> Vec<f64> {
    let top = hz_to_mel(SAMPLE_RATE as f64 / 2.0);
    (1..=N_MELS)
        .map(|m| mel_to_hz(top * m as f64 / (N_MELS + 1) as f64))
        .collect()
}

fn mel_filterbank() -> Vec<f64> {
    let n_bins = N_FFT / 2 + 1;
    let top = hz_to_mel(SAMPLE_RATE as f64 / 2.0);
    let edges: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_to_hz(top * i as f64 / (N_MELS + 1) as f64))
        .collect();
    let mut filters = vec![0.0; N_MELS * n_bins];
    for m in 0..N_MELS {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * SAMPLE_RATE as f64 / N_FFT as f64;
            let w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            filters[m * n_bins + k] = w;
        }
    }
    filters
}
