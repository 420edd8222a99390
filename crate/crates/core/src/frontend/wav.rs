use std::path::Path;

use super::mel::SAMPLE_RATE;
use crate::error::{Error, Result};

/// Reads 16 kHz mono 16-bit PCM, scaled to `[-1, 1)`.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Vec<f32>> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1
        || spec.sample_rate != SAMPLE_RATE
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(Error::Audio(format!(
            "{}: {} ch, {} Hz, {}-bit {:?}; need mono 16 kHz 16-bit PCM",
            path.display(),
            spec.channels,
            spec.sample_rate,
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    reader
        .into_samples::<i16>()
        .map(|s| Ok(s? as f32 / 32768.0))
        .collect()
}

/// Writes samples as 16 kHz mono 16-bit PCM, clipping to the i16 range.
pub fn write_wav(path: impl AsRef<Path>, samples: &[f32]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        let q = (s * 32768.0).round().clamp(i16::MIN as f32, i16::MAX as f32) as i16;
        writer.write_sample(q)?;
    }
    writer.finalize()?;
    Ok(())
}
