use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Per-frame log-probabilities over tokens plus blank (the last class),
/// stored frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbMatrix {
    frames: usize,
    classes: usize,
    values: Vec<f64>,
}

impl LogProbMatrix {
    /// `values` is frame-major: `values[t * classes + k]`.
    pub fn new(frames: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        if classes < 1 {
            return Err(Error::InvalidArgument("log-prob matrix needs at least the blank class".into()));
        }
        if values.len() != frames * classes {
            return Err(Error::Shape(format!(
                "{} values for {frames} frames × {classes} classes",
                values.len()
            )));
        }
        Ok(Self { frames, classes, values })
    }

    /// Converts a `[classes×frames]` graph buffer.
    pub fn from_class_major<T: Scalar>(classes: usize, frames: usize, data: &[T]) -> Result<Self> {
        if data.len() != frames * classes {
            return Err(Error::Shape("class-major buffer length".into()));
        }
        let mut values = vec![0.0; data.len()];
        for k in 0..classes {
            for t in 0..frames {
                values[t * classes + k] = data[k * frames + t].as_f64();
            }
        }
        Self::new(frames, classes, values)
    }

    /// Converts back to a `[classes×frames]` buffer.
    pub fn to_class_major<T: Scalar>(&self) -> Vec<T> {
        transpose_to_class_major(&self.values, self.frames, self.classes)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn blank(&self) -> usize {
        self.classes - 1
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.classes..(t + 1) * self.classes]
    }

    pub fn get(&self, t: usize, k: usize) -> f64 {
        self.values[t * self.classes + k]
    }

    /// Largest deviation of any frame's probability mass from 1.
    pub fn max_normalization_error(&self) -> f64 {
        (0..self.frames)
            .map(|t| (self.frame(t).iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Frame-major `[frames×classes]` to class-major `[classes×frames]`.
pub(crate) fn transpose_to_class_major<T: Scalar>(values: &[f64], frames: usize, classes: usize) -> Vec<T> {
    let mut out = vec![T::zero(); values.len()];
    for t in 0..frames {
        for k in 0..classes {
            out[k * frames + t] = T::lit(values[t * classes + k]);
        }
    }
    out
}
