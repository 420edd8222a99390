//! Citrinet: a convolutional CTC speech recognizer built from
//! time-channel separable convolutions with squeeze-and-excitation,
//! trained with CTC and NovoGrad, and decoded greedily or with an
//! n-gram-fused prefix beam search.

pub mod analyze;
pub mod ctc;
pub mod data;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
