//! Dense tensors, named parameters and a tape-based reverse-mode autodiff
//! graph covering the handful of operations the encoder needs.
//!
//! Everything is generic over [`Scalar`], so the same code runs in `f64`
//! for gradient verification and in `f32` for training.

mod graph;
mod kernels;

use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

pub use graph::{BatchStats, Gradients, Graph, Var};

/// Floating point element type of tensors and graphs.
pub trait Scalar: Float + Default + Debug + Display + Sum + Send + Sync + 'static {
    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major array of rank at most 3 with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::Shape(format!("rank {} not in 1..=3", shape.len())));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {numel} values, buffer has {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![T::zero(); numel]).expect("valid zero shape")
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel]).expect("valid shape")
    }

    /// Convenience constructor from `f64` literals.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::lit(x)).collect())
    }

    /// Attaches a zeroed gradient buffer.
    pub fn requiring_grad(mut self) -> Self {
        self.grad = Some(vec![T::zero(); self.data.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Extent along the last axis (time for `[C×T]` tensors).
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Typed index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with a unique path-like name such as
/// `megablock1.block0.sub2.depthwise.weight`.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Whether decoupled weight decay applies (false for biases and norm affines).
    pub decay: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, decay: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        let tensor = if tensor.requires_grad() {
            tensor
        } else {
            tensor.requiring_grad()
        };
        self.params.push(Parameter { name, tensor, decay });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of trainable scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_buffer() {
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(&[1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn grad_buffer_matches_shape() {
        let t = Tensor::<f32>::zeros(&[3, 4]).requiring_grad();
        assert_eq!(t.grad().unwrap().len(), t.numel());
    }

    #[test]
    fn parameter_names_are_unique() {
        let mut store = ParamStore::<f64>::new();
        store.add("a.weight", Tensor::zeros(&[2]), true).unwrap();
        assert!(store.add("a.weight", Tensor::zeros(&[2]), true).is_err());
        assert_eq!(store.id("a.weight"), Some(ParamId(0)));
    }
}
