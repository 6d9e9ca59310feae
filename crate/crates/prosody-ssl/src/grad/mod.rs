//! Minimal dense-tensor computation core with reverse-mode differentiation.
//!
//! Supplies exactly the operations the models in this crate need. Every
//! differentiable op has a hand-written backward that is verified against
//! central finite differences (see [`check::grad_check`]); verification runs
//! in f64, training runs in f32.

mod tape;
mod tensor;

pub mod check;
pub mod nn;

pub use tape::{Grads, PadMode, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Scalar type the tensor core is generic over (f32 for training,
/// f64 for finite-difference verification).
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn of_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Real for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn into_f64(self) -> f64 {
        self
    }
}

/// A named collection of trainable tensors. Models hold [`ParamId`] handles
/// into one of these; the optimizer and checkpoint code see the flat list.
#[derive(Debug, Clone)]
pub struct Params<T: Real> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl<T: Real> Params<T> {
    pub fn new() -> Self {
        Params { names: Vec::new(), values: Vec::new() }
    }

    /// Register a tensor under a unique name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar elements across all tensors.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn assert_all_finite(&self) -> Result<()> {
        for (name, t) in self.iter() {
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
        }
        Ok(())
    }
}

impl<T: Real> Default for Params<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests;
