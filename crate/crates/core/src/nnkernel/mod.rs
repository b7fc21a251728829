//! Minimal dense-tensor engine: reverse-mode differentiation over a dynamic
//! tape plus an Adam optimizer.

pub mod adam;
pub mod gradcheck;
pub mod kernels;
pub mod param;
pub mod tape;
pub mod tensor;

#[cfg(test)]
mod tests;

use thiserror::Error;

pub use adam::{Adam, AdamConfig};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Grads, Tape, Var};
pub use tensor::{Real, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("backward requires a scalar, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("non-finite gradient in parameter `{param}`")]
    NonFinite { param: String },
    #[error("loss mask selects no positions")]
    EmptyMask,
    #[error("{0}")]
    InvalidArgument(String),
}

/// Additive causal mask `[batch, t, t]`: 0 on and below the diagonal, `-inf`
/// above it.
pub fn causal_mask<T: Real>(batch: usize, t: usize) -> Tensor<T> {
    Tensor::from_fn(&[batch, t, t], |idx| {
        let (i, j) = ((idx / t) % t, idx % t);
        if j <= i {
            T::zero()
        } else {
            T::neg_infinity()
        }
    })
}
