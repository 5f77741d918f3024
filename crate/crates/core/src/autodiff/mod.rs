//! Reverse-mode automatic differentiation over dense 2D arrays, and ADAM.
//!
//! Values live on a [`Tape`]; [`Var`] handles are cheap `Copy` indices into
//! it. Elementwise binary ops broadcast dimensions of extent 1, which is how
//! a batch of posterior samples (one per row) meets per-parameter rows.

mod adam;
mod tape;
mod tensor;

use std::ops::{Add, Div, Mul, Neg, Sub};

pub use adam::{AdamConfig, AdamState};
pub use tape::{concat_cols, concat_rows, try_concat_cols, try_concat_rows, Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::sigmoid;

/// Scalar-like arithmetic shared by `f64` and tape variables, so pointwise
/// formulas can be evaluated plainly or recorded for differentiation.
pub trait Real:
    Clone
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn scale(&self, c: f64) -> Self;
    fn offset(&self, c: f64) -> Self;
    fn exp(&self) -> Self;
}

impl Real for f64 {
    fn scale(&self, c: f64) -> Self {
        c * self
    }

    fn offset(&self, c: f64) -> Self {
        self + c
    }

    fn exp(&self) -> Self {
        f64::exp(*self)
    }
}

impl Real for Var<'_> {
    fn scale(&self, c: f64) -> Self {
        Var::scale(*self, c)
    }

    fn offset(&self, c: f64) -> Self {
        Var::offset(*self, c)
    }

    fn exp(&self) -> Self {
        Var::exp(*self)
    }
}
