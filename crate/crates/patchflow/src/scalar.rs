//! Scalar abstraction for the numeric core.
//!
//! The low-level math (kernels, sphere quadrature, Hölder estimators,
//! determinant machinery) is generic over [`Scalar`]; the simulation stack
//! instantiates everything at `f64` via the crate-root aliases.

use num_traits::float::FloatConst;
use num_traits::{Float, NumAssign};
use std::fmt::{Debug, Display};
use std::iter::Sum;

pub trait Scalar:
    Float + FloatConst + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64` literals.
    fn of(v: f64) -> Self {
        Self::from(v).expect("finite f64 converts to any Scalar")
    }

    fn of_usize(v: usize) -> Self {
        Self::from(v).expect("usize converts to any Scalar")
    }
}

impl<T> Scalar for T where
    T: Float + FloatConst + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
}
