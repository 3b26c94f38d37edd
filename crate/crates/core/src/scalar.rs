//! Floating-point scalar abstraction.
//!
//! Every numeric routine in the crate is generic over [`Scalar`], which is
//! implemented for `f32` and `f64`. Checkpoints are always written as `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point type usable by kernels, layers and optimizers.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + Sum
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal; lossy for `f32`.
    fn lit(v: f64) -> Self;

    fn from_count(n: usize) -> Self {
        Self::lit(n as f64)
    }

    fn as_f64(self) -> f64;

    /// `ln(2π)`
    fn ln_two_pi() -> Self {
        Self::lit((2.0 * std::f64::consts::PI).ln())
    }
}

impl Scalar for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Numerically stable `log(sum(exp(xs)))`. Returns `-inf` for an empty or
/// all `-inf` input.
pub fn log_sum_exp<T: Scalar>(xs: impl IntoIterator<Item = T> + Clone) -> T {
    let max = xs
        .clone()
        .into_iter()
        .fold(T::neg_infinity(), |m, x| if x > m { x } else { m });
    if max == T::neg_infinity() {
        return max;
    }
    if max == T::infinity() {
        return max;
    }
    let sum: T = xs.into_iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Writes the log-softmax of `xs` into `out`.
pub fn log_softmax_into<T: Scalar>(xs: &[T], out: &mut [T]) {
    debug_assert_eq!(xs.len(), out.len());
    let lse = log_sum_exp(xs.iter().copied());
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = x - lse;
    }
}

/// Writes the softmax of `xs` into `out` using max subtraction.
pub fn softmax_into<T: Scalar>(xs: &[T], out: &mut [T]) {
    debug_assert_eq!(xs.len(), out.len());
    let max = xs
        .iter()
        .copied()
        .fold(T::neg_infinity(), |m, x| if x > m { x } else { m });
    let mut total = T::zero();
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}
