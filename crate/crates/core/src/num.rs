//! Scalar abstraction for the core math.
//!
//! All probability and loss arithmetic is written against [`Scalar`] so the
//! same code runs in `f32` or `f64`. The trainer and acceptance suites pin
//! `f64`; `f32` exists for quick sanity runs and to keep the math honest
//! about precision assumptions.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 -> scalar conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar -> f64 conversion")
    }
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + AddAssign
        + SubAssign
        + MulAssign
        + DivAssign
        + Sum
        + Debug
        + Display
        + Default
        + Send
        + Sync
        + 'static
{
}

/// Numerically stable `log(sigmoid(x)) = -softplus(-x)`.
pub fn log_sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        -(S::one() + (-x).exp()).ln()
    } else {
        x - (S::one() + x.exp()).ln()
    }
}

/// Logistic function `1 / (1 + exp(-x))`.
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `log(sum_i exp(x_i))` with the usual max shift.
pub fn log_sum_exp<S: Scalar>(xs: &[S]) -> S {
    let m = xs.iter().cloned().fold(S::neg_infinity(), S::max);
    if m == S::neg_infinity() {
        return S::neg_infinity();
    }
    let s: S = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}
