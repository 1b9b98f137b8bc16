//! Scalar abstractions shared by every numeric routine in the crate.
//!
//! [`Scalar`] is the ordered-field surface the transport solver and the
//! protocol arithmetic need; it is implemented for `f32`, `f64` and the
//! exact [`Rational`] type. [`Real`] adds the transcendental operations
//! (square roots, exponentials) required by cosine costs, softmax and
//! Procrustes alignment, and is only implemented for the IEEE types.

use std::fmt::Debug;

use num_rational::Ratio;
use num_traits::{Float, FromPrimitive, Num, Signed, ToPrimitive};

/// Exact rational arithmetic, used to check solver results without rounding.
pub type Rational = Ratio<i128>;

pub trait Scalar:
    Num + Signed + Copy + PartialOrd + FromPrimitive + ToPrimitive + Debug + Send + Sync + 'static
{
    /// Slack used when deciding whether a reduced cost is negative.
    fn tolerance() -> Self;

    /// Mass perturbation applied by the network simplex to break degeneracy.
    /// Zero disables it.
    fn perturbation() -> Self;

    fn is_finite_scalar(&self) -> bool;

    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("value representable in scalar type")
    }

    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    fn to_f64_lossy(&self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn min_of(self, other: Self) -> Self {
        if other < self {
            other
        } else {
            self
        }
    }

    fn max_of(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }
}

impl Scalar for f64 {
    fn tolerance() -> Self {
        1e-12
    }

    fn perturbation() -> Self {
        1e-12
    }

    fn is_finite_scalar(&self) -> bool {
        self.is_finite()
    }
}

impl Scalar for f32 {
    fn tolerance() -> Self {
        1e-6
    }

    // f32 cannot resolve a 1e-12 shift on unit-scale masses; Bland's rule
    // alone guarantees termination.
    fn perturbation() -> Self {
        0.0
    }

    fn is_finite_scalar(&self) -> bool {
        self.is_finite()
    }
}

impl Scalar for Rational {
    fn tolerance() -> Self {
        Ratio::from_integer(0)
    }

    fn perturbation() -> Self {
        Ratio::from_integer(0)
    }

    fn is_finite_scalar(&self) -> bool {
        true
    }
}

pub trait Real: Scalar + Float {}

impl Real for f32 {}
impl Real for f64 {}

/// Numerically stable softmax at temperature one.
pub fn softmax<T: Real>(values: &[T]) -> Vec<T> {
    let max = values
        .iter()
        .copied()
        .fold(T::neg_infinity(), |m, v| if v > m { v } else { m });
    let exps: Vec<T> = values.iter().map(|&v| (v - max).exp()).collect();
    let total = exps.iter().fold(T::zero(), |acc, &e| acc + e);
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}
