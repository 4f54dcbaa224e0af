//! Scalar abstractions shared by the geometric code.
//!
//! Rendering and mesh math are written against [`Real`] so the same code runs
//! in `f32` (the default, matching on-disk formats) or `f64`. Patch placement
//! only needs ordered field arithmetic plus floor, so it is written against
//! [`PlanScalar`], which also admits exact rationals.

use std::fmt::Debug;

use num_rational::Rational64;
use num_traits::{Float, FromPrimitive, Num, ToPrimitive};

/// Floating point scalar used by geometry and rasterization.
pub trait Real: Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + 'static {
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    #[inline]
    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).expect("usize representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Ordered field scalar for placement arithmetic.
pub trait PlanScalar: Num + Clone + PartialOrd + Debug + Send + Sync + 'static {
    fn from_count(v: usize) -> Self;
    /// Largest integer not greater than `self`.
    fn floor_i64(&self) -> i64;
    fn to_f64_lossy(&self) -> f64;

    /// Round to nearest, halves rounding up.
    fn round_half_up(&self) -> i64 {
        let half = Self::one() / (Self::one() + Self::one());
        (self.clone() + half).floor_i64()
    }
}

macro_rules! float_plan_scalar {
    ($t:ty) => {
        impl PlanScalar for $t {
            fn from_count(v: usize) -> Self {
                v as $t
            }
            fn floor_i64(&self) -> i64 {
                Float::floor(*self) as i64
            }
            fn to_f64_lossy(&self) -> f64 {
                *self as f64
            }
        }
    };
}

float_plan_scalar!(f32);
float_plan_scalar!(f64);

impl PlanScalar for Rational64 {
    fn from_count(v: usize) -> Self {
        Rational64::from_integer(v as i64)
    }
    fn floor_i64(&self) -> i64 {
        self.floor().to_integer()
    }
    fn to_f64_lossy(&self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

#[inline]
pub(crate) fn sub3<S: Real>(a: [S; 3], b: [S; 3]) -> [S; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn dot3<S: Real>(a: [S; 3], b: [S; 3]) -> S {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn cross3<S: Real>(a: [S; 3], b: [S; 3]) -> [S; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub(crate) fn normalize3<S: Real>(a: [S; 3]) -> [S; 3] {
    let n = dot3(a, a).sqrt();
    if n > S::zero() {
        [a[0] / n, a[1] / n, a[2] / n]
    } else {
        a
    }
}
