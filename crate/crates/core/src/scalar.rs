//! Scalar abstraction for the analytical core.
//!
//! The closed-form rate bounds and allocation rules are generic over the
//! floating-point type so they can run in `f32` or `f64`. Simulation code
//! (channel draws, Monte Carlo) is fixed at `f64`.

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign};
use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

/// Floating-point scalar usable throughout the analytical core.
pub trait FloatT:
    'static
    + Send
    + Sync
    + Float
    + FloatConst
    + NumAssign
    + FromPrimitive
    + Sum
    + Debug
    + Display
    + LowerExp
    + Default
{
    /// Shorthand conversion from an `f64` constant.
    #[inline]
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("constant not representable in scalar type")
    }

    /// Shorthand conversion from an index / count.
    #[inline]
    fn of(n: usize) -> Self {
        Self::from_usize(n).expect("count not representable in scalar type")
    }

    /// log2(e) in the scalar type.
    #[inline]
    fn log2_e() -> Self {
        Self::c(std::f64::consts::LOG2_E)
    }
}

impl FloatT for f32 {}
impl FloatT for f64 {}

/// Neumaier (improved Kahan) compensated accumulator.
///
/// Besides the compensated value it tracks the sum of absolute terms, which
/// bounds the cancellation-induced absolute error as `eps * abs_sum`.
#[derive(Clone, Copy, Debug)]
pub struct CompensatedSum<F> {
    sum: F,
    comp: F,
    abs_sum: F,
}

impl<F: FloatT> Default for CompensatedSum<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: FloatT> CompensatedSum<F> {
    pub fn new() -> Self {
        Self {
            sum: F::zero(),
            comp: F::zero(),
            abs_sum: F::zero(),
        }
    }

    #[inline]
    pub fn add(&mut self, x: F) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
        self.abs_sum += x.abs();
    }

    /// Compensated value of the sum.
    #[inline]
    pub fn value(&self) -> F {
        self.sum + self.comp
    }

    /// Sum of |terms|; `eps * abs_sum()` bounds rounding/cancellation error.
    #[inline]
    pub fn abs_sum(&self) -> F {
        self.abs_sum
    }
}
