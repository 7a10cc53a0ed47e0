//! Floating-point abstraction shared by the numerical kernels.
//!
//! The clustering, CAV and dot-product code is written once against
//! [`Scalar`] and instantiated for `f32` (activation matrices coming out of a
//! backend) and `f64` (oracles, statistics, small exact problems).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` constant.
    fn of(value: f64) -> Self {
        Self::from_f64(value).expect("f64 constant representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dot product accumulated in `f64` regardless of the storage type.
pub fn dot_f64<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x.as_f64() * y.as_f64())
        .sum()
}

const LANES: usize = 8;

/// Squared Euclidean distance, accumulated in the storage type.
///
/// Eight independent partial sums keep the loop vectorisable; the summation
/// order is fixed, so results are reproducible across runs and platforms.
pub fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [T::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            let d = x[l] - y[l];
            lanes[l] += d * d;
        }
    }
    let mut acc = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        let d = x - y;
        acc += d * d;
    }
    lanes.iter().fold(acc, |s, &v| s + v)
}
