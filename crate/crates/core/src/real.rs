use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

/// Scalar type of images, activations and parameters.
///
/// Training runs in `f32`; gradient and adjoint verification runs in `f64`.
/// Global reductions (norms, inner products) always accumulate in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite real")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Inner product accumulated in `f64` in index order.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x.f64() * y.f64()).sum()
}

pub fn norm<T: Real>(a: &[T]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cast_slice<A: Real, B: Real>(a: &[A]) -> Vec<B> {
    a.iter().map(|&x| B::c(x.f64())).collect()
}
