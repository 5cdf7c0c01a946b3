//! Scalar abstraction shared by the dense kernels.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real floating-point element type the linear-algebra kernels are generic over.
///
/// Implemented for `f32` and `f64`. The extraction pipeline itself always runs
/// in `f64`; `f32` exists for callers who want cheaper kernels on their own data.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`; panics only on types that cannot represent
    /// finite doubles at all, which no implementor does.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
