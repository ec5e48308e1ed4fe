//! Floating point scalar abstraction shared by the numeric kernels
//! (signal synthesis, path loss, smoothing and summary statistics).

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumCast, ToPrimitive};

/// floating point: f32 or f64
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumCast + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal or measurement.
    fn of(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 converts to every Scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
