//! Scalar abstraction so the whole simulation pipeline runs in either f32 or f64.

use nalgebra::RealField;

/// 2D vector in the active precision.
pub type Vec2<T> = nalgebra::Vector2<T>;
/// 2x2 matrix in the active precision.
pub type Mat2<T> = nalgebra::Matrix2<T>;
/// Flattened 4th-order tensor over 2x2 matrices, row-major pair indexing
/// (alpha,beta) -> 2*alpha+beta.
pub type Mat4<T> = nalgebra::Matrix4<T>;

/// Floating-point scalar the simulator is generic over.
pub trait Real: RealField + Copy + Default + Send + Sync + 'static {
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Epsilon inside the friction-projection sqrt, keeping the tangential
    /// speed and its gradient finite at zero tangential velocity.
    fn friction_eps() -> Self;

    fn of_usize(v: usize) -> Self {
        Self::of_f64(v as f64)
    }
}

impl Real for f32 {
    #[inline]
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn friction_eps() -> Self {
        1e-7
    }
}

impl Real for f64 {
    #[inline]
    fn of_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn friction_eps() -> Self {
        1e-12
    }
}

/// Convert an f64 2-vector into the active precision.
#[inline]
pub fn vec2_from_f64<T: Real>(v: [f64; 2]) -> Vec2<T> {
    Vec2::new(T::of_f64(v[0]), T::of_f64(v[1]))
}
