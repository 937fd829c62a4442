//! Minimal differentiable feed-forward machinery.
//!
//! Networks keep their parameters in one flat buffer so optimizers, target-network
//! averaging, checkpoints and finite-difference checks all operate on plain slices.
//! Everything is generic over [`Scalar`]: training runs in `f32`, gradient checks run
//! the same code in `f64`.

pub mod adam;
mod embed;
pub mod gradcheck;
mod mlp;

pub use adam::{Adam, AdamConfig};
pub use embed::TimeEmbedding;
pub use mlp::{mish, mish_grad, Mlp, Tape};

use std::fmt::Debug;
use std::iter::Sum;

/// Floating-point element type used by networks and losses.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + Debug
    + Default
    + Sum
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` constant.
    fn c(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn c(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn c(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

/// `dst += scale * src`, elementwise.
pub fn axpy<F: Scalar>(dst: &mut [F], scale: F, src: &[F]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + scale * s;
    }
}
