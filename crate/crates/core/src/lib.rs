//! Three-tower contrastive training on synthetic paired data.
//!
//! A frozen pretrained embedding table feeds a third tower whose projections act as
//! extra contrastive targets for the image and text towers. The same code trains the
//! two-tower baseline and the locked-tower variant for comparison.
//!
//! Math is generic over [`Scalar`] (`f32` or `f64`); data generation, the RNG and file
//! I/O work in `f64`. The aliases below fix the scalar to `f64`.

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod numerics;
pub mod scalar;
pub mod towers;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix = numerics::DenseMatrix<f64>;
pub type Matrix32 = numerics::DenseMatrix<f32>;
pub type Model = towers::Model<f64>;
pub type Model32 = towers::Model<f32>;
pub type Batch = towers::Batch<f64>;
pub type Pretrained = towers::Pretrained<f64>;
pub type HeadOutputs = losses::HeadOutputs<f64>;
pub type LossBreakdown = losses::LossBreakdown<f64>;
