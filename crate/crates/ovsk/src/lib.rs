//! Open-vocabulary segmentation kit.
//!
//! A desk-scale, fully testable segmentation pipeline: two frozen toy image
//! encoders fused into a feature pyramid, a query-based mask decoder that
//! emits three embedding streams per query (trained, mask-attention, and
//! frozen), a matched segmentation loss with a semantic-structure term, and
//! inference that balances the streams per class split before classifying
//! masks against text embeddings.
//!
//! The numeric core (`numerics`) is generic over its scalar type; the
//! pipeline itself runs on the `f64` aliases exported below, since all
//! verification rests on finite-difference gradient checks.

pub mod decoder;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod inference;
pub mod losses;
pub mod numerics;

pub use error::{Error, Result};

/// Pipeline tensor type: 64-bit elements.
pub type Tensor = numerics::Tensor<f64>;
/// Single-precision alias for callers that trade precision for space.
pub type Tensor32 = numerics::Tensor<f32>;
