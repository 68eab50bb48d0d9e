//! Minimal dense-tensor algebra with reverse-mode differentiation.
//!
//! Tensors are row-major `Vec`s of a [`Scalar`] element type with optional
//! gradient buffers. Differentiable operations record themselves onto an
//! implicit tape (reverse creation order is the replay order), [`backward`]
//! fills leaf gradients from a scalar loss, and [`finite_diff_check`] is the
//! central-difference oracle used to validate every gradient rule.

mod attention;
mod autodiff;
mod ops;
mod scalar;
mod spatial;
mod tensor;

pub use attention::{multi_head_attention, scaled_dot_product_attention, AttentionParams};
pub use autodiff::{backward, finite_diff_check, GradTape};
pub use ops::{concat, cosine_similarity};
pub use scalar::Scalar;
pub use tensor::Tensor;
