//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Ops cover what an encoder-only Transformer needs: matmul, elementwise
//! arithmetic, softmax, layer normalization, GELU, row gathers, masked
//! multi-head attention and softmax cross-entropy. The engine is generic over
//! [`Scalar`] so the same graph runs in `f32` for training and `f64` for
//! finite-difference checks.

mod error;
pub mod gradcheck;
pub mod layers;
mod scalar;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use layers::{encoder_layer_forward, Dropout, EncoderLayerVars, LAYER_NORM_EPS};
pub use scalar::Scalar;
pub use tape::{AttentionSpec, Tape, Var, MASK_LOGIT};
pub use tensor::Tensor;
