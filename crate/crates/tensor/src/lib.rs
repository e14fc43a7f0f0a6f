//! Small dense tensor engine with reverse-mode differentiation.
//!
//! Everything is generic over [`Scalar`] so the same model code runs in
//! single precision for training and in double precision for exactness
//! and finite-difference checks. All kernels are single-threaded with a fixed
//! reduction order, which makes results reproducible bit for bit.

pub mod optim;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use optim::{AdamW, AdamWConfig};
pub use params::{Bound, ParamId, ParamStore};
pub use scalar::{gemm, DType, Scalar};
pub use tape::{AttentionMask, ConvGeom, Grads, Piece, Tape, Var};
pub use tensor::Tensor;
