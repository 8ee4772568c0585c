//! Factorized sparse self-attention on the CPU.
//!
//! The crate covers the whole stack: dense tensors with reverse-mode
//! autodiff and checkpointed recomputation ([`tape`]), strided and fixed
//! connectivity patterns with validity analysis and block-sparse layouts
//! ([`patterns`]), dense and block-sparse attention kernels ([`attention`]),
//! the pre-activation residual network ([`model`]), and the optimizer,
//! schedules, evaluation and sampling ([`training`]).

pub mod attention;
pub mod error;
pub mod model;
pub mod nn;
pub mod patterns;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tape::{finite_diff_grad, CustomOp, Gradients, SegmentFn, Tape, Var};
pub use tensor::Tensor;
