//! Dense NCHW tensors and a Wengert tape for reverse-mode differentiation.
//!
//! Every adjoint is itself recorded with tape operations, so gradients can be
//! differentiated again (`Tape::grad` with `create_graph = true`). The fused
//! instance-norm kernel is the one exception: it supports first-order
//! gradients only.

mod error;
mod float;
pub mod gradcheck;
pub mod init;
mod kernels;
mod param;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use float::Float;
pub use gradcheck::{grad_check, GradCheckReport, ParamCheck};
pub use kernels::{conv_out_size, conv_transpose_out_size};
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use tape::{CustomOp, Tape, Var};
pub use tensor::Tensor;
