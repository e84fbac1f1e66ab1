//! Dense `f64` tensors and a tape that records operations for reverse-mode
//! differentiation. Sized for training small convolutional residual
//! networks on a CPU.

mod error;
mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId, OpKind, Precision, RunningStats};
pub use tensor::{Tensor, NTTN_MAGIC, NTTN_VERSION};
