//! Minimal reverse-mode automatic differentiation for small transformer
//! models: row-major tensors, a rebuild-per-step computation graph, a named
//! parameter registry, and a finite-difference gradient checker.

mod error;
pub mod gradcheck;
mod graph;
mod registry;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_sweep, probe_loss, GradCheckEntry, GradCheckReport};
pub use graph::{Gradients, Graph, Segment, Var, VjpFn};
pub use registry::{Bound, Group, Param, ParamRegistry};
pub use scalar::{DType, Scalar};
pub use tensor::{matmul_plain, Tensor};
