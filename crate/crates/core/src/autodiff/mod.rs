//! Dense `f64` tensors with a dynamic reverse-mode tape.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, CoordinateError, GradCheckReport};
pub use params::{Gradients, NamedParam, ParamId, ParamStore};
pub use tape::{BackwardRule, Tape, Var};
pub use tensor::{Tensor, TensorError, TensorResult};
pub(crate) use tensor::gemm_acc;
