//! Differentiable-computation substrate: dense tensors, a reverse-mode
//! tape and a finite-difference gradient checker.

pub mod check;
pub mod tape;
pub mod tensor;

pub use check::{grad_check, CheckOutcome, GradCheckReport, ParamSpec, ParamStatus};
pub use tape::{sigmoid, Gradients, NumericsError, Tape, VarId};
pub use tensor::{Tensor, TensorError};
