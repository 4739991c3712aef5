//! Dense `f64` tensors with a define-by-run reverse-mode tape.

mod gradcheck;
mod params;
mod suite;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, GradCheckReport, DEFAULT_STEP};
pub use params::{ParamId, ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use suite::primitive_suite;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

