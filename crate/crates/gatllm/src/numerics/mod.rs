//! Dense-tensor algebra with reverse-mode automatic differentiation and the
//! Adam optimizer. 64-bit reals throughout; everything is deterministic for
//! identical inputs.

pub mod adam;
pub mod check;
pub mod tape;
pub mod tensor;

pub use adam::AdamState;
pub use check::{finite_diff_check, finite_diff_check_multi};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
