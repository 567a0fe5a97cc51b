//! Dense f64 tensors and a Wengert-list reverse-mode tape.
//!
//! Everything differentiable in this crate is built from the op set on
//! [`Tape`]; training and decoding share the same kernels, decoding simply
//! records with `requires_grad` off.

mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::{logaddexp, logsumexp, Tensor};
