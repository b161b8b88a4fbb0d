//! Numeric core: tensors, reverse-mode tape, optimizer, schedule, RNG.

pub mod param;
pub mod rng;
pub mod schedule;
pub mod tape;
pub mod tensor;

pub use param::{AdamW, Module, Parameter};
pub use rng::{RngState, RngStream};
pub use schedule::LrSchedule;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{affine_kernel, sigmoid, softmax, Tensor};

/// Activation kinds used by the SuperNet and the gate MLPs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Softmax,
}

/// Applies an activation on the tape.
pub fn activation(tape: &mut Tape, x: Var, kind: Activation) -> crate::Result<Var> {
    match kind {
        Activation::Relu => Ok(tape.relu(x)),
        Activation::Sigmoid => Ok(tape.sigmoid(x)),
        Activation::Softmax => tape.softmax(x),
    }
}
