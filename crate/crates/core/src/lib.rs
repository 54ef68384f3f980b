//! Bird-eye transformer language modelling on a small dense autograd kernel.

pub mod analyzer;
pub mod attention;
pub mod bet;
pub mod gradcheck;
pub mod harness;
pub mod tape;
pub mod syntax;
pub mod tensor;

pub use tape::{Tape, Var};
pub use tensor::{BoolMask, Tensor, TensorError};
