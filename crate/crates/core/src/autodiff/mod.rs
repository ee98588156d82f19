//! Dense tensors and a tape for reverse-mode differentiation.
//!
//! The op set is small and closed: everything the language model and the
//! merging objective need is a composition of the methods on [`Tape`].

mod kernels;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use kernels::softmax_into;
