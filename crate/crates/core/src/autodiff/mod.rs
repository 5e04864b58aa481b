//! Dense tensors and a tape-based reverse-mode differentiator covering the
//! layer set used by the encoder, decoder and discriminator.

mod conv;
mod graph;
mod tensor;

pub use graph::{Activation, BatchNormStats, BnMode, Graph, Var};
pub use tensor::{DType, Element, Tensor};
