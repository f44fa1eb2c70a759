//! Minimal differentiable numeric core.
//!
//! Forward primitives append to a [`Tape`]; [`Tape::backward`] replays it in
//! reverse and returns gradients for every named leaf that requires one.
//! Primitives work on fused blocks (graph convolution, temporal convolution)
//! rather than scalar ops, which keeps the tape short enough to train the
//! backbone at desk scale.

mod adam;
pub mod gradcheck;
mod kernels;
mod param;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use param::{decode_checkpoint, encode_checkpoint, Checkpoint, Parameter, CHECKPOINT_VERSION};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
