//! Dense tensors, tape-based reverse-mode autodiff, Adam, and a seedable RNG.

pub mod adam;
pub mod checkpoint;
pub mod functional;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use functional::{gumbel_st_sample, linear, softmax_cross_entropy};
pub use params::{ParamId, ParamStore};
pub use rng::Rng;
pub use tape::{AttentionSpec, Axis, Gradients, Tape, Var};
pub use tensor::Tensor;
