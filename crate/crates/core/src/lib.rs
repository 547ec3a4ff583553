//! Prompt-tuned model chains that share KV hidden states.

pub mod autodiff;
pub mod bench;
pub mod chain;
pub mod layout;
pub mod model;
pub mod rope;
pub mod tasks;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use autodiff::{Graph, Var};
pub use layout::{MaskPolicy, ModelId, SegmentLayout, SegmentRole};
pub use tensor::{Scalar, Tensor, TensorError};
