//! Dense tensors, reverse-mode gradients, initialization, optimization and
//! gradient verification.

pub mod checkpoint;
pub mod gradcheck;
pub mod init;
pub mod ops;
pub mod store;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use init::xavier_init;
pub use ops::{cross_entropy, layer_norm, softmax};
pub use store::{AdamConfig, ParamStore};
pub use tape::{AttentionShape, Tape, Var};
pub use tensor::{Real, Tensor};
