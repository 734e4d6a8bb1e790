//! Non-autoregressive joint intent detection and slot filling with two-pass
//! refinement, a linear-chain CRF baseline, chunk-level metrics and a latency
//! harness.

pub mod bench;
pub mod config;
pub mod corpus;
pub mod crf;
pub mod encoder;
pub mod error;
pub mod numerics;
pub mod refine;
pub mod synth;
pub mod tagcodec;
pub mod trainer;
pub mod verify;

pub use corpus::{Batch, Split, Utterance, Vocab};
pub use encoder::{EncoderConfig, Model};
pub use error::{Error, Result};
pub use refine::{Mode, Prediction, Refiner};
pub use tagcodec::{Labels, MetricsReport};
pub use trainer::{RunReport, TrainConfig};
