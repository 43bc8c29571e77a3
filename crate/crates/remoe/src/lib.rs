//! Recurrent-routing mixture-of-experts layers on a small trainable
//! transformer: LoRA-fused experts over a frozen backbone, a shared router
//! reused across T rounds, and a low-rank GRU that folds each round's
//! expert mixture back into the next round's input.
//!
//! The crate ships the tensor/autodiff engine, the model, a training loop
//! with a load-balance penalty, synthetic tasks, checkpointing, a
//! finite-difference gradient checker, a latency profiler, and workload
//! analyzers — all behind the `remoe` CLI.

pub mod analyze;
pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod context;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod gru;
pub mod layer;
pub mod lora;
pub mod model;
pub mod param;
pub mod profile;
pub mod routing;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use config::{Config, ModelConfig, TaskConfig, TrainConfig};
pub use context::ForwardCtx;
pub use error::{Error, Result};
pub use model::{parameter_census, DecodeSession, Init, Model};
pub use scalar::{Dtype, Scalar};
pub use tensor::{Tape, Tensor};
