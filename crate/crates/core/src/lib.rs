//! LAWCAT: linear attention with causal Conv1D across time.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: dense f64 tensors, a reverse-mode gradient tape and a
//!   finite-difference gradient checker.
//! * [`attn_ref`]: causal softmax attention, rotary embeddings and
//!   sliding-window attention used as teacher blocks and oracles.
//! * [`lawcat`]: causal depthwise convolution, shared feature map, low-rank
//!   gate and normalized gated linear attention in recurrent, chunked and
//!   quadratic forms, plus streaming inference.
//! * [`model`]: desk-scale teacher/student language models and LoRA.
//! * [`distill`]: layer-wise MSE distillation, LoRA fine-tuning, AdamW and
//!   learning-rate schedules, and the ablation presets.
//! * [`tasks`]: synthetic passkey / needle-in-a-haystack generators and the
//!   exact-match evaluator.
//! * [`bench`]: the prefill latency harness and scaling-exponent fit.
//! * [`checkpoint`]: the named-array container shared by every saved model.

pub mod attn_ref;
pub mod bench;
pub mod checkpoint;
pub mod distill;
pub mod error;
pub mod lawcat;
pub mod model;
pub mod numerics;
pub mod tasks;

pub use error::{Error, Result};
pub use numerics::{Tape, Tensor, Var};
