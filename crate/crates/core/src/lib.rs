//! Progressive stage-wise fine-tuning for a small Transformer encoder.
//!
//! The crate contains a reverse-mode `f64` tensor engine ([`tensor`]), a
//! BERT-style encoder with tagged parameters ([`model`]), Adapter / BitFit /
//! LoRA selections ([`peft`]), the stage schedules and updated-parameter
//! accounting ([`schedule`]), a training loop that enforces the schedule's
//! freezes ([`trainer`]) and the task, checkpoint, config and CLI plumbing.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod export;
pub mod model;
pub mod peft;
pub mod schedule;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
