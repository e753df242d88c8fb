//! Desk-scale multimodal (text + vision) transformer classifier.
//!
//! Modules build up from a from-scratch reverse-mode tensor engine to the
//! full fusion classifier, adapters, data pipeline, and training loop.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod features;
pub mod fusion;
pub mod golden;
pub mod lora;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod tolerances;
pub mod train;
pub mod verify;

pub use error::{Error, ErrorClass, Result};
pub use rng::Rng;
pub use tensor::{grad_check, grad_check_many, GradCheckReport, Tensor};
