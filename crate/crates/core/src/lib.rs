//! Multisensory multitask adapters that condition a frozen byte-level language
//! model on synthetic IoT sensor streams.

pub mod adapter;
pub mod autodiff;
pub mod chat;
pub mod checkpoint;
pub mod dataset;
pub mod diagnostics;
pub mod digest;
pub mod encoders;
pub mod error;
pub mod experiments;
pub mod fusion;
pub mod gradcheck;
pub mod lm;
pub mod metrics;
pub mod nn;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
