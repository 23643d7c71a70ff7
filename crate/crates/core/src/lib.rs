//! Long Short-Term Memory-Networks.
//!
//! An LSTMN is an LSTM whose single memory cell is replaced by growing
//! hidden and memory tapes, read at every step through intra-attention.
//! This crate provides the recurrence, encoder-decoder variants with shallow
//! and deep attention fusion, task heads, the training recipe, data
//! pipelines, and the `lstmn` command-line tool, all on top of a small
//! reverse-mode differentiation engine.

pub mod autodiff;
pub mod cells;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod heads;
pub mod model;
pub mod optim;
pub mod params;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
