//! Attribute-guided dual-branch network for vehicle re-identification.
//!
//! The crate covers the whole desk-scale pipeline: synthetic and manifest
//! datasets ([`data`]), the network with hand-written backward passes
//! ([`model`]), training objectives ([`losses`]), the training loop with
//! checkpointing ([`training`]), retrieval evaluation ([`evaluation`]) and a
//! finite-difference gradient harness ([`gradcheck`]). [`cli`] ties them
//! together behind the `agnet` binary.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
