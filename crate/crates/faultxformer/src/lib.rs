//! FaultXformer: dual-stage transformer-encoder pipeline for fault-type
//! classification and fault-location identification from PMU positive-sequence
//! current sequences.
//!
//! The crate is organized around the data flow:
//!
//! 1. [`phasor`] synthesizes positive-sequence PMU current sequences for the
//!    IEEE 13-node feeder fault catalog, and [`dataset`] enumerates scenario
//!    grids into datasets.
//! 2. [`pipeline`] persists datasets, normalizes channels, adapts sequence
//!    length, and plans stratified folds.
//! 3. [`model`] implements the two-stage encoder with exact published shapes,
//!    on top of the [`numerics`] autodiff tape.
//! 4. [`training`] runs the task training loops and cross-validation.
//! 5. [`experiments`] reproduces the evaluation studies (noise, DER, ablation,
//!    attention maps, latency).

pub mod dataset;
pub mod error;
pub mod exec;
pub mod experiments;
pub mod model;
pub mod numerics;
pub mod phasor;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
