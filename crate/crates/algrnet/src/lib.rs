//! ALGRNet: adaptive local-global relational network for facial action unit
//! detection and facial palsy grade estimation.
//!
//! The crate provides the full training/evaluation stack: landmark-driven
//! adaptive muscle-region attention, a skip-BiLSTM relational module over the
//! region branches, gated local-global fusion with a convolutional refiner,
//! joint alignment/classification losses, a synthetic data generator for
//! desk-scale verification, and the metrics used to report results.

pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod heads_losses;
pub mod params;
pub mod relational;

pub use error::{Error, Result};
