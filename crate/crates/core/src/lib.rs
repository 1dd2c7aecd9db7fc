//! Energy disaggregation with a scale- and context-aware network.
//!
//! The crate covers the whole workflow: synthetic households ([`sim`]),
//! channel files and windowed samples ([`data`], [`pipeline`]), the network
//! and its baselines ([`model`], [`layers`]), supervised and adversarial
//! training ([`train`]), full-sequence inference and scores ([`metrics`]),
//! and diagnostic exports ([`analysis`]). [`commands`] strings these together
//! the way the `scanet` binary does.

pub mod analysis;
pub mod checkpoint;
pub mod commands;
pub mod data;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
pub use model::{Features, ForwardOptions, Model, ModelConfig, ModelKind};
