//! Federated prototype learning with dual-level clustering and an
//! α-sparsity prototype loss, simulated on synthetic multi-domain data.
//!
//! The crate is organised bottom-up: [`numerics`] and [`model`] provide the
//! network, [`losses`] the local objective, [`clustering`] and
//! [`prototypes`] the prototype pipeline, [`federation`] the round loop, and
//! [`config`], [`metrics`] and [`experiment`] the experiment runner.

pub mod clustering;
pub mod config;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod prototypes;

pub use config::{parse_config, ExperimentConfig};
pub use error::{Error, Result};
pub use experiment::{run_experiment, run_preset};
pub use federation::run_training;
pub use metrics::{emit_csv, MetricsLog};
