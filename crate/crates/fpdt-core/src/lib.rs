//! Simulation, offline-dataset, training, and evaluation library for
//! federated prompt-based decision-transformer resource allocation on
//! simulated MEC servers streaming attention-tiled VR content.
//!
//! Pipeline: [`behavior`] policies roll out [`env::MecEnv`] episodes into
//! [`trajectory::DatasetShard`]s; [`fedavg`] pre-trains the [`model`]
//! across shards; [`eval`] scores the pre-trained policy on unseen user
//! environments. The `fpdt` binary drives everything from a TOML config.

pub mod behavior;
pub mod config;
pub mod container;
pub mod env;
pub mod error;
pub mod eval;
pub mod fedavg;
pub mod gaze;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod trajectory;

pub use config::AppConfig;
pub use error::{Error, Result};
