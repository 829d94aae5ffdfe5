//! The recommendation network: item embedding, stacked time-aware SSD
//! layers with feed-forward blocks, and a tied-embedding prediction head.

pub mod checkpoint;
mod config;
mod network;
mod params;

pub use config::ModelConfig;
pub(crate) use config::parse;
pub use network::Model;
pub use params::{init_params, Bound, ParamStore, EMBEDDING};

/// Layer-norm epsilon used throughout the network.
pub const LN_EPS: f64 = 1e-12;
