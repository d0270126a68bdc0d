//! Split federated learning with probabilistic mask training.
//!
//! Clients never train weights. They learn keep probabilities over a frozen,
//! randomly initialized network, send the server a sampled binary mask at
//! the end of each round, and let the server average the masks.

pub mod attack;
pub mod compensation;
pub mod data;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod mask;
pub mod net;
pub mod personalization;
pub mod privacy;
pub mod protocol;
pub mod rng;
pub mod wire;

pub use error::{Error, Result};
