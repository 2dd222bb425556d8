//! Interaction-aware vehicle trajectory forecasting: multi-modal state
//! preprocessing, sparse-autoencoder vehicle descriptors, LSTM history
//! encoding, dilated-convolution social pooling over a road occupancy grid and
//! a maneuver-conditioned decoder emitting bivariate-Gaussian forecasts.

pub mod data;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod predictor;
pub mod preprocess;
pub mod social;
pub mod ssae;

pub use error::{Error, Result};
