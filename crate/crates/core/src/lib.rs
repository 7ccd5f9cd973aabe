//! Fault-hardened small neural networks.
//!
//! Networks store every parameter as a Q15.16 fixed-point word. After
//! conventional training, hidden ReLUs are swapped for per-neuron bounded
//! activations whose bounds are tuned in a separate post-training pass, and
//! the result is evaluated under Monte-Carlo bit-flip injection on parameter
//! memory.
//!
//! Module map:
//! - [`numerics`]: fixed point, tensors, bit flips
//! - [`network`]: layer stacks, inference, model files, fault-space census
//! - [`activations`]: ReLU, GBReLU, FitReLU and bound calibration
//! - [`training`]: accuracy training, bound post-training, ADAM
//! - [`faultsim`]: fault sampling and injection
//! - [`harness`]: datasets, campaigns, sweeps, overhead and reports

pub mod activations;
pub mod data;
pub mod error;
pub mod faultsim;
pub mod harness;
pub mod network;
pub mod numerics;
pub mod training;

pub use data::Dataset;
pub use error::{Error, Result};
pub use network::Network;
