//! Deterministic cross-silo federated learning simulator.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] dense arrays and a reverse-mode tape,
//! * [`models`] the model zoo plus trunk/head splitting,
//! * [`datasets`] MNIST/CIFAR loaders and synthetic fixtures,
//! * [`partition`] IID and label-sharded client splits,
//! * [`losses`] cross-entropy, distillation and the mutual-learning objectives,
//! * [`federation`] FedAvg, FedProx and federated mutual learning.

pub mod datasets;
pub mod error;
pub mod federation;
pub mod gradcheck;
pub mod losses;
pub mod models;
pub mod partition;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub use tensor::{Element, Tensor};
