//! Personalized federated learning by mixing a federated and a local model.
//!
//! Every client trains two networks of the same shape: a federated model
//! that is averaged by the server, and a local model that never leaves the
//! client. Training always happens on a random point of the line between
//! them, `W(λ) = (1 - λ) w_f + λ w_l`, with a proximal pull of `w_f` toward
//! the global model and a squared-cosine penalty that keeps the two
//! endpoints apart. The result is a connected subspace of models from which
//! each client may pick the mixture that suits its data.
//!
//! The crate is a deterministic single-process simulator. Modules, bottom-up:
//!
//! - [`nn`]: dense ReLU networks, softmax cross-entropy, manual backprop, SGD
//! - [`mixing`]: λ sampling, mixing and the regularizers
//! - [`data`]: IDX loading, synthetic blobs, non-IID partitions, label noise
//! - [`federation`]: the local update and the server round loop
//! - [`evaluation`]: accuracy, calibration, λ sweeps and loss planes
//! - [`experiment`]: configs, presets, orchestration and output files

pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod federation;
pub mod mixing;
pub mod nn;
pub mod rng;

pub use error::{Error, Result};
pub use federation::{ClientState, FedConfig, LocalInit};
pub use mixing::{LambdaAssignment, MixScheme, RegularizerConfig};
pub use nn::{NetworkSpec, WeightVector};
