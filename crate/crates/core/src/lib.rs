//! Desk-scale simulator for double-blind federated adaptation of a
//! transformer model.
//!
//! A server owns a frozen, polynomially-approximated transformer; clients
//! own data, a low-rank parallel adapter, and a classification head. The
//! crate provides the leveled homomorphic arithmetic simulator, the
//! FHE-friendly kernels, the split-learning protocol with secure
//! aggregation, the permutation / stochastic-block-sampling defenses, and
//! the feature-similarity pairing attack used to evaluate them.

pub mod adapter;
pub mod attack;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod he;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod privacy;
pub mod protocol;
pub mod seeding;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
