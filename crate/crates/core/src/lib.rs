//! Core library for demographic-conditioned mixture-of-adapters experiments.
//!
//! The crate is organized around a small reverse-mode autodiff engine over
//! dense 2-D matrices ([`diff`]), on top of which the routed adapter model
//! ([`router`], [`experts`], [`model`]), the training objectives
//! ([`objectives`], [`optim`], [`trainer`]), the synthetic task generators
//! ([`synthetic`]), the Gaussian-mixture theory checks ([`theory`]), and the
//! evaluation metrics ([`metrics`]) are built.

pub mod checkpoint;
pub mod diff;
pub mod error;
pub mod experts;
pub mod jsonl;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod parallel;
pub mod profiles;
pub mod router;
pub mod synthetic;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
