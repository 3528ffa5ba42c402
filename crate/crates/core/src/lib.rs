//! Recurrent state-space world models with a self-supervised context
//! encoder, trained by latent imagination on small contextual MDPs, plus the
//! evaluation, counterfactual and probing tools used to study them.
//!
//! Everything numeric is generic over [`Scalar`]; the aliases below fix the
//! common precisions.

pub mod agent;
pub mod autodiff;
pub mod behavior;
pub mod checkpoint;
pub mod classifiers;
pub mod config;
pub mod context_encoder;
pub mod counterfactual;
pub mod envs;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod plot;
pub mod probes;
pub mod replay;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod world_model;

pub use error::{DaliError, Result};
pub use scalar::Scalar;
pub use tensor::Matrix;

/// Single-precision agent, the default for training runs.
pub type Agent32 = agent::Agent<f32>;
/// Double-precision agent, used by gradient checks.
pub type Agent64 = agent::Agent<f64>;
pub type Matrix32 = tensor::Matrix<f32>;
pub type Matrix64 = tensor::Matrix<f64>;
