//! Randomized subspace optimization (RSO) for memory-efficient training.
//!
//! The outer loop samples a random projection `P` per layer, approximately
//! minimizes the proximal subproblem
//! `g(B) = f(W + P B) + ‖B‖² / (2η)` with a pluggable inner solver starting
//! from `B = 0`, and commits `W ← W + P B̃`.
//!
//! Modules:
//! - [`tensor`]: dense matrices, seedable random streams, QR / SVD.
//! - [`projection`]: Haar, coordinate and Gaussian subspace projections.
//! - [`objectives`]: quadratic, logistic and a manually differentiated
//!   transformer language model, each with full and subspace gradients.
//! - [`solvers`]: GD / SGD / momentum / Adam / zeroth-order inner solvers and
//!   the strong-convexity inexactness certificate.
//! - [`engine`]: the RSO outer loop, Adam and GaLore baselines, and the
//!   convergence-bound verification harness.
//! - [`cost`]: analytic optimizer-state, activation and communication counts.
//!
//! All math is generic over [`Scalar`] (`f32` or `f64`); the aliases below fix
//! the 64-bit instantiation used by the verification harness and the CLI.

pub mod cost;
pub mod engine;
pub mod error;
pub mod objectives;
pub mod projection;
pub mod scalar;
pub mod solvers;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// 64-bit dense matrix.
pub type Mat = tensor::Matrix<f64>;
/// 32-bit dense matrix.
pub type Mat32 = tensor::Matrix<f32>;
/// 64-bit full parameter family `W = {W_ℓ}`.
pub type Params = objectives::ParamSet<f64>;
/// 64-bit subspace variables `B = {B_ℓ}`.
pub type Subspace = objectives::SubspaceParams<f64>;
/// 64-bit projection family `P = {P_ℓ}`.
pub type Projections = projection::ProjectionSet<f64>;
/// 64-bit RSO configuration.
pub type Config = engine::RsoConfig;
