//! Shrinkage estimation of the scale matrix of a matrix-variate elliptical
//! model, for both invertible (p ≤ m) and singular (p > m) scatter
//! matrices.
//!
//! - [`matrix`]: symmetric eigendecomposition, Moore-Penrose inverse,
//!   scale and scatter matrix types.
//! - [`family`], [`sampling`]: elliptical families and canonical `(Z, U)`
//!   sampling.
//! - [`estimators`]: `aS` and `a(S + (t/tr S⁺)·SS⁺)`.
//! - [`risk`]: losses, Monte Carlo risk and PRIAL.
//! - [`haff`]: finite-difference Haff operator and the Stein-Haff identity
//!   check.
//! - [`experiment`]: tables, sweeps and report output used by the CLI.

pub mod error;
pub mod estimators;
pub mod experiment;
pub mod family;
pub mod haff;
pub mod matrix;
pub mod numfmt;
pub mod quadrature;
pub mod risk;
pub mod sampling;

pub use error::{Error, Result};
pub use estimators::{a_optimal, correction_g, estimate, t_max, EstimatorKind, EstimatorSpec};
pub use family::{k_star, DistributionFamily};
pub use matrix::{build_ar1, pseudo_inverse, sym_eig, trace_pinv, Matrix, ScaleMatrix, ScatterMatrix};
pub use risk::{
    loss_data_based, loss_quadratic, mc_risk, prial, risk_difference_sign, LossKind, RiskReport,
};
pub use sampling::{log_density, sample_canonical, CanonicalSample, Scenario, ScenarioConfig};
