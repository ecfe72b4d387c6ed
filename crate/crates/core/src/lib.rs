//! Maximum likelihood for panels of discrete-valued GLARMA time series with
//! Gaussian random effects.
//!
//! Each series follows an observation-driven GLARMA recursion whose linear
//! predictor carries a series-specific random effect `U_j = L zeta_j`. The
//! random effects are integrated out per series by adaptive Gauss-Hermite
//! quadrature centred at the Laplace mode, and the resulting likelihood is
//! maximized by Newton-Raphson using exact derivative recursions.
//!
//! Modules, bottom up:
//!
//! - [`expfam`]: binary, binomial and Poisson responses with canonical link.
//! - [`kernel`]: the single-series filter and its exact derivatives.
//! - [`ranef`]: the masked Cholesky parameterization of the random-effect covariance.
//! - [`quad`]: Gauss-Hermite rules, tensor grids and adaptive rescaling.
//! - [`model`]: panel data, parameter sharing and the full parameter layout.
//! - [`marginal`]: inner modes, Laplace and quadrature estimates of the panel likelihood.
//! - [`fit`], [`inference`], [`benchmark`]: estimation, tests and the quadrature-size study.
//! - [`design`]: polynomial lag bases for transfer-function covariates.
//! - [`sim`]: forward simulation.
//! - [`config`], [`io`]: configuration files and CSV formats used by the command-line tool.

pub mod benchmark;
pub mod config;
pub mod design;
pub mod error;
pub mod expfam;
pub mod fit;
pub mod inference;
pub mod io;
pub mod kernel;
pub mod marginal;
pub mod model;
pub mod quad;
pub mod ranef;
pub mod sim;

pub use error::{Error, Result};
pub use expfam::Family;
pub use fit::{fit, FitOptions, FitResult};
pub use marginal::Evaluator;
pub use model::{ConstraintMap, ModelSpec, PanelData, SeriesData};
pub use ranef::LStructure;
