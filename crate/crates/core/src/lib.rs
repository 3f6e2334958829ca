//! Data-augmentation Gibbs samplers for Bayesian multivariate linear
//! regression with scale-mixture-of-normal errors, together with tools that
//! evaluate and numerically check the drift and minorization ingredients
//! behind their geometric and uniform ergodicity.
//!
//! The model for row `i` of the `n × d` response `Y` is
//!
//! ```text
//! y_i | β, Σ, u_i ~ N(βᵀ x_i, Σ / u_i),      u_i ~ h
//! ```
//!
//! where `h` is a mixing density on `(0, ∞)`. Two chains are provided:
//!
//! * [`gibbs::step_proper`] under the conditionally conjugate
//!   normal–inverse-Wishart prior (any mixing density),
//! * [`gibbs::step_improper`] under `π(β, Σ) ∝ |Σ|^{-(d+1)/2}` with
//!   Student-t errors.
//!
//! Module map:
//!
//! * [`matvar`]: matrix-normal and inverse-Wishart sampling and densities.
//! * [`mixing`]: the mixing density `h`, its moments and tilted conditionals.
//! * [`model`]: data, prior, chain state and the posterior hyperparameter update.
//! * [`gibbs`]: the two transition kernels and the chain runner.
//! * [`ergodicity`]: energy functions, condition checkers, drift constants,
//!   minorization bound and Monte-Carlo verifiers.
//! * [`diagnostics`]: ESS, posterior summaries and the Geweke joint test.

// `!(x > 0.0)` style guards deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod ergodicity;
mod error;
pub mod gibbs;
pub mod io;
pub mod linalg;
pub mod matvar;
pub mod mixing;
pub mod model;
pub mod quadrature;
pub mod rng;

pub use error::{Error, Result};
pub use mixing::{MixingDensity, MomentValue};
pub use model::{ChainState, Dataset, NIWPrior, PosteriorUpdate};

pub use nalgebra::{DMatrix, DVector};
