//! Numerical laboratory for a stochastic heat equation driven by noise with
//! long-range spatial correlations.
//!
//! The equation under study is
//!
//! ```text
//! du_t(x) = 1/2 Laplacian u_t(x) dt
//!           + sigma(u_t(x)) / sqrt(log(1/rho)) dW^rho_t(x),   x in R^d, d >= 3,
//! ```
//!
//! where the noise W^rho is white in time with spatial covariance
//! `R^rho(x) = (G_{2 rho} * |.|^{-2})(x)`, a Gaussian mollification of an
//! inverse-square kernel. As rho shrinks, a single point value `u_t(x)`
//! approaches a universal limit law: the time-1 marginal of a
//! forward-backward SDE whose diffusion coefficient is the fixed point of an
//! averaging operator built from sigma. The crate provides the pieces needed
//! to see this numerically:
//!
//! - [`kernels`]: closed forms and quadratures for the heat kernel, the
//!   mollified covariance, and their convolution identities.
//! - [`quad`], [`rng`], [`fft`]: shared numerical utilities.
//! - [`fbsde`]: the limiting forward-backward SDE, its averaging operator,
//!   Picard fixed-point solver, method-of-lines PDE solver, and the explicit
//!   solvable family.
//! - [`noise`]: spectral synthesis of the correlated driving noise on a torus.
//! - [`spde`]: the mild-form Euler scheme for the equation itself, with
//!   controllable noise windows and freeze events.
//! - [`meshchain`]: the multiscale time mesh, the rescaled decoupling
//!   function estimator, and the chain-to-diffusion limit checker.
//! - [`moment2`]: the second-moment radial solver and the uniform-in-rho
//!   moment bound machinery.
//! - [`stats`]: Wasserstein-2 distances and decorrelation curves.
//! - [`experiments`]: reproducible experiment configs and bundled runs.

pub mod error;
pub mod quad;
pub mod rng;

pub mod fbsde;
pub mod fft;
pub mod kernels;
pub mod meshchain;
pub mod moment2;
pub mod noise;
pub mod samples;
pub mod spde;
pub mod stats;

pub use error::{Error, Result};
