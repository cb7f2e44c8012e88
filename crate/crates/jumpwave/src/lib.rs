//! Numerical laboratory for jump-driven, boundary-forced wave dynamics.
//!
//! The crate is organized around seven modules:
//!
//! - [`levy`]: heavy-tailed jump densities, the inverse tail transform, and
//!   exact finite-activity sampling of the driving Poisson random measure.
//! - [`girsanov`]: the mark-perturbation family (profile `h`, aggregate `w`,
//!   inverse `kappa`, transformation `theta`), the resulting exponential
//!   density process, and Monte-Carlo identity checks.
//! - [`operators`]: the spectral wave model (eigenpairs, semigroup, boundary
//!   lift and injection) plus a heat-equation variant.
//! - [`spde`]: the jump-adapted exact-flow path solver and moment estimates.
//! - [`control`]: piecewise-constant boundary controls, controllability
//!   Gramians, minimum-norm steering, and vanishing-energy sequences.
//! - [`ergodics`]: hitting-probability probes, time-averaged empirical
//!   measures, bounded-Lipschitz distances under pseudometric families, and
//!   the coupled smoothing diagnostic.
//! - [`cli`]: experiment configuration, run orchestration, and reporting.

pub mod control;
pub mod ergodics;
pub mod girsanov;
pub mod levy;
pub mod operators;
pub mod spde;
mod numeric;
