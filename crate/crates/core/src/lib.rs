//! Mixed-integer model predictive control by partial outer convexification,
//! relaxation and sum-up rounding on an oversampling grid.
//!
//! The crate is organized bottom-up:
//!
//! - [`dynamics`]: models, the midpoint integrator and the convexified maps.
//! - [`convexification`]: control sets, simplex multipliers and stage costs.
//! - [`ocp`]: terminal ingredients and finite-horizon cost evaluation.
//! - [`nlp`]: the projected-gradient / augmented-Lagrangian OCP solver.
//! - [`rounding`]: simple and sum-up rounding with their error bounds.
//! - [`mpc`]: relaxed and rounded closed loops.
//! - [`analysis`]: regularity constants, step-width bounds and gap metrics.
//! - [`config`] and [`experiment`]: the configurable experiment driver
//!   behind the `mimpc` binary.

// `!(x >= lo)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod analysis;
pub mod config;
pub mod convexification;
pub mod dynamics;
mod error;
pub mod experiment;
pub mod mpc;
pub mod nlp;
pub mod ocp;
pub mod rounding;

pub use error::{Error, ErrorKind, Result};
