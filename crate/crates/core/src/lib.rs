//! Simulation engine and linear-stability toolkit for a hybrid tumor-stroma
//! reaction-diffusion model with chemotaxis.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`]: parameters, drug response functions, grid fields and states.
//! * [`kinetics`]: pointwise reactions, the reduced washout system, Jacobians.
//! * [`spectral`]: dispersion relations, effective mobility and the
//!   stable / finite-band / ill-posed classifier.
//! * [`pde`]: Crank-Nicolson time stepping on a Neumann grid with taxis.
//! * [`experiments`]: the four regimes, seeded initial data and metrics.
//! * [`io`]: config parsing and CSV / PGM / report serialization.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiments;
pub mod io;
pub mod kinetics;
pub mod linalg;
pub mod model;
pub mod pde;
pub mod spectral;

pub use error::{Error, Result};
pub use model::{Field2D, HybridState, ModelParams};
