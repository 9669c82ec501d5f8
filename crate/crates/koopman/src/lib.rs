//! Data-driven Koopman modelling and control for a three-link planar arm.
//!
//! The crate covers the full pipeline:
//!
//! * [`basis`] — monomial dictionaries (linear / bilinear / nonlinear families)
//!   and the lifting maps built from them;
//! * [`plant`] — the rigid-body arm model, its integrator and the snapshot
//!   collector used to generate training data;
//! * [`edmd`] — least-squares identification of the discrete Koopman matrix,
//!   the continuous-time generator (principal matrix logarithm) and the
//!   extraction of linear / bilinear / nonlinear realizations;
//! * [`model`] — open-loop simulation of identified models and normalized
//!   prediction-error evaluation;
//! * [`mpc`] — predictive controllers built on the identified realizations
//!   (condensed QP for the linear model, re-linearized QP for the bilinear
//!   one, Gauss–Newton shooting for the nonlinear one) plus the closed-loop
//!   harness and reference generator;
//! * [`theory`] — exact symbolic checks that decide whether a polynomial
//!   control-affine vector field admits a finite linear or bilinear
//!   realization on a monomial dictionary;
//! * [`io`] — plain-text artifact formats (snapshots, models, error reports,
//!   control logs, certificates) with lossless round-trips.

pub mod basis;
pub mod edmd;
pub mod error;
pub mod io;
pub mod matfun;
pub mod model;
pub mod mpc;
pub mod plant;
pub mod theory;

pub use error::{Error, Result};
