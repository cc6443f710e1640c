//! Causal mediation engine for a longitudinal spline mediator, a
//! restricted-mean survival outcome and an ordinal treatment-dependent
//! confounder.
//!
//! The crate is organised bottom-up: spline bases, the mediator model, the
//! proportional-hazards survival model, the counterfactual confounder
//! algebra, effect decompositions, a structural simulation oracle, and
//! Bayesian estimation. File formats and configuration live in [`io`].

pub mod basis;
pub mod confounder;
pub mod data;
pub mod effects;
pub mod error;
pub mod inference;
pub mod io;
pub mod mediator;
pub mod model;
pub mod oracle;
pub mod polytope;
pub mod quadrature;
pub mod rng;
pub mod stats;
pub mod survival;

pub use error::{Error, Result};
