//! Stochastic quasi-Newton optimization for regularized finite sums.
//!
//! The solver combines variance-reduced minibatch gradients with
//! limited-memory curvature built from subsampled Hessian-vector products,
//! and exposes the diagnostics needed to certify its behavior on small
//! instances: spectral bounds, variance bounds and convergence rates.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod blockhess;
pub mod checks;
pub mod dataio;
pub mod error;
pub mod lbfgs;
pub mod linalg;
pub mod problem;
pub mod sampling;
pub mod solver;
pub mod svrg;
pub mod theory;

pub use error::{Error, Result};
