//! Semi-blind channel estimation for amplify-and-forward two-way relay
//! networks over reciprocal flat-fading channels.
//!
//! Terminal T1 receives its own self-interference through the cascaded
//! coefficient `a = h²` and the partner's signal through `b = h·g`. The
//! [`estimators`] module recovers `(a, b)` either from the pilots alone
//! (least squares) or from pilots plus the unknown data block with an
//! expectation-maximization loop whose M-step is solved in closed form.
//!
//! [`oracle`] holds exact reference computations (likelihoods, grid search,
//! finite differences) that the test suites and the `selfcheck` command use
//! to verify the estimators, and [`harness`] runs seeded Monte-Carlo sweeps.

pub mod cli;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod model;
pub mod oracle;
pub mod selfcheck;

pub use error::{Error, Result};
pub use num_complex::Complex64;
