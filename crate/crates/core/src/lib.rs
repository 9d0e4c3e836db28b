//! Convolutional dictionary learning with Gaussian-process priors on the
//! templates, for Gaussian and Bernoulli observations.
//!
//! The learner alternates sparse coding by convolutional orthogonal matching
//! pursuit ([`csc`]) with a penalized Newton/IRLS template update ([`cdu`]).
//! [`spectral`] expresses the converged templates as Wiener-filtered
//! unregularized estimates, [`hyper`] estimates kernel hyperparameters by a
//! Laplace-approximated marginal likelihood, and [`bench`] holds the
//! simulation and evaluation harness.

pub mod bench;
pub mod cdu;
pub mod csc;
pub mod error;
pub mod family;
pub mod fourier;
pub mod hyper;
pub mod kernel;
pub mod learn;
pub mod signal;
pub mod spectral;

pub use error::{Error, Result};
pub use family::{FamilyKind, FamilySpec};
pub use kernel::{CovarianceMatrix, KernelSpec, Smoothness};
pub use signal::{Baseline, Dictionary, Event, SparseCode, Trial};
