//! Synthetic data generators, evaluation metrics, the mixture-of-Gaussians
//! template baseline, and the experiment drivers built on them.

pub mod experiments;
pub mod metrics;
pub mod mog;
pub mod sim;
