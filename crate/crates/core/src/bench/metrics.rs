//! Evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::FamilySpec;
use crate::fourier::dft;
use crate::learn::{apply_baseline, deviance_r2, mean_log_density, predict_eta, FitResult};
use crate::signal::{dot, l2_norm, Trial};

/// `sqrt(1 - <a, b>^2)` for unit-normalized `a` and `b`; sign-invariant.
pub fn dict_error(est: &[f64], truth: &[f64]) -> Result<f64> {
    if est.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            what: "template length",
            expected: truth.len(),
            got: est.len(),
        });
    }
    let (ne, nt) = (l2_norm(est), l2_norm(truth));
    if ne == 0.0 || nt == 0.0 {
        return Err(Error::InvalidInput("dictionary error of a zero vector".into()));
    }
    let c = (dot(est, truth) / (ne * nt)).clamp(-1.0, 1.0);
    Ok((1.0 - c * c).max(0.0).sqrt())
}

/// Noise variance from the mean periodogram over `omega` in `[pi/2, pi]`.
pub fn estimate_dispersion(trial: &Trial) -> Result<f64> {
    let n = trial.len();
    if n < 16 {
        return Err(Error::InvalidInput(format!("need at least 16 samples, got {n}")));
    }
    let centered: Vec<f64> = trial
        .observations
        .iter()
        .zip(trial.baseline_vec())
        .map(|(y, a)| y - a)
        .collect();
    let spec = dft(&centered);
    let (lo, hi) = (n.div_ceil(4), n / 2);
    let total: f64 = spec[lo..=hi].iter().map(|z| z.norm_sqr() / n as f64).sum();
    Ok(total / (hi - lo + 1) as f64)
}

/// Mean of [`estimate_dispersion`] over trials.
pub fn mean_dispersion(trials: &[Trial]) -> Result<f64> {
    if trials.is_empty() {
        return Err(Error::InvalidInput("no trials".into()));
    }
    let mut s = 0.0;
    for t in trials {
        s += estimate_dispersion(t)?;
    }
    Ok(s / trials.len() as f64)
}

/// Mean per-sample held-out log-likelihood (natural log).
pub fn predictive_ll(fit: &FitResult, test: &[Trial], family: &FamilySpec) -> Result<f64> {
    let test = apply_baseline(fit, test)?;
    let etas = predict_eta(fit, &test, family)?;
    Ok(mean_log_density(&test, &etas, family))
}

/// Deviance pseudo-R² on held-out trials against the baseline-only model.
pub fn r_squared(fit: &FitResult, test: &[Trial], family: &FamilySpec) -> Result<f64> {
    let test = apply_baseline(fit, test)?;
    let etas = predict_eta(fit, &test, family)?;
    Ok(deviance_r2(&test, &etas, family))
}

/// One row of a dictionary-error table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub seed: u64,
    #[serde(rename = "J")]
    pub num_trials: usize,
    pub noise_variance: f64,
    pub lengthscale: f64,
    pub err_h1: f64,
    pub err_h2: f64,
    pub pll: f64,
    pub r2: f64,
}
