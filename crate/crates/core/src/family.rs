//! Natural exponential-family observation models.
//!
//! An observation vector `y` with natural parameter `eta = f(mu)` has
//! log-likelihood `(eta^T y - 1^T b(eta)) / phi + c(y, phi)`. Everything that
//! is optimized in this crate drops `c(y, phi)`, which does not depend on
//! `eta`; [`FamilySpec::log_density`] keeps it for held-out metrics.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// The exponential-family member.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Gaussian,
    Bernoulli,
}

/// Observation family together with its dispersion `phi`.
///
/// For the Gaussian family `phi` is the noise variance; the Bernoulli family
/// has `phi = 1` exactly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFamilySpec", into = "RawFamilySpec")]
pub struct FamilySpec {
    kind: FamilyKind,
    dispersion: f64,
}

#[derive(Serialize, Deserialize)]
struct RawFamilySpec {
    family: FamilyKind,
    #[serde(default = "one")]
    dispersion: f64,
}

fn one() -> f64 {
    1.0
}

impl TryFrom<RawFamilySpec> for FamilySpec {
    type Error = Error;

    fn try_from(raw: RawFamilySpec) -> Result<Self> {
        FamilySpec::new(raw.family, raw.dispersion)
    }
}

impl From<FamilySpec> for RawFamilySpec {
    fn from(spec: FamilySpec) -> Self {
        RawFamilySpec {
            family: spec.kind,
            dispersion: spec.dispersion,
        }
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl FamilySpec {
    pub fn new(kind: FamilyKind, dispersion: f64) -> Result<Self> {
        if !(dispersion.is_finite() && dispersion > 0.0) {
            return Err(Error::InvalidInput(format!(
                "dispersion must be positive and finite, got {dispersion}"
            )));
        }
        if kind == FamilyKind::Bernoulli && dispersion != 1.0 {
            return Err(Error::InvalidInput(format!(
                "bernoulli dispersion is fixed at 1, got {dispersion}"
            )));
        }
        Ok(Self { kind, dispersion })
    }

    pub fn gaussian(noise_variance: f64) -> Result<Self> {
        Self::new(FamilyKind::Gaussian, noise_variance)
    }

    pub fn bernoulli() -> Self {
        Self {
            kind: FamilyKind::Bernoulli,
            dispersion: 1.0,
        }
    }

    pub fn kind(&self) -> FamilyKind {
        self.kind
    }

    pub fn dispersion(&self) -> f64 {
        self.dispersion
    }

    fn check_mean(&self, mu: f64) -> Result<()> {
        match self.kind {
            FamilyKind::Gaussian if mu.is_finite() => Ok(()),
            FamilyKind::Bernoulli if mu > 0.0 && mu < 1.0 => Ok(()),
            _ => Err(Error::Domain(format!(
                "mean {mu} outside the {:?} domain",
                self.kind
            ))),
        }
    }

    /// Whether `y` lies in the support of the family.
    pub fn check_observation(&self, y: f64) -> Result<()> {
        let ok = match self.kind {
            FamilyKind::Gaussian => y.is_finite(),
            FamilyKind::Bernoulli => y == 0.0 || y == 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "observation {y} outside the {:?} support",
                self.kind
            )))
        }
    }

    pub fn link_scalar(&self, mu: f64) -> Result<f64> {
        self.check_mean(mu)?;
        Ok(match self.kind {
            FamilyKind::Gaussian => mu,
            FamilyKind::Bernoulli => (mu / (1.0 - mu)).ln(),
        })
    }

    #[inline]
    pub fn inverse_link_scalar(&self, eta: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => eta,
            FamilyKind::Bernoulli => sigmoid(eta),
        }
    }

    /// `1 / f'(mu)` evaluated at `mu = f^{-1}(eta)`. This is the IRLS weight
    /// and never needs a domain check.
    #[inline]
    pub fn weight_from_eta(&self, eta: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => 1.0,
            FamilyKind::Bernoulli => {
                let mu = sigmoid(eta);
                mu * (1.0 - mu)
            }
        }
    }

    /// Cumulant function `b(eta)`.
    #[inline]
    pub fn cumulant(&self, eta: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => 0.5 * eta * eta,
            FamilyKind::Bernoulli => softplus(eta),
        }
    }

    pub fn link(&self, mu: &[f64]) -> Result<Vec<f64>> {
        mu.iter().map(|&m| self.link_scalar(m)).collect()
    }

    pub fn inverse_link(&self, eta: &[f64]) -> Vec<f64> {
        eta.iter().map(|&e| self.inverse_link_scalar(e)).collect()
    }

    /// `(f'(mu_i))^{-1}` elementwise.
    pub fn link_derivative_inverse(&self, mu: &[f64]) -> Result<Vec<f64>> {
        mu.iter()
            .map(|&m| {
                self.check_mean(m)?;
                Ok(match self.kind {
                    FamilyKind::Gaussian => 1.0,
                    FamilyKind::Bernoulli => m * (1.0 - m),
                })
            })
            .collect()
    }

    /// Per-sample negative log-likelihood without `c(y, phi)`.
    #[inline]
    pub fn nll_sample(&self, y: f64, eta: f64) -> f64 {
        (self.cumulant(eta) - eta * y) / self.dispersion
    }

    /// `(-eta^T y + sum b(eta)) / phi`.
    pub fn neg_log_likelihood(&self, y: &[f64], eta: &[f64]) -> Result<f64> {
        check_len("eta vs observations", y.len(), eta.len())?;
        Ok(y.iter()
            .zip(eta)
            .map(|(&yi, &ei)| self.nll_sample(yi, ei))
            .sum())
    }

    /// Infimum over `eta` of the per-sample negative log-likelihood.
    ///
    /// Subtracting it gives half the scaled deviance, a nonnegative quantity
    /// that differs from [`Self::nll_sample`] by a term constant in `eta`.
    #[inline]
    pub fn saturated_nll_sample(&self, y: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => -0.5 * y * y / self.dispersion,
            // b(eta) - eta*y -> 0 as eta -> +-inf for y in {0, 1}
            FamilyKind::Bernoulli => 0.0,
        }
    }

    /// Half scaled deviance of one sample, `nll(y, eta) - nll_saturated(y)`.
    #[inline]
    pub fn half_deviance_sample(&self, y: f64, eta: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => 0.5 * (y - eta) * (y - eta) / self.dispersion,
            FamilyKind::Bernoulli => self.nll_sample(y, eta),
        }
    }

    /// Full log density `log p(y | eta)`, including `c(y, phi)`.
    #[inline]
    pub fn log_density(&self, y: f64, eta: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => {
                let phi = self.dispersion;
                -0.5 * (2.0 * std::f64::consts::PI * phi).ln() - 0.5 * (y - eta) * (y - eta) / phi
            }
            FamilyKind::Bernoulli => -self.nll_sample(y, eta),
        }
    }

    /// Unit deviance `2 * phi * half_deviance`, the quantity used by pseudo-R².
    #[inline]
    pub fn deviance_sample(&self, y: f64, eta: f64) -> f64 {
        2.0 * self.dispersion * self.half_deviance_sample(y, eta)
    }
}
