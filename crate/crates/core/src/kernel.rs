//! Matérn priors on templates: covariance matrices, power spectral
//! densities, and the DFT-frequency approximation of the covariance spectrum.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{dft, dft_frequencies};

/// Relative diagonal jitter added to every covariance matrix.
pub const JITTER: f64 = 1e-8;

/// Smoothness of the prior.
///
/// The three half-integer Matérn orders have closed forms. `White` is the
/// diagonal (Tikhonov) prior `sigma^2 I`, whose spectrum is flat.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Smoothness {
    Half,
    ThreeHalves,
    FiveHalves,
    White,
}

impl Serialize for Smoothness {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Smoothness::Half => s.serialize_f64(0.5),
            Smoothness::ThreeHalves => s.serialize_f64(1.5),
            Smoothness::FiveHalves => s.serialize_f64(2.5),
            Smoothness::White => s.serialize_str("white"),
        }
    }
}

impl<'de> Deserialize<'de> for Smoothness {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) if v == 0.5 => Ok(Smoothness::Half),
            Raw::Num(v) if v == 1.5 => Ok(Smoothness::ThreeHalves),
            Raw::Num(v) if v == 2.5 => Ok(Smoothness::FiveHalves),
            Raw::Name(n) if n == "white" => Ok(Smoothness::White),
            Raw::Num(v) => Err(serde::de::Error::custom(format!(
                "nu must be one of 0.5, 1.5, 2.5 or \"white\", got {v}"
            ))),
            Raw::Name(n) => Err(serde::de::Error::custom(format!(
                "nu must be one of 0.5, 1.5, 2.5 or \"white\", got {n:?}"
            ))),
        }
    }
}

/// Hyperparameters of a stationary template prior.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawKernelSpec", into = "RawKernelSpec")]
pub struct KernelSpec {
    pub nu: Smoothness,
    pub variance: f64,
    pub lengthscale: f64,
    pub delta: f64,
}

#[derive(Serialize, Deserialize)]
struct RawKernelSpec {
    nu: Smoothness,
    variance: f64,
    lengthscale: f64,
    #[serde(default = "unit_delta")]
    delta: f64,
}

fn unit_delta() -> f64 {
    1.0
}

impl TryFrom<RawKernelSpec> for KernelSpec {
    type Error = Error;

    fn try_from(r: RawKernelSpec) -> Result<Self> {
        KernelSpec::new(r.nu, r.variance, r.lengthscale, r.delta)
    }
}

impl From<KernelSpec> for RawKernelSpec {
    fn from(k: KernelSpec) -> Self {
        RawKernelSpec {
            nu: k.nu,
            variance: k.variance,
            lengthscale: k.lengthscale,
            delta: k.delta,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{name} must be positive, got {v}")))
    }
}

impl KernelSpec {
    pub fn new(nu: Smoothness, variance: f64, lengthscale: f64, delta: f64) -> Result<Self> {
        positive("variance", variance)?;
        positive("lengthscale", lengthscale)?;
        positive("delta", delta)?;
        Ok(Self {
            nu,
            variance,
            lengthscale,
            delta,
        })
    }

    /// Matérn-3/2 with unit sampling interval.
    pub fn matern32(variance: f64, lengthscale: f64) -> Result<Self> {
        Self::new(Smoothness::ThreeHalves, variance, lengthscale, 1.0)
    }

    /// Diagonal prior `variance * I`.
    pub fn white(variance: f64) -> Result<Self> {
        Self::new(Smoothness::White, variance, 1.0, 1.0)
    }

    pub fn with_lengthscale(mut self, lengthscale: f64) -> Result<Self> {
        positive("lengthscale", lengthscale)?;
        self.lengthscale = lengthscale;
        Ok(self)
    }

    pub fn with_variance(mut self, variance: f64) -> Result<Self> {
        positive("variance", variance)?;
        self.variance = variance;
        Ok(self)
    }

    /// Kernel value at time lag `tau`.
    pub fn eval(&self, tau: f64) -> f64 {
        let r = tau.abs() / self.lengthscale;
        let s2 = self.variance;
        match self.nu {
            Smoothness::Half => s2 * (-r).exp(),
            Smoothness::ThreeHalves => {
                let a = 3f64.sqrt() * r;
                s2 * (1.0 + a) * (-a).exp()
            }
            Smoothness::FiveHalves => {
                let a = 5f64.sqrt() * r;
                s2 * (1.0 + a + a * a / 3.0) * (-a).exp()
            }
            Smoothness::White => {
                if tau == 0.0 {
                    s2
                } else {
                    0.0
                }
            }
        }
    }

    /// Spectral density at normalized frequency `omega` (radians per sample).
    ///
    /// The continuous-time density is evaluated with the lengthscale expressed
    /// in samples; no aliasing correction is applied.
    pub fn psd(&self, omega: f64) -> f64 {
        let l = self.lengthscale / self.delta;
        let s2 = self.variance;
        let lw2 = l * l * omega * omega;
        match self.nu {
            Smoothness::Half => 2.0 * s2 * l / (1.0 + lw2),
            Smoothness::ThreeHalves => (4.0 / 3f64.sqrt()) * s2 * l / (1.0 + lw2 / 3.0).powi(2),
            Smoothness::FiveHalves => {
                (16.0 / (3.0 * 5f64.sqrt())) * s2 * l / (1.0 + lw2 / 5.0).powi(3)
            }
            Smoothness::White => s2,
        }
    }
}

/// `gamma(omega)` for each requested frequency in `[-pi, pi]`.
pub fn matern_psd(spec: &KernelSpec, omegas: &[f64]) -> Result<Vec<f64>> {
    omegas
        .iter()
        .map(|&w| {
            if !(w.abs() <= PI + 1e-12) {
                return Err(Error::InvalidInput(format!(
                    "frequency {w} outside [-pi, pi]"
                )));
            }
            Ok(spec.psd(w))
        })
        .collect()
}

/// How the covariance was built.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Structure {
    /// Kernel sampled at the template lags (the ordinary prior).
    Toeplitz,
    /// Kernel periodized over the template length; diagonalized exactly by the DFT.
    Circulant,
}

/// The `K x K` prior covariance of one template.
#[derive(Clone, Debug)]
pub struct CovarianceMatrix {
    entries: DMatrix<f64>,
    spec: KernelSpec,
    structure: Structure,
}

/// `Sigma` with jitter, built from the Toeplitz lags `|k - k'| * delta`.
pub fn matern_cov(spec: &KernelSpec, k: usize) -> Result<CovarianceMatrix> {
    if k == 0 {
        return Err(Error::InvalidInput("template length must be at least 1".into()));
    }
    let column: Vec<f64> = (0..k).map(|m| spec.eval(m as f64 * spec.delta)).collect();
    Ok(CovarianceMatrix::from_column(&column, *spec, Structure::Toeplitz, k))
}

/// Circulant covariance whose first column is the kernel periodized with
/// period `K * delta`. Its eigenvalues are the DFT of that column, all positive.
pub fn circulant_cov(spec: &KernelSpec, k: usize) -> Result<CovarianceMatrix> {
    if k == 0 {
        return Err(Error::InvalidInput("template length must be at least 1".into()));
    }
    let column: Vec<f64> = (0..k)
        .map(|m| {
            let mut acc = spec.eval(m as f64 * spec.delta);
            for p in 1..200_000usize {
                let a = spec.eval((m as f64 + (p * k) as f64) * spec.delta);
                let b = spec.eval((m as f64 - (p * k) as f64) * spec.delta);
                acc += a + b;
                if a + b <= 1e-18 * spec.variance {
                    break;
                }
            }
            acc
        })
        .collect();
    Ok(CovarianceMatrix::from_column(&column, *spec, Structure::Circulant, k))
}

impl CovarianceMatrix {
    fn from_column(column: &[f64], spec: KernelSpec, structure: Structure, k: usize) -> Self {
        let mut entries = match structure {
            Structure::Toeplitz => DMatrix::from_fn(k, k, |i, j| column[i.abs_diff(j)]),
            Structure::Circulant => DMatrix::from_fn(k, k, |i, j| column[(i + k - j) % k]),
        };
        for i in 0..k {
            entries[(i, i)] += JITTER * spec.variance;
        }
        Self {
            entries,
            spec,
            structure,
        }
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn structure(&self) -> Structure {
        self.structure
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    /// Spectrum used by the Wiener analysis: exact DFT eigenvalues for
    /// circulant covariances, [`spectral_factorization`] otherwise.
    pub fn spectrum(&self) -> Vec<f64> {
        match self.structure {
            Structure::Circulant => {
                let col: Vec<f64> = self.entries.column(0).iter().copied().collect();
                dft(&col).iter().map(|c| c.re).collect()
            }
            Structure::Toeplitz => spectral_factorization(self),
        }
    }

    /// Cholesky-backed precision operations.
    pub fn factor(&self) -> Result<PriorFactor> {
        PriorFactor::new(self.entries.clone())
    }
}

/// Approximate eigenvalues of `Sigma`: the PSD at `omega_k = 2 pi k / K`,
/// rescaled so their mean equals the mean diagonal of `Sigma`.
pub fn spectral_factorization(cov: &CovarianceMatrix) -> Vec<f64> {
    let k = cov.dim();
    let raw: Vec<f64> = dft_frequencies(k)
        .iter()
        .map(|&w| cov.spec.psd(w))
        .collect();
    let mean_raw = raw.iter().sum::<f64>() / k as f64;
    let mean_diag = cov.entries.trace() / k as f64;
    let scale = mean_diag / mean_raw;
    raw.into_iter().map(|v| v * scale).collect()
}

/// Cholesky factor of a covariance with helpers for `Sigma^{-1}` products.
#[derive(Clone, Debug)]
pub struct PriorFactor {
    chol: Cholesky<f64, Dyn>,
    precision: DMatrix<f64>,
}

impl PriorFactor {
    pub fn new(cov: DMatrix<f64>) -> Result<Self> {
        let k = cov.nrows();
        let chol = Cholesky::new(cov).ok_or_else(|| {
            Error::Numerical("prior covariance is not positive definite".into())
        })?;
        let precision = chol.solve(&DMatrix::identity(k, k));
        let precision = (&precision + precision.transpose()) * 0.5;
        Ok(Self { chol, precision })
    }

    pub fn dim(&self) -> usize {
        self.precision.nrows()
    }

    /// `Sigma^{-1} v` by triangular solves.
    pub fn solve(&self, v: &[f64]) -> Vec<f64> {
        let x = self.chol.solve(&DVector::from_column_slice(v));
        x.iter().copied().collect()
    }

    /// `Sigma^{-1}`, obtained from the Cholesky factor.
    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    /// Lower Cholesky factor `L` with `Sigma = L L^T`.
    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// `h^T Sigma^{-1} h`.
    pub fn quad(&self, h: &[f64]) -> f64 {
        self.solve(h).iter().zip(h).map(|(a, b)| a * b).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn diagonal_is_variance_plus_jitter() {
        for nu in [Smoothness::Half, Smoothness::ThreeHalves, Smoothness::FiveHalves] {
            let spec = KernelSpec::new(nu, 2.5, 3.0, 1.0).unwrap();
            let cov = matern_cov(&spec, 6).unwrap();
            for i in 0..6 {
                assert_eq!(cov.entries()[(i, i)], 2.5 + 1e-8 * 2.5);
            }
        }
    }

    #[test]
    fn closed_form_lags() {
        let spec = KernelSpec::matern32(1.0, 3f64.sqrt()).unwrap();
        let cov = matern_cov(&spec, 4).unwrap();
        // (1 + 1) e^{-1}
        assert_relative_eq!(cov.entries()[(0, 1)], 2.0 * (-1.0f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(cov.entries()[(0, 1)], 0.735759, epsilon = 1e-6);

        let spec = KernelSpec::new(Smoothness::Half, 2.0, 1.0, 1.0).unwrap();
        let cov = matern_cov(&spec, 5).unwrap();
        assert_relative_eq!(cov.entries()[(0, 3)], 2.0 * (-3.0f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(cov.entries()[(4, 1)], 0.099574, epsilon = 1e-6);
    }

    #[test]
    fn toeplitz_and_symmetric() {
        let spec = KernelSpec::new(Smoothness::FiveHalves, 1.3, 7.0, 0.5).unwrap();
        let cov = matern_cov(&spec, 20).unwrap();
        let e = cov.entries();
        for i in 0..20 {
            for j in 0..20 {
                assert!((e[(i, j)] - e[(j, i)]).abs() <= 1e-12);
                if i > 0 && j > 0 {
                    assert_eq!(e[(i, j)], e[(i - 1, j - 1)]);
                }
            }
        }
    }

    #[test]
    fn positive_definite_up_to_512() {
        for &k in &[1usize, 16, 128, 512] {
            for &l in &[0.1, 10.0, 100.0, 1000.0] {
                for nu in [Smoothness::Half, Smoothness::ThreeHalves, Smoothness::FiveHalves] {
                    let spec = KernelSpec::new(nu, 1.0, l, 1.0).unwrap();
                    let cov = matern_cov(&spec, k).unwrap();
                    assert!(cov.factor().is_ok(), "k={k} l={l} nu={nu:?}");
                }
            }
        }
    }

    #[test]
    fn tiny_lengthscale_degenerates_to_diagonal() {
        let spec = KernelSpec::matern32(1.0, 1e-4).unwrap();
        let cov = matern_cov(&spec, 10).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                if i != j {
                    assert!(cov.entries()[(i, j)].abs() < 1e-300);
                }
            }
        }
    }

    #[test]
    fn psd_examples() {
        let spec = KernelSpec::matern32(1.0, 1.0).unwrap();
        let v = matern_psd(&spec, &[0.0, 3f64.sqrt(), -1.0, 1.0]).unwrap();
        assert_relative_eq!(v[0], 4.0 / 3f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(v[0], 2.309401, epsilon = 1e-6);
        assert_relative_eq!(v[1], 4.0 / 3f64.sqrt() / 4.0, epsilon = 1e-15);
        assert_relative_eq!(v[1], 0.577350, epsilon = 1e-6);
        assert_eq!(v[2], v[3]);
        assert!(matches!(matern_psd(&spec, &[3.5]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn psd_positive_even_and_decreasing() {
        for nu in [Smoothness::Half, Smoothness::ThreeHalves, Smoothness::FiveHalves] {
            for &l in &[0.5, 2.0, 25.0] {
                let spec = KernelSpec::new(nu, 1.7, l, 1.0).unwrap();
                let mut prev = f64::INFINITY;
                for i in 0..=100 {
                    let w = PI * i as f64 / 100.0;
                    let g = spec.psd(w);
                    assert!(g > 0.0);
                    assert_eq!(g, spec.psd(-w));
                    assert!(g < prev);
                    prev = g;
                }
            }
        }
    }

    #[test]
    fn psd_integrates_to_variance_when_bandlimited() {
        for nu in [Smoothness::Half, Smoothness::ThreeHalves, Smoothness::FiveHalves] {
            for &l in &[2.0, 5.0, 20.0] {
                let spec = KernelSpec::new(nu, 1.4, l, 1.0).unwrap();
                let n = 4096;
                let h = 2.0 * PI / (n - 1) as f64;
                let mut acc = 0.0;
                for i in 0..n {
                    let w = -PI + i as f64 * h;
                    let wt = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                    acc += wt * spec.psd(w.clamp(-PI, PI));
                }
                let integral = acc * h / (2.0 * PI);
                assert!(
                    (integral - 1.4).abs() / 1.4 <= 0.15,
                    "nu={nu:?} l={l} integral={integral}"
                );
            }
        }
    }

    #[test]
    fn factorization_white_is_flat() {
        let spec = KernelSpec::white(2.0).unwrap();
        let cov = matern_cov(&spec, 16).unwrap();
        let vals = spectral_factorization(&cov);
        for v in &vals {
            assert_relative_eq!(*v, 2.0 * (1.0 + JITTER), max_relative = 1e-12);
            assert_eq!(*v, vals[0]);
        }
    }

    #[test]
    fn factorization_calibrated_and_even() {
        let spec = KernelSpec::matern32(1.0, 10.0).unwrap();
        let cov = matern_cov(&spec, 64).unwrap();
        let vals = spectral_factorization(&cov);
        let sum: f64 = vals.iter().sum();
        assert!((sum - cov.entries().trace()).abs() <= 1e-9);
        for k in 1..64 {
            assert_relative_eq!(vals[k], vals[64 - k], max_relative = 1e-12);
        }
        assert!(vals.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn factorization_tracks_circulant_eigenvalues() {
        // oracle: eigenvalues of the wrapped-lag circulant extension by direct DFT sum
        let spec = KernelSpec::matern32(1.0, 10.0).unwrap();
        let k = 64;
        let first: Vec<f64> = (0..k)
            .map(|m| {
                let lag = m.min(k - m) as f64;
                let a = 3f64.sqrt() * lag / 10.0;
                (1.0 + a) * (-a).exp() + if m == 0 { 1e-8 } else { 0.0 }
            })
            .collect();
        let vals = spectral_factorization(&matern_cov(&spec, k).unwrap());
        let eig: Vec<f64> = (0..k)
            .map(|f| {
                first
                    .iter()
                    .enumerate()
                    .map(|(m, c)| c * (2.0 * PI * (f * m) as f64 / k as f64).cos())
                    .sum()
            })
            .collect();
        assert!((vals[0] - eig[0]).abs() / eig[0] <= 0.10);
        for f in 0..k {
            let eig = eig[f];
            assert!(
                (vals[f] - eig).abs() <= 0.05 * vals[0],
                "bin {f}: approx {} exact {eig}",
                vals[f]
            );
        }
    }

    #[test]
    fn circulant_spectrum_is_exact() {
        let spec = KernelSpec::matern32(1.0, 6.0).unwrap();
        let cov = circulant_cov(&spec, 24).unwrap();
        let lam = cov.spectrum();
        assert!(lam.iter().all(|&v| v > 0.0));
        // Sigma v_k = lam_k v_k for the cosine eigenvector of bin 3
        let v: Vec<f64> = (0..24).map(|n| (2.0 * PI * 3.0 * n as f64 / 24.0).cos()).collect();
        let sv = cov.entries() * DVector::from_column_slice(&v);
        for n in 0..24 {
            assert!((sv[n] - lam[3] * v[n]).abs() < 1e-10);
        }
        assert!(cov.factor().is_ok());
    }

    #[test]
    fn prior_factor_solves() {
        let spec = KernelSpec::matern32(1.0, 4.0).unwrap();
        let cov = matern_cov(&spec, 8).unwrap();
        let f = cov.factor().unwrap();
        let h: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect();
        let x = f.solve(&h);
        let back = cov.entries() * DVector::from_column_slice(&x);
        for i in 0..8 {
            assert!((back[i] - h[i]).abs() < 1e-9);
        }
        let ident = cov.entries() * f.precision();
        assert!((ident - DMatrix::<f64>::identity(8, 8)).amax() < 1e-6);
    }

    #[test]
    fn kernel_spec_json() {
        let spec: KernelSpec = serde_json::from_str(
            r#"{"nu": 1.5, "variance": 1.0, "lengthscale": 25.0, "delta": 1.0}"#,
        )
        .unwrap();
        assert_eq!(spec, KernelSpec::matern32(1.0, 25.0).unwrap());
        assert!(serde_json::from_str::<KernelSpec>(
            r#"{"nu": 1.0, "variance": 1.0, "lengthscale": 25.0}"#
        )
        .is_err());
        assert!(serde_json::from_str::<KernelSpec>(
            r#"{"nu": 1.5, "variance": -1.0, "lengthscale": 25.0}"#
        )
        .is_err());
        let white: KernelSpec =
            serde_json::from_str(r#"{"nu": "white", "variance": 2.0, "lengthscale": 1.0}"#)
                .unwrap();
        assert_eq!(white.nu, Smoothness::White);
    }
}
