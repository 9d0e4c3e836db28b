//! Frequency-domain view of the Gaussian template update: code-SNR, Wiener
//! gains, and the filtered unregularized template.

use num_complex::Complex64;
use serde::Serialize;

use crate::error::{check_len, Error, Result};
use crate::family::{FamilyKind, FamilySpec};
use crate::fourier::{dft, dft_frequencies, idft};
use crate::kernel::CovarianceMatrix;
use crate::signal::{adjoint_extract, reconstruct_with, Event, SparseCode, Trial};

/// Per-frequency summary of one template.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralReport {
    pub omegas: Vec<f64>,
    pub psd: Vec<f64>,
    pub code_snr: f64,
    pub gains: Vec<f64>,
    pub unregularized_spectrum: Vec<Complex64>,
    pub filtered_spectrum: Vec<Complex64>,
}

/// One CSV row of a [`SpectralReport`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectralRow {
    pub omega: f64,
    pub psd: f64,
    pub gain: f64,
    pub unreg_spectrum_mag: f64,
    pub filtered_spectrum_mag: f64,
}

impl SpectralReport {
    pub fn rows(&self) -> Vec<SpectralRow> {
        (0..self.omegas.len())
            .map(|k| SpectralRow {
                omega: self.omegas[k],
                psd: self.psd[k],
                gain: self.gains[k],
                unreg_spectrum_mag: self.unregularized_spectrum[k].norm(),
                filtered_spectrum_mag: self.filtered_spectrum[k].norm(),
            })
            .collect()
    }
}

fn energy(codes: &[SparseCode], c: usize) -> f64 {
    codes
        .iter()
        .flat_map(|code| code.events(c))
        .map(|e| e.amplitude * e.amplitude)
        .sum()
}

/// `sum_{j,i} x_{c,i}^2 / noise_variance`.
pub fn code_snr(codes: &[SparseCode], c: usize, noise_variance: f64) -> Result<f64> {
    if !(noise_variance > 0.0) {
        return Err(Error::Domain(format!(
            "noise variance must be positive, got {noise_variance}"
        )));
    }
    Ok(energy(codes, c) / noise_variance)
}

/// `g_k = psd_k / (psd_k + 1 / code_snr)`.
pub fn wiener_gains(psd: &[f64], code_snr: f64) -> Result<Vec<f64>> {
    if !(code_snr > 0.0) {
        return Err(Error::Domain(format!("code-SNR must be positive, got {code_snr}")));
    }
    if let Some(bad) = psd.iter().find(|&&g| !(g > 0.0)) {
        return Err(Error::Domain(format!("PSD values must be positive, got {bad}")));
    }
    let inv = 1.0 / code_snr;
    Ok(psd.iter().map(|&g| g / (g + inv)).collect())
}

fn overlapping(events: &[Event], k: usize) -> bool {
    events.windows(2).any(|w| w[1].location - w[0].location < k)
}

/// Wiener-filtered least-squares template and its report.
#[derive(Clone, Debug)]
pub struct WienerPrediction {
    pub template: Vec<f64>,
    /// Unregularized estimate `E_c / alpha^2` (segment average weighted by
    /// amplitude).
    pub unregularized: Vec<f64>,
    pub report: SpectralReport,
    /// Events of this template overlap in some trial, so `X^T X` is not a
    /// scaled identity and the prediction is approximate.
    pub overlap: bool,
}

/// Filters the unregularized estimate of template `c` with the Wiener gains
/// of `cov`. The other templates are taken from `templates` and subtracted.
pub fn wiener_predicted_template(
    codes: &[SparseCode],
    trials: &[Trial],
    c: usize,
    templates: &[Vec<f64>],
    family: &FamilySpec,
    cov: &CovarianceMatrix,
) -> Result<WienerPrediction> {
    if family.kind() != FamilyKind::Gaussian {
        return Err(Error::InvalidInput(
            "the Wiener form only holds for Gaussian observations".into(),
        ));
    }
    check_len("codes vs trials", trials.len(), codes.len())?;
    if c >= templates.len() {
        return Err(Error::InvalidInput(format!("template index {c} out of range")));
    }
    let k = cov.dim();
    check_len("template length", k, templates[c].len())?;
    let mut others = templates.to_vec();
    others[c] = vec![0.0; k];
    let mut extracted = vec![0.0; k];
    let mut overlap = false;
    for (t, code) in trials.iter().zip(codes) {
        let fitted = reconstruct_with(&others, code, &t.baseline, t.len())?;
        let resid: Vec<f64> = t.observations.iter().zip(&fitted).map(|(y, f)| y - f).collect();
        for (e, v) in extracted.iter_mut().zip(adjoint_extract(code.events(c), &resid, k)?) {
            *e += v;
        }
        overlap |= overlapping(code.events(c), k);
    }
    let total = energy(codes, c);
    if total == 0.0 {
        return Err(Error::InvalidInput(format!("template {c} has no events")));
    }
    let snr = total / family.dispersion();
    let unregularized: Vec<f64> = extracted.iter().map(|v| v / total).collect();
    let psd = cov.spectrum();
    let gains = wiener_gains(&psd, snr)?;
    let spectrum = dft(&unregularized);
    let filtered: Vec<Complex64> = spectrum.iter().zip(&gains).map(|(s, g)| s * g).collect();
    let template = idft(&filtered).iter().map(|z| z.re).collect();
    Ok(WienerPrediction {
        template,
        unregularized,
        report: SpectralReport {
            omegas: dft_frequencies(k),
            psd,
            code_snr: snr,
            gains,
            unregularized_spectrum: spectrum,
            filtered_spectrum: filtered,
        },
        overlap,
    })
}

/// Gains with the per-lag information `R_kk = phi^{-1} sum_{j,i} x_i^2 w(mu_{n_i + k})`,
/// `w` the inverse link derivative: `g_k = psd_k / (psd_k + 1 / R_kk)`, and
/// `g_k = 0` where `R_kk = 0`. The lag index is used as a frequency index,
/// which is a heuristic outside the scaled-identity case.
pub fn general_case_gains(
    codes: &[SparseCode],
    mu_per_trial: &[Vec<f64>],
    family: &FamilySpec,
    psd: &[f64],
    c: usize,
) -> Result<Vec<f64>> {
    check_len("means vs codes", codes.len(), mu_per_trial.len())?;
    let k = psd.len();
    let mut r = vec![0.0; k];
    for (code, mu) in codes.iter().zip(mu_per_trial) {
        let events = code.events(c);
        if overlapping(events, k) {
            return Err(Error::InvalidInput(
                "overlapping events: the diagonal information form does not apply".into(),
            ));
        }
        let w = family.link_derivative_inverse(mu)?;
        for e in events {
            if e.location + k > mu.len() {
                return Err(Error::InvalidInput(format!(
                    "event at {} does not fit in {} samples",
                    e.location,
                    mu.len()
                )));
            }
            for (p, rp) in r.iter_mut().enumerate() {
                *rp += e.amplitude * e.amplitude * w[e.location + p];
            }
        }
    }
    let phi = family.dispersion();
    Ok(psd
        .iter()
        .zip(&r)
        .map(|(&g, &rk)| {
            let rk = rk / phi;
            if rk > 0.0 {
                g / (g + 1.0 / rk)
            } else {
                0.0
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{circulant_cov, matern_cov, KernelSpec};
    use crate::signal::{l2_norm, Baseline};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn one(events: Vec<Event>) -> SparseCode {
        SparseCode::from_events(vec![events]).unwrap()
    }

    #[test]
    fn snr_examples() {
        assert_eq!(code_snr(&[SparseCode::empty(1)], 0, 1.0).unwrap(), 0.0);
        let c = one(vec![Event::new(0, 3.0), Event::new(10, 4.0)]);
        assert_relative_eq!(code_snr(&[c], 0, 5.0).unwrap(), 5.0, max_relative = 1e-15);
        let j = 7;
        let codes = vec![one(vec![Event::new(2, 1.0)]); j];
        assert_eq!(code_snr(&codes, 0, 1.0).unwrap(), j as f64);
        assert!(code_snr(&codes, 0, 0.0).is_err());
    }

    #[test]
    fn gain_examples() {
        assert_eq!(wiener_gains(&[1.0; 5], 1.0).unwrap(), vec![0.5; 5]);
        let g = wiener_gains(&[2.3094, 0.5774], 1.0).unwrap();
        assert_relative_eq!(g[0], 2.3094 / 3.3094, max_relative = 1e-15);
        assert_relative_eq!(g[1], 0.5774 / 1.5774, max_relative = 1e-15);
        assert_relative_eq!(g[0], 0.69783, epsilon = 1e-5);
        assert_relative_eq!(g[1], 0.36604, epsilon = 1e-5);
        assert!(wiener_gains(&[1.0, 0.0], 1.0).is_err());
        assert!(wiener_gains(&[1.0], 0.0).is_err());
    }

    #[test]
    fn white_prior_gives_constant_gain() {
        let cov = matern_cov(&KernelSpec::white(0.3).unwrap(), 16).unwrap();
        let g = wiener_gains(&cov.spectrum(), 4.0).unwrap();
        assert!(g.iter().all(|&v| v == g[0]));
    }

    proptest! {
        #[test]
        fn gains_increase_with_snr(l in 0.5f64..50.0, a in 0.01f64..100.0, f in 1.01f64..10.0) {
            let spec = KernelSpec::matern32(1.0, l).unwrap();
            let psd: Vec<f64> = dft_frequencies(32).iter().map(|&w| spec.psd(w)).collect();
            let lo = wiener_gains(&psd, a).unwrap();
            let hi = wiener_gains(&psd, a * f).unwrap();
            for (x, y) in lo.iter().zip(&hi) {
                prop_assert!(y > x);
                prop_assert!(*x > 0.0 && *y < 1.0);
            }
        }

        #[test]
        fn gains_lowpass(l in 0.5f64..50.0, a in 0.01f64..100.0) {
            let spec = KernelSpec::matern32(1.0, l).unwrap();
            let omegas: Vec<f64> = (0..=64).map(|i| std::f64::consts::PI * i as f64 / 64.0).collect();
            let psd: Vec<f64> = omegas.iter().map(|&w| spec.psd(w)).collect();
            let g = wiener_gains(&psd, a).unwrap();
            for w in g.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
        }
    }

    fn instance(amp_scale: f64, phi: f64, k: usize) -> (Vec<SparseCode>, Vec<Trial>, Vec<f64>) {
        let n = 6 * k;
        let codes = vec![
            one(vec![Event::new(1, 2.0 * amp_scale), Event::new(3 * k, -1.5 * amp_scale)]),
            one(vec![Event::new(2 * k, 1.0 * amp_scale)]),
        ];
        let trials = (0..2)
            .map(|j| {
                let y = (0..n)
                    .map(|i| ((i * 37 + j * 11) % 17) as f64 / 8.0 - 1.0 + (i as f64 / 5.0).sin() * phi.sqrt())
                    .collect();
                Trial::new(y, Baseline::Scalar(0.0)).unwrap()
            })
            .collect();
        (codes, trials, vec![0.0; k])
    }

    #[test]
    fn infinite_snr_returns_unregularized() {
        let k = 16;
        let (codes, trials, h) = instance(1e6, 1.0, k);
        let cov = matern_cov(&KernelSpec::matern32(1.0, 5.0).unwrap(), k).unwrap();
        let fam = FamilySpec::gaussian(1.0).unwrap();
        let p = wiener_predicted_template(&codes, &trials, 0, &[h], &fam, &cov).unwrap();
        let diff: Vec<f64> = p.template.iter().zip(&p.unregularized).map(|(a, b)| a - b).collect();
        assert!(l2_norm(&diff) / l2_norm(&p.unregularized) <= 1e-4);
        assert!(!p.overlap);
    }

    #[test]
    fn prior_dominated_is_lowpass() {
        let k = 32;
        let (codes, trials, h) = instance(1.0, 1.0, k);
        let cov = matern_cov(&KernelSpec::matern32(1.0, 8.0).unwrap(), k).unwrap();
        let fam = FamilySpec::gaussian(1e4).unwrap();
        let p = wiener_predicted_template(&codes, &trials, 0, &[h], &fam, &cov).unwrap();
        let out = dft(&p.template);
        let inp = &p.report.unregularized_spectrum;
        for (f, &w) in p.report.omegas.iter().enumerate() {
            let ratio = out[f].norm() / inp[f].norm().max(1e-300);
            assert_relative_eq!(ratio, p.report.gains[f], max_relative = 1e-6);
            if w.abs() >= std::f64::consts::FRAC_PI_2 {
                assert!(ratio <= p.report.gains[0]);
            }
        }
    }

    #[test]
    fn white_prior_preserves_direction() {
        let k = 12;
        let (codes, trials, h) = instance(1.0, 1.0, k);
        let cov = matern_cov(&KernelSpec::white(0.05).unwrap(), k).unwrap();
        let fam = FamilySpec::gaussian(2.0).unwrap();
        let p = wiener_predicted_template(&codes, &trials, 0, &[h], &fam, &cov).unwrap();
        let cos = p.template.iter().zip(&p.unregularized).map(|(a, b)| a * b).sum::<f64>()
            / (l2_norm(&p.template) * l2_norm(&p.unregularized));
        assert!(cos >= 1.0 - 1e-10);
        assert!(l2_norm(&p.template) < l2_norm(&p.unregularized));
        assert!(p.report.gains.iter().all(|&g| (g - p.report.gains[0]).abs() <= 1e-12));
    }

    #[test]
    fn matches_closed_form_on_circulant_prior() {
        use crate::cdu::{irls_update, CduConfig, TemplateProblem};
        let k = 16;
        let (codes, trials, h) = instance(1.0, 1.0, k);
        let cov = circulant_cov(&KernelSpec::matern32(1.0, 4.0).unwrap(), k).unwrap();
        let fam = FamilySpec::gaussian(1.5).unwrap();
        let p = wiener_predicted_template(&codes, &trials, 0, &[h.clone()], &fam, &cov).unwrap();
        let problem = TemplateProblem::new(&[vec![0.1; k]], 0, &codes, &trials, &fam).unwrap();
        let out = irls_update(
            &[0.1; 16],
            &problem,
            &cov.factor().unwrap(),
            &CduConfig::default_for(FamilyKind::Gaussian),
        )
        .unwrap();
        let diff: Vec<f64> = out.unnormalized.iter().zip(&p.template).map(|(a, b)| a - b).collect();
        assert!(l2_norm(&diff) / l2_norm(&out.unnormalized) <= 1e-8);
    }

    #[test]
    fn rejects_bernoulli_and_empty() {
        let k = 8;
        let (codes, trials, h) = instance(1.0, 1.0, k);
        let cov = matern_cov(&KernelSpec::matern32(1.0, 2.0).unwrap(), k).unwrap();
        assert!(wiener_predicted_template(&codes, &trials, 0, &[h.clone()], &FamilySpec::bernoulli(), &cov).is_err());
        let empty = vec![SparseCode::empty(1); 2];
        let fam = FamilySpec::gaussian(1.0).unwrap();
        assert!(wiener_predicted_template(&empty, &trials, 0, &[h], &fam, &cov).is_err());
    }

    #[test]
    fn general_case_examples() {
        let k = 8;
        let psd: Vec<f64> = (0..k).map(|i| 1.0 + i as f64).collect();
        let codes = vec![one(vec![Event::new(0, 2.0), Event::new(20, 3.0)])];
        let n = 40;
        let fam = FamilySpec::gaussian(2.0).unwrap();
        let g = general_case_gains(&codes, &[vec![0.3; n]], &fam, &psd, 0).unwrap();
        let want = wiener_gains(&psd, 13.0 / 2.0).unwrap();
        for (a, b) in g.iter().zip(&want) {
            assert_relative_eq!(a, b, max_relative = 1e-14);
        }
        let bern = FamilySpec::bernoulli();
        let g = general_case_gains(&codes, &[vec![0.5; n]], &bern, &psd, 0).unwrap();
        for (a, &gam) in g.iter().zip(&psd) {
            assert_relative_eq!(*a, gam / (gam + 4.0 / 13.0), max_relative = 1e-14);
        }
        let g = general_case_gains(&codes, &[vec![1.0 - 1e-15; n]], &bern, &psd, 0).unwrap();
        assert!(g.iter().all(|&v| v < 1e-12));
        let overl = vec![one(vec![Event::new(0, 1.0), Event::new(3, 1.0)])];
        assert!(general_case_gains(&overl, &[vec![0.5; n]], &bern, &psd, 0).is_err());
    }
}
