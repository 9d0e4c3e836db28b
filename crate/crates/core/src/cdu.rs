//! Template update: penalized Newton/IRLS on one template at a time with the
//! Gaussian-process prior as a quadratic penalty, followed by unit-norm
//! projection.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::family::{FamilyKind, FamilySpec};
use crate::kernel::{CovarianceMatrix, PriorFactor};
use crate::signal::{
    adjoint_extract, l2_norm, reconstruct_with, weighted_gram, Dictionary, Event, SparseCode,
    Trial,
};

/// Inner Newton settings of the template update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CduConfig {
    pub newton_iters: usize,
    pub step_damping: f64,
    /// Halve the step (up to 10 times) whenever the objective would increase.
    #[serde(default = "default_true")]
    pub backtracking: bool,
}

fn default_true() -> bool {
    true
}

impl CduConfig {
    /// One exact step for Gaussian observations, three damped-by-backtracking
    /// steps otherwise.
    pub fn default_for(kind: FamilyKind) -> Self {
        let newton_iters = match kind {
            FamilyKind::Gaussian => 1,
            FamilyKind::Bernoulli => 3,
        };
        Self {
            newton_iters,
            step_damping: 1.0,
            backtracking: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.newton_iters == 0 {
            return Err(Error::InvalidInput("newton_iters must be at least 1".into()));
        }
        if !(self.step_damping > 0.0 && self.step_damping <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "step_damping must lie in (0, 1], got {}",
                self.step_damping
            )));
        }
        Ok(())
    }
}

const MAX_HALVINGS: usize = 10;

/// The objective restricted to one template, with every other template and
/// all codes held fixed.
pub struct TemplateProblem<'a> {
    family: FamilySpec,
    trials: &'a [Trial],
    events: Vec<&'a [Event]>,
    /// Baseline plus the contribution of every other template, per trial.
    offsets: Vec<Vec<f64>>,
    k: usize,
}

impl<'a> TemplateProblem<'a> {
    pub fn new(
        templates: &[Vec<f64>],
        c: usize,
        codes: &'a [SparseCode],
        trials: &'a [Trial],
        family: &FamilySpec,
    ) -> Result<Self> {
        check_len("codes vs trials", trials.len(), codes.len())?;
        if c >= templates.len() {
            return Err(Error::InvalidInput(format!(
                "template index {c} out of range for {} templates",
                templates.len()
            )));
        }
        let k = templates[c].len();
        let mut others = templates.to_vec();
        others[c] = vec![0.0; k];
        let offsets = trials
            .iter()
            .zip(codes)
            .map(|(t, code)| reconstruct_with(&others, code, &t.baseline, t.len()))
            .collect::<Result<Vec<_>>>()?;
        let events = codes.iter().map(|code| code.events(c)).collect();
        Ok(Self {
            family: *family,
            trials,
            events,
            offsets,
            k,
        })
    }

    pub fn template_len(&self) -> usize {
        self.k
    }

    /// Whether any trial has an event of this template.
    pub fn has_events(&self) -> bool {
        self.events.iter().any(|e| !e.is_empty())
    }

    fn eta(&self, j: usize, h: &[f64]) -> Vec<f64> {
        let mut eta = self.offsets[j].clone();
        for e in self.events[j] {
            for (o, &hk) in eta[e.location..e.location + self.k].iter_mut().zip(h) {
                *o += e.amplitude * hk;
            }
        }
        eta
    }

    /// Per-trial values reduced in ascending trial order.
    fn per_trial<T: Send, F>(&self, f: F) -> Vec<T>
    where
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..self.trials.len()).into_par_iter().map(f).collect()
    }

    /// Negative log-likelihood summed over trials (without `c(y, phi)`).
    pub fn nll(&self, h: &[f64]) -> f64 {
        self.per_trial(|j| {
            let eta = self.eta(j, h);
            self.trials[j]
                .observations
                .iter()
                .zip(&eta)
                .map(|(&y, &e)| self.family.nll_sample(y, e))
                .sum::<f64>()
        })
        .into_iter()
        .sum()
    }

    /// Negative log-posterior of this template, up to constants.
    pub fn objective(&self, h: &[f64], prior: &PriorFactor) -> f64 {
        self.nll(h) + 0.5 * prior.quad(h)
    }

    pub fn gradient(&self, h: &[f64], prior: &PriorFactor) -> Vec<f64> {
        let mut g = prior.solve(h);
        for (gi, l) in g.iter_mut().zip(self.nll_gradient(h)) {
            *gi += l;
        }
        g
    }

    /// Gradient of [`TemplateProblem::nll`].
    pub fn nll_gradient(&self, h: &[f64]) -> Vec<f64> {
        let phi = self.family.dispersion();
        let parts = self.per_trial(|j| {
            let eta = self.eta(j, h);
            let resid: Vec<f64> = self.trials[j]
                .observations
                .iter()
                .zip(&eta)
                .map(|(&y, &e)| y - self.family.inverse_link_scalar(e))
                .collect();
            adjoint_extract(self.events[j], &resid, self.k).expect("locations checked")
        });
        let mut g = vec![0.0; self.k];
        for part in parts {
            for (gi, p) in g.iter_mut().zip(part) {
                *gi -= p / phi;
            }
        }
        g
    }

    pub fn hessian(&self, h: &[f64], prior: &PriorFactor) -> DMatrix<f64> {
        let phi = self.family.dispersion();
        let parts = self.per_trial(|j| {
            let w: Vec<f64> = self
                .eta(j, h)
                .iter()
                .map(|&e| self.family.weight_from_eta(e))
                .collect();
            weighted_gram(self.events[j], &w, self.k).expect("weights are nonnegative")
        });
        let mut hess = prior.precision().clone();
        for part in parts {
            hess += part / phi;
        }
        hess
    }
}

/// `-phi^{-1} sum_j X_c^T (y - mu) + Sigma^{-1} h_c` at `h_c`, the other
/// templates taken from `templates`.
pub fn posterior_gradient(
    h_c: &[f64],
    c: usize,
    templates: &[Vec<f64>],
    codes: &[SparseCode],
    trials: &[Trial],
    family: &FamilySpec,
    cov: &CovarianceMatrix,
) -> Result<Vec<f64>> {
    let problem = TemplateProblem::new(templates, c, codes, trials, family)?;
    check_len("template length", problem.k, h_c.len())?;
    check_len("covariance dimension", problem.k, cov.dim())?;
    Ok(problem.gradient(h_c, &cov.factor()?))
}

/// `phi^{-1} sum_j X_c^T W X_c + Sigma^{-1}` at `h_c`.
pub fn posterior_hessian(
    h_c: &[f64],
    c: usize,
    templates: &[Vec<f64>],
    codes: &[SparseCode],
    trials: &[Trial],
    family: &FamilySpec,
    cov: &CovarianceMatrix,
) -> Result<DMatrix<f64>> {
    let problem = TemplateProblem::new(templates, c, codes, trials, family)?;
    check_len("template length", problem.k, h_c.len())?;
    check_len("covariance dimension", problem.k, cov.dim())?;
    Ok(problem.hessian(h_c, &cov.factor()?))
}

/// Result of updating one template.
#[derive(Clone, Debug, PartialEq)]
pub struct IrlsOutcome {
    /// Unit-norm template.
    pub template: Vec<f64>,
    /// Newton iterate before normalization (zero when degenerate).
    pub unnormalized: Vec<f64>,
    pub norm: f64,
    /// No events support this template; the previous template was kept.
    pub degenerate: bool,
}

/// Damped Newton steps on one template from the starting point `h`, then
/// normalization.
pub fn irls_update(
    h: &[f64],
    problem: &TemplateProblem<'_>,
    prior: &PriorFactor,
    cfg: &CduConfig,
) -> Result<IrlsOutcome> {
    cfg.validate()?;
    check_len("template length", problem.k, h.len())?;
    check_len("covariance dimension", problem.k, prior.dim())?;
    if !problem.has_events() {
        let norm = l2_norm(h);
        let template = if norm > 0.0 {
            h.iter().map(|v| v / norm).collect()
        } else {
            h.to_vec()
        };
        return Ok(IrlsOutcome {
            template,
            unnormalized: vec![0.0; problem.k],
            norm: 0.0,
            degenerate: true,
        });
    }
    let mut cur = h.to_vec();
    let mut cur_obj = problem.objective(&cur, prior);
    for _ in 0..cfg.newton_iters {
        let g = DVector::from_vec(problem.gradient(&cur, prior));
        let hess = problem.hessian(&cur, prior);
        let step = hess
            .cholesky()
            .ok_or_else(|| Error::Numerical("template Hessian is not positive definite".into()))?
            .solve(&g);
        let mut t = cfg.step_damping;
        let mut next = None;
        for attempt in 0..=MAX_HALVINGS {
            let cand: Vec<f64> = cur.iter().zip(step.iter()).map(|(c, s)| c - t * s).collect();
            let obj = problem.objective(&cand, prior);
            if !cfg.backtracking || obj <= cur_obj {
                next = Some((cand, obj));
                break;
            }
            if attempt < MAX_HALVINGS {
                t *= 0.5;
            }
        }
        match next {
            Some((cand, obj)) => {
                cur = cand;
                cur_obj = obj;
            }
            None => break,
        }
    }
    if cur.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("template update diverged".into()));
    }
    let norm = l2_norm(&cur);
    if norm == 0.0 {
        return Err(Error::Numerical("template update returned the zero vector".into()));
    }
    Ok(IrlsOutcome {
        template: cur.iter().map(|v| v / norm).collect(),
        unnormalized: cur,
        norm,
        degenerate: false,
    })
}

/// Outcome of one sweep over all templates.
#[derive(Clone, Debug)]
pub struct CyclicOutcome {
    pub dict: Dictionary,
    pub outcomes: Vec<IrlsOutcome>,
}

/// Updates templates `0..C` in order, each against the freshest others.
pub fn cyclic_update(
    dict: &Dictionary,
    codes: &[SparseCode],
    trials: &[Trial],
    family: &FamilySpec,
    priors: &[PriorFactor],
    cfg: &CduConfig,
) -> Result<CyclicOutcome> {
    let order: Vec<usize> = (0..dict.num_templates()).collect();
    cyclic_update_in_order(dict, codes, trials, family, priors, cfg, &order)
}

/// [`cyclic_update`] with an explicit visiting order (a permutation of `0..C`).
pub fn cyclic_update_in_order(
    dict: &Dictionary,
    codes: &[SparseCode],
    trials: &[Trial],
    family: &FamilySpec,
    priors: &[PriorFactor],
    cfg: &CduConfig,
    order: &[usize],
) -> Result<CyclicOutcome> {
    let c_count = dict.num_templates();
    check_len("prior count", c_count, priors.len())?;
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (0..c_count).collect::<Vec<_>>() {
        return Err(Error::InvalidInput("update order is not a permutation".into()));
    }
    let mut next = dict.clone();
    let mut outcomes: Vec<Option<IrlsOutcome>> = vec![None; c_count];
    for &c in order {
        let problem = TemplateProblem::new(next.templates(), c, codes, trials, family)?;
        let out = irls_update(next.template(c), &problem, &priors[c], cfg)?;
        next.set_template_unchecked(c, out.template.clone());
        outcomes[c] = Some(out);
    }
    Ok(CyclicOutcome {
        dict: next,
        outcomes: outcomes.into_iter().map(|o| o.expect("every index visited")).collect(),
    })
}

/// Full negative log-posterior: summed negative log-likelihood over trials
/// plus `1/2 h_c^T Sigma_c^{-1} h_c` for every template.
pub fn neg_log_posterior(
    templates: &[Vec<f64>],
    codes: &[SparseCode],
    trials: &[Trial],
    family: &FamilySpec,
    priors: &[PriorFactor],
) -> Result<f64> {
    check_len("codes vs trials", trials.len(), codes.len())?;
    check_len("prior count", templates.len(), priors.len())?;
    let nll: Vec<f64> = trials
        .par_iter()
        .zip(codes)
        .map(|(t, code)| {
            let eta = reconstruct_with(templates, code, &t.baseline, t.len())?;
            family.neg_log_likelihood(&t.observations, &eta)
        })
        .collect::<Result<Vec<f64>>>()?;
    let prior: f64 = templates.iter().zip(priors).map(|(h, p)| 0.5 * p.quad(h)).sum();
    Ok(nll.into_iter().sum::<f64>() + prior)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{matern_cov, KernelSpec};
    use crate::signal::Baseline;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn code1(events: Vec<Event>) -> SparseCode {
        SparseCode::from_events(vec![events]).unwrap()
    }

    fn white(var: f64, k: usize) -> CovarianceMatrix {
        matern_cov(&KernelSpec::white(var).unwrap(), k).unwrap()
    }

    /// Dense `X` (N x K) for one template's events.
    fn dense_x(events: &[Event], n: usize, k: usize) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(n, k);
        for e in events {
            for p in 0..k {
                x[(e.location + p, p)] += e.amplitude;
            }
        }
        x
    }

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        num / l2_norm(b).max(1e-300)
    }

    #[test]
    fn stationary_at_perfect_fit() {
        let k = 6;
        let h = vec![0.1, 0.4, 0.7, 0.5, 0.2, -0.1];
        let code = code1(vec![Event::new(3, 2.0), Event::new(20, -1.5)]);
        let y = reconstruct_with(&[h.clone()], &code, &Baseline::Scalar(0.5), 30).unwrap();
        let trials = vec![Trial::new(y, Baseline::Scalar(0.5)).unwrap()];
        let cov = matern_cov(&KernelSpec::matern32(1e12, 2.0).unwrap(), k).unwrap();
        let g = posterior_gradient(
            &h,
            0,
            &[h.clone()],
            &[code],
            &trials,
            &FamilySpec::gaussian(2.0).unwrap(),
            &cov,
        )
        .unwrap();
        assert!(g.iter().all(|v| v.abs() <= 1e-6), "{g:?}");
    }

    #[test]
    fn gradient_at_zero_is_extracted_segment() {
        let k = 4;
        let y: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 1.0).collect();
        let trials = vec![Trial::new(y.clone(), Baseline::Scalar(0.0)).unwrap()];
        let code = code1(vec![Event::new(5, 1.0)]);
        let phi = 2.5;
        let g = posterior_gradient(
            &[0.0; 4],
            0,
            &[vec![0.0; 4]],
            &[code],
            &trials,
            &FamilySpec::gaussian(phi).unwrap(),
            &white(1.0, k),
        )
        .unwrap();
        for p in 0..k {
            assert_relative_eq!(g[p], -y[5 + p] / phi, max_relative = 1e-12);
        }
    }

    #[test]
    fn hessian_identity_examples() {
        let k = 5;
        let trials = vec![Trial::new(vec![0.3; 40], Baseline::Scalar(0.0)).unwrap()];
        let phi = 2.0;
        let fam = FamilySpec::gaussian(phi).unwrap();
        let prec = 1.0 / (1.0 + crate::kernel::JITTER);
        let h = vec![0.2; k];
        let one = posterior_hessian(
            &h,
            0,
            &[h.clone()],
            &[code1(vec![Event::new(4, 1.0)])],
            &trials,
            &fam,
            &white(1.0, k),
        )
        .unwrap();
        let two = posterior_hessian(
            &h,
            0,
            &[h.clone()],
            &[code1(vec![Event::new(2, 3.0), Event::new(20, 4.0)])],
            &trials,
            &fam,
            &white(1.0, k),
        )
        .unwrap();
        for i in 0..k {
            for j in 0..k {
                let d = if i == j { 1.0 } else { 0.0 };
                assert_relative_eq!(one[(i, j)], d * (1.0 / phi + prec), epsilon = 1e-14);
                assert_relative_eq!(two[(i, j)], d * (25.0 / phi + prec), epsilon = 1e-12);
            }
        }
    }

    fn random_instance(
        rng: &mut ChaCha8Rng,
        fam: FamilySpec,
        c_count: usize,
        k: usize,
    ) -> (Vec<Vec<f64>>, Vec<SparseCode>, Vec<Trial>) {
        let n = 3 * k + 10;
        let templates: Vec<Vec<f64>> = (0..c_count)
            .map(|_| (0..k).map(|_| rng.random_range(-0.6..0.6)).collect())
            .collect();
        let mut codes = Vec::new();
        let mut trials = Vec::new();
        for _ in 0..3 {
            let events = (0..c_count)
                .map(|_| {
                    let mut locs: Vec<usize> = (0..3).map(|_| rng.random_range(0..=n - k)).collect();
                    locs.sort_unstable();
                    locs.dedup();
                    locs.into_iter()
                        .map(|l| Event::new(l, rng.random_range(-2.0..2.0)))
                        .collect()
                })
                .collect();
            let code = SparseCode::from_events(events).unwrap();
            let a = rng.random_range(-1.0..0.5);
            let y: Vec<f64> = (0..n)
                .map(|_| match fam.kind() {
                    FamilyKind::Gaussian => rng.random_range(-2.0..2.0),
                    FamilyKind::Bernoulli => f64::from(rng.random_bool(0.3)),
                })
                .collect();
            codes.push(code);
            trials.push(Trial::new(y, Baseline::Scalar(a)).unwrap());
        }
        (templates, codes, trials)
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for fam in [FamilySpec::gaussian(1.7).unwrap(), FamilySpec::bernoulli()] {
            for _ in 0..10 {
                let k = rng.random_range(3..12);
                let (templates, codes, trials) = random_instance(&mut rng, fam, 2, k);
                let cov = matern_cov(&KernelSpec::matern32(1.0, 3.0).unwrap(), k).unwrap();
                let prior = cov.factor().unwrap();
                let problem = TemplateProblem::new(&templates, 1, &codes, &trials, &fam).unwrap();
                let h = templates[1].clone();
                let g = problem.gradient(&h, &prior);
                let hess = problem.hessian(&h, &prior);
                let eps = 1e-5;
                let mut g_fd = vec![0.0; k];
                let mut h_fd = DMatrix::zeros(k, k);
                for i in 0..k {
                    let mut hp = h.clone();
                    let mut hm = h.clone();
                    hp[i] += eps;
                    hm[i] -= eps;
                    g_fd[i] = (problem.objective(&hp, &prior) - problem.objective(&hm, &prior))
                        / (2.0 * eps);
                    let gp = problem.gradient(&hp, &prior);
                    let gm = problem.gradient(&hm, &prior);
                    for r in 0..k {
                        h_fd[(r, i)] = (gp[r] - gm[r]) / (2.0 * eps);
                    }
                }
                assert!(rel(&g, &g_fd) <= 1e-6, "gradient rel err {}", rel(&g, &g_fd));
                let herr = (&hess - &h_fd).norm() / h_fd.norm();
                assert!(herr <= 1e-4, "hessian rel err {herr}");
            }
        }
    }

    #[test]
    fn one_gaussian_step_is_the_ridge_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let k = rng.random_range(2..16);
            let fam = FamilySpec::gaussian(rng.random_range(0.5..5.0)).unwrap();
            let (templates, codes, trials) = random_instance(&mut rng, fam, 1, k);
            let cov =
                matern_cov(&KernelSpec::matern32(1.0, rng.random_range(0.5..10.0)).unwrap(), k)
                    .unwrap();
            let prior = cov.factor().unwrap();
            let problem = TemplateProblem::new(&templates, 0, &codes, &trials, &fam).unwrap();
            let cfg = CduConfig {
                newton_iters: 1,
                step_damping: 1.0,
                backtracking: false,
            };
            let out = irls_update(&templates[0], &problem, &prior, &cfg).unwrap();
            // dense normal equations: (X^T X / phi + Sigma^{-1}) h = X^T (y - a) / phi
            let mut lhs = cov.entries().clone().try_inverse().unwrap();
            let mut rhs = DVector::zeros(k);
            for (t, code) in trials.iter().zip(&codes) {
                let x = dense_x(code.events(0), t.len(), k);
                let z = DVector::from_iterator(t.len(), t.observations.iter().zip(t.baseline_vec()).map(|(y, a)| y - a));
                lhs += x.transpose() * &x / fam.dispersion();
                rhs += x.transpose() * z / fam.dispersion();
            }
            let want = lhs.lu().solve(&rhs).unwrap();
            let want: Vec<f64> = want.iter().copied().collect();
            assert!(rel(&out.unnormalized, &want) <= 1e-8);
            assert_relative_eq!(l2_norm(&out.template), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn empty_codes_are_degenerate() {
        let k = 4;
        let h = vec![0.5; k];
        let trials = vec![Trial::new(vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0], Baseline::Scalar(-1.0)).unwrap()];
        let codes = vec![SparseCode::empty(1)];
        for fam in [FamilySpec::gaussian(1.0).unwrap(), FamilySpec::bernoulli()] {
            let problem = TemplateProblem::new(&[h.clone()], 0, &codes, &trials, &fam).unwrap();
            let prior = white(1.0, k).factor().unwrap();
            let out = irls_update(&h, &problem, &prior, &CduConfig::default_for(fam.kind())).unwrap();
            assert!(out.degenerate);
            assert_eq!(out.unnormalized, vec![0.0; k]);
            assert_eq!(out.template, h);
        }
    }

    #[test]
    fn bernoulli_update_decreases_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fam = FamilySpec::bernoulli();
        for _ in 0..10 {
            let k = 8;
            let (templates, codes, trials) = random_instance(&mut rng, fam, 1, k);
            let prior = matern_cov(&KernelSpec::matern32(1.0, 4.0).unwrap(), k)
                .unwrap()
                .factor()
                .unwrap();
            let problem = TemplateProblem::new(&templates, 0, &codes, &trials, &fam).unwrap();
            let before = problem.objective(&templates[0], &prior);
            let out = irls_update(&templates[0], &problem, &prior, &CduConfig::default_for(fam.kind()))
                .unwrap();
            let after = problem.objective(&out.unnormalized, &prior);
            assert!(after < before, "{after} !< {before}");
        }
    }

    fn two_template_instance(overlap: bool) -> (Dictionary, Vec<SparseCode>, Vec<Trial>) {
        let k = 6;
        let dict = Dictionary::new(vec![
            vec![0.1, 0.5, 0.9, 0.6, 0.2, 0.0],
            vec![0.4, -0.3, 0.2, 0.7, -0.1, 0.3],
        ])
        .unwrap();
        let second = if overlap { 12 } else { 30 };
        let code = SparseCode::from_events(vec![
            vec![Event::new(10, 3.0), Event::new(45, -2.0)],
            vec![Event::new(second, 1.5)],
        ])
        .unwrap();
        let y: Vec<f64> = (0..60).map(|i| (i as f64 * 0.731).sin() * 2.0).collect();
        let _ = k;
        (dict, vec![code], vec![Trial::new(y, Baseline::Scalar(0.2)).unwrap()])
    }

    /// Joint minimizer over both templates of the Gaussian objective.
    fn joint_oracle(
        codes: &[SparseCode],
        trials: &[Trial],
        phi: f64,
        covs: &[CovarianceMatrix],
        k: usize,
    ) -> Vec<f64> {
        let c_count = covs.len();
        let mut lhs = DMatrix::zeros(c_count * k, c_count * k);
        let mut rhs = DVector::zeros(c_count * k);
        for (c, cov) in covs.iter().enumerate() {
            let inv = cov.entries().clone().try_inverse().unwrap();
            lhs.view_mut((c * k, c * k), (k, k)).copy_from(&inv);
        }
        for (t, code) in trials.iter().zip(codes) {
            let blocks: Vec<DMatrix<f64>> =
                (0..c_count).map(|c| dense_x(code.events(c), t.len(), k)).collect();
            let mut x = DMatrix::zeros(t.len(), c_count * k);
            for (c, b) in blocks.iter().enumerate() {
                x.view_mut((0, c * k), (t.len(), k)).copy_from(b);
            }
            let z = DVector::from_iterator(
                t.len(),
                t.observations.iter().zip(t.baseline_vec()).map(|(y, a)| y - a),
            );
            lhs += x.transpose() * &x / phi;
            rhs += x.transpose() * z / phi;
        }
        lhs.lu().solve(&rhs).unwrap().iter().copied().collect()
    }

    #[test]
    fn cyclic_matches_joint_solve_only_without_overlap() {
        let fam = FamilySpec::gaussian(1.3).unwrap();
        let covs = vec![
            matern_cov(&KernelSpec::matern32(1.0, 2.0).unwrap(), 6).unwrap(),
            matern_cov(&KernelSpec::matern32(0.5, 4.0).unwrap(), 6).unwrap(),
        ];
        let priors: Vec<PriorFactor> = covs.iter().map(|c| c.factor().unwrap()).collect();
        let cfg = CduConfig::default_for(FamilyKind::Gaussian);
        for overlap in [false, true] {
            let (dict, codes, trials) = two_template_instance(overlap);
            let out = cyclic_update(&dict, &codes, &trials, &fam, &priors, &cfg).unwrap();
            let joint = joint_oracle(&codes, &trials, 1.3, &covs, 6);
            let cyc: Vec<f64> = out.outcomes.iter().flat_map(|o| o.unnormalized.clone()).collect();
            let err = rel(&cyc, &joint);
            if overlap {
                assert!(err > 1e-6, "overlapping supports should couple the templates");
            } else {
                assert!(err <= 1e-10, "{err}");
            }
            for c in 0..2 {
                assert_relative_eq!(l2_norm(out.dict.template(c)), 1.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn order_irrelevant_for_disjoint_supports() {
        let fam = FamilySpec::gaussian(1.0).unwrap();
        let priors: Vec<PriorFactor> =
            (0..2).map(|_| white(2.0, 6).factor().unwrap()).collect();
        let (dict, codes, trials) = two_template_instance(false);
        let cfg = CduConfig::default_for(FamilyKind::Gaussian);
        let a = cyclic_update_in_order(&dict, &codes, &trials, &fam, &priors, &cfg, &[0, 1]).unwrap();
        let b = cyclic_update_in_order(&dict, &codes, &trials, &fam, &priors, &cfg, &[1, 0]).unwrap();
        for c in 0..2 {
            let d: f64 = a.dict.template(c).iter().zip(b.dict.template(c)).map(|(x, y)| (x - y).powi(2)).sum();
            assert!(d.sqrt() <= 1e-10);
        }
        assert!(cyclic_update_in_order(&dict, &codes, &trials, &fam, &priors, &cfg, &[0, 0]).is_err());
    }

    #[test]
    fn single_template_sweep_is_one_update() {
        let fam = FamilySpec::bernoulli();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (templates, codes, trials) = random_instance(&mut rng, fam, 1, 7);
        let dict = Dictionary::new(templates).unwrap();
        let prior = matern_cov(&KernelSpec::matern32(1.0, 2.0).unwrap(), 7).unwrap().factor().unwrap();
        let cfg = CduConfig::default_for(fam.kind());
        let sweep = cyclic_update(&dict, &codes, &trials, &fam, &[prior.clone()], &cfg).unwrap();
        let problem = TemplateProblem::new(dict.templates(), 0, &codes, &trials, &fam).unwrap();
        let single = irls_update(dict.template(0), &problem, &prior, &cfg).unwrap();
        assert_eq!(sweep.outcomes[0], single);
        assert_eq!(sweep.dict.template(0), &single.template[..]);
    }

    #[test]
    fn config_json_and_validation() {
        let cfg: CduConfig =
            serde_json::from_str(r#"{"newton_iters": 3, "step_damping": 1.0}"#).unwrap();
        assert!(cfg.backtracking);
        assert!(CduConfig { newton_iters: 0, ..cfg }.validate().is_err());
        assert!(CduConfig { step_damping: 1.5, ..cfg }.validate().is_err());
        assert!(CduConfig { step_damping: 0.0, ..cfg }.validate().is_err());
    }
}
