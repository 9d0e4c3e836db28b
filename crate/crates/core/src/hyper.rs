//! Kernel hyperparameters by Laplace-approximated marginal likelihood.
//!
//! `log p(y | theta) ~ -1/2 log det(I + L^T B L) - 1/2 h^T Sigma^{-1} h + log p(y | h)`
//! at the joint MAP template `h`, with `Sigma = L L^T` block-diagonal over
//! templates and `B` the weighted Gram matrix of all codes. The value is exact
//! for Gaussian observations.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::csc::{encode_all, CscConfig};
use crate::error::{check_len, Error, Result};
use crate::family::FamilySpec;
use crate::kernel::{matern_cov, KernelSpec, PriorFactor};
use crate::learn::{prepare_trials, prior_factors, ExperimentConfig};
use crate::signal::{
    adjoint_extract, cross_weighted_gram, l2_norm, reconstruct_with, Dictionary, SparseCode, Trial,
};

/// Ascent settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperConfig {
    /// Initial step in log-parameter space.
    #[serde(default = "default_step")]
    pub step_size: f64,
    #[serde(default = "default_iters")]
    pub max_iters: usize,
    /// Stop once the marginal improves by less than this.
    #[serde(default = "default_tol")]
    pub tolerance: f64,
    /// Central-difference half width in log space.
    #[serde(default = "default_fd")]
    pub fd_step: f64,
}

fn default_step() -> f64 {
    0.1
}
fn default_iters() -> usize {
    50
}
fn default_tol() -> f64 {
    1e-6
}
fn default_fd() -> f64 {
    1e-4
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self {
            step_size: default_step(),
            max_iters: default_iters(),
            tolerance: default_tol(),
            fd_step: default_fd(),
        }
    }
}

const MAX_HALVINGS: usize = 20;

/// Current hyperparameters and the marginal likelihood history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperState {
    pub kernels: Vec<KernelSpec>,
    pub marginal_ll_trace: Vec<f64>,
    pub step_size: f64,
    pub iteration: usize,
}

impl HyperState {
    pub fn new(kernels: Vec<KernelSpec>, step_size: f64) -> Self {
        Self {
            kernels,
            marginal_ll_trace: Vec::new(),
            step_size,
            iteration: 0,
        }
    }

    /// `(lengthscale, variance)` per template.
    pub fn theta(&self) -> Vec<(f64, f64)> {
        self.kernels.iter().map(|k| (k.lengthscale, k.variance)).collect()
    }
}

/// The block weighted Gram `phi^{-1} sum_j X^T W X` over all templates.
fn block_gram(
    templates: &[Vec<f64>],
    codes: &[SparseCode],
    trials: &[Trial],
    family: &FamilySpec,
) -> Result<DMatrix<f64>> {
    let c_count = templates.len();
    let k = templates[0].len();
    let parts = trials
        .par_iter()
        .zip(codes)
        .map(|(t, code)| {
            let eta = reconstruct_with(templates, code, &t.baseline, t.len())?;
            let w: Vec<f64> = eta.iter().map(|&e| family.weight_from_eta(e)).collect();
            let mut g = DMatrix::zeros(c_count * k, c_count * k);
            for a in 0..c_count {
                for b in a..c_count {
                    let blk = cross_weighted_gram(code.events(a), code.events(b), &w, k)?;
                    g.view_mut((a * k, b * k), (k, k)).copy_from(&blk);
                    if a != b {
                        g.view_mut((b * k, a * k), (k, k)).copy_from(&blk.transpose());
                    }
                }
            }
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = DMatrix::zeros(c_count * k, c_count * k);
    for p in parts {
        total += p;
    }
    Ok(total / family.dispersion())
}

fn log_likelihood(
    templates: &[Vec<f64>],
    codes: &[SparseCode],
    trials: &[Trial],
    family: &FamilySpec,
) -> Result<f64> {
    let parts = trials
        .par_iter()
        .zip(codes)
        .map(|(t, code)| {
            let eta = reconstruct_with(templates, code, &t.baseline, t.len())?;
            Ok(t.observations
                .iter()
                .zip(&eta)
                .map(|(&y, &e)| family.log_density(y, e))
                .sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(parts.into_iter().sum())
}

fn check_inputs(
    templates: &[Vec<f64>],
    codes: &[SparseCode],
    trials: &[Trial],
    kernels: &[KernelSpec],
) -> Result<usize> {
    check_len("codes vs trials", trials.len(), codes.len())?;
    check_len("kernels vs templates", templates.len(), kernels.len())?;
    let k = templates
        .first()
        .ok_or_else(|| Error::InvalidInput("no templates".into()))?
        .len();
    for h in templates {
        check_len("template length", k, h.len())?;
    }
    Ok(k)
}

/// Laplace approximation of `log p(y | theta)` around `templates`, which
/// should be the MAP estimate for these codes and kernels.
pub fn laplace_marginal_ll(
    trials: &[Trial],
    templates: &[Vec<f64>],
    codes: &[SparseCode],
    family: &FamilySpec,
    kernels: &[KernelSpec],
) -> Result<f64> {
    let k = check_inputs(templates, codes, trials, kernels)?;
    let priors = prior_factors(kernels, k)?;
    laplace_with_priors(trials, templates, codes, family, &priors)
}

fn laplace_with_priors(
    trials: &[Trial],
    templates: &[Vec<f64>],
    codes: &[SparseCode],
    family: &FamilySpec,
    priors: &[PriorFactor],
) -> Result<f64> {
    let c_count = templates.len();
    let k = templates[0].len();
    let b = block_gram(templates, codes, trials, family)?;
    let mut l = DMatrix::zeros(c_count * k, c_count * k);
    for (c, p) in priors.iter().enumerate() {
        l.view_mut((c * k, c * k), (k, k)).copy_from(&p.lower());
    }
    let m = DMatrix::identity(c_count * k, c_count * k) + l.transpose() * &b * &l;
    let m = (&m + m.transpose()) * 0.5;
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::Numerical("I + L^T B L is not positive definite".into()))?;
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let quad: f64 = templates.iter().zip(priors).map(|(h, p)| p.quad(h)).sum();
    Ok(-0.5 * logdet - 0.5 * quad + log_likelihood(templates, codes, trials, family)?)
}

/// Joint Newton solve for the MAP templates (not normalized) given codes.
pub fn joint_map(
    start: &[Vec<f64>],
    codes: &[SparseCode],
    trials: &[Trial],
    family: &FamilySpec,
    priors: &[PriorFactor],
) -> Result<Vec<Vec<f64>>> {
    let c_count = start.len();
    let k = start[0].len();
    let phi = family.dispersion();
    let objective = |hs: &[Vec<f64>]| -> Result<f64> {
        let quad: f64 = hs.iter().zip(priors).map(|(h, p)| p.quad(h)).sum();
        Ok(0.5 * quad - log_likelihood(hs, codes, trials, family)?)
    };
    let mut cur = start.to_vec();
    let mut cur_obj = objective(&cur)?;
    for _ in 0..50 {
        let mut grad = DVector::zeros(c_count * k);
        for (c, p) in priors.iter().enumerate() {
            for (i, v) in p.solve(&cur[c]).into_iter().enumerate() {
                grad[c * k + i] = v;
            }
        }
        for (t, code) in trials.iter().zip(codes) {
            let eta = reconstruct_with(&cur, code, &t.baseline, t.len())?;
            let resid: Vec<f64> = t
                .observations
                .iter()
                .zip(&eta)
                .map(|(&y, &e)| y - family.inverse_link_scalar(e))
                .collect();
            for c in 0..c_count {
                for (i, v) in adjoint_extract(code.events(c), &resid, k)?.into_iter().enumerate() {
                    grad[c * k + i] -= v / phi;
                }
            }
        }
        let mut hess = block_gram(&cur, codes, trials, family)?;
        for (c, p) in priors.iter().enumerate() {
            let mut blk = hess.view_mut((c * k, c * k), (k, k));
            blk += p.precision();
        }
        let step = hess
            .cholesky()
            .ok_or_else(|| Error::Numerical("joint Hessian is not positive definite".into()))?
            .solve(&grad);
        let mut t = 1.0;
        let mut moved = None;
        for _ in 0..=MAX_HALVINGS {
            let cand: Vec<Vec<f64>> = (0..c_count)
                .map(|c| (0..k).map(|i| cur[c][i] - t * step[c * k + i]).collect())
                .collect();
            let obj = objective(&cand)?;
            if obj <= cur_obj {
                moved = Some((cand, obj));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, obj)) = moved else { break };
        let change = t * step.norm();
        let scale = 1.0 + cur.iter().map(|h| l2_norm(h)).sum::<f64>();
        cur = cand;
        let gain = cur_obj - obj;
        cur_obj = obj;
        if change <= 1e-12 * scale || gain <= 1e-14 * (1.0 + cur_obj.abs()) {
            break;
        }
    }
    Ok(cur)
}

/// Marginal likelihood at `kernels` for fixed codes, evaluated at the MAP
/// templates for those kernels. Returns the value and the MAP templates.
pub fn marginal_at(
    kernels: &[KernelSpec],
    start: &[Vec<f64>],
    codes: &[SparseCode],
    trials: &[Trial],
    family: &FamilySpec,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let k = check_inputs(start, codes, trials, kernels)?;
    let priors = prior_factors(kernels, k)?;
    let map = joint_map(start, codes, trials, family, &priors)?;
    let value = laplace_with_priors(trials, &map, codes, family, &priors)?;
    Ok((value, map))
}

fn perturbed(kernels: &[KernelSpec], log_delta: &[f64]) -> Result<Vec<KernelSpec>> {
    kernels
        .iter()
        .enumerate()
        .map(|(c, k)| {
            k.with_lengthscale(k.lengthscale * log_delta[2 * c].exp())?
                .with_variance(k.variance * log_delta[2 * c + 1].exp())
        })
        .collect()
}

/// Central finite-difference gradient of [`marginal_at`] with respect to
/// `(log l_c, log sigma_c^2)`, ordered template by template.
pub fn marginal_gradient(
    kernels: &[KernelSpec],
    start: &[Vec<f64>],
    codes: &[SparseCode],
    trials: &[Trial],
    family: &FamilySpec,
    fd_step: f64,
) -> Result<Vec<f64>> {
    let dims = 2 * kernels.len();
    (0..2 * dims)
        .into_par_iter()
        .map(|idx| {
            let mut delta = vec![0.0; dims];
            delta[idx / 2] = if idx % 2 == 0 { fd_step } else { -fd_step };
            marginal_at(&perturbed(kernels, &delta)?, start, codes, trials, family).map(|v| v.0)
        })
        .collect::<Result<Vec<f64>>>()
        .map(|vals| {
            (0..dims)
                .map(|d| (vals[2 * d] - vals[2 * d + 1]) / (2.0 * fd_step))
                .collect()
        })
}

/// State after one ascent step.
#[derive(Clone, Debug)]
pub struct HyperStep {
    pub state: HyperState,
    /// Normalized MAP templates, the starting point of the next step.
    pub dict: Dictionary,
    /// Codes the last marginal was evaluated with (amplitudes relative to
    /// `map_templates`, not to `dict`).
    pub codes: Vec<SparseCode>,
    pub map_templates: Vec<Vec<f64>>,
}

/// One round: sparse coding with `dict`, MAP templates under the current
/// kernels, marginal evaluation, and a backtracking ascent step on the
/// kernel hyperparameters. `previous_codes` (if any) are kept when the fresh
/// codes would lower the marginal, so the trace never decreases.
#[allow(clippy::too_many_arguments)]
pub fn hyper_step(
    state: &HyperState,
    trials: &[Trial],
    dict: &Dictionary,
    previous_codes: Option<&[SparseCode]>,
    family: &FamilySpec,
    csc: &CscConfig,
    cfg: &HyperConfig,
) -> Result<HyperStep> {
    let start = dict.templates().to_vec();
    let mut codes = encode_all(dict, trials, family, csc)?;
    let (mut current, mut map) = marginal_at(&state.kernels, &start, &codes, trials, family)?;
    if let Some(prev) = previous_codes {
        let (v, m) = marginal_at(&state.kernels, &start, prev, trials, family)?;
        if v > current {
            codes = prev.to_vec();
            current = v;
            map = m;
        }
    }
    let mut kernels = state.kernels.clone();
    if state.step_size > 0.0 {
        let grad = marginal_gradient(&state.kernels, &map, &codes, trials, family, cfg.fd_step)?;
        let mut t = state.step_size;
        for _ in 0..=MAX_HALVINGS {
            let delta: Vec<f64> = grad.iter().map(|g| t * g).collect();
            let cand = perturbed(&state.kernels, &delta)?;
            if let Ok((v, m)) = marginal_at(&cand, &map, &codes, trials, family) {
                if v > current {
                    kernels = cand;
                    current = v;
                    map = m;
                    break;
                }
            }
            t *= 0.5;
        }
    }
    let next_dict: Vec<Vec<f64>> = map
        .iter()
        .enumerate()
        .map(|(c, h)| if l2_norm(h) > 0.0 { h.clone() } else { dict.template(c).to_vec() })
        .collect();
    let mut trace = state.marginal_ll_trace.clone();
    trace.push(current);
    Ok(HyperStep {
        state: HyperState {
            kernels,
            marginal_ll_trace: trace,
            step_size: state.step_size,
            iteration: state.iteration + 1,
        },
        dict: Dictionary::new(next_dict)?,
        codes,
        map_templates: map,
    })
}

/// Repeats [`hyper_step`] until the marginal stops improving by more than
/// `cfg.tolerance` or `cfg.max_iters` is reached.
pub fn estimate_hyperparameters(
    exp: &ExperimentConfig,
    trials: &[Trial],
    init: Dictionary,
    cfg: &HyperConfig,
) -> Result<HyperStep> {
    estimate_hyperparameters_observed(exp, trials, init, cfg, |_| {})
}

/// [`estimate_hyperparameters`], calling `on_step` after every ascent step.
pub fn estimate_hyperparameters_observed(
    exp: &ExperimentConfig,
    trials: &[Trial],
    init: Dictionary,
    cfg: &HyperConfig,
    mut on_step: impl FnMut(&HyperStep),
) -> Result<HyperStep> {
    exp.validate()?;
    let (trials, _) = prepare_trials(exp, trials)?;
    let csc = exp.csc.resolve(&trials, &exp.family)?;
    for k in &exp.kernel_specs {
        matern_cov(k, exp.template_len)?;
    }
    let mut step = HyperStep {
        state: HyperState::new(exp.kernel_specs.clone(), cfg.step_size),
        map_templates: init.templates().to_vec(),
        dict: init,
        codes: Vec::new(),
    };
    for it in 0..cfg.max_iters {
        let prev = if it == 0 { None } else { Some(step.codes.as_slice()) };
        let next = hyper_step(&step.state, &trials, &step.dict, prev, &exp.family, &csc, cfg)?;
        let trace = &next.state.marginal_ll_trace;
        let done = trace.len() >= 2 && trace[trace.len() - 1] - trace[trace.len() - 2] < cfg.tolerance;
        step = next;
        on_step(&step);
        if done {
            break;
        }
    }
    Ok(step)
}
