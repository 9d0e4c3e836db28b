//! Convolutional orthogonal matching pursuit (COMP).
//!
//! Each greedy step scores every admissible `(template, location)` pair by the
//! exact decrease in negative log-likelihood obtained from the best single
//! amplitude at that pair (closed form for Gaussian observations, a short 1-D
//! Newton solve otherwise), accepts the best pair, and then refits all active
//! amplitudes jointly by Newton's method.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::family::{FamilyKind, FamilySpec};
use crate::signal::{Baseline, Dictionary, Event, SparseCode, Trial};

/// Stopping threshold on the half deviance of a trial.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Threshold {
    /// Derived from the baseline window with [`nll_threshold_from_baseline`].
    Auto,
    Absolute(f64),
    /// Stop only on `max_events` or when nothing improves.
    Disabled,
}

impl Serialize for Threshold {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Threshold::Auto => s.serialize_str("auto"),
            Threshold::Absolute(v) => s.serialize_f64(*v),
            Threshold::Disabled => s.serialize_str("none"),
        }
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Threshold::Absolute(v)),
            Raw::Name(n) if n == "auto" => Ok(Threshold::Auto),
            Raw::Name(n) if n == "none" => Ok(Threshold::Disabled),
            Raw::Name(n) => Err(serde::de::Error::custom(format!(
                "nll_threshold must be a number, \"auto\" or \"none\", got {n:?}"
            ))),
        }
    }
}

/// Sparse coding settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CscConfig {
    /// Cap on the number of events of each template in a trial.
    pub max_events: usize,
    pub nll_threshold: Threshold,
    /// Minimum distance between two events of the same template.
    #[serde(default)]
    pub min_separation: usize,
    /// Half-open sample range `[start, end)` used by [`Threshold::Auto`].
    #[serde(default)]
    pub baseline_window: Option<(usize, usize)>,
    /// Share one code across all trials and encode their pooled likelihood.
    #[serde(default)]
    pub shared_code: bool,
}

impl Default for CscConfig {
    fn default() -> Self {
        Self {
            max_events: 20,
            nll_threshold: Threshold::Disabled,
            min_separation: 0,
            baseline_window: None,
            shared_code: false,
        }
    }
}

impl CscConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_events == 0 {
            return Err(Error::InvalidInput("max_events must be at least 1".into()));
        }
        if let Some((a, b)) = self.baseline_window {
            if a >= b {
                return Err(Error::InvalidInput(format!(
                    "baseline_window [{a}, {b}) is empty"
                )));
            }
        }
        Ok(())
    }

    /// Replaces [`Threshold::Auto`] by the value computed from `trials`.
    pub fn resolve(&self, trials: &[Trial], family: &FamilySpec) -> Result<CscConfig> {
        let mut out = self.clone();
        if self.nll_threshold == Threshold::Auto {
            let window = self.baseline_window.ok_or_else(|| {
                Error::InvalidInput("nll_threshold \"auto\" needs a baseline_window".into())
            })?;
            out.nll_threshold =
                Threshold::Absolute(nll_threshold_from_baseline(trials, family, window)?);
        }
        Ok(out)
    }
}

/// Threshold from a quiet window: for each trial, the mean per-sample half
/// deviance at `eta = a` over the window; then `N * (mean + 2 * std)` of those
/// per-trial means across trials.
pub fn nll_threshold_from_baseline(
    trials: &[Trial],
    family: &FamilySpec,
    window: (usize, usize),
) -> Result<f64> {
    let (start, end) = window;
    if start >= end {
        return Err(Error::InvalidInput("baseline window is empty".into()));
    }
    let n = trials
        .first()
        .ok_or_else(|| Error::InvalidInput("no trials".into()))?
        .len();
    if end > n {
        return Err(Error::InvalidInput(format!(
            "baseline window end {end} exceeds trial length {n}"
        )));
    }
    let means = trials
        .iter()
        .map(|t| {
            check_len("trial length", n, t.len())?;
            let a = t.baseline.to_vec(n)?;
            let total: f64 = (start..end)
                .map(|i| family.half_deviance_sample(t.observations[i], a[i]))
                .sum();
            Ok(total / (end - start) as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let m = means.iter().sum::<f64>() / means.len() as f64;
    let var = means.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / means.len() as f64;
    Ok(n as f64 * (m + 2.0 * var.sqrt()))
}

/// Sufficient statistics of the trials that share one linear predictor.
struct Target {
    sum_y: Vec<f64>,
    count: f64,
    base: Vec<f64>,
    saturated: f64,
}

impl Target {
    fn from_trials(trials: &[Trial], family: &FamilySpec) -> Result<Self> {
        let first = trials
            .first()
            .ok_or_else(|| Error::InvalidInput("no trials to encode".into()))?;
        let n = first.len();
        let base = first.baseline.to_vec(n)?;
        let mut sum_y = vec![0.0; n];
        let mut saturated = 0.0;
        for t in trials {
            check_len("trial length", n, t.len())?;
            if t.baseline.to_vec(n)? != base {
                return Err(Error::InvalidInput(
                    "shared-code encoding requires a common baseline".into(),
                ));
            }
            for (s, &y) in sum_y.iter_mut().zip(&t.observations) {
                family.check_observation(y)?;
                *s += y;
                saturated += family.saturated_nll_sample(y);
            }
        }
        Ok(Self {
            sum_y,
            count: trials.len() as f64,
            base,
            saturated,
        })
    }

    fn nll(&self, family: &FamilySpec, eta: &[f64]) -> f64 {
        eta.iter()
            .zip(&self.sum_y)
            .map(|(&e, &s)| self.count * family.cumulant(e) - s * e)
            .sum::<f64>()
            / family.dispersion()
    }
}

#[derive(Clone, Copy, Debug)]
struct Active {
    c: usize,
    loc: usize,
    amp: f64,
}

fn eta_of(dict: &Dictionary, base: &[f64], active: &[Active]) -> Vec<f64> {
    let mut eta = base.to_vec();
    let k = dict.template_len();
    for a in active {
        let h = dict.template(a.c);
        for (e, &hk) in eta[a.loc..a.loc + k].iter_mut().zip(h) {
            *e += a.amp * hk;
        }
    }
    eta
}

/// Best single amplitude for a template at one location and the resulting
/// decrease of the pooled negative log-likelihood.
fn score_candidate(
    family: &FamilySpec,
    target: &Target,
    eta: &[f64],
    h: &[f64],
    loc: usize,
) -> (f64, f64) {
    let k = h.len();
    let eta_w = &eta[loc..loc + k];
    let s_w = &target.sum_y[loc..loc + k];
    let phi = family.dispersion();
    let m = target.count;
    match family.kind() {
        FamilyKind::Gaussian => {
            let mut corr = 0.0;
            let mut hh = 0.0;
            for ((&e, &s), &hk) in eta_w.iter().zip(s_w).zip(h) {
                corr += hk * (s - m * e);
                hh += hk * hk;
            }
            if hh == 0.0 {
                return (0.0, 0.0);
            }
            (corr * corr / (2.0 * phi * m * hh), corr / (m * hh))
        }
        _ => {
            // objective, slope and curvature along h in one pass
            let eval = |a: f64| -> (f64, f64, f64) {
                let (mut f, mut g, mut c) = (0.0, 0.0, 0.0);
                for ((&e, &s), &hk) in eta_w.iter().zip(s_w).zip(h) {
                    let x = e + a * hk;
                    f += m * family.cumulant(x) - s * x;
                    g += hk * (m * family.inverse_link_scalar(x) - s);
                    c += hk * hk * m * family.weight_from_eta(x);
                }
                (f / phi, g / phi, c / phi)
            };
            let (f0, mut g, mut curv) = eval(0.0);
            let mut a = 0.0;
            let mut fa = f0;
            for _ in 0..5 {
                if curv <= 0.0 || g == 0.0 {
                    break;
                }
                let step = g / curv;
                let mut t = 1.0;
                let mut moved = None;
                for _ in 0..30 {
                    let cand = a - t * step;
                    let (fc, gc, cc) = eval(cand);
                    if fc <= fa {
                        moved = Some((cand, fc, gc, cc));
                        break;
                    }
                    t *= 0.5;
                }
                let Some((cand, fc, gc, cc)) = moved else { break };
                let delta = (cand - a).abs();
                (a, fa, g, curv) = (cand, fc, gc, cc);
                if delta <= 1e-10 * (1.0 + a.abs()) {
                    break;
                }
            }
            (f0 - fa, a)
        }
    }
}

/// Newton refit of all active amplitudes with backtracking on the objective.
fn refit(
    dict: &Dictionary,
    family: &FamilySpec,
    target: &Target,
    active: &mut [Active],
    iters: usize,
) -> Vec<f64> {
    let k = dict.template_len();
    let m = active.len();
    let phi = family.dispersion();
    let mut eta = eta_of(dict, &target.base, active);
    let mut current = target.nll(family, &eta);
    for _ in 0..iters {
        let mut grad = DVector::zeros(m);
        let mut resid = vec![0.0; eta.len()];
        let mut weight = vec![0.0; eta.len()];
        for (i, a) in active.iter().enumerate() {
            let h = dict.template(a.c);
            for p in 0..k {
                let n = a.loc + p;
                resid[n] = target.count * family.inverse_link_scalar(eta[n]) - target.sum_y[n];
                weight[n] = target.count * family.weight_from_eta(eta[n]);
                grad[i] += h[p] * resid[n] / phi;
            }
        }
        if grad.amax() <= 1e-13 * (1.0 + current.abs()) {
            break;
        }
        let mut hess = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in i..m {
                let (ai, aj) = (active[i], active[j]);
                if ai.loc.abs_diff(aj.loc) >= k {
                    continue;
                }
                let (hi, hj) = (dict.template(ai.c), dict.template(aj.c));
                let lo = ai.loc.max(aj.loc);
                let hi_end = (ai.loc + k).min(aj.loc + k);
                let v: f64 = (lo..hi_end)
                    .map(|n| weight[n] * hi[n - ai.loc] * hj[n - aj.loc])
                    .sum::<f64>()
                    / phi;
                hess[(i, j)] = v;
                hess[(j, i)] = v;
            }
        }
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => match hess.lu().solve(&grad) {
                Some(s) => s,
                None => break,
            },
        };
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let trial: Vec<Active> = active
                .iter()
                .enumerate()
                .map(|(i, a)| Active {
                    amp: a.amp - t * step[i],
                    ..*a
                })
                .collect();
            let e = eta_of(dict, &target.base, &trial);
            let v = target.nll(family, &e);
            if v <= current {
                active.copy_from_slice(&trial);
                improved = v < current;
                eta = e;
                current = v;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    eta
}

/// Number of joint refit iterations after each accepted event.
const REFIT_ITERS: usize = 5;

fn encode_target(
    dict: &Dictionary,
    family: &FamilySpec,
    target: &Target,
    cfg: &CscConfig,
) -> Result<(SparseCode, Vec<f64>)> {
    cfg.validate()?;
    let n = target.sum_y.len();
    let k = dict.template_len();
    let c_count = dict.num_templates();
    if k > n {
        return Err(Error::InvalidInput(format!(
            "template length {k} exceeds trial length {n}"
        )));
    }
    let threshold = match cfg.nll_threshold {
        Threshold::Absolute(v) => Some(v * target.count),
        Threshold::Disabled => None,
        Threshold::Auto => {
            return Err(Error::InvalidInput(
                "resolve the automatic threshold before encoding".into(),
            ))
        }
    };
    let sep = cfg.min_separation.max(1);
    let mut active: Vec<Active> = Vec::new();
    let mut eta = target.base.clone();
    let mut nll = target.nll(family, &eta);
    let mut trace = vec![nll - target.saturated];
    let num_locs = n - k + 1;

    // scores depend only on eta inside the candidate window, so a candidate
    // is rescored only when eta changed there
    let mut scores: Vec<(f64, f64)> = vec![(0.0, 0.0); c_count * num_locs];
    let mut stale = vec![true; c_count * num_locs];

    loop {
        if let Some(t) = threshold {
            if nll - target.saturated <= t {
                break;
            }
        }
        let mut blocked = vec![false; c_count * num_locs];
        for c in 0..c_count {
            if active.iter().filter(|a| a.c == c).count() >= cfg.max_events {
                blocked[c * num_locs..(c + 1) * num_locs].fill(true);
            }
        }
        for a in &active {
            let lo = a.loc.saturating_sub(sep - 1);
            let hi = (a.loc + sep - 1).min(num_locs - 1);
            blocked[a.c * num_locs + lo..=a.c * num_locs + hi].fill(true);
        }
        let fresh: Vec<(usize, (f64, f64))> = (0..c_count * num_locs)
            .into_par_iter()
            .filter(|&idx| !blocked[idx] && stale[idx])
            .map(|idx| {
                let (c, loc) = (idx / num_locs, idx % num_locs);
                (idx, score_candidate(family, target, &eta, dict.template(c), loc))
            })
            .collect();
        for (idx, sc) in fresh {
            scores[idx] = sc;
            stale[idx] = false;
        }
        // larger gain wins, ties go to the lowest template then location
        let mut best: Option<(f64, usize, f64)> = None;
        for (idx, &(gain, amp)) in scores.iter().enumerate() {
            if blocked[idx] || !gain.is_finite() {
                continue;
            }
            if best.is_none_or(|b| gain > b.0) {
                best = Some((gain, idx, amp));
            }
        }
        let Some((gain, idx, amp)) = best else { break };
        if gain <= 1e-12 * (1.0 + (nll - target.saturated).abs()) {
            break;
        }
        let (c, loc) = (idx / num_locs, idx % num_locs);
        let mut candidate = active.clone();
        candidate.push(Active { c, loc, amp });
        let new_eta = refit(dict, family, target, &mut candidate, REFIT_ITERS);
        let new_nll = target.nll(family, &new_eta);
        if !(new_nll < nll) {
            break;
        }
        let mut changed = vec![0usize; n + 1];
        for i in 0..n {
            changed[i + 1] = changed[i] + usize::from(new_eta[i] != eta[i]);
        }
        for (idx, st) in stale.iter_mut().enumerate() {
            let l = idx % num_locs;
            if changed[l + k] != changed[l] {
                *st = true;
            }
        }
        active = candidate;
        eta = new_eta;
        nll = new_nll;
        trace.push(nll - target.saturated);
    }

    let mut lists = vec![Vec::new(); c_count];
    for a in active {
        lists[a.c].push(Event::new(a.loc, a.amp));
    }
    Ok((SparseCode::from_events(lists)?, trace))
}

/// COMP on a single trial.
pub fn comp_encode(
    dict: &Dictionary,
    trial: &Trial,
    family: &FamilySpec,
    cfg: &CscConfig,
) -> Result<SparseCode> {
    comp_encode_traced(dict, std::slice::from_ref(trial), family, cfg).map(|(c, _)| c)
}

/// COMP on the pooled likelihood of trials that share one code.
pub fn comp_encode_shared(
    dict: &Dictionary,
    trials: &[Trial],
    family: &FamilySpec,
    cfg: &CscConfig,
) -> Result<SparseCode> {
    comp_encode_traced(dict, trials, family, cfg).map(|(c, _)| c)
}

/// COMP returning, alongside the code, the half deviance before the first
/// event and after every accepted event.
pub fn comp_encode_traced(
    dict: &Dictionary,
    trials: &[Trial],
    family: &FamilySpec,
    cfg: &CscConfig,
) -> Result<(SparseCode, Vec<f64>)> {
    let target = Target::from_trials(trials, family)?;
    encode_target(dict, family, &target, cfg)
}

/// Encodes every trial (in parallel), or all trials jointly when
/// `cfg.shared_code` is set. Returns one code per trial either way.
pub fn encode_all(
    dict: &Dictionary,
    trials: &[Trial],
    family: &FamilySpec,
    cfg: &CscConfig,
) -> Result<Vec<SparseCode>> {
    if cfg.shared_code {
        let code = comp_encode_shared(dict, trials, family, cfg)?;
        Ok(vec![code; trials.len()])
    } else {
        trials
            .par_iter()
            .map(|t| comp_encode(dict, t, family, cfg))
            .collect()
    }
}

/// Convenience: common scalar baseline of all trials, if there is one.
pub fn common_scalar_baseline(trials: &[Trial]) -> Option<f64> {
    let mut value = None;
    for t in trials {
        match (&t.baseline, value) {
            (Baseline::Scalar(a), None) => value = Some(*a),
            (Baseline::Scalar(a), Some(v)) if *a == v => {}
            _ => return None,
        }
    }
    value
}
