//! Alternating sparse coding / template updates, and lengthscale selection by
//! cross-validation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cdu::{cyclic_update, neg_log_posterior, CduConfig};
use crate::csc::{encode_all, CscConfig};
use crate::error::{check_len, Error, Result};
use crate::family::{FamilyKind, FamilySpec};
use crate::kernel::{matern_cov, KernelSpec, PriorFactor};
use crate::signal::{normalize, reconstruct, Baseline, Dictionary, SparseCode, Trial};

/// How the dictionary is initialized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitDict {
    Templates(Dictionary),
    Generator(InitGenerator),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitGenerator {
    /// Gaussian noise smoothed by a box of width `max(1, K/10)`, unit norm.
    SmoothRandom,
    /// Ground truth plus noise scaled until every template's dictionary
    /// error exceeds `min_error`. Needs the ground truth, so it is resolved
    /// by the caller (see [`crate::bench::sim::perturbed_init`]).
    PerturbedTruth { min_error: f64 },
}

impl Default for InitDict {
    fn default() -> Self {
        InitDict::Generator(InitGenerator::SmoothRandom)
    }
}

fn default_outer_iters() -> usize {
    15
}

/// Everything [`fit`] needs apart from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub family: FamilySpec,
    /// One kernel per template; their count fixes `C`.
    pub kernel_specs: Vec<KernelSpec>,
    pub template_len: usize,
    pub csc: CscConfig,
    /// Defaults to [`CduConfig::default_for`] the family.
    #[serde(default)]
    pub cdu: Option<CduConfig>,
    #[serde(default = "default_outer_iters")]
    pub outer_iters: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub init_dict: InitDict,
    /// Scalar baseline applied to every trial. When absent, Gaussian trials
    /// keep their own baselines and Bernoulli trials get the logit of the
    /// pooled spike rate.
    #[serde(default)]
    pub baseline: Option<f64>,
}

impl ExperimentConfig {
    pub fn num_templates(&self) -> usize {
        self.kernel_specs.len()
    }

    pub fn cdu_config(&self) -> CduConfig {
        self.cdu.unwrap_or_else(|| CduConfig::default_for(self.family.kind()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_specs.is_empty() {
            return Err(Error::InvalidInput("kernel_specs must list one kernel per template".into()));
        }
        if self.template_len == 0 {
            return Err(Error::InvalidInput("template_len must be positive".into()));
        }
        self.csc.validate()?;
        self.cdu_config().validate()?;
        match &self.init_dict {
            InitDict::Templates(d) => {
                if d.num_templates() != self.num_templates() {
                    return Err(Error::InvalidInput(format!(
                        "init_dict has {} templates but kernel_specs has {}",
                        d.num_templates(),
                        self.num_templates()
                    )));
                }
                if d.template_len() != self.template_len {
                    return Err(Error::InvalidInput(format!(
                        "init_dict templates have length {} but template_len is {}",
                        d.template_len(),
                        self.template_len
                    )));
                }
            }
            InitDict::Generator(InitGenerator::PerturbedTruth { min_error }) => {
                if !(0.0..1.0).contains(min_error) {
                    return Err(Error::InvalidInput(format!(
                        "init_dict.min_error must lie in [0, 1), got {min_error}"
                    )));
                }
            }
            InitDict::Generator(InitGenerator::SmoothRandom) => {}
        }
        if let Some(a) = self.baseline {
            if !a.is_finite() {
                return Err(Error::InvalidInput("baseline must be finite".into()));
            }
        }
        Ok(())
    }

    /// The same experiment with every kernel lengthscale replaced.
    pub fn with_lengthscale(&self, lengthscale: f64) -> Result<Self> {
        let mut out = self.clone();
        out.kernel_specs = self
            .kernel_specs
            .iter()
            .map(|k| k.with_lengthscale(lengthscale))
            .collect::<Result<_>>()?;
        Ok(out)
    }
}

/// Unit-norm smoothed random templates, deterministic in `seed`.
pub fn smooth_random_dict(num_templates: usize, template_len: usize, seed: u64) -> Result<Dictionary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = (template_len / 10).max(1);
    let templates = (0..num_templates)
        .map(|_| {
            let raw: Vec<f64> = (0..template_len + width - 1)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let smooth: Vec<f64> = raw.windows(width).map(|w| w.iter().sum::<f64>()).collect();
            normalize(&smooth)
        })
        .collect::<Result<Vec<_>>>()?;
    Dictionary::new(templates)
}

/// Learned dictionary and codes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub dict: Dictionary,
    /// One code per training trial. Amplitudes include the template norms
    /// removed by normalization, so `dict` and `codes` reproduce the fit.
    pub codes: Vec<SparseCode>,
    /// Negative log-posterior after every outer iteration.
    pub objective_trace: Vec<f64>,
    /// Templates without supporting events in the last update.
    pub degenerate: Vec<bool>,
    /// Template norms before the last normalization.
    pub template_norms: Vec<f64>,
    /// Scalar baseline applied to the trials, if one was imposed.
    pub baseline: Option<f64>,
    /// Sparse coding settings with the threshold resolved, reused to encode
    /// held-out trials.
    pub csc: CscConfig,
}

/// Applies the baseline rule of [`ExperimentConfig::baseline`].
pub fn prepare_trials(cfg: &ExperimentConfig, trials: &[Trial]) -> Result<(Vec<Trial>, Option<f64>)> {
    let a = match (cfg.baseline, cfg.family.kind()) {
        (Some(a), _) => Some(a),
        (None, FamilyKind::Gaussian) => None,
        (None, FamilyKind::Bernoulli) => {
            let (sum, count) = trials.iter().fold((0.0, 0usize), |(s, c), t| {
                (s + t.observations.iter().sum::<f64>(), c + t.len())
            });
            let rate = sum / count as f64;
            if !(rate > 0.0 && rate < 1.0) {
                return Err(Error::InvalidInput(format!(
                    "pooled spike rate {rate} leaves the baseline undefined"
                )));
            }
            Some((rate / (1.0 - rate)).ln())
        }
    };
    let out = match a {
        Some(a) => trials
            .iter()
            .map(|t| Trial::new(t.observations.clone(), Baseline::Scalar(a)))
            .collect::<Result<_>>()?,
        None => trials.to_vec(),
    };
    Ok((out, a))
}

fn check_trials(cfg: &ExperimentConfig, trials: &[Trial]) -> Result<usize> {
    let n = trials
        .first()
        .ok_or_else(|| Error::InvalidInput("no trials".into()))?
        .len();
    for t in trials {
        check_len("trial length", n, t.len())?;
        for &y in &t.observations {
            cfg.family.check_observation(y)?;
        }
    }
    if cfg.template_len > n {
        return Err(Error::InvalidInput(format!(
            "template_len {} exceeds trial length {n}",
            cfg.template_len
        )));
    }
    Ok(n)
}

/// Prior factors for every template.
pub fn prior_factors(kernels: &[KernelSpec], template_len: usize) -> Result<Vec<PriorFactor>> {
    kernels
        .iter()
        .map(|k| matern_cov(k, template_len)?.factor())
        .collect()
}

fn initial_dict(cfg: &ExperimentConfig) -> Result<Dictionary> {
    match &cfg.init_dict {
        InitDict::Templates(d) => Ok(d.clone()),
        InitDict::Generator(InitGenerator::SmoothRandom) => {
            smooth_random_dict(cfg.num_templates(), cfg.template_len, cfg.seed)
        }
        InitDict::Generator(InitGenerator::PerturbedTruth { .. }) => Err(Error::InvalidInput(
            "init_dict \"perturbed_truth\" needs the ground-truth dictionary".into(),
        )),
    }
}

/// Keeps, per trial (or jointly for shared codes), whichever code gives the
/// lower negative log-likelihood under the current dictionary.
fn keep_better_codes(
    dict: &Dictionary,
    fresh: Vec<SparseCode>,
    previous: &[SparseCode],
    trials: &[Trial],
    family: &FamilySpec,
    shared: bool,
) -> Result<Vec<SparseCode>> {
    let nll = |code: &SparseCode, t: &Trial| -> Result<f64> {
        let eta = reconstruct(dict, code, &t.baseline, t.len())?;
        family.neg_log_likelihood(&t.observations, &eta)
    };
    let scored: Vec<(f64, f64)> = fresh
        .par_iter()
        .zip(previous)
        .zip(trials)
        .map(|((f, p), t)| Ok((nll(f, t)?, nll(p, t)?)))
        .collect::<Result<_>>()?;
    if shared {
        let (f, p) = scored.iter().fold((0.0, 0.0), |acc, s| (acc.0 + s.0, acc.1 + s.1));
        return Ok(if p < f { previous.to_vec() } else { fresh });
    }
    Ok(fresh
        .into_iter()
        .zip(previous)
        .zip(scored)
        .map(|((f, p), (sf, sp))| if sp < sf { p.clone() } else { f })
        .collect())
}

/// Alternates sparse coding of all trials with a cyclic template update for
/// `outer_iters` rounds.
pub fn fit(cfg: &ExperimentConfig, trials: &[Trial]) -> Result<FitResult> {
    cfg.validate()?;
    check_trials(cfg, trials)?;
    let init = initial_dict(cfg)?;
    fit_from(cfg, trials, init)
}

/// [`fit`] from an explicit initial dictionary (overriding `cfg.init_dict`).
pub fn fit_from(cfg: &ExperimentConfig, trials: &[Trial], init: Dictionary) -> Result<FitResult> {
    cfg.validate()?;
    check_trials(cfg, trials)?;
    check_len("initial templates", cfg.num_templates(), init.num_templates())?;
    check_len("initial template length", cfg.template_len, init.template_len())?;
    let (trials, baseline) = prepare_trials(cfg, trials)?;
    let family = cfg.family;
    let csc = cfg.csc.resolve(&trials, &family)?;
    let priors = prior_factors(&cfg.kernel_specs, cfg.template_len)?;
    let cdu_cfg = cfg.cdu_config();
    let c_count = cfg.num_templates();

    let mut dict = init;
    let mut codes = vec![SparseCode::empty(c_count); trials.len()];
    let mut trace = Vec::with_capacity(cfg.outer_iters);
    let mut degenerate = vec![false; c_count];
    let mut norms = vec![1.0; c_count];
    for it in 0..cfg.outer_iters {
        let fresh = encode_all(&dict, &trials, &family, &csc)?;
        codes = if it == 0 {
            fresh
        } else {
            keep_better_codes(&dict, fresh, &codes, &trials, &family, csc.shared_code)?
        };
        let before = neg_log_posterior(dict.templates(), &codes, &trials, &family, &priors)?;
        let update = cyclic_update(&dict, &codes, &trials, &family, &priors, &cdu_cfg)?;
        let mut scaled = codes.clone();
        for (c, out) in update.outcomes.iter().enumerate() {
            degenerate[c] = out.degenerate;
            if !out.degenerate {
                for code in &mut scaled {
                    code.scale_template(c, out.norm);
                }
            }
        }
        if degenerate.iter().all(|&d| d) {
            return Err(Error::DegenerateDictionary);
        }
        // normalization can raise the prior term; such a round is rejected
        let after = neg_log_posterior(update.dict.templates(), &scaled, &trials, &family, &priors)?;
        if after <= before {
            for (c, out) in update.outcomes.iter().enumerate() {
                if !out.degenerate {
                    norms[c] = out.norm;
                }
            }
            dict = update.dict;
            codes = scaled;
            trace.push(after);
        } else {
            trace.push(before);
        }
    }
    Ok(FitResult {
        dict,
        codes,
        objective_trace: trace,
        degenerate,
        template_norms: norms,
        baseline,
        csc,
    })
}

/// Held-out trials with the fitted baseline applied.
pub fn apply_baseline(fit: &FitResult, trials: &[Trial]) -> Result<Vec<Trial>> {
    match fit.baseline {
        Some(a) => trials
            .iter()
            .map(|t| Trial::new(t.observations.clone(), Baseline::Scalar(a)))
            .collect(),
        None => Ok(trials.to_vec()),
    }
}

/// Linear predictor for held-out trials: the shared code is reused when the
/// fit used one, otherwise every trial is encoded with the frozen dictionary.
pub fn predict_eta(fit: &FitResult, trials: &[Trial], family: &FamilySpec) -> Result<Vec<Vec<f64>>> {
    let trials = apply_baseline(fit, trials)?;
    let codes = if fit.csc.shared_code {
        let code = fit
            .codes
            .first()
            .cloned()
            .unwrap_or_else(|| SparseCode::empty(fit.dict.num_templates()));
        vec![code; trials.len()]
    } else {
        encode_all(&fit.dict, &trials, family, &fit.csc)?
    };
    trials
        .par_iter()
        .zip(&codes)
        .map(|(t, code)| reconstruct(&fit.dict, code, &t.baseline, t.len()))
        .collect()
}

/// Mean per-sample log density (natural log, including `c(y, phi)`).
pub fn mean_log_density(trials: &[Trial], etas: &[Vec<f64>], family: &FamilySpec) -> f64 {
    let (total, count) = trials.iter().zip(etas).fold((0.0, 0usize), |(s, c), (t, eta)| {
        let v: f64 = t
            .observations
            .iter()
            .zip(eta)
            .map(|(&y, &e)| family.log_density(y, e))
            .sum();
        (s + v, c + t.len())
    });
    total / count as f64
}

/// `1 - D_model / D_null`, the null model being the baseline alone.
pub fn deviance_r2(trials: &[Trial], etas: &[Vec<f64>], family: &FamilySpec) -> f64 {
    let mut d_model = 0.0;
    let mut d_null = 0.0;
    for (t, eta) in trials.iter().zip(etas) {
        let a = t.baseline_vec();
        for ((&y, &e), &a) in t.observations.iter().zip(eta).zip(&a) {
            d_model += family.deviance_sample(y, e);
            d_null += family.deviance_sample(y, a);
        }
    }
    1.0 - d_model / d_null
}

/// One (configuration, fold) evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub config: usize,
    pub lengthscale: f64,
    pub fold: usize,
    pub pll: f64,
    pub r2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    pub best_config: usize,
    pub best_lengthscale: f64,
    pub rows: Vec<CvRow>,
    /// Mean held-out pll per configuration.
    pub mean_pll: Vec<f64>,
    pub mean_r2: Vec<f64>,
}

/// Contiguous fold boundaries: fold `f` holds trials `[bounds[f], bounds[f+1])`.
pub fn fold_bounds(num_trials: usize, folds: usize) -> Vec<usize> {
    (0..=folds).map(|f| f * num_trials / folds).collect()
}

/// K-fold cross-validation over configurations that differ in lengthscale.
/// Returns the configuration with the highest mean held-out pll (first one
/// on ties).
pub fn cross_validate(grid: &[ExperimentConfig], trials: &[Trial], folds: usize) -> Result<CvOutcome> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("lengthscale grid is empty".into()));
    }
    if folds < 2 {
        return Err(Error::InvalidInput("folds must be at least 2".into()));
    }
    if trials.len() < folds {
        return Err(Error::InvalidInput(format!(
            "folds ({folds}) exceeds the number of trials ({})",
            trials.len()
        )));
    }
    let bounds = fold_bounds(trials.len(), folds);
    let jobs: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|c| (0..folds).map(move |f| (c, f)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(c, f)| {
            let cfg = &grid[c];
            let (lo, hi) = (bounds[f], bounds[f + 1]);
            let train: Vec<Trial> = trials[..lo].iter().chain(&trials[hi..]).cloned().collect();
            let test = &trials[lo..hi];
            let result = fit(cfg, &train)?;
            let test = apply_baseline(&result, test)?;
            let etas = predict_eta(&result, &test, &cfg.family)?;
            Ok(CvRow {
                config: c,
                lengthscale: cfg.kernel_specs[0].lengthscale,
                fold: f,
                pll: mean_log_density(&test, &etas, &cfg.family),
                r2: deviance_r2(&test, &etas, &cfg.family),
            })
        })
        .collect::<Result<Vec<CvRow>>>()?;
    let mean = |c: usize, get: fn(&CvRow) -> f64| -> f64 {
        rows.iter().filter(|r| r.config == c).map(get).sum::<f64>() / folds as f64
    };
    let mean_pll: Vec<f64> = (0..grid.len()).map(|c| mean(c, |r| r.pll)).collect();
    let mean_r2: Vec<f64> = (0..grid.len()).map(|c| mean(c, |r| r.r2)).collect();
    let mut best = 0;
    for (c, &v) in mean_pll.iter().enumerate() {
        if v > mean_pll[best] {
            best = c;
        }
    }
    Ok(CvOutcome {
        best_config: best,
        best_lengthscale: grid[best].kernel_specs[0].lengthscale,
        rows,
        mean_pll,
        mean_r2,
    })
}
