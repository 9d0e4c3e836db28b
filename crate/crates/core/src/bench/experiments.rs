//! Experiment drivers: the dictionary-error table on simulated Gaussian
//! data, lengthscale cross-validation on the synthetic neuron, and the
//! mixture-of-Gaussians comparison.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::metrics::{dict_error, mean_dispersion, predictive_ll, r_squared, TableRow};
use crate::bench::mog::{fit_mog_data, MogFit};
use crate::bench::sim::{
    gen_bernoulli_dataset, gen_gaussian_dataset, perturbed_init, BernoulliSimSpec, SimSpec, Truth,
};
use crate::cdu::TemplateProblem;
use crate::csc::{CscConfig, Threshold};
use crate::error::{Error, Result};
use crate::family::FamilySpec;
use crate::kernel::KernelSpec;
use crate::learn::{
    apply_baseline, cross_validate, fit_from, smooth_random_dict, CvOutcome, ExperimentConfig,
    FitResult, InitDict, InitGenerator,
};
use crate::signal::{Dictionary, Trial};

/// Seed offset for held-out test sets.
pub const TEST_SEED_OFFSET: u64 = 1_000_000;

/// Resolves `cfg.init_dict`, using `truth` for the perturbed generator.
pub fn initial_dictionary(cfg: &ExperimentConfig, truth: Option<&Dictionary>) -> Result<Dictionary> {
    match &cfg.init_dict {
        InitDict::Templates(d) => Ok(d.clone()),
        InitDict::Generator(InitGenerator::SmoothRandom) => {
            smooth_random_dict(cfg.num_templates(), cfg.template_len, cfg.seed)
        }
        InitDict::Generator(InitGenerator::PerturbedTruth { min_error }) => {
            let truth = truth.ok_or_else(|| {
                Error::InvalidInput("init_dict \"perturbed_truth\" needs the ground-truth dictionary".into())
            })?;
            perturbed_init(truth, *min_error, cfg.seed)
        }
    }
}

/// Dictionary errors of every fitted template against the truth.
pub fn template_errors(fit: &Dictionary, truth: &Dictionary) -> Result<Vec<f64>> {
    (0..truth.num_templates())
        .map(|c| dict_error(fit.template(c), truth.template(c)))
        .collect()
}

/// Settings of the dictionary-error table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorTableSpec {
    pub num_trials: Vec<usize>,
    pub noise_variances: Vec<f64>,
    pub lengthscales: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_outer")]
    pub outer_iters: usize,
    #[serde(default = "default_test_trials")]
    pub test_trials: usize,
    #[serde(default = "default_min_error")]
    pub init_min_error: f64,
}

fn default_outer() -> usize {
    15
}
fn default_test_trials() -> usize {
    10
}
fn default_min_error() -> f64 {
    0.7
}

impl Default for ErrorTableSpec {
    fn default() -> Self {
        Self {
            num_trials: vec![10, 100],
            noise_variances: vec![5.0, 10.0],
            lengthscales: vec![0.1, 25.0, 100.0],
            seeds: (0..10).collect(),
            outer_iters: default_outer(),
            test_trials: default_test_trials(),
            init_min_error: default_min_error(),
        }
    }
}

/// Learner settings for simulated Gaussian data: Matern-3/2 priors of unit
/// variance, four events per template and trial, no likelihood threshold.
pub fn gaussian_config(
    sim: &SimSpec,
    dispersion: f64,
    lengthscale: f64,
    outer_iters: usize,
    init_min_error: f64,
) -> Result<ExperimentConfig> {
    let kernel = KernelSpec::matern32(1.0, lengthscale)?;
    Ok(ExperimentConfig {
        family: FamilySpec::gaussian(dispersion)?,
        kernel_specs: vec![kernel; sim.templates.len()],
        template_len: sim.template_len,
        csc: CscConfig {
            max_events: sim.events_per_template,
            nll_threshold: Threshold::Disabled,
            min_separation: 0,
            baseline_window: None,
            shared_code: false,
        },
        cdu: None,
        outer_iters,
        seed: sim.seed,
        init_dict: InitDict::Generator(InitGenerator::PerturbedTruth {
            min_error: init_min_error,
        }),
        baseline: None,
    })
}

/// One simulated dataset fitted at one lengthscale.
#[derive(Clone, Debug)]
pub struct GaussianRun {
    pub row: TableRow,
    pub fit: FitResult,
    pub config: ExperimentConfig,
}

/// Simulates `(J, noise, seed)` once and fits it at every lengthscale from
/// the same perturbed initialization.
pub fn run_gaussian_cell(
    num_trials: usize,
    noise_variance: f64,
    seed: u64,
    lengthscales: &[f64],
    outer_iters: usize,
    test_trials: usize,
    init_min_error: f64,
) -> Result<(Vec<GaussianRun>, Vec<Trial>, Truth)> {
    let sim = SimSpec::two_template(num_trials, noise_variance, seed);
    let data = gen_gaussian_dataset(&sim)?;
    let test = gen_gaussian_dataset(&SimSpec {
        num_trials: test_trials,
        seed: seed + TEST_SEED_OFFSET,
        ..sim.clone()
    })?;
    let dispersion = mean_dispersion(&data.trials)?;
    let runs = lengthscales
        .par_iter()
        .map(|&l| {
            let config = gaussian_config(&sim, dispersion, l, outer_iters, init_min_error)?;
            let init = initial_dictionary(&config, Some(&data.truth.dict))?;
            let fit = fit_from(&config, &data.trials, init)?;
            let errs = template_errors(&fit.dict, &data.truth.dict)?;
            let row = TableRow {
                seed,
                num_trials,
                noise_variance,
                lengthscale: l,
                err_h1: errs[0],
                err_h2: errs.get(1).copied().unwrap_or(f64::NAN),
                pll: predictive_ll(&fit, &test.trials, &config.family)?,
                r2: r_squared(&fit, &test.trials, &config.family)?,
            };
            Ok(GaussianRun { row, fit, config })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((runs, data.trials, data.truth))
}

/// Every row of the dictionary-error table, ordered by
/// `(J, noise, seed, lengthscale)`.
pub fn run_error_table(spec: &ErrorTableSpec) -> Result<Vec<TableRow>> {
    let cells: Vec<(usize, f64, u64)> = spec
        .num_trials
        .iter()
        .flat_map(|&j| {
            spec.noise_variances
                .iter()
                .flat_map(move |&v| spec.seeds.iter().map(move |&s| (j, v, s)))
        })
        .collect();
    let per_cell = cells
        .par_iter()
        .map(|&(j, v, s)| {
            let (runs, _, _) = run_gaussian_cell(
                j,
                v,
                s,
                &spec.lengthscales,
                spec.outer_iters,
                spec.test_trials,
                spec.init_min_error,
            )?;
            Ok(runs.into_iter().map(|r| r.row).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_cell.into_iter().flatten().collect())
}

/// Means over seeds for one `(J, noise, lengthscale)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    #[serde(rename = "J")]
    pub num_trials: usize,
    pub noise_variance: f64,
    pub lengthscale: f64,
    pub mean_err_h1: f64,
    pub mean_err_h2: f64,
    pub mean_pll: f64,
    pub mean_r2: f64,
    pub seeds: usize,
}

/// Averages rows sharing `(J, noise, lengthscale)`, in first-seen order.
pub fn summarize(rows: &[TableRow]) -> Vec<TableCell> {
    let mut cells: Vec<TableCell> = Vec::new();
    for r in rows {
        let pos = cells.iter().position(|c| {
            c.num_trials == r.num_trials && c.noise_variance == r.noise_variance && c.lengthscale == r.lengthscale
        });
        let cell = match pos {
            Some(i) => &mut cells[i],
            None => {
                cells.push(TableCell {
                    num_trials: r.num_trials,
                    noise_variance: r.noise_variance,
                    lengthscale: r.lengthscale,
                    mean_err_h1: 0.0,
                    mean_err_h2: 0.0,
                    mean_pll: 0.0,
                    mean_r2: 0.0,
                    seeds: 0,
                });
                cells.last_mut().expect("just pushed")
            }
        };
        cell.mean_err_h1 += r.err_h1;
        cell.mean_err_h2 += r.err_h2;
        cell.mean_pll += r.pll;
        cell.mean_r2 += r.r2;
        cell.seeds += 1;
    }
    for c in &mut cells {
        let n = c.seeds as f64;
        c.mean_err_h1 /= n;
        c.mean_err_h2 /= n;
        c.mean_pll /= n;
        c.mean_r2 /= n;
    }
    cells
}

/// Cross-validation settings for the synthetic neuron.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuronCvSpec {
    pub lengthscales: Vec<f64>,
    pub folds: usize,
    pub num_trials: usize,
    pub outer_iters: usize,
    pub init_min_error: f64,
    pub kernel_variance: f64,
}

impl Default for NeuronCvSpec {
    fn default() -> Self {
        Self {
            lengthscales: vec![0.01, 25.0, 200.0],
            folds: 3,
            num_trials: 30,
            outer_iters: 15,
            init_min_error: 0.7,
            kernel_variance: 1.0,
        }
    }
}

/// Learner settings for the synthetic neuron: one template, a code shared
/// by all trials with as many events as stimulus repetitions.
pub fn neuron_config(sim: &BernoulliSimSpec, cv: &NeuronCvSpec, lengthscale: f64, seed: u64) -> Result<ExperimentConfig> {
    let events = sim.stimulus_code()?.total_events();
    Ok(ExperimentConfig {
        family: FamilySpec::bernoulli(),
        kernel_specs: vec![KernelSpec::matern32(cv.kernel_variance, lengthscale)?],
        template_len: sim.template_len,
        csc: CscConfig {
            max_events: events,
            nll_threshold: Threshold::Disabled,
            min_separation: 0,
            baseline_window: None,
            shared_code: true,
        },
        cdu: None,
        outer_iters: cv.outer_iters,
        seed,
        init_dict: InitDict::Generator(InitGenerator::PerturbedTruth {
            min_error: cv.init_min_error,
        }),
        baseline: None,
    })
}

/// Cross-validates the lengthscale grid on one simulated neuron.
pub fn run_neuron_cv(cv: &NeuronCvSpec, seed: u64) -> Result<CvOutcome> {
    let sim = BernoulliSimSpec::synthetic_neuron(cv.num_trials, seed);
    let data = gen_bernoulli_dataset(&sim)?;
    let grid = cv
        .lengthscales
        .iter()
        .map(|&l| {
            let cfg = neuron_config(&sim, cv, l, seed)?;
            let init = initial_dictionary(&cfg, Some(&data.truth.dict))?;
            Ok(ExperimentConfig {
                init_dict: InitDict::Templates(init),
                ..cfg
            })
        })
        .collect::<Result<Vec<_>>>()?;
    cross_validate(&grid, &data.trials, cv.folds)
}

/// Errors of a fitted template and of its mixture refit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MogComparison {
    pub template: usize,
    pub learned_error: f64,
    pub mog_error: f64,
    pub mog: MogFit,
}

/// Refits template `c` of `fit` as a `d`-component mixture with the learned
/// codes held fixed and compares both against `truth`.
pub fn compare_with_mog(
    fit: &FitResult,
    trials: &[Trial],
    family: &FamilySpec,
    truth: &Dictionary,
    c: usize,
    d: usize,
) -> Result<MogComparison> {
    let trials = apply_baseline(fit, trials)?;
    let problem = TemplateProblem::new(fit.dict.templates(), c, &fit.codes, &trials, family)?;
    let mog = fit_mog_data(&problem, fit.dict.template(c), d)?;
    Ok(MogComparison {
        template: c,
        learned_error: dict_error(fit.dict.template(c), truth.template(c))?,
        mog_error: dict_error(&mog.template, truth.template(c))?,
        mog,
    })
}
