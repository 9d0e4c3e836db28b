use std::path::Path;

use gpcdl::bench::experiments::{initial_dictionary, run_error_table, summarize, template_errors};
use gpcdl::bench::metrics::{mean_dispersion, predictive_ll, r_squared, TableRow};
use gpcdl::bench::sim::{gen_bernoulli_dataset, gen_gaussian_dataset, Truth};
use gpcdl::fourier::{dft, dft_frequencies};
use gpcdl::hyper::{estimate_hyperparameters_observed, HyperState};
use gpcdl::kernel::matern_cov;
use gpcdl::learn::{apply_baseline, cross_validate, fit_from, ExperimentConfig, FitResult, InitDict};
use gpcdl::signal::reconstruct;
use gpcdl::spectral::{general_case_gains, wiener_predicted_template, SpectralRow};
use gpcdl::{Dictionary, FamilyKind, FamilySpec, KernelSpec, Trial};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{self, RunConfig, Simulation};
use crate::error::{CliError, CliResult};
use crate::io::{read_json, read_trials, Outputs};

/// Contents of `fit.json`: the experiment as run and its result.
#[derive(Debug, Serialize, Deserialize)]
pub struct FitFile {
    pub experiment: ExperimentConfig,
    pub result: FitResult,
}

#[derive(Serialize)]
struct TraceRow {
    iteration: usize,
    objective: f64,
}

#[derive(Serialize)]
struct CvTableRow {
    config: usize,
    lengthscale: f64,
    fold: usize,
    pll: f64,
    r2: f64,
}

#[derive(Serialize)]
struct BestConfig {
    best_config: usize,
    best_lengthscale: f64,
    lengthscales: Vec<f64>,
    mean_pll: Vec<f64>,
    mean_r2: Vec<f64>,
}

#[derive(Serialize)]
struct HyperResult {
    kernels: Vec<KernelSpec>,
    marginal_ll_trace: Vec<f64>,
}

pub fn simulate(config: &Path, out: &Path) -> CliResult<()> {
    let loaded = config::load(config)?;
    let sim = loaded.config.simulation()?;
    let data = match sim {
        Simulation::Gaussian(s) => gen_gaussian_dataset(s)?,
        Simulation::Bernoulli(s) => gen_bernoulli_dataset(s)?,
    };
    let mut outputs = Outputs::create(out)?;
    outputs.trials("dataset.csv", &data.trials)?;
    outputs.json("truth.json", &data.truth)?;
    outputs.finish("simulate", &loaded.sha256, Some(sim.seed()))
}

struct Inputs {
    config: RunConfig,
    sha256: String,
    experiment: ExperimentConfig,
    trials: Vec<Trial>,
    truth: Option<Truth>,
}

fn load_inputs(config: &Path, data: &Path, truth: Option<&Path>) -> CliResult<Inputs> {
    let loaded = config::load(config)?;
    let mut experiment = loaded.config.experiment()?.clone();
    let trials = read_trials(data)?;
    let n = trials[0].len();
    if let Some(sim) = &loaded.config.simulation {
        if sim.num_samples() != n {
            return Err(CliError::input(format!(
                "dataset has {n} samples per trial but simulation.num_samples is {}",
                sim.num_samples()
            )));
        }
    }
    if loaded.config.estimate_dispersion && experiment.family.kind() == FamilyKind::Gaussian {
        experiment.family = FamilySpec::gaussian(mean_dispersion(&trials)?)?;
    }
    let truth: Option<Truth> = truth.map(read_json).transpose()?;
    if let Some(t) = &truth {
        if t.dict.num_templates() != experiment.num_templates() || t.dict.template_len() != experiment.template_len {
            return Err(CliError::input(format!(
                "truth has {} templates of length {} but the experiment expects {} of length {}",
                t.dict.num_templates(),
                t.dict.template_len(),
                experiment.num_templates(),
                experiment.template_len
            )));
        }
    }
    let init = initial_dictionary(&experiment, truth.as_ref().map(|t| &t.dict))?;
    experiment.init_dict = InitDict::Templates(init);
    Ok(Inputs {
        config: loaded.config,
        sha256: loaded.sha256,
        experiment,
        trials,
        truth,
    })
}

fn init_of(experiment: &ExperimentConfig) -> Dictionary {
    match &experiment.init_dict {
        InitDict::Templates(d) => d.clone(),
        InitDict::Generator(_) => unreachable!("initialization is resolved on load"),
    }
}

/// Runs the hyperparameter ascent, writes its trace, and returns the
/// estimated kernels.
fn run_hyper(inputs: &Inputs, outputs: &mut Outputs) -> CliResult<Vec<KernelSpec>> {
    let mut states: Vec<HyperState> = Vec::new();
    let step = estimate_hyperparameters_observed(
        &inputs.experiment,
        &inputs.trials,
        init_of(&inputs.experiment),
        &inputs.config.hyper(),
        |s| states.push(s.state.clone()),
    )?;
    let c_count = inputs.experiment.num_templates();
    let mut header = vec!["iteration".to_string()];
    header.extend((0..c_count).map(|c| format!("lengthscale_c{c}")));
    header.extend((0..c_count).map(|c| format!("variance_c{c}")));
    header.push("marginal_ll".into());
    let rows: Vec<Vec<f64>> = states
        .iter()
        .map(|s| {
            let mut r = vec![s.iteration as f64];
            r.extend(s.kernels.iter().map(|k| k.lengthscale));
            r.extend(s.kernels.iter().map(|k| k.variance));
            r.push(*s.marginal_ll_trace.last().unwrap_or(&f64::NAN));
            r
        })
        .collect();
    outputs.table("hyper_trace.csv", &header, &rows)?;
    outputs.json(
        "hyper.json",
        &HyperResult {
            kernels: step.state.kernels.clone(),
            marginal_ll_trace: step.state.marginal_ll_trace.clone(),
        },
    )?;
    Ok(step.state.kernels)
}

/// Spectral report rows for every template of a fit, `None` for templates
/// without events. Gaussian fits use the Wiener form; other families use the
/// per-lag information gains, with the learned template as the filtered
/// spectrum.
pub fn spectral_rows(fit: &FitFile, trials: &[Trial]) -> CliResult<Vec<Option<Vec<SpectralRow>>>> {
    let exp = &fit.experiment;
    let res = &fit.result;
    if trials.len() != res.codes.len() {
        return Err(CliError::input(format!(
            "fit has codes for {} trials but the dataset has {}",
            res.codes.len(),
            trials.len()
        )));
    }
    let trials = apply_baseline(res, trials)?;
    let k = exp.template_len;
    let mut out = Vec::with_capacity(exp.num_templates());
    for (c, kernel) in exp.kernel_specs.iter().enumerate() {
        if res.codes.iter().all(|code| code.events(c).is_empty()) {
            out.push(None);
            continue;
        }
        let cov = matern_cov(kernel, k)?;
        let rows = match exp.family.kind() {
            FamilyKind::Gaussian => {
                wiener_predicted_template(&res.codes, &trials, c, res.dict.templates(), &exp.family, &cov)?
                    .report
                    .rows()
            }
            FamilyKind::Bernoulli => {
                let mu = trials
                    .iter()
                    .zip(&res.codes)
                    .map(|(t, code)| {
                        let eta = reconstruct(&res.dict, code, &t.baseline, t.len())?;
                        Ok(exp.family.inverse_link(&eta))
                    })
                    .collect::<gpcdl::Result<Vec<_>>>()?;
                let psd = cov.spectrum();
                let gains = general_case_gains(&res.codes, &mu, &exp.family, &psd, c)?;
                let filtered = dft(res.dict.template(c));
                dft_frequencies(k)
                    .into_iter()
                    .enumerate()
                    .map(|(i, omega)| {
                        let mag = filtered[i].norm();
                        SpectralRow {
                            omega,
                            psd: psd[i],
                            gain: gains[i],
                            unreg_spectrum_mag: if gains[i] > 0.0 { mag / gains[i] } else { f64::NAN },
                            filtered_spectrum_mag: mag,
                        }
                    })
                    .collect()
            }
        };
        out.push(Some(rows));
    }
    Ok(out)
}

fn write_spectra(outputs: &mut Outputs, rows: &[Option<Vec<SpectralRow>>]) -> CliResult<()> {
    for (c, r) in rows.iter().enumerate() {
        match r {
            Some(r) => outputs.csv(&format!("spectrum_c{c}.csv"), r)?,
            None => eprintln!("note: template {c} has no events, no spectrum written"),
        }
    }
    Ok(())
}

fn degenerate_check(flags: &[bool]) -> CliResult<()> {
    if flags.iter().any(|&d| d) {
        return Err(CliError::Numerical(format!(
            "degenerate templates (no supporting events): {flags:?}"
        )));
    }
    Ok(())
}

pub fn fit(config: &Path, data: &Path, out: &Path, truth: Option<&Path>, test: Option<&Path>, hyper_ml: bool) -> CliResult<()> {
    let mut inputs = load_inputs(config, data, truth)?;
    let test = test.map(read_trials).transpose()?;
    let mut outputs = Outputs::create(out)?;
    if hyper_ml {
        inputs.experiment.kernel_specs = run_hyper(&inputs, &mut outputs)?;
    }
    let exp = &inputs.experiment;
    let result = fit_from(exp, &inputs.trials, init_of(exp))?;
    let trace: Vec<TraceRow> = result
        .objective_trace
        .iter()
        .enumerate()
        .map(|(i, &objective)| TraceRow {
            iteration: i + 1,
            objective,
        })
        .collect();
    outputs.codes("codes.csv", &result.codes)?;
    outputs.csv("trace.csv", &trace)?;
    if let Some(t) = &inputs.truth {
        let errs = template_errors(&result.dict, &t.dict)?;
        let eval = test.as_deref().unwrap_or(&inputs.trials);
        let row = TableRow {
            seed: exp.seed,
            num_trials: inputs.trials.len(),
            noise_variance: exp.family.dispersion(),
            lengthscale: exp.kernel_specs[0].lengthscale,
            err_h1: errs[0],
            err_h2: errs.get(1).copied().unwrap_or(f64::NAN),
            pll: predictive_ll(&result, eval, &exp.family)?,
            r2: r_squared(&result, eval, &exp.family)?,
        };
        outputs.csv("metrics.csv", &[row])?;
    }
    let file = FitFile {
        experiment: exp.clone(),
        result,
    };
    outputs.json("fit.json", &file)?;
    let degenerate = degenerate_check(&file.result.degenerate);
    if degenerate.is_ok() {
        write_spectra(&mut outputs, &spectral_rows(&file, &inputs.trials)?)?;
    }
    outputs.finish("fit", &inputs.sha256, Some(exp.seed))?;
    degenerate
}

pub fn crossval(config: &Path, data: &Path, out: &Path, truth: Option<&Path>) -> CliResult<()> {
    let inputs = load_inputs(config, data, truth)?;
    let cv = inputs.config.crossval()?;
    let grid = cv
        .lengthscales
        .iter()
        .map(|&l| inputs.experiment.with_lengthscale(l))
        .collect::<gpcdl::Result<Vec<_>>>()?;
    let outcome = cross_validate(&grid, &inputs.trials, cv.folds)?;
    let mut outputs = Outputs::create(out)?;
    let rows: Vec<CvTableRow> = outcome
        .rows
        .iter()
        .map(|r| CvTableRow {
            config: r.config,
            lengthscale: r.lengthscale,
            fold: r.fold,
            pll: r.pll,
            r2: r.r2,
        })
        .collect();
    outputs.csv("cv_table.csv", &rows)?;
    outputs.json(
        "best.json",
        &BestConfig {
            best_config: outcome.best_config,
            best_lengthscale: outcome.best_lengthscale,
            lengthscales: cv.lengthscales.clone(),
            mean_pll: outcome.mean_pll,
            mean_r2: outcome.mean_r2,
        },
    )?;
    outputs.finish("crossval", &inputs.sha256, Some(inputs.experiment.seed))
}

pub fn spectrum(fit: &Path, data: &Path, out: &Path) -> CliResult<()> {
    let bytes = std::fs::read(fit).map_err(|e| CliError::input(format!("cannot read fit {}: {e}", fit.display())))?;
    let file: FitFile = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::input(format!("invalid fit {}: {e}", fit.display())))?;
    let trials = read_trials(data)?;
    let rows = spectral_rows(&file, &trials)?;
    if rows.iter().all(Option::is_none) {
        return Err(CliError::Numerical("no template has events to report".into()));
    }
    let mut outputs = Outputs::create(out)?;
    write_spectra(&mut outputs, &rows)?;
    let sha = hex::encode(Sha256::digest(&bytes));
    outputs.finish("spectrum", &sha, Some(file.experiment.seed))
}

pub fn hyper(config: &Path, data: &Path, out: &Path, truth: Option<&Path>) -> CliResult<()> {
    let inputs = load_inputs(config, data, truth)?;
    let mut outputs = Outputs::create(out)?;
    run_hyper(&inputs, &mut outputs)?;
    outputs.finish("hyper", &inputs.sha256, Some(inputs.experiment.seed))
}

pub fn table(config: &Path, out: &Path) -> CliResult<()> {
    let loaded = config::load(config)?;
    let spec = loaded.config.table()?;
    let rows = run_error_table(spec)?;
    let mut outputs = Outputs::create(out)?;
    outputs.csv("metrics.csv", &rows)?;
    outputs.csv("summary.csv", &summarize(&rows))?;
    outputs.finish("table", &loaded.sha256, None)
}
