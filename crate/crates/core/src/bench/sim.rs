//! Seeded synthetic datasets: Gaussian trials with randomly placed events and
//! Bernoulli spike trains driven by a periodic stimulus.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bench::metrics::dict_error;
use crate::error::{Error, Result};
use crate::family::sigmoid;
use crate::signal::{normalize, reconstruct, Baseline, Dictionary, Event, SparseCode, Trial};

/// Ground-truth template shapes (all returned unit-norm).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TemplateGen {
    /// `exp(-(k - K/2)^2 / (2 (K/8)^2))`.
    GaussianBump,
    /// `1 / (1 + exp(-(k - K/2) / (K/10)))`.
    Sigmoid,
    /// Excitatory bump followed by a weaker, wider suppression.
    TwoPeak,
    Custom { values: Vec<f64> },
}

impl TemplateGen {
    pub fn generate(&self, k: usize) -> Result<Vec<f64>> {
        let kf = k as f64;
        let gauss = |c: f64, w: f64| -> Vec<f64> {
            (0..k).map(|i| (-(i as f64 - c).powi(2) / (2.0 * w * w)).exp()).collect()
        };
        let raw = match self {
            TemplateGen::GaussianBump => gauss(kf / 2.0, kf / 8.0),
            TemplateGen::Sigmoid => (0..k)
                .map(|i| 1.0 / (1.0 + (-(i as f64 - kf / 2.0) / (kf / 10.0)).exp()))
                .collect(),
            TemplateGen::TwoPeak => {
                let up = gauss(0.3 * kf, 0.08 * kf);
                let down = gauss(0.62 * kf, 0.12 * kf);
                up.iter().zip(&down).map(|(u, d)| u - 0.45 * d).collect()
            }
            TemplateGen::Custom { values } => {
                if values.len() != k {
                    return Err(Error::InvalidInput(format!(
                        "custom template has {} values but template_len is {k}",
                        values.len()
                    )));
                }
                values.clone()
            }
        };
        normalize(&raw)
    }
}

fn default_k() -> usize {
    50
}
fn default_n() -> usize {
    1000
}
fn default_events() -> usize {
    4
}
fn default_amp() -> (f64, f64) {
    (10.0, 20.0)
}

/// Gaussian simulation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    pub templates: Vec<TemplateGen>,
    #[serde(default = "default_k")]
    pub template_len: usize,
    #[serde(default = "default_n")]
    pub num_samples: usize,
    pub num_trials: usize,
    #[serde(default = "default_events")]
    pub events_per_template: usize,
    #[serde(default = "default_amp")]
    pub amp_range: (f64, f64),
    pub noise_variance: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SimSpec {
    /// Two templates (bump, sigmoid) with the default sizes.
    pub fn two_template(num_trials: usize, noise_variance: f64, seed: u64) -> Self {
        Self {
            templates: vec![TemplateGen::GaussianBump, TemplateGen::Sigmoid],
            template_len: default_k(),
            num_samples: default_n(),
            num_trials,
            events_per_template: default_events(),
            amp_range: default_amp(),
            noise_variance,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::InvalidInput("templates: at least one template is required".into()));
        }
        if self.template_len == 0 || self.num_samples == 0 || self.num_trials == 0 {
            return Err(Error::InvalidInput(
                "template_len, num_samples and num_trials must be positive".into(),
            ));
        }
        if self.events_per_template == 0 {
            return Err(Error::InvalidInput("events_per_template must be positive".into()));
        }
        let (lo, hi) = self.amp_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::InvalidInput(format!(
                "amp_range: low ({lo}) must not exceed high ({hi})"
            )));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "noise_variance must be nonnegative, got {}",
                self.noise_variance
            )));
        }
        let needed = self.templates.len() * self.events_per_template * self.template_len;
        if needed > self.num_samples {
            return Err(Error::InvalidInput(format!(
                "cannot place {} non-overlapping events of length {} in {} samples",
                self.templates.len() * self.events_per_template,
                self.template_len,
                self.num_samples
            )));
        }
        Ok(())
    }
}

/// Generating dictionary, codes and baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub dict: Dictionary,
    pub codes: Vec<SparseCode>,
    pub baseline: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub trials: Vec<Trial>,
    pub truth: Truth,
}

/// Sorted start positions of `m` length-`k` segments in `[0, n)` that do not
/// overlap, uniform over all such arrangements.
fn place_segments(rng: &mut ChaCha8Rng, m: usize, k: usize, n: usize) -> Vec<usize> {
    let slack = n - m * k;
    let mut picks = index::sample(rng, slack + m, m).into_vec();
    picks.sort_unstable();
    picks.iter().enumerate().map(|(i, &p)| p - i + i * k).collect()
}

/// Gaussian trials: `events_per_template` events per template, no two events
/// (of any template) overlapping, amplitudes uniform in `amp_range`, white
/// Gaussian noise.
pub fn gen_gaussian_dataset(spec: &SimSpec) -> Result<Dataset> {
    spec.validate()?;
    let k = spec.template_len;
    let c_count = spec.templates.len();
    let dict = Dictionary::new(
        spec.templates
            .iter()
            .map(|t| t.generate(k))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_variance.sqrt())
        .map_err(|e| Error::InvalidInput(format!("noise_variance: {e}")))?;
    let (lo, hi) = spec.amp_range;
    let m = c_count * spec.events_per_template;
    let mut trials = Vec::with_capacity(spec.num_trials);
    let mut codes = Vec::with_capacity(spec.num_trials);
    for _ in 0..spec.num_trials {
        let locs = place_segments(&mut rng, m, k, spec.num_samples);
        let mut owners: Vec<usize> = (0..m).map(|i| i % c_count).collect();
        owners.shuffle(&mut rng);
        let mut events = vec![Vec::new(); c_count];
        for (&loc, &c) in locs.iter().zip(&owners) {
            let amp = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            events[c].push(Event::new(loc, amp));
        }
        let code = SparseCode::from_events(events)?;
        let mut y = reconstruct(&dict, &code, &Baseline::Scalar(0.0), spec.num_samples)?;
        if spec.noise_variance > 0.0 {
            for v in &mut y {
                *v += noise.sample(&mut rng);
            }
        }
        trials.push(Trial::new(y, Baseline::Scalar(0.0))?);
        codes.push(code);
    }
    Ok(Dataset {
        trials,
        truth: Truth {
            dict,
            codes,
            baseline: 0.0,
        },
    })
}

fn default_bern_template() -> TemplateGen {
    TemplateGen::TwoPeak
}

/// Spike trains driven by a stimulus repeated every `period` samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BernoulliSimSpec {
    #[serde(default = "default_bern_template")]
    pub template: TemplateGen,
    pub template_len: usize,
    pub num_samples: usize,
    pub num_trials: usize,
    pub period: usize,
    #[serde(default)]
    pub phase: usize,
    /// Amplitude of every event (the template itself is unit-norm).
    pub amplitude: f64,
    /// Spike probability without stimulus.
    pub baseline_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl BernoulliSimSpec {
    /// The synthetic neuron used for lengthscale selection.
    pub fn synthetic_neuron(num_trials: usize, seed: u64) -> Self {
        Self {
            template: TemplateGen::TwoPeak,
            template_len: 60,
            num_samples: 2000,
            num_trials,
            period: 100,
            phase: 10,
            amplitude: 8.0,
            baseline_rate: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.template_len == 0 || self.template_len > self.num_samples {
            return Err(Error::InvalidInput(
                "template_len must be positive and fit in num_samples".into(),
            ));
        }
        if self.num_trials == 0 || self.period == 0 {
            return Err(Error::InvalidInput("num_trials and period must be positive".into()));
        }
        if self.phase + self.template_len > self.num_samples {
            return Err(Error::InvalidInput("phase leaves no room for an event".into()));
        }
        if !(self.baseline_rate > 0.0 && self.baseline_rate < 1.0) {
            return Err(Error::InvalidInput(format!(
                "baseline_rate must lie in (0, 1), got {}",
                self.baseline_rate
            )));
        }
        if !self.amplitude.is_finite() {
            return Err(Error::InvalidInput("amplitude must be finite".into()));
        }
        Ok(())
    }

    /// Event locations shared by every trial.
    pub fn stimulus_code(&self) -> Result<SparseCode> {
        let events = (0..)
            .map(|p| self.phase + p * self.period)
            .take_while(|&l| l + self.template_len <= self.num_samples)
            .map(|l| Event::new(l, self.amplitude))
            .collect();
        SparseCode::from_events(vec![events])
    }
}

/// Bernoulli trials `y_n ~ Bernoulli(sigmoid(a + (h * x)_n))` with the
/// stimulus code shared by all trials.
pub fn gen_bernoulli_dataset(spec: &BernoulliSimSpec) -> Result<Dataset> {
    spec.validate()?;
    let dict = Dictionary::new(vec![spec.template.generate(spec.template_len)?])?;
    let a = (spec.baseline_rate / (1.0 - spec.baseline_rate)).ln();
    let code = spec.stimulus_code()?;
    let eta = reconstruct(&dict, &code, &Baseline::Scalar(a), spec.num_samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let trials = (0..spec.num_trials)
        .map(|_| {
            let y = eta.iter().map(|&e| f64::from(rng.random_bool(sigmoid(e)))).collect();
            Trial::new(y, Baseline::Scalar(a))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        trials,
        truth: Truth {
            dict,
            codes: vec![code; spec.num_trials],
            baseline: a,
        },
    })
}

/// Truth plus Gaussian noise, each template's noise scaled (by bisection)
/// to the smallest level whose dictionary error exceeds `min_error`.
pub fn perturbed_init(truth: &Dictionary, min_error: f64, seed: u64) -> Result<Dictionary> {
    if !(0.0..1.0).contains(&min_error) {
        return Err(Error::InvalidInput(format!("min_error must lie in [0, 1), got {min_error}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = truth.template_len();
    let mut out = Vec::with_capacity(truth.num_templates());
    for h in truth.templates() {
        let at = |noise: &[f64], s: f64| -> Result<(Vec<f64>, f64)> {
            let v: Vec<f64> = h.iter().zip(noise).map(|(a, b)| a + s * b).collect();
            let v = normalize(&v)?;
            let e = dict_error(&v, h)?;
            Ok((v, e))
        };
        let noise = loop {
            let n: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
            // the error saturates at the noise direction's own error
            if at(&n, 1e6)?.1 > min_error {
                break n;
            }
        };
        let mut hi = 1.0;
        while at(&noise, hi)?.1 <= min_error {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if at(&noise, mid)?.1 > min_error {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        out.push(at(&noise, hi)?.0);
    }
    Dictionary::new(out)
}
