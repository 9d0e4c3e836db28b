//! Templates, sparse event codes, trials, and the convolutional operators
//! `X_c h` (reconstruction) and `X_c^T v` (segment extraction).
//!
//! Codes are stored event-wise as `(location, amplitude)` pairs; the shift
//! matrices are never materialized.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// A collection of `C` unit-norm templates of common length `K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Dictionary {
    templates: Vec<Vec<f64>>,
}

impl TryFrom<Vec<Vec<f64>>> for Dictionary {
    type Error = Error;

    fn try_from(t: Vec<Vec<f64>>) -> Result<Self> {
        Dictionary::new(t)
    }
}

impl From<Dictionary> for Vec<Vec<f64>> {
    fn from(d: Dictionary) -> Self {
        d.templates
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale `v` to unit Euclidean norm.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = l2_norm(v);
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::InvalidInput("cannot normalize a zero or non-finite vector".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

impl Dictionary {
    /// Builds a dictionary, scaling every template to unit norm. Templates
    /// already at unit norm up to rounding are kept bit for bit.
    pub fn new(templates: Vec<Vec<f64>>) -> Result<Self> {
        let k = templates
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::InvalidInput("dictionary needs at least one template".into()))?;
        if k == 0 {
            return Err(Error::InvalidInput("templates must be non-empty".into()));
        }
        let templates = templates
            .iter()
            .map(|t| {
                check_len("template length", k, t.len())?;
                if (l2_norm(t) - 1.0).abs() <= 4.0 * f64::EPSILON {
                    Ok(t.clone())
                } else {
                    normalize(t)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { templates })
    }

    pub fn num_templates(&self) -> usize {
        self.templates.len()
    }

    pub fn template_len(&self) -> usize {
        self.templates[0].len()
    }

    pub fn template(&self, c: usize) -> &[f64] {
        &self.templates[c]
    }

    pub fn templates(&self) -> &[Vec<f64>] {
        &self.templates
    }

    pub(crate) fn set_template_unchecked(&mut self, c: usize, unit: Vec<f64>) {
        debug_assert!((l2_norm(&unit) - 1.0).abs() < 1e-9);
        self.templates[c] = unit;
    }
}

/// One occurrence of a template: 0-based start sample and amplitude.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub location: usize,
    pub amplitude: f64,
}

impl Event {
    pub fn new(location: usize, amplitude: f64) -> Self {
        Self {
            location,
            amplitude,
        }
    }
}

/// Per-template event lists for one trial, each sorted by location.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseCode {
    events: Vec<Vec<Event>>,
}

impl SparseCode {
    pub fn empty(num_templates: usize) -> Self {
        Self {
            events: vec![Vec::new(); num_templates],
        }
    }

    /// Builds a code, sorting each list and rejecting repeated locations.
    pub fn from_events(mut events: Vec<Vec<Event>>) -> Result<Self> {
        for list in &mut events {
            list.sort_by_key(|e| e.location);
            if list.windows(2).any(|w| w[0].location == w[1].location) {
                return Err(Error::InvalidInput(
                    "duplicate event location within one template".into(),
                ));
            }
        }
        Ok(Self { events })
    }

    pub fn num_templates(&self) -> usize {
        self.events.len()
    }

    pub fn events(&self, c: usize) -> &[Event] {
        &self.events[c]
    }

    pub fn all_events(&self) -> &[Vec<Event>] {
        &self.events
    }

    pub fn total_events(&self) -> usize {
        self.events.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_events() == 0
    }

    /// Multiply every amplitude of template `c` by `factor`.
    pub fn scale_template(&mut self, c: usize, factor: f64) {
        for e in &mut self.events[c] {
            e.amplitude *= factor;
        }
    }

    /// Concatenation of two codes with amplitudes scaled by `a` and `b`;
    /// coincident events are merged by adding amplitudes.
    pub fn combine(&self, a: f64, other: &SparseCode, b: f64) -> Result<SparseCode> {
        check_len("templates in combined codes", self.num_templates(), other.num_templates())?;
        let mut out = Vec::with_capacity(self.num_templates());
        for c in 0..self.num_templates() {
            let mut merged: Vec<Event> = Vec::new();
            let mut all: Vec<Event> = self.events[c]
                .iter()
                .map(|e| Event::new(e.location, a * e.amplitude))
                .chain(other.events[c].iter().map(|e| Event::new(e.location, b * e.amplitude)))
                .collect();
            all.sort_by_key(|e| e.location);
            for e in all {
                match merged.last_mut() {
                    Some(last) if last.location == e.location => last.amplitude += e.amplitude,
                    _ => merged.push(e),
                }
            }
            out.push(merged);
        }
        Ok(SparseCode { events: out })
    }
}

/// Baseline `a^j`, either one value broadcast over the trial or a full vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Baseline {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl Default for Baseline {
    fn default() -> Self {
        Baseline::Scalar(0.0)
    }
}

impl Baseline {
    pub fn to_vec(&self, n: usize) -> Result<Vec<f64>> {
        match self {
            Baseline::Scalar(a) => Ok(vec![*a; n]),
            Baseline::Vector(v) => {
                check_len("baseline length", n, v.len())?;
                Ok(v.clone())
            }
        }
    }
}

/// Observations of one trial and its baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub observations: Vec<f64>,
    #[serde(default)]
    pub baseline: Baseline,
}

impl Trial {
    pub fn new(observations: Vec<f64>, baseline: Baseline) -> Result<Self> {
        let t = Self {
            observations,
            baseline,
        };
        t.baseline.to_vec(t.len())?;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn baseline_vec(&self) -> Vec<f64> {
        // validated at construction or by `validate_trials`
        self.baseline
            .to_vec(self.len())
            .unwrap_or_else(|_| vec![0.0; self.len()])
    }
}

fn check_location(loc: usize, k: usize, n: usize) -> Result<()> {
    if k > n || loc > n - k {
        Err(Error::InvalidInput(format!(
            "event location {loc} does not fit a length-{k} template in {n} samples"
        )))
    } else {
        Ok(())
    }
}

/// Adds `sum_i x_i * h` shifted to each event location into `out`.
pub fn add_template(out: &mut [f64], h: &[f64], events: &[Event]) -> Result<()> {
    let (n, k) = (out.len(), h.len());
    for e in events {
        check_location(e.location, k, n)?;
        for (o, &hk) in out[e.location..e.location + k].iter_mut().zip(h) {
            *o += e.amplitude * hk;
        }
    }
    Ok(())
}

/// `eta = sum_c X_c h_c + a` for one trial of length `n`.
pub fn reconstruct(
    dict: &Dictionary,
    code: &SparseCode,
    baseline: &Baseline,
    n: usize,
) -> Result<Vec<f64>> {
    reconstruct_with(dict.templates(), code, baseline, n)
}

/// [`reconstruct`] for raw (not necessarily unit-norm) templates.
pub fn reconstruct_with(
    templates: &[Vec<f64>],
    code: &SparseCode,
    baseline: &Baseline,
    n: usize,
) -> Result<Vec<f64>> {
    check_len("templates vs code", templates.len(), code.num_templates())?;
    let mut eta = baseline.to_vec(n)?;
    for (h, events) in templates.iter().zip(code.all_events()) {
        add_template(&mut eta, h, events)?;
    }
    Ok(eta)
}

/// `X_c^T v = sum_i x_i v[n_i .. n_i + K]`.
pub fn adjoint_extract(events: &[Event], v: &[f64], k: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; k];
    for e in events {
        check_location(e.location, k, v.len())?;
        for (o, &vn) in out.iter_mut().zip(&v[e.location..e.location + k]) {
            *o += e.amplitude * vn;
        }
    }
    Ok(out)
}

/// `X_a^T diag(w) X_b` for two event lists, exact under overlap.
pub fn cross_weighted_gram(a: &[Event], b: &[Event], w: &[f64], k: usize) -> Result<DMatrix<f64>> {
    let n = w.len();
    let mut g = DMatrix::zeros(k, k);
    for e in a.iter().chain(b) {
        check_location(e.location, k, n)?;
    }
    for ea in a {
        for eb in b {
            if ea.location.abs_diff(eb.location) >= k {
                continue;
            }
            let xx = ea.amplitude * eb.amplitude;
            // sample s = la + p = lb + q
            let lo = ea.location.max(eb.location);
            let hi = (ea.location + k).min(eb.location + k);
            for s in lo..hi {
                g[(s - ea.location, s - eb.location)] += xx * w[s];
            }
        }
    }
    Ok(g)
}

/// `X_c^T diag(w) X_c`, including cross terms of overlapping events.
pub fn weighted_gram(events: &[Event], w: &[f64], k: usize) -> Result<DMatrix<f64>> {
    if let Some(bad) = w.iter().find(|&&x| !(x >= 0.0)) {
        return Err(Error::InvalidInput(format!("negative weight {bad}")));
    }
    cross_weighted_gram(events, events, w, k)
}

/// Whether any two events (across all templates) have overlapping supports.
pub fn has_overlap(code: &SparseCode, k: usize) -> bool {
    let mut locs: Vec<usize> = code
        .all_events()
        .iter()
        .flatten()
        .map(|e| e.location)
        .collect();
    locs.sort_unstable();
    locs.windows(2).any(|w| w[1] - w[0] < k)
}
