use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use gpcdl::{Baseline, SparseCode, Trial};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CliError, CliResult};

fn write_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::input(format!("cannot write {}: {e}", path.display()))
}

/// Reads trials from a CSV (one row per trial, header row) or from a JSON
/// array of trials when the extension is `.json`.
pub fn read_trials(path: &Path) -> CliResult<Vec<Trial>> {
    if path.extension().is_some_and(|e| e == "json") {
        return read_json(path);
    }
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CliError::input(format!("cannot read dataset {}: {e}", path.display())))?;
    let mut trials = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        let y = record
            .iter()
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::input(format!("{}: row {}: {e}", path.display(), i + 1)))?;
        trials.push(Trial::new(y, Baseline::Scalar(0.0))?);
    }
    if trials.is_empty() {
        return Err(CliError::input(format!("dataset {} has no trials", path.display())));
    }
    Ok(trials)
}

pub fn write_trials(path: &Path, trials: &[Trial]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| write_error(path, e))?;
    let n = trials.first().map_or(0, Trial::len);
    w.write_record((0..n).map(|i| format!("y{i}"))).map_err(|e| write_error(path, e))?;
    for t in trials {
        w.write_record(t.observations.iter().map(|v| v.to_string()))
            .map_err(|e| write_error(path, e))?;
    }
    w.flush().map_err(|e| write_error(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let bytes = fs::read(path).map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::input(format!("invalid {}: {e}", path.display())))
}

#[derive(Serialize)]
struct CodeRow {
    trial: usize,
    template: usize,
    location: usize,
    amplitude: f64,
}

/// Collects the files a command writes into its output directory.
pub struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
    started_unix_ms: u128,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

impl Outputs {
    pub fn create(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| write_error(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            started_unix_ms: now_ms(),
        })
    }

    fn register(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let path = self.register(name);
        let mut text = serde_json::to_string_pretty(value).map_err(|e| write_error(&path, e))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| write_error(&path, e))
    }

    pub fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> CliResult<()> {
        let path = self.register(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| write_error(&path, e))?;
        for r in rows {
            w.serialize(r).map_err(|e| write_error(&path, e))?;
        }
        w.flush().map_err(|e| write_error(&path, e))
    }

    /// CSV with a header computed at run time.
    pub fn table(&mut self, name: &str, header: &[String], rows: &[Vec<f64>]) -> CliResult<()> {
        let path = self.register(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| write_error(&path, e))?;
        w.write_record(header).map_err(|e| write_error(&path, e))?;
        for r in rows {
            w.write_record(r.iter().map(|v| v.to_string()))
                .map_err(|e| write_error(&path, e))?;
        }
        w.flush().map_err(|e| write_error(&path, e))
    }

    pub fn trials(&mut self, name: &str, trials: &[Trial]) -> CliResult<()> {
        let path = self.register(name);
        write_trials(&path, trials)
    }

    pub fn codes(&mut self, name: &str, codes: &[SparseCode]) -> CliResult<()> {
        let rows: Vec<CodeRow> = codes
            .iter()
            .enumerate()
            .flat_map(|(trial, code)| {
                (0..code.num_templates()).flat_map(move |template| {
                    code.events(template).iter().map(move |e| CodeRow {
                        trial,
                        template,
                        location: e.location,
                        amplitude: e.amplitude,
                    })
                })
            })
            .collect();
        self.csv(name, &rows)
    }

    /// Writes `manifest.json` listing every file written so far.
    pub fn finish(self, command: &str, config_sha256: &str, seed: Option<u64>) -> CliResult<()> {
        let manifest = Manifest {
            command: command.to_string(),
            config_sha256: config_sha256.to_string(),
            seed,
            started_unix_ms: self.started_unix_ms,
            finished_unix_ms: now_ms(),
            outputs: self.files,
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        let path = self.dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| write_error(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| write_error(&path, e))
    }
}

#[derive(Debug, Serialize, serde::Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    /// File names relative to the output directory.
    pub outputs: Vec<String>,
    pub version: String,
}
