//! CSV time series, JSON manifests and checkpoint files.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::CliError;

/// One row of every time-series file.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Row {
    pub t: f64,
    pub name: String,
    pub mean: f64,
    pub stderr: f64,
    pub n_samples: usize,
}

pub const UNITS_HEADER: &[&str] = &[
    "t: time in microseconds",
    "mean, stderr: dimensionless, except energy in rad/us",
    "n_samples: Monte Carlo samples or trajectories behind the estimate (0 for exact values)",
];

/// Write rows under a `#`-commented header. Floats use the shortest
/// round-trip representation, so identical inputs give identical bytes.
pub fn write_csv(path: &Path, config_hash: &str, extra: &[String], rows: &[Row]) -> Result<(), CliError> {
    let mut buf: Vec<u8> = Vec::new();
    writeln!(buf, "# ruby-qsl {}", env!("CARGO_PKG_VERSION"))?;
    writeln!(buf, "# config_hash: {config_hash}")?;
    for line in UNITS_HEADER.iter().map(|s| s.to_string()).chain(extra.iter().cloned()) {
        writeln!(buf, "# {line}")?;
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in rows {
            w.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
        }
        w.flush()?;
    }
    if rows.is_empty() {
        writeln!(buf, "t,name,mean,stderr,n_samples")?;
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Parse a file written by [`write_csv`].
pub fn read_csv(path: &Path) -> Result<Vec<Row>, CliError> {
    let text = std::fs::read_to_string(path)?;
    let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::Runtime(e.to_string()))?;
        let f = |i: usize| -> Result<f64, CliError> {
            rec.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| CliError::Runtime(format!("bad CSV field {i} in {}", path.display())))
        };
        out.push(Row { t: f(0)?, name: rec.get(1).unwrap_or("").to_string(), mean: f(2)?, stderr: f(3)?, n_samples: f(4)? as usize });
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct Stage {
    pub name: String,
    pub seconds: f64,
    pub diagnostics: serde_json::Value,
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub config: serde_json::Value,
    pub outputs: Vec<PathBuf>,
    pub stages: Vec<Stage>,
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl Manifest {
    pub fn new(command: &str, config_hash: String, seed: u64, config: serde_json::Value) -> Self {
        Self {
            command: command.into(),
            config_hash,
            code_version: env!("CARGO_PKG_VERSION").into(),
            seed,
            started_unix: unix_now(),
            finished_unix: 0.0,
            config,
            outputs: Vec::new(),
            stages: Vec::new(),
        }
    }

    pub fn stage(&mut self, name: &str, started: std::time::Instant, diagnostics: serde_json::Value) {
        self.stages.push(Stage { name: name.into(), seconds: started.elapsed().as_secs_f64(), diagnostics });
    }

    pub fn write(&mut self, dir: &Path) -> Result<PathBuf, CliError> {
        self.finished_unix = unix_now();
        let path = dir.join("manifest.json");
        std::fs::create_dir_all(dir)?;
        std::fs::write(&path, serde_json::to_string_pretty(self).map_err(|e| CliError::Runtime(e.to_string()))?)?;
        Ok(path)
    }
}

/// Checkpoint file name for time `t`.
pub fn checkpoint_name(t: f64) -> String {
    format!("t={t:.4}.json")
}
