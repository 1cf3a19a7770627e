//! Run directories and the artifact files inside them.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::analysis::Metrics;
use crate::error::{Error, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const POSTERIOR_FILE: &str = "posterior.csv";
pub const FIELD_FILE: &str = "field.csv";
pub const MODEL_FILE: &str = "model.dbonet";
pub const LOG_FILE: &str = "run.log";
pub const DATA_FILE: &str = "data.csv";

/// Every file a run may write. `--force` removes only these.
pub const ARTIFACTS: [&str; 8] = [
    CONFIG_FILE,
    HISTORY_FILE,
    METRICS_FILE,
    POSTERIOR_FILE,
    FIELD_FILE,
    MODEL_FILE,
    LOG_FILE,
    DATA_FILE,
];

pub struct RunDir {
    path: PathBuf,
    log: File,
    echo: bool,
}

impl RunDir {
    /// Creates `path`. An existing directory holding any artifact is an
    /// error unless `force`, in which case those artifacts are removed.
    pub fn create(path: &Path, force: bool) -> Result<Self> {
        if path.exists() {
            if !path.is_dir() {
                return Err(Error::Config(format!("{} exists and is not a directory", path.display())));
            }
            let present: Vec<&str> = ARTIFACTS.iter().copied().filter(|a| path.join(a).exists()).collect();
            if !present.is_empty() {
                if !force {
                    return Err(Error::Config(format!(
                        "run dir {} already holds a run (pass --force to overwrite)",
                        path.display()
                    )));
                }
                for a in present {
                    let p = path.join(a);
                    fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                }
            }
        }
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        let log_path = path.join(LOG_FILE);
        let log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        Ok(RunDir {
            path: path.to_path_buf(),
            log,
            echo: true,
        })
    }

    /// Stops echoing log lines to stdout.
    pub fn quiet(mut self) -> Self {
        self.echo = false;
        self
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn log(&mut self, line: &str) -> Result<()> {
        if self.echo {
            println!("{line}");
        }
        writeln!(self.log, "{line}").map_err(|e| Error::io(self.path.join(LOG_FILE), e))
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes a sorted, pretty-printed JSON map. Non-finite values become null.
pub fn write_metrics(path: &Path, metrics: &Metrics) -> Result<()> {
    let mut text = serde_json::to_string_pretty(metrics)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_metrics(path: &Path) -> Result<Metrics> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: std::collections::BTreeMap<String, Option<f64>> = serde_json::from_str(&text)?;
    Ok(raw.into_iter().map(|(k, v)| (k, v.unwrap_or(f64::NAN))).collect())
}

/// One column per parameter, one row per sample.
pub fn write_posterior(path: &Path, names: &[String], samples: &Array2<f64>) -> Result<()> {
    if names.len() != samples.ncols() {
        return Err(Error::Dimension {
            context: "posterior columns",
            expected: names.len(),
            actual: samples.ncols(),
        });
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(names)?;
    for row in samples.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_posterior(path: &Path) -> Result<(Vec<String>, Array2<f64>)> {
    let mut r = csv::Reader::from_path(path)?;
    let names: Vec<String> = r.headers()?.iter().map(String::from).collect();
    let mut values = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        for (c, s) in rec.iter().enumerate() {
            let v = s.parse::<f64>().map_err(|e| {
                Error::invalid(format!("{} column {}: bad number '{s}': {e}", path.display(), names[c]))
            })?;
            values.push(v);
        }
        rows += 1;
    }
    let a = Array2::from_shape_vec((rows, names.len()), values)
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    Ok((names, a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn posterior_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(POSTERIOR_FILE);
        let s = array![[0.1 + 0.2, 1e-300], [std::f64::consts::PI, -2.5e17]];
        write_posterior(&p, &["a".into(), "b".into()], &s).unwrap();
        let (names, back) = read_posterior(&p).unwrap();
        assert_eq!(names, ["a", "b"]);
        assert_eq!(back, s);
    }

    #[test]
    fn metrics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(METRICS_FILE);
        let m: Metrics = [("x".to_string(), 0.1 + 0.2), ("y".to_string(), -3.0)].into();
        write_metrics(&p, &m).unwrap();
        assert_eq!(read_metrics(&p).unwrap(), m);
    }

    #[test]
    fn existing_run_needs_force() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("r");
        RunDir::create(&run, false).unwrap();
        assert!(RunDir::create(&run, false).is_err());
        fs::write(run.join("notes.txt"), "keep").unwrap();
        RunDir::create(&run, true).unwrap();
        assert!(run.join("notes.txt").exists());
    }
}
