//! Summary tables over completed run directories.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::Metrics;
use crate::error::{Error, Result};
use crate::experiments::PRIMARY;
use crate::io;
use crate::problems::ProblemKind;

/// Reference values for the reaction rate from earlier Bayesian PINN
/// studies. Quoted, never computed.
pub const K_COMPARATORS: [(&str, f64, f64); 4] = [
    ("B-PINN-HMC", 1.003, 5.75e-3),
    ("B-PINN-VI", 0.895, 2.83e-3),
    ("Dropout-1%", 1.050, 2.00e-3),
    ("Dropout-5%", 1.168, 3.04e-3),
];

/// Row order of the regression tables.
pub const ARCHITECTURES: [(&str, &str); 5] = [
    ("snn", "SNN"),
    ("bnn", "BNN"),
    ("mcdo", "MCDO"),
    ("denn", "DENN"),
    (PRIMARY, "DeepBayONet"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseRow {
    pub architecture: String,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub architecture: String,
    pub total: f64,
    pub idd: f64,
    pub ood: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub method: String,
    pub mean: f64,
    pub std: f64,
    /// False for quoted reference values.
    pub computed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    pub run: String,
    pub experiment: String,
    pub parameter: String,
    pub mean: f64,
    pub std: f64,
    pub mode: f64,
    pub true_value: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Tables {
    pub regression_mse: Vec<MseRow>,
    pub regression_coverage: Vec<CoverageRow>,
    pub reaction_rate: Vec<RateRow>,
    pub parameters: Vec<ParamRow>,
}

struct Run {
    name: String,
    kind: ProblemKind,
    metrics: Metrics,
}

fn load(dir: &Path) -> std::result::Result<Run, String> {
    let metrics = io::read_metrics(&dir.join(io::METRICS_FILE)).map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(dir.join(io::CONFIG_FILE))
        .map_err(|e| format!("{}: {e}", dir.join(io::CONFIG_FILE).display()))?;
    let table: toml::Table = text.parse().map_err(|e| format!("{}: {e}", io::CONFIG_FILE))?;
    let kind = table
        .get("experiment")
        .and_then(|v| v.as_str())
        .ok_or_else(|| format!("{} has no experiment", io::CONFIG_FILE))?;
    let kind = ProblemKind::parse(kind).map_err(|e| e.to_string())?;
    Ok(Run {
        name: dir.display().to_string(),
        kind,
        metrics,
    })
}

/// Mean and population standard deviation.
fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn collect(runs: &[&Run], key: &str) -> Vec<f64> {
    runs.iter().filter_map(|r| r.metrics.get(key).copied()).collect()
}

/// Builds the tables. Every directory must hold `metrics.json` and
/// `config.toml`; otherwise the error lists each offender.
pub fn build(dirs: &[PathBuf]) -> Result<Tables> {
    if dirs.is_empty() {
        return Err(Error::Config("report needs at least one run dir".into()));
    }
    let mut runs = Vec::new();
    let mut bad = Vec::new();
    for d in dirs {
        match load(d) {
            Ok(r) => runs.push(r),
            Err(e) => bad.push(format!("  {}: {e}", d.display())),
        }
    }
    if !bad.is_empty() {
        return Err(Error::invalid(format!("runs without usable metrics:\n{}", bad.join("\n"))));
    }
    let mut t = Tables::default();
    let reg: Vec<&Run> = runs.iter().filter(|r| r.kind == ProblemKind::RegressionUq).collect();
    if !reg.is_empty() {
        for (key, label) in ARCHITECTURES {
            let mse = collect(&reg, &format!("{key}.mse_total"));
            if mse.is_empty() {
                continue;
            }
            let (m, s) = mean_std(&mse);
            t.regression_mse.push(MseRow {
                architecture: label.into(),
                mse_mean: m,
                mse_std: s,
                runs: mse.len(),
            });
            let avg = |k: &str| mean_std(&collect(&reg, &format!("{key}.{k}"))).0;
            t.regression_coverage.push(CoverageRow {
                architecture: label.into(),
                total: avg("coverage_total"),
                idd: avg("coverage_idd"),
                ood: avg("coverage_ood"),
                runs: mse.len(),
            });
        }
    }
    let rd: Vec<&Run> = runs.iter().filter(|r| r.kind == ProblemKind::Rd2d).collect();
    if !rd.is_empty() {
        t.reaction_rate.push(RateRow {
            method: "DeepBayONet".into(),
            mean: mean_std(&collect(&rd, "param.k.mean")).0,
            std: mean_std(&collect(&rd, "param.k.std")).0,
            computed: true,
        });
        for (name, mean, std) in K_COMPARATORS {
            t.reaction_rate.push(RateRow {
                method: name.into(),
                mean,
                std,
                computed: false,
            });
        }
    }
    for r in &runs {
        let problem = r.kind.make();
        for p in &problem.params {
            let get = |s: &str| r.metrics.get(&format!("param.{}.{s}", p.name)).copied().unwrap_or(f64::NAN);
            t.parameters.push(ParamRow {
                run: r.name.clone(),
                experiment: r.kind.name().into(),
                parameter: p.name.clone(),
                mean: get("mean"),
                std: get("std"),
                mode: get("mode"),
                true_value: p.true_value,
            });
        }
    }
    Ok(t)
}

/// Shortest form for table cells: three decimals, or scientific below 0.01.
fn cell(v: f64) -> String {
    if v != 0.0 && v.abs() < 0.01 {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn render(title: &str, header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate() {
            w[i] = w[i].max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| if i == 0 { format!("{c:<0$}", w[i]) } else { format!("{c:>0$}", w[i]) })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut s = format!("{title}\n");
    let head = line(header.to_vec());
    let _ = writeln!(s, "{head}");
    let _ = writeln!(s, "{}", "-".repeat(head.len()));
    for r in rows {
        let _ = writeln!(s, "{}", line(r.iter().map(String::as_str).collect()));
    }
    s
}

impl Tables {
    pub fn text(&self) -> String {
        let mut out = Vec::new();
        if !self.regression_mse.is_empty() {
            let rows = self
                .regression_mse
                .iter()
                .map(|r| vec![r.architecture.clone(), cell(r.mse_mean), cell(r.mse_std)])
                .collect::<Vec<_>>();
            let n = self.regression_mse[0].runs;
            out.push(render(
                &format!("Testing MSE over {n} runs"),
                &["Architecture", "MSE (mean)", "MSE (std)"],
                &rows,
            ));
            let rows = self
                .regression_coverage
                .iter()
                .map(|r| vec![r.architecture.clone(), format!("{:.2}", r.total), format!("{:.2}", r.idd), format!("{:.2}", r.ood)])
                .collect::<Vec<_>>();
            out.push(render(
                &format!("95% interval coverage (%) averaged over {n} runs"),
                &["Architecture", "Total Testing", "IDD Coverage", "OOD Coverage"],
                &rows,
            ));
        }
        if !self.reaction_rate.is_empty() {
            let mut header = vec![""];
            header.extend(self.reaction_rate.iter().map(|r| r.method.as_str()));
            let mut mean = vec!["Mean".to_string()];
            mean.extend(self.reaction_rate.iter().map(|r| cell(r.mean)));
            let mut std = vec!["Std".to_string()];
            std.extend(self.reaction_rate.iter().map(|r| cell(r.std)));
            let mut both = vec!["Mean / Std".to_string()];
            both.extend(self.reaction_rate.iter().map(|r| format!("{} / {}", cell(r.mean), cell(r.std))));
            out.push(render("Reaction rate k (exact 1)", &header, &[mean, std, both]));
        }
        if !self.parameters.is_empty() {
            let rows = self
                .parameters
                .iter()
                .map(|p| {
                    vec![
                        p.run.clone(),
                        p.experiment.clone(),
                        p.parameter.clone(),
                        format!("{:.6}", p.mean),
                        format!("{:.3e}", p.std),
                        format!("{:.6}", p.mode),
                        format!("{}", p.true_value),
                    ]
                })
                .collect::<Vec<_>>();
            out.push(render(
                "Posterior parameter summaries",
                &["Run", "Experiment", "Parameter", "Mean", "Std", "Mode", "True"],
                &rows,
            ));
        }
        out.join("\n")
    }

    /// Writes `tables.json` and `tables.txt` into `out`.
    pub fn write(&self, out: &Path) -> Result<()> {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        io::write_text(&out.join("tables.json"), &json)?;
        io::write_text(&out.join("tables.txt"), &self.text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells() {
        assert_eq!(cell(1.003), "1.003");
        assert_eq!(cell(5.75e-3), "5.75e-3");
        assert_eq!(cell(0.0), "0.000");
    }

    #[test]
    fn population_std() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
    }

    #[test]
    fn missing_runs_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        std::fs::create_dir_all(&a).unwrap();
        let err = build(&[a.clone(), b.clone()]).unwrap_err().to_string();
        assert!(err.contains(&a.display().to_string()) && err.contains(&b.display().to_string()), "{err}");
    }
}
