//! Experiment configuration: per-experiment defaults, TOML files and
//! `--set key=value` overrides.
//!
//! Resolution order is defaults, then the config file, then overrides. The
//! resolved value is what gets snapshotted into a run directory.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::baselines::{BaselineConfig, BaselineKind};
use crate::error::{Error, Result};
use crate::network::{Activation, DeepOnetSpec, ParamReadout};
use crate::problems::{ProblemDef, ProblemKind, SensorLayout};
use crate::training::{Collocation, SchedulerConfig, Stage, TrainConfig};
use crate::variational::{LossWeights, VariationalConfig};

/// Size profile of the reaction-diffusion experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub branch_hidden: Vec<usize>,
    pub trunk_hidden: Vec<usize>,
    pub width: usize,
    pub latent_dim: usize,
    pub log_var: bool,
    pub output_activation: Activation,
    pub readout: ParamReadout,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub odd_axis: Option<usize>,
    #[serde(default)]
    pub param_init: Vec<f64>,
    #[serde(default)]
    pub residual_log_var: bool,
}

impl ModelConfig {
    pub fn spec(&self, problem: &ProblemDef) -> DeepOnetSpec {
        DeepOnetSpec {
            coord_dim: problem.coord_dim(),
            latent_dim: self.latent_dim,
            branch_hidden: self.branch_hidden.clone(),
            trunk_hidden: self.trunk_hidden.clone(),
            width: self.width,
            links: problem.links(),
            param_init: self.param_init.clone(),
            log_var: self.log_var,
            output_activation: self.output_activation,
            readout: self.readout,
            odd_axis: self.odd_axis,
            residual_log_var: self.residual_log_var,
        }
    }

    fn tanh_net(hidden: usize, width: usize, latent_dim: usize) -> Self {
        ModelConfig {
            branch_hidden: vec![hidden, hidden],
            trunk_hidden: vec![hidden, hidden],
            width,
            latent_dim,
            log_var: true,
            output_activation: Activation::Identity,
            readout: ParamReadout::Trunk,
            odd_axis: None,
            param_init: Vec::new(),
            residual_log_var: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Latent draws for predictive statistics.
    pub n_latent: usize,
    /// Points per grid axis.
    pub grid_n: usize,
    /// Rows of `posterior.csv`.
    pub posterior_samples: usize,
    pub hist_bins: usize,
    /// Points for the boundary RMS and normalization diagnostics.
    pub diagnostic_points: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            n_latent: 256,
            grid_n: 100,
            posterior_samples: 2000,
            hist_bins: 100,
            diagnostic_points: 4096,
        }
    }
}

/// Seed-retry for the eigenproblem. An attempt is accepted when every
/// target-free diagnostic is under its threshold; otherwise the next
/// attempt seed is tried, keeping the attempt with the lowest score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryConfig {
    pub attempts: usize,
    pub max_residual: f64,
    pub max_bc_rms: f64,
    pub max_norm_dev: f64,
}

impl Default for RetryConfig {
    fn default() -> Self {
        RetryConfig {
            attempts: 1,
            max_residual: 1.0,
            max_bc_rms: 0.05,
            max_norm_dev: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionConfig {
    pub n_train: usize,
    pub n_idd: usize,
    pub n_ood: usize,
    pub baselines: Vec<BaselineKind>,
    pub baseline: BaselineConfig,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        RegressionConfig {
            n_train: 500,
            n_idd: 200,
            n_ood: 100,
            baselines: BaselineKind::ALL.to_vec(),
            baseline: BaselineConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ProblemKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<Profile>,
    pub seed: u64,
    /// Observation noise standard deviation.
    pub noise: f64,
    /// Console and log cadence in epochs.
    pub log_every: usize,
    /// Flush cadence of `history.csv` in epochs.
    pub flush_every: usize,
    pub sensors: SensorLayout,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub variational: VariationalConfig,
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub retry: RetryConfig,
    #[serde(default)]
    pub regression: RegressionConfig,
}

fn weights(interior: f64, ic: f64, bc: f64, data: f64, std: f64, extra: f64) -> LossWeights {
    LossWeights {
        interior,
        ic,
        bc,
        data,
        std,
        extra,
    }
}

impl ExperimentConfig {
    /// Built-in defaults. `profile` only applies to `rd2d` (default desk).
    pub fn defaults(kind: ProblemKind, profile: Option<Profile>) -> Result<Self> {
        if profile.is_some() && kind != ProblemKind::Rd2d {
            return Err(Error::Config(format!("experiment {} has no profiles", kind.name())));
        }
        let sensors = |n_interior, n_boundary_per_edge, n_initial| SensorLayout {
            n_interior,
            n_boundary_per_edge,
            n_initial,
        };
        let train = |epochs, batch_size, lr, w, collocation| TrainConfig {
            epochs,
            batch_size,
            lr,
            scheduler: SchedulerConfig::default(),
            weights: w,
            collocation,
            stages: Vec::new(),
        };
        let colloc = |interior, boundary, initial| Collocation {
            interior,
            boundary,
            initial,
        };
        let base = |experiment, noise, sensors, model, train| ExperimentConfig {
            experiment,
            profile: None,
            seed: 0,
            noise,
            log_every: 100,
            flush_every: 100,
            sensors,
            model,
            train,
            variational: VariationalConfig::default(),
            analysis: AnalysisConfig::default(),
            retry: RetryConfig::default(),
            regression: RegressionConfig::default(),
        };
        let cfg = match kind {
            ProblemKind::RegressionUq => base(
                kind,
                0.0,
                sensors(0, 0, 0),
                ModelConfig::tanh_net(30, 30, 1),
                train(150, 16, 0.001, weights(0.0, 0.0, 0.0, 1.0, 1.0, 0.0), colloc(0, 0, 0)),
            ),
            ProblemKind::Sin3 => {
                let mut model = ModelConfig::tanh_net(32, 32, 1);
                model.param_init = vec![5.0];
                base(
                    kind,
                    0.01,
                    sensors(200, 0, 0),
                    model,
                    train(3000, 100, 0.005, weights(0.1, 0.0, 0.0, 1.0, 1.0, 0.0), colloc(200, 0, 0)),
                )
            }
            ProblemKind::Heat1d => base(
                kind,
                0.0,
                sensors(100, 0, 0),
                ModelConfig::tanh_net(16, 16, 2),
                train(15000, 100, 0.01, weights(1.0, 3.0, 1.0, 6.0, 1.0, 0.0), colloc(1000, 100, 100)),
            ),
            ProblemKind::Rd2d => {
                let profile = profile.unwrap_or(Profile::Desk);
                let (width, epochs, batch) = match profile {
                    Profile::Paper => (300, 35000, 500),
                    Profile::Desk => (64, 8000, 100),
                };
                let mut cfg = base(
                    kind,
                    0.01,
                    sensors(100, 25, 0),
                    ModelConfig::tanh_net(width, width, 1),
                    train(
                        epochs,
                        batch,
                        0.001,
                        weights(20000.0, 0.0, 100.0, 60000.0, 20.0, 0.0),
                        colloc(0, 25, 0),
                    ),
                );
                cfg.profile = Some(profile);
                cfg
            }
            ProblemKind::Helmholtz3d => {
                let mut model = ModelConfig::tanh_net(32, 32, 1);
                model.log_var = false;
                model.odd_axis = Some(2);
                model.param_init = vec![10.0];
                let mut cfg = base(
                    kind,
                    0.0,
                    sensors(0, 0, 0),
                    model,
                    train(3000, 100, 0.01, weights(1.0, 0.0, 10.0, 0.0, 0.0, 100.0), colloc(1024, 256, 0)),
                );
                // Each epoch is a single noisy step, so plateau decay is left off.
                cfg.train.scheduler.patience = 100_000;
                cfg.train.stages.push(Stage {
                    epochs: 3000,
                    lr: 0.003,
                    weights: weights(1.0, 0.0, 100.0, 0.0, 0.0, 100.0),
                });
                cfg.retry.attempts = 2;
                cfg.analysis.grid_n = 50;
                cfg
            }
        };
        Ok(cfg)
    }

    /// Resolves defaults, an optional TOML file and `key=value` overrides.
    pub fn resolve(kind: ProblemKind, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut layer = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut layer, o)?;
        }
        if let Some(v) = layer.get("experiment") {
            if v.as_str() != Some(kind.name()) {
                return Err(Error::Config(format!(
                    "config is for experiment {v}, but {} was requested",
                    kind.name()
                )));
            }
        }
        let profile = match layer.get("profile") {
            Some(v) => Some(
                Profile::deserialize(v.clone()).map_err(|e| Error::Config(format!("profile: {e}")))?,
            ),
            None => None,
        };
        let defaults = Self::defaults(kind, profile)?;
        let mut merged = Table::try_from(&defaults).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, layer);
        let cfg = ExperimentConfig::deserialize(Value::Table(merged)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let problem = self.experiment.make();
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be >= 0, got {}", self.noise)));
        }
        if self.log_every == 0 || self.flush_every == 0 {
            return Err(Error::Config("log_every and flush_every must be >= 1".into()));
        }
        let m = &self.model;
        if m.width == 0 || m.latent_dim == 0 || m.branch_hidden.contains(&0) || m.trunk_hidden.contains(&0) {
            return Err(Error::Config("model widths must be >= 1".into()));
        }
        if !m.param_init.is_empty() && m.param_init.len() != problem.params.len() {
            return Err(Error::Config(format!(
                "param_init has {} values, {} has {} parameters",
                m.param_init.len(),
                problem.name(),
                problem.params.len()
            )));
        }
        if let Some(a) = m.odd_axis {
            if a >= problem.coord_dim() {
                return Err(Error::Config(format!("odd_axis {a} out of range")));
            }
        }
        if self.variational.latent_samples == 0 {
            return Err(Error::Config("latent_samples must be >= 1".into()));
        }
        let a = &self.analysis;
        if a.n_latent < 2 || a.posterior_samples < 2 || a.grid_n < 2 || a.hist_bins < 2 || a.diagnostic_points == 0 {
            return Err(Error::Config(
                "analysis counts must be >= 2 (diagnostic_points >= 1)".into(),
            ));
        }
        if self.retry.attempts == 0 {
            return Err(Error::Config("retry.attempts must be >= 1".into()));
        }
        match self.experiment {
            ProblemKind::RegressionUq => {
                let r = &self.regression;
                if r.n_train == 0 || r.n_idd == 0 || r.n_ood == 0 {
                    return Err(Error::Config("regression set sizes must be >= 1".into()));
                }
                r.baseline.validate()?;
            }
            ProblemKind::Helmholtz3d => {}
            _ if self.sensors.n_interior == 0 => {
                return Err(Error::Config("sensors.n_interior must be >= 1".into()));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Parses `a.b.c=value`. The value is read as a TOML literal when possible
/// (numbers, booleans, arrays, inline tables) and as a bare string otherwise.
pub fn apply_override(table: &mut Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{item}' is not key=value")))?;
    let key = key.trim();
    let path: Vec<&str> = key.split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key '{key}'")));
    }
    let value = parse_value(raw.trim());
    let mut t = table;
    for part in &path[..path.len() - 1] {
        let entry = t
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{part}' is not a table")))?;
    }
    t.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Deep merge of `over` into `base`; non-table values replace.
fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_default_validates_and_round_trips() {
        for kind in ProblemKind::ALL {
            let cfg = ExperimentConfig::defaults(kind, None).unwrap();
            cfg.validate().unwrap();
            let text = cfg.to_toml().unwrap();
            assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg, "{text}");
        }
    }

    #[test]
    fn rd_profiles() {
        let desk = ExperimentConfig::resolve(ProblemKind::Rd2d, None, &[]).unwrap();
        assert_eq!(desk.profile, Some(Profile::Desk));
        assert_eq!((desk.model.width, desk.train.epochs), (64, 8000));
        let paper = ExperimentConfig::resolve(ProblemKind::Rd2d, None, &["profile=paper".into()]).unwrap();
        assert_eq!((paper.model.width, paper.train.epochs), (300, 35000));
        assert!(ExperimentConfig::resolve(ProblemKind::Heat1d, None, &["profile=desk".into()]).is_err());
    }

    #[test]
    fn overrides_apply_after_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "noise = 0.5\n[train]\nepochs = 7\n").unwrap();
        let cfg = ExperimentConfig::resolve(
            ProblemKind::Sin3,
            Some(&path),
            &["noise=0.1".into(), "train.weights.data=2".into(), "model.odd_axis=0".into()],
        )
        .unwrap();
        assert_eq!(cfg.noise, 0.1);
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.weights.data, 2.0);
        assert_eq!(cfg.model.odd_axis, Some(0));
        assert_eq!(cfg.train.lr, ExperimentConfig::defaults(ProblemKind::Sin3, None).unwrap().train.lr);
    }

    #[test]
    fn config_errors() {
        let k = ProblemKind::Heat1d;
        assert!(ExperimentConfig::resolve(k, Some(Path::new("/nonexistent/x.toml")), &[]).is_err());
        assert!(ExperimentConfig::resolve(k, None, &["nokey".into()]).is_err());
        assert!(ExperimentConfig::resolve(k, None, &["bogus=1".into()]).is_err());
        assert!(ExperimentConfig::resolve(k, None, &["train.epochs=0".into()]).is_err());
        assert!(ExperimentConfig::resolve(k, None, &["experiment=sin3".into()]).is_err());
        assert!(ExperimentConfig::resolve(k, None, &["noise=-1".into()]).is_err());
        assert!(ExperimentConfig::resolve(k, None, &["model.param_init=[1.0]".into()]).is_err());
    }

    #[test]
    fn string_override_falls_back() {
        let mut t = Table::new();
        apply_override(&mut t, "variational.objective=elbo").unwrap();
        apply_override(&mut t, "a.b=[1, 2]").unwrap();
        assert_eq!(t["variational"]["objective"].as_str(), Some("elbo"));
        assert_eq!(t["a"]["b"].as_array().unwrap().len(), 2);
    }
}
