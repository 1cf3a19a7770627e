//! Run orchestration: dataset synthesis, training, analysis and artifacts.

use ndarray::{concatenate, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    boundary_and_norm, ci_coverage, evaluate_field, summarize_columns, CoverageReport, EvalMode, GridSpec, Metrics,
    Split,
};
use crate::baselines::train_baseline;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::io::{self, RunDir};
use crate::network::{file, DeepOnet};
use crate::problems::{regression_test_sets, synthesize_dataset, Dataset, ProblemDef, ProblemKind, SensorLayout};
use crate::rng::{substream, Stream};
use crate::training::{
    default_score, grid_search, indexed_seed, train_with, EpochRecord, History, HistoryWriter, Ranked, Validation,
};
use crate::variational::{posterior_param_samples, predict_with_uq, residual_values, LossWeights};

/// Name under which the primary model's regression metrics are stored.
pub const PRIMARY: &str = "deepbayonet";

fn format_record(r: &EpochRecord) -> String {
    let l = &r.loss;
    format!(
        "epoch {:>6}  total {:.4e}  interior {:.3e}  ic {:.3e}  bc {:.3e}  data {:.3e}  std {:.3e}  extra {:.3e}  lr {:.2e}",
        r.epoch, l.total, l.interior, l.ic, l.bc, l.data, l.std, l.extra, r.lr
    )
}

/// Training data for a config. Regression uses its own set size and the
/// state-dependent noise model.
pub fn dataset(cfg: &ExperimentConfig, problem: &ProblemDef) -> Result<Dataset> {
    let mut rng = substream(cfg.seed, Stream::Data);
    let layout = match cfg.experiment {
        ProblemKind::RegressionUq => SensorLayout {
            n_interior: cfg.regression.n_train,
            n_boundary_per_edge: 0,
            n_initial: 0,
        },
        ProblemKind::Helmholtz3d => return Ok(empty_dataset(problem.coord_dim())),
        _ => cfg.sensors,
    };
    synthesize_dataset(problem, &layout, cfg.noise, &mut rng)
}

fn empty_dataset(dim: usize) -> Dataset {
    Dataset {
        points: Array2::zeros((0, dim)),
        u: ndarray::Array1::zeros(0),
        f: None,
        noise_sigma: 0.0,
    }
}

/// Target-free eigenproblem diagnostics of a trained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenDiagnostics {
    pub residual_rms: f64,
    pub bc_rms: f64,
    pub norm_u2: f64,
}

impl EigenDiagnostics {
    pub fn compute(model: &DeepOnet, problem: &ProblemDef, cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let n = cfg.analysis.diagnostic_points;
        let (bc_rms, norm_u2) = boundary_and_norm(model, problem, n, cfg.analysis.n_latent, seed)?;
        let mut rng = substream(seed, Stream::Validation);
        let pts = problem.domain.sample_interior(n, &mut rng);
        let latent = vec![0.0; model.spec.latent_dim];
        let r = residual_values(model, problem, pts.view(), &latent, None, None)?
            .ok_or_else(|| Error::invalid("eigenproblem has no residual"))?;
        let residual_rms = r.mapv(|v| v * v).mean().unwrap_or(f64::NAN).sqrt();
        Ok(EigenDiagnostics {
            residual_rms,
            bc_rms,
            norm_u2,
        })
    }

    /// Sum of diagnostic-to-threshold ratios; accepted when every ratio < 1.
    pub fn score(&self, cfg: &ExperimentConfig) -> (f64, bool) {
        let r = &cfg.retry;
        let ratios = [
            self.residual_rms / r.max_residual,
            self.bc_rms / r.max_bc_rms,
            (self.norm_u2 - 1.0).abs() / r.max_norm_dev,
        ];
        let ok = ratios.iter().all(|x| *x < 1.0);
        let s: f64 = ratios.iter().sum();
        (if s.is_finite() { s } else { f64::INFINITY }, ok)
    }
}

struct Trained {
    model: DeepOnet,
    history: History,
    attempt: usize,
    seed: u64,
    diagnostics: Option<EigenDiagnostics>,
}

fn train_attempts(cfg: &ExperimentConfig, problem: &ProblemDef, data: &Dataset, dir: &mut RunDir) -> Result<Trained> {
    let spec = cfg.model.spec(problem);
    let eigen = cfg.experiment == ProblemKind::Helmholtz3d;
    let attempts = if eigen { cfg.retry.attempts } else { 1 };
    let mut best: Option<(f64, Trained)> = None;
    let mut last = 0;
    for a in 0..attempts {
        last = a;
        let seed = if a == 0 { cfg.seed } else { indexed_seed(cfg.seed, a) };
        let mut model = DeepOnet::new(spec.clone(), seed)?;
        if a == 0 {
            dir.log(&format!(
                "{}: {} parameters, {} training points",
                cfg.experiment.name(),
                model.param_count(),
                data.len()
            ))?;
        } else {
            dir.log(&format!("retry attempt {a} with seed {seed}"))?;
        }
        let mut writer = HistoryWriter::create(&dir.file(io::HISTORY_FILE), cfg.flush_every)?;
        let log_every = cfg.log_every;
        let history = train_with(&mut model, problem, data, &cfg.train, &cfg.variational, seed, |r, _| {
            writer.push(r)?;
            if r.epoch % log_every == 0 || r.epoch == 1 {
                dir.log(&format_record(r))?;
            }
            Ok(())
        });
        writer.finish()?;
        let history = match history {
            Err(Error::Divergence { component, epoch }) => {
                dir.log(&format!("diverged at epoch {epoch}: {component} is not finite"))?;
                return Err(Error::Divergence { component, epoch });
            }
            other => other?,
        };
        let mut trained = Trained {
            model,
            history,
            attempt: a,
            seed,
            diagnostics: None,
        };
        if !eigen {
            return Ok(trained);
        }
        let d = EigenDiagnostics::compute(&trained.model, problem, cfg, seed)?;
        let (score, ok) = d.score(cfg);
        dir.log(&format!(
            "attempt {a}: residual rms {:.4e}, boundary rms {:.4e}, E[u^2] {:.4}, score {score:.4}{}",
            d.residual_rms,
            d.bc_rms,
            d.norm_u2,
            if ok { " (accepted)" } else { "" }
        ))?;
        trained.diagnostics = Some(d);
        let better = best.as_ref().is_none_or(|(s, _)| score < *s);
        if ok {
            best = Some((score, trained));
            break;
        }
        if better {
            best = Some((score, trained));
        }
    }
    let (_, t) = best.expect("at least one attempt");
    if t.attempt != last {
        // the file on disk holds the last attempt's history
        t.history.write_csv(&dir.file(io::HISTORY_FILE))?;
        dir.log(&format!("keeping attempt {}", t.attempt))?;
    }
    Ok(t)
}

fn coverage_metrics(m: &mut Metrics, prefix: &str, c: &CoverageReport) {
    m.insert(format!("{prefix}.coverage_total"), c.total);
    m.insert(format!("{prefix}.mse_total"), c.mse_total);
    if let Some(v) = c.idd {
        m.insert(format!("{prefix}.coverage_idd"), v);
    }
    if let Some(v) = c.ood {
        m.insert(format!("{prefix}.coverage_ood"), v);
    }
    if let Some(v) = c.mse_idd {
        m.insert(format!("{prefix}.mse_idd"), v);
    }
    if let Some(v) = c.mse_ood {
        m.insert(format!("{prefix}.mse_ood"), v);
    }
}

fn regression_analysis(cfg: &ExperimentConfig, model: &DeepOnet, data: &Dataset, m: &mut Metrics, dir: &mut RunDir) -> Result<()> {
    let r = &cfg.regression;
    let (idd, ood) = regression_test_sets(r.n_idd, r.n_ood, &mut substream(cfg.seed, Stream::Validation))?;
    let x = concatenate(Axis(0), &[idd.points.view(), ood.points.view()]).expect("same width");
    let y = concatenate(Axis(0), &[idd.u.view(), ood.u.view()]).expect("1-d");
    let labels: Vec<Split> = std::iter::repeat_n(Split::Idd, idd.len())
        .chain(std::iter::repeat_n(Split::Ood, ood.len()))
        .collect();
    let n = cfg.analysis.n_latent;
    let uq = predict_with_uq(model, x.view(), n, &mut substream(cfg.seed, Stream::Analysis))?;
    let c = ci_coverage(&uq, &y, &labels)?;
    coverage_metrics(m, PRIMARY, &c);
    m.insert(format!("{PRIMARY}.params"), model.param_count() as f64);
    let results: Vec<Result<(String, CoverageReport, usize)>> = r
        .baselines
        .par_iter()
        .map(|&kind| {
            let b = train_baseline(kind, data, &r.baseline, cfg.seed)?;
            let mut rng = substream(cfg.seed, Stream::Dropout);
            let uq = b.predict(x.view(), n, &mut rng)?;
            Ok((kind.name().to_string(), ci_coverage(&uq, &y, &labels)?, b.param_count()))
        })
        .collect();
    for res in results {
        let (name, c, params) = res?;
        dir.log(&format!(
            "{name}: mse {:.4}, coverage total {:.2}%, ood {:.2}%",
            c.mse_total,
            c.total,
            c.ood.unwrap_or(f64::NAN)
        ))?;
        coverage_metrics(m, &name, &c);
        m.insert(format!("{name}.params"), params as f64);
    }
    dir.log(&format!(
        "{PRIMARY}: mse {:.4}, coverage total {:.2}%, ood {:.2}%",
        c.mse_total,
        c.total,
        c.ood.unwrap_or(f64::NAN)
    ))?;
    Ok(())
}

/// Runs one experiment into `dir` and returns its metrics.
pub fn execute(cfg: &ExperimentConfig, dir: &mut RunDir) -> Result<Metrics> {
    cfg.validate()?;
    io::write_text(&dir.file(io::CONFIG_FILE), &cfg.to_toml()?)?;
    let problem = cfg.experiment.make();
    let data = dataset(cfg, &problem)?;
    if !data.is_empty() {
        data.write_csv(&dir.file(io::DATA_FILE), &problem.coord_names)?;
    }
    let trained = train_attempts(cfg, &problem, &data, dir)?;
    let model = &trained.model;
    file::save(model, &dir.file(io::MODEL_FILE))?;

    let mut m = Metrics::new();
    m.insert("model.params".into(), model.param_count() as f64);
    m.insert("train.epochs".into(), trained.history.len() as f64);
    m.insert("train.attempt".into(), trained.attempt as f64);
    m.insert("train.seed".into(), trained.seed as f64);
    if let Some(last) = trained.history.last() {
        let names = ["interior", "ic", "bc", "data", "std", "extra", "total"];
        for (n, v) in names.iter().zip(last.loss.values()) {
            m.insert(format!("loss.{n}"), v);
        }
        m.insert("train.final_lr".into(), last.lr);
    }

    let a = &cfg.analysis;
    if !problem.params.is_empty() {
        let samples = posterior_param_samples(model, a.posterior_samples, &mut substream(cfg.seed, Stream::Analysis))?;
        let names: Vec<String> = problem.params.iter().map(|p| p.name.clone()).collect();
        io::write_posterior(&dir.file(io::POSTERIOR_FILE), &names, &samples)?;
        for (p, s) in problem.params.iter().zip(summarize_columns(&samples, a.hist_bins)?) {
            m.insert(format!("param.{}.mean", p.name), s.mean);
            m.insert(format!("param.{}.std", p.name), s.std);
            m.insert(format!("param.{}.mode", p.name), s.mode);
            m.insert(format!("param.{}.true", p.name), p.true_value);
            dir.log(&format!(
                "{}: mean {:.6}, std {:.4e}, mode {:.6} (true {})",
                p.name, s.mean, s.std, s.mode, p.true_value
            ))?;
        }
    }

    let grid = GridSpec::for_problem(&problem, a.grid_n)?;
    let field = evaluate_field(model, &problem, &grid, a.n_latent, EvalMode::PosteriorMean, None, cfg.seed)?;
    field.write_csv(&dir.file(io::FIELD_FILE))?;
    if let Some(v) = field.mean_abs_error() {
        m.insert("field.mae".into(), v);
    }
    if let Some(v) = field.max_abs_error() {
        m.insert("field.max_abs_error".into(), v);
    }
    if let Some(v) = field.mean_abs_residual() {
        m.insert("field.mean_abs_residual".into(), v);
    }
    if let Some(v) = field.epistemic_std.mean() {
        m.insert("field.mean_epistemic_std".into(), v);
    }
    if let Some(d) = trained.diagnostics {
        m.insert("eigen.residual_rms".into(), d.residual_rms);
        m.insert("eigen.bc_rms".into(), d.bc_rms);
        m.insert("eigen.norm_u2".into(), d.norm_u2);
    }
    if cfg.experiment == ProblemKind::RegressionUq {
        regression_analysis(cfg, model, &data, &mut m, dir)?;
    }
    if let Some(v) = m.get("field.mae") {
        dir.log(&format!("field mean abs error {v:.4e}"))?;
    }
    io::write_metrics(&dir.file(io::METRICS_FILE), &m)?;
    Ok(m)
}

/// Grid file for `sweep`: the experiment, optional overrides applied to its
/// defaults and the candidate loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub experiment: ProblemKind,
    #[serde(default)]
    pub set: Vec<String>,
    pub weights: Vec<LossWeights>,
    #[serde(default = "default_validation")]
    pub validation_points: usize,
}

fn default_validation() -> usize {
    200
}

impl SweepGrid {
    pub fn from_toml(text: &str) -> Result<Self> {
        let g: SweepGrid = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if g.weights.is_empty() {
            return Err(Error::Config("sweep grid has no weights".into()));
        }
        if g.validation_points == 0 {
            return Err(Error::Config("validation_points must be >= 1".into()));
        }
        Ok(g)
    }
}

/// Short-budget training of every weight candidate, ranked by
/// [`default_score`] on a held-out noiseless validation set.
pub fn sweep(grid: &SweepGrid, budget: usize, seed: u64, jobs: usize) -> Result<Vec<Ranked>> {
    if budget == 0 {
        return Err(Error::Config("--budget must be >= 1".into()));
    }
    if jobs == 0 {
        return Err(Error::Config("--jobs must be >= 1".into()));
    }
    let mut set = grid.set.clone();
    set.push(format!("seed={seed}"));
    let cfg = ExperimentConfig::resolve(grid.experiment, None, &set)?;
    let problem = cfg.experiment.make();
    let data = dataset(&cfg, &problem)?;
    let init = DeepOnet::new(cfg.model.spec(&problem), seed)?;
    let n = grid.validation_points;
    let val = Validation::synthesize(&problem, n, n, seed)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::invalid(e.to_string()))?;
    pool.install(|| {
        grid_search(
            &init,
            &problem,
            &data,
            &cfg.train,
            &cfg.variational,
            &grid.weights,
            budget,
            seed,
            |m| default_score(m, &problem, &val, seed),
        )
    })
}

pub fn write_sweep_csv(path: &std::path::Path, ranked: &[Ranked]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["rank", "index", "interior", "ic", "bc", "data", "std", "extra", "score"])?;
    for (rank, r) in ranked.iter().enumerate() {
        let mut row = vec![(rank + 1).to_string(), r.index.to_string()];
        row.extend(r.weights.as_array().iter().map(|v| v.to_string()));
        row.push(r.score.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
