//! Posterior summaries, coverage metrics, evaluation grids and seed
//! replication.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::network::DeepOnet;
use crate::problems::{ProblemDef, ProblemKind};
use crate::rng::{substream, Stream};
use crate::variational::{posterior_param_samples, predict_with_uq, residual_values, sample_prior, Uq};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub mean: f64,
    pub std: f64,
    pub mode: f64,
    pub histogram: Histogram,
}

/// Sample mean, standard deviation (n - 1), and the mode read from an
/// `n_bins` histogram over the sample range (ties go to the lower bin).
pub fn summarize_posterior(samples: &[f64], n_bins: usize) -> Result<PosteriorSummary> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot summarize an empty sample"));
    }
    if n_bins < 2 {
        return Err(Error::invalid("histogram needs at least two bins"));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("posterior samples must be finite"));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let std = if samples.len() > 1 {
        (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / n_bins as f64;
    let edges: Vec<f64> = (0..=n_bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0usize; n_bins];
    for &s in samples {
        let b = if width > 0.0 {
            (((s - lo) / width) as usize).min(n_bins - 1)
        } else {
            0
        };
        counts[b] += 1;
    }
    let best = counts
        .iter()
        .enumerate()
        .fold(0, |best, (i, &c)| if c > counts[best] { i } else { best });
    let mode = if width > 0.0 {
        0.5 * (edges[best] + edges[best + 1])
    } else {
        lo
    };
    Ok(PosteriorSummary {
        mean,
        std,
        mode,
        histogram: Histogram { edges, counts },
    })
}

/// One summary per column of an `n x P` sample matrix.
pub fn summarize_columns(samples: &Array2<f64>, n_bins: usize) -> Result<Vec<PosteriorSummary>> {
    samples
        .columns()
        .into_iter()
        .map(|c| summarize_posterior(&c.to_vec(), n_bins))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Idd,
    Ood,
}

/// Coverage percentages in [0, 100] and mean squared errors. Per-split
/// entries are `None` when the split has no points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub total: f64,
    pub idd: Option<f64>,
    pub ood: Option<f64>,
    pub mse_total: f64,
    pub mse_idd: Option<f64>,
    pub mse_ood: Option<f64>,
}

pub fn ci_coverage(pred: &Uq, targets: &Array1<f64>, labels: &[Split]) -> Result<CoverageReport> {
    let n = pred.mean.len();
    check_dim("coverage targets", n, targets.len())?;
    check_dim("coverage labels", n, labels.len())?;
    if n == 0 {
        return Err(Error::invalid("coverage needs at least one target"));
    }
    let stats = |keep: &dyn Fn(Split) -> bool| -> Option<(f64, f64)> {
        let mut inside = 0usize;
        let mut sq = 0.0;
        let mut count = 0usize;
        for i in 0..n {
            if !keep(labels[i]) {
                continue;
            }
            count += 1;
            let y = targets[i];
            if y >= pred.ci_lo[i] && y <= pred.ci_hi[i] {
                inside += 1;
            }
            sq += (pred.mean[i] - y).powi(2);
        }
        (count > 0).then(|| (100.0 * inside as f64 / count as f64, sq / count as f64))
    };
    let (total, mse_total) = stats(&|_| true).expect("n > 0");
    let idd = stats(&|s| s == Split::Idd);
    let ood = stats(&|s| s == Split::Ood);
    Ok(CoverageReport {
        total,
        idd: idd.map(|s| s.0),
        ood: ood.map(|s| s.0),
        mse_total,
        mse_idd: idd.map(|s| s.1),
        mse_ood: ood.map(|s| s.1),
    })
}

/// Evaluation points, optionally grouped by a label (e.g. a slice name).
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub points: Array2<f64>,
    pub labels: Option<Vec<String>>,
}

impl GridSpec {
    /// Tensor grid with `n` points per axis over the box `[lo, hi]`.
    pub fn tensor(lo: &[f64], hi: &[f64], n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid("grid resolution must be >= 2 per axis"));
        }
        check_dim("grid bounds", lo.len(), hi.len())?;
        let d = lo.len();
        let total = n.pow(d as u32);
        let mut pts = Array2::zeros((total, d));
        for i in 0..total {
            let mut rem = i;
            for a in (0..d).rev() {
                let k = rem % n;
                rem /= n;
                pts[[i, a]] = lo[a] + (hi[a] - lo[a]) * k as f64 / (n - 1) as f64;
            }
        }
        Ok(GridSpec {
            points: pts,
            labels: None,
        })
    }

    /// Unit-ball views: z-slices at 0, 0.25 and 0.5, the x = 0 meridional
    /// slice and the vertical axis x = y = 0. Slice points outside the ball
    /// are dropped.
    pub fn ball_slices(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid("grid resolution must be >= 2 per axis"));
        }
        let lin = |k: usize| -1.0 + 2.0 * k as f64 / (n - 1) as f64;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (name, z) in [("z=0.00", 0.0), ("z=0.25", 0.25), ("z=0.50", 0.5)] {
            for i in 0..n {
                for j in 0..n {
                    let (x, y) = (lin(i), lin(j));
                    if x * x + y * y + z * z < 1.0 {
                        rows.extend([x, y, z]);
                        labels.push(name.to_string());
                    }
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                let (y, z) = (lin(i), lin(j));
                if y * y + z * z < 1.0 {
                    rows.extend([0.0, y, z]);
                    labels.push("x=0".to_string());
                }
            }
        }
        for k in 0..n {
            rows.extend([0.0, 0.0, lin(k)]);
            labels.push("axis".to_string());
        }
        let count = labels.len();
        Ok(GridSpec {
            points: Array2::from_shape_vec((count, 3), rows).expect("rows of three"),
            labels: Some(labels),
        })
    }

    /// Default evaluation grid for a problem.
    pub fn for_problem(problem: &ProblemDef, n: usize) -> Result<Self> {
        match problem.kind {
            ProblemKind::Heat1d => Self::tensor(&[0.0, -1.0], &[1.0, 1.0], n),
            ProblemKind::Rd2d => Self::tensor(&[-1.0, -1.0], &[1.0, 1.0], n),
            ProblemKind::Helmholtz3d => Self::ball_slices(n),
            ProblemKind::Sin3 => Self::tensor(&[-1.0], &[1.0], n),
            ProblemKind::RegressionUq => Self::tensor(&[-1.5], &[1.5], n),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    PosteriorMean,
    SingleSample,
    FixedParam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrid {
    pub coord_names: Vec<String>,
    pub points: Array2<f64>,
    pub labels: Option<Vec<String>>,
    pub mean: Array1<f64>,
    pub exact: Option<Array1<f64>>,
    pub abs_error: Option<Array1<f64>>,
    pub epistemic_std: Array1<f64>,
    pub aleatoric_std: Array1<f64>,
    pub residual: Option<Array1<f64>>,
}

fn opt_cell(a: &Option<Array1<f64>>, i: usize) -> String {
    a.as_ref().map(|v| v[i].to_string()).unwrap_or_default()
}

impl FieldGrid {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn mean_abs_error(&self) -> Option<f64> {
        self.abs_error.as_ref().and_then(|e| e.mean())
    }

    pub fn max_abs_error(&self) -> Option<f64> {
        self.abs_error
            .as_ref()
            .map(|e| e.iter().copied().fold(0.0, f64::max))
    }

    pub fn mean_abs_residual(&self) -> Option<f64> {
        self.residual.as_ref().and_then(|r| r.mapv(f64::abs).mean())
    }

    /// `field.csv`: coordinates, optional slice label, then every field.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = self.coord_names.clone();
        if self.labels.is_some() {
            header.push("slice".into());
        }
        header.extend(
            ["mean", "exact", "abs_error", "epistemic_std", "aleatoric_std", "residual"].map(String::from),
        );
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.points.row(i).iter().map(|v| v.to_string()).collect();
            if let Some(l) = &self.labels {
                row.push(l[i].clone());
            }
            row.push(self.mean[i].to_string());
            row.push(opt_cell(&self.exact, i));
            row.push(opt_cell(&self.abs_error, i));
            row.push(self.epistemic_std[i].to_string());
            row.push(self.aleatoric_std[i].to_string());
            row.push(opt_cell(&self.residual, i));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Exact values at `points`. The dipole eigenmode is only defined up to
/// sign, so for the ball the sign that better matches `mean` is used.
pub fn exact_field(problem: &ProblemDef, points: ArrayView2<'_, f64>, mean: &Array1<f64>) -> Option<Array1<f64>> {
    let exact: Option<Vec<f64>> = points.rows().into_iter().map(|p| problem.exact(&p.to_vec())).collect();
    let mut exact = Array1::from(exact?);
    if problem.kind == ProblemKind::Helmholtz3d && exact.dot(mean) < 0.0 {
        exact.mapv_inplace(|v| -v);
    }
    Some(exact)
}

/// Evaluates the model on a grid. The residual column uses the field at the
/// prior median latent (zero) unless `mode` is `SingleSample`, with the
/// posterior-mean parameters, the sampled parameters or `param_value`.
pub fn evaluate_field(
    model: &DeepOnet,
    problem: &ProblemDef,
    grid: &GridSpec,
    n_latent: usize,
    mode: EvalMode,
    param_value: Option<&[f64]>,
    seed: u64,
) -> Result<FieldGrid> {
    if mode == EvalMode::FixedParam && param_value.is_none() {
        return Err(Error::invalid("fixed-param mode needs a parameter value"));
    }
    let points = grid.points.view();
    let mut rng = substream(seed, Stream::Analysis);
    let n_params = model.spec.n_params();
    let latent_dim = model.spec.latent_dim;
    let (mean, epi, ale, latent, phys) = match mode {
        EvalMode::PosteriorMean | EvalMode::FixedParam => {
            let uq = predict_with_uq(model, points, n_latent, &mut rng)?;
            let phys = match (mode, param_value) {
                (EvalMode::FixedParam, Some(p)) => Some(p.to_vec()),
                _ if n_params > 0 => {
                    let s = posterior_param_samples(model, n_latent.max(2), &mut rng)?;
                    Some(s.mean_axis(Axis(0)).expect("nonempty").to_vec())
                }
                _ => None,
            };
            (uq.mean, uq.epistemic_var, uq.aleatoric_var, vec![0.0; latent_dim], phys)
        }
        EvalMode::SingleSample => {
            let lat = sample_prior(latent_dim, 1, &mut rng);
            let (means, log_vars) = model.predict_samples(points, lat.view())?;
            let n = points.nrows();
            let ale = log_vars.map_or_else(|| Array1::zeros(n), |lv| lv.row(0).mapv(f64::exp));
            (means.row(0).to_owned(), Array1::zeros(n), ale, lat.row(0).to_vec(), None)
        }
    };
    let forcing = if problem.observes_forcing {
        let f: Option<Vec<f64>> = points.rows().into_iter().map(|p| problem.forcing(&p.to_vec())).collect();
        f.map(Array1::from)
    } else {
        None
    };
    let residual = residual_values(model, problem, points, &latent, phys.as_deref(), forcing.as_ref())?;
    let exact = exact_field(problem, points, &mean);
    let abs_error = exact.as_ref().map(|e| (&mean - e).mapv(f64::abs));
    Ok(FieldGrid {
        coord_names: problem.coord_names.iter().map(|s| s.to_string()).collect(),
        points: grid.points.clone(),
        labels: grid.labels.clone(),
        mean,
        exact,
        abs_error,
        epistemic_std: epi.mapv(f64::sqrt),
        aleatoric_std: ale.mapv(f64::sqrt),
        residual,
    })
}

/// Eigenproblem diagnostics of the posterior-mean field: RMS on the
/// boundary and the Monte Carlo estimate of E[u^2] over the domain.
pub fn boundary_and_norm(model: &DeepOnet, problem: &ProblemDef, n: usize, n_latent: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = substream(seed, Stream::Analysis);
    let bd = problem.domain.sample_boundary(n, &mut rng);
    let interior = problem.domain.sample_interior(n, &mut rng);
    let latents = sample_prior(model.spec.latent_dim, n_latent, &mut rng);
    let (mb, _) = model.predict_samples(bd.view(), latents.view())?;
    let (mi, _) = model.predict_samples(interior.view(), latents.view())?;
    let ub = mb.mean_axis(Axis(0)).expect("nonempty");
    let ui = mi.mean_axis(Axis(0)).expect("nonempty");
    let rms = ub.mapv(|u| u * u).mean().expect("nonempty").sqrt();
    let norm = ui.mapv(|u| u * u).mean().expect("nonempty");
    Ok((rms, norm))
}

/// Flat map of named scalars, serialized as `metrics.json`.
pub type Metrics = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replicated {
    pub seeds: Vec<u64>,
    pub mean: Metrics,
    pub std: Metrics,
    pub runs: Vec<Metrics>,
}

/// Runs `run` for seeds `seed0 .. seed0 + n_runs` concurrently and reports
/// the mean and (population) standard deviation of every metric present in
/// all runs. Results are reduced in seed order.
pub fn seed_replicate<F>(seed0: u64, n_runs: usize, run: F) -> Result<Replicated>
where
    F: Fn(u64) -> Result<Metrics> + Sync,
{
    if n_runs == 0 {
        return Err(Error::invalid("seed_replicate needs n_runs >= 1"));
    }
    let seeds: Vec<u64> = (0..n_runs as u64).map(|i| seed0 + i).collect();
    let runs = seeds
        .par_iter()
        .map(|&s| run(s))
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut mean = Metrics::new();
    let mut std = Metrics::new();
    for key in runs[0].keys() {
        let vals: Vec<f64> = runs.iter().filter_map(|m| m.get(key).copied()).collect();
        if vals.len() != runs.len() {
            continue;
        }
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
        mean.insert(key.clone(), m);
        std.insert(key.clone(), var.sqrt());
    }
    Ok(Replicated { seeds, mean, std, runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{make_heat1d, make_helmholtz3d};
    use crate::rng::Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn constant_samples() {
        let s = summarize_posterior(&[2.5; 150], 100).unwrap();
        assert_eq!((s.mean, s.std, s.mode), (2.5, 0.0, 2.5));
        assert_eq!(s.histogram.counts.iter().sum::<usize>(), 150);
    }

    #[test]
    fn gaussian_samples() {
        let mut rng: Rng = substream(1, Stream::Analysis);
        let d = Normal::new(2.0, 0.1).unwrap();
        let xs: Vec<f64> = (0..1_000_000).map(|_| d.sample(&mut rng)).collect();
        let s = summarize_posterior(&xs, 100).unwrap();
        let bin = s.histogram.edges[1] - s.histogram.edges[0];
        assert!((s.mean - 2.0).abs() < 1e-3);
        assert!((s.mode - 2.0).abs() <= bin);
    }

    #[test]
    fn bimodal_mode_is_the_heavier_peak() {
        let mut rng: Rng = substream(2, Stream::Analysis);
        let a = Normal::new(1.0, 0.05).unwrap();
        let b = Normal::new(3.0, 0.05).unwrap();
        let xs: Vec<f64> = (0..100_000)
            .map(|i| if i % 10 < 7 { a.sample(&mut rng) } else { b.sample(&mut rng) })
            .collect();
        let s = summarize_posterior(&xs, 100).unwrap();
        assert!((s.mode - 1.0).abs() < 0.1, "{}", s.mode);
        assert!((s.mean - 1.6).abs() < 0.02);
    }

    #[test]
    fn summary_errors() {
        assert!(summarize_posterior(&[], 100).is_err());
        assert!(summarize_posterior(&[1.0, 2.0], 1).is_err());
    }

    fn uq(mean: Vec<f64>, var: Vec<f64>) -> Uq {
        let n = mean.len();
        Uq::from_parts(Array1::from(mean), Array1::from(var), Array1::zeros(n))
    }

    #[test]
    fn coverage_examples() {
        let labels = [Split::Idd, Split::Idd, Split::Ood];
        let p = uq(vec![1.0, 2.0, 3.0], vec![0.0; 3]);
        let r = ci_coverage(&p, &Array1::from(vec![1.0, 2.0, 3.0]), &labels).unwrap();
        assert_eq!((r.total, r.idd, r.ood, r.mse_total), (100.0, Some(100.0), Some(100.0), 0.0));
        let r = ci_coverage(&p, &Array1::from(vec![1.1, 2.1, 3.1]), &labels).unwrap();
        assert_eq!(r.total, 0.0);
        assert!(ci_coverage(&p, &Array1::from(vec![1.0]), &labels).is_err());
        let r = ci_coverage(&p, &Array1::from(vec![1.0, 2.0, 3.0]), &[Split::Idd; 3]).unwrap();
        assert_eq!(r.ood, None);
    }

    #[test]
    fn calibrated_coverage_is_95() {
        let mut rng: Rng = substream(3, Stream::Analysis);
        let n = 100_000;
        let std = Normal::new(0.0, 1.0).unwrap();
        let means: Vec<f64> = (0..n).map(|i| (i as f64 * 1e-3).sin()).collect();
        let vars: Vec<f64> = (0..n).map(|i| 0.1 + (i % 7) as f64 * 0.05).collect();
        let targets: Vec<f64> = (0..n)
            .map(|i| means[i] + vars[i].sqrt() * std.sample(&mut rng))
            .collect();
        let r = ci_coverage(&uq(means, vars), &Array1::from(targets), &vec![Split::Idd; n]).unwrap();
        assert!((r.total - 95.0).abs() < 0.5, "{}", r.total);
    }

    #[test]
    fn tensor_grid_layout() {
        let g = GridSpec::tensor(&[0.0, -1.0], &[1.0, 1.0], 3).unwrap();
        assert_eq!(g.points.nrows(), 9);
        assert_eq!(g.points.row(1).to_vec(), vec![0.0, 0.0]);
        assert_eq!(g.points.row(8).to_vec(), vec![1.0, 1.0]);
        assert!(GridSpec::tensor(&[0.0], &[1.0], 1).is_err());
    }

    #[test]
    fn ball_slices_are_inside() {
        let g = GridSpec::ball_slices(21).unwrap();
        let labels = g.labels.as_ref().unwrap();
        assert_eq!(labels.len(), g.points.nrows());
        for r in g.points.rows() {
            assert!(r.dot(&r) < 1.0 + 1e-12);
        }
        for name in ["z=0.00", "z=0.25", "z=0.50", "x=0", "axis"] {
            assert!(labels.iter().any(|l| l == name));
        }
    }

    #[test]
    fn dipole_exact_sign_follows_prediction() {
        let p = make_helmholtz3d();
        let pts = Array2::from_shape_vec((2, 3), vec![0.0, 0.0, 0.5, 0.0, 0.0, -0.5]).unwrap();
        let e = exact_field(&p, pts.view(), &Array1::from(vec![-1.0, 1.0])).unwrap();
        assert!(e[0] < 0.0 && e[1] > 0.0);
        let h = make_heat1d();
        let e = exact_field(&h, pts.slice(ndarray::s![.., ..2]), &Array1::zeros(2)).unwrap();
        assert_eq!(e[0], 0.0);
    }

    #[test]
    fn replicate_statistics() {
        let r = seed_replicate(10, 1, |s| Ok(Metrics::from([("a".to_string(), s as f64)]))).unwrap();
        assert_eq!(r.std["a"], 0.0);
        let r = seed_replicate(0, 4, |s| Ok(Metrics::from([("a".to_string(), s as f64)]))).unwrap();
        assert_eq!(r.mean["a"], 1.5);
        assert_eq!(r.seeds, vec![0, 1, 2, 3]);
        assert!(seed_replicate(0, 0, |_| Ok(Metrics::new())).is_err());
    }
}
