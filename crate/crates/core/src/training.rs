//! Adam, reduce-on-plateau scheduling, the training loop and loss-weight
//! grid search.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::network::DeepOnet;
use crate::problems::{Dataset, ProblemDef, SensorLayout};
use crate::rng::{indexed_substream, substream, Rng, Stream};
use crate::variational::{
    loss_and_grad, residual_values, sample_prior, Batch, LossBreakdown, LossWeights, VariationalConfig,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_dim("adam parameters", self.m.len(), params.len())?;
        check_dim("adam gradients", self.m.len(), grads.len())?;
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            factor: 0.5,
            patience: 500,
            min_lr: 1e-5,
        }
    }
}

/// Reduce-on-plateau: after `patience` epochs without a new best loss the
/// rate is multiplied by `factor`, floored at `min_lr`.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub config: SchedulerConfig,
    pub lr: f64,
    best: f64,
    wait: usize,
}

impl Plateau {
    pub fn new(config: SchedulerConfig, lr: f64) -> Self {
        Plateau {
            config,
            lr,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    pub fn step(&mut self, loss: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait > self.config.patience {
                self.lr = (self.lr * self.config.factor).max(self.config.min_lr);
                self.wait = 0;
            }
        }
        self.lr
    }
}

/// Points drawn fresh at every step. `boundary` is per edge for rectangles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Collocation {
    #[serde(default)]
    pub interior: usize,
    #[serde(default)]
    pub boundary: usize,
    #[serde(default)]
    pub initial: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    pub weights: LossWeights,
    #[serde(default)]
    pub collocation: Collocation,
    /// Stages run after the main one, each with a fresh optimizer and
    /// scheduler. Epoch numbering continues across stages.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stages: Vec<Stage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub epochs: usize,
    pub lr: f64,
    pub weights: LossWeights,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        let s = self.scheduler;
        if !(s.factor > 0.0 && s.factor < 1.0) {
            return Err(Error::Config(format!("scheduler factor must be in (0, 1), got {}", s.factor)));
        }
        if !(s.min_lr > 0.0) {
            return Err(Error::Config(format!("scheduler min_lr must be positive, got {}", s.min_lr)));
        }
        for st in &self.stages {
            if st.epochs == 0 || !(st.lr > 0.0 && st.lr.is_finite()) {
                return Err(Error::Config("stage epochs must be >= 1 and lr positive".into()));
            }
            st.weights.validate()?;
        }
        self.weights.validate()
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs + self.stages.iter().map(|s| s.epochs).sum::<usize>()
    }
}

/// One epoch of history: step-averaged loss components and the rate used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,interior,ic,bc,data,std,extra,total,lr";

    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch, l.interior, l.ic, l.bc, l.data, l.std, l.extra, l.total, self.lr
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = HistoryWriter::create(path, usize::MAX)?;
        for r in &self.records {
            w.push(r)?;
        }
        w.finish()
    }
}

/// Streams epoch records to `history.csv`, flushing every `flush_every` rows.
pub struct HistoryWriter {
    out: BufWriter<File>,
    path: std::path::PathBuf,
    flush_every: usize,
    pending: usize,
}

impl HistoryWriter {
    pub fn create(path: &Path, flush_every: usize) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = HistoryWriter {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
            flush_every: flush_every.max(1),
            pending: 0,
        };
        writeln!(w.out, "{}", EpochRecord::CSV_HEADER).map_err(|e| Error::io(path, e))?;
        Ok(w)
    }

    pub fn push(&mut self, r: &EpochRecord) -> Result<()> {
        writeln!(self.out, "{}", r.csv_row()).map_err(|e| Error::io(&self.path, e))?;
        self.pending += 1;
        if self.pending >= self.flush_every {
            self.out.flush().map_err(|e| Error::io(&self.path, e))?;
            self.pending = 0;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Random streams owned by one training run.
struct Streams {
    shuffle: Rng,
    collocation: Rng,
    latent: Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        Streams {
            shuffle: substream(seed, Stream::Shuffle),
            collocation: substream(seed, Stream::Collocation),
            latent: substream(seed, Stream::Latent),
        }
    }
}

fn make_batch(problem: &ProblemDef, data: &Dataset, rows: &[usize], colloc: &Collocation, rng: &mut Rng) -> Result<Batch> {
    let mut batch = Batch::empty(problem.coord_dim());
    let sel = data.select(rows);
    if problem.observes_forcing {
        // the residual needs f, which is only known at the sensors
        batch.interior = sel.points.clone();
        batch.interior_forcing = sel.f.clone();
    } else if problem.has_physics() && colloc.interior > 0 {
        batch.interior = problem.domain.sample_interior(colloc.interior, rng);
    }
    if problem.has_boundary && colloc.boundary > 0 {
        batch.boundary = problem.domain.sample_boundary(colloc.boundary, rng);
    }
    if problem.has_initial && colloc.initial > 0 {
        batch.initial = problem.domain.sample_initial(colloc.initial, rng)?;
    }
    batch.data = sel.points;
    batch.data_u = sel.u;
    Ok(batch)
}

/// Trains `model` in place. `on_epoch` sees every record as it is produced.
pub fn train_with<F>(
    model: &mut DeepOnet,
    problem: &ProblemDef,
    data: &Dataset,
    config: &TrainConfig,
    variational: &VariationalConfig,
    seed: u64,
    mut on_epoch: F,
) -> Result<History>
where
    F: FnMut(&EpochRecord, &DeepOnet) -> Result<()>,
{
    config.validate()?;
    variational.validate(model)?;
    if data.is_empty() && !problem.has_physics() {
        return Err(Error::invalid("no data and no physics: nothing to train on"));
    }
    let mut streams = Streams::new(seed);
    let mut params = model.params();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = History::default();
    let latent_dim = model.spec.latent_dim;
    let mut plan = vec![Stage {
        epochs: config.epochs,
        lr: config.lr,
        weights: config.weights,
    }];
    plan.extend(&config.stages);
    let mut epoch = 0;

    for stage in plan {
        let mut adam = Adam::new(params.len(), stage.lr);
        let mut sched = Plateau::new(config.scheduler, stage.lr);
        for _ in 0..stage.epochs {
            epoch += 1;
            order.shuffle(&mut streams.shuffle);
            let chunks: Vec<&[usize]> = if order.is_empty() {
                vec![&[]]
            } else {
                order.chunks(config.batch_size).collect()
            };
            let mut sum = [0.0; 7];
            for rows in &chunks {
                let batch = make_batch(problem, data, rows, &config.collocation, &mut streams.collocation)?;
                let latents = sample_prior(latent_dim, variational.latent_samples, &mut streams.latent);
                let (loss, grad) = loss_and_grad(model, problem, &batch, &stage.weights, variational, latents.view())?;
                if let Some(component) = loss.non_finite() {
                    return Err(Error::Divergence { component: component.into(), epoch });
                }
                if grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Divergence {
                        component: "gradient".into(),
                        epoch,
                    });
                }
                adam.step(&mut params, &grad)?;
                model.set_params(&params)?;
                for (s, v) in sum.iter_mut().zip(loss.values()) {
                    *s += v;
                }
            }
            let n = chunks.len() as f64;
            let avg = sum.map(|s| s / n);
            let record = EpochRecord {
                epoch,
                loss: LossBreakdown {
                    interior: avg[0],
                    ic: avg[1],
                    bc: avg[2],
                    data: avg[3],
                    std: avg[4],
                    extra: avg[5],
                    total: avg[6],
                },
                lr: adam.lr,
            };
            adam.lr = sched.step(record.loss.total);
            on_epoch(&record, model)?;
            history.records.push(record);
        }
    }
    Ok(history)
}

pub fn train(
    model: &mut DeepOnet,
    problem: &ProblemDef,
    data: &Dataset,
    config: &TrainConfig,
    variational: &VariationalConfig,
    seed: u64,
) -> Result<History> {
    train_with(model, problem, data, config, variational, seed, |_, _| Ok(()))
}

/// Held-out points used to score grid-search candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct Validation {
    pub data: Dataset,
    /// Collocation points for the residual term (the data points for
    /// problems that observe the forcing).
    pub interior: Array2<f64>,
}

impl Validation {
    pub fn synthesize(problem: &ProblemDef, n_data: usize, n_interior: usize, seed: u64) -> Result<Self> {
        let mut rng = substream(seed, Stream::Validation);
        let layout = SensorLayout {
            n_interior: n_data,
            n_boundary_per_edge: 0,
            n_initial: 0,
        };
        let data = crate::problems::synthesize_dataset(problem, &layout, 0.0, &mut rng)?;
        let interior = if problem.observes_forcing {
            data.points.clone()
        } else if problem.has_physics() {
            problem.domain.sample_interior(n_interior, &mut rng)
        } else {
            Array2::zeros((0, problem.coord_dim()))
        };
        Ok(Validation { data, interior })
    }
}

/// Default grid-search score: validation data MSE of the posterior mean plus
/// mean |residual| averaged over latent draws. Lower is better.
pub fn default_score(model: &DeepOnet, problem: &ProblemDef, val: &Validation, seed: u64) -> Result<f64> {
    let mut rng = substream(seed, Stream::Analysis);
    let latents = sample_prior(model.spec.latent_dim, 16, &mut rng);
    let (means, _) = model.predict_samples(val.data.points.view(), latents.view())?;
    let mean = means.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(val.data.len()));
    let mse = if val.data.is_empty() {
        0.0
    } else {
        (&mean - &val.data.u).mapv(|e| e * e).mean().expect("nonempty")
    };
    let forcing = if problem.observes_forcing { val.data.f.as_ref() } else { None };
    let mut res = 0.0;
    let draws = latents.nrows().min(4);
    for lat in latents.rows().into_iter().take(draws) {
        if let Some(r) = residual_values(model, problem, val.interior.view(), &lat.to_vec(), None, forcing)? {
            if !r.is_empty() {
                res += r.mapv(f64::abs).mean().expect("nonempty") / draws as f64;
            }
        }
    }
    let score = mse + res;
    Ok(if score.is_finite() { score } else { f64::INFINITY })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranked {
    /// Position in the input grid.
    pub index: usize,
    pub weights: LossWeights,
    pub score: f64,
}

/// Trains every candidate for `budget` epochs, without extra stages, and ranks
/// them best first.
/// Candidates run concurrently; a diverged candidate scores infinity.
#[allow(clippy::too_many_arguments)]
pub fn grid_search<S>(
    init: &DeepOnet,
    problem: &ProblemDef,
    data: &Dataset,
    base: &TrainConfig,
    variational: &VariationalConfig,
    grid: &[LossWeights],
    budget: usize,
    seed: u64,
    score_fn: S,
) -> Result<Vec<Ranked>>
where
    S: Fn(&DeepOnet) -> Result<f64> + Sync,
{
    if grid.is_empty() {
        return Err(Error::invalid("grid search needs at least one candidate"));
    }
    if budget == 0 {
        return Err(Error::Config("grid search budget must be >= 1".into()));
    }
    for w in grid {
        w.validate()?;
    }
    let scores: Vec<Result<f64>> = grid
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            let mut model = init.clone();
            let cfg = TrainConfig {
                epochs: budget,
                weights: *w,
                stages: Vec::new(),
                ..base.clone()
            };
            let run_seed = indexed_seed(seed, i);
            match train(&mut model, problem, data, &cfg, variational, run_seed) {
                Ok(_) => score_fn(&model),
                Err(Error::Divergence { .. }) => Ok(f64::INFINITY),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut ranked = Vec::with_capacity(grid.len());
    for (i, s) in scores.into_iter().enumerate() {
        ranked.push(Ranked {
            index: i,
            weights: grid[i],
            score: s?,
        });
    }
    ranked.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.index.cmp(&b.index)));
    Ok(ranked)
}

/// Seed for the i-th independent worker derived from a base seed.
pub fn indexed_seed(seed: u64, index: usize) -> u64 {
    use rand::RngCore;
    indexed_substream(seed, Stream::Shuffle, index as u64).next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut a = Adam::new(3, 0.01);
        let mut p = vec![1.0, -2.0, 0.5];
        a.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut a = Adam::new(1, 0.01);
        let mut p = vec![0.0];
        a.step(&mut p, &[1.0]).unwrap();
        assert!((p[0] + 0.01 / (1.0 + 1e-8)).abs() < 1e-9);
    }

    #[test]
    fn adam_minimizes_square() {
        let mut a = Adam::new(1, 0.05);
        let mut p = vec![1.0];
        for _ in 0..500 {
            let g = 2.0 * p[0];
            a.step(&mut p, &[g]).unwrap();
        }
        assert!(p[0].abs() < 1e-2, "{}", p[0]);
    }

    #[test]
    fn adam_dimension_mismatch() {
        let mut a = Adam::new(2, 0.01);
        assert!(a.step(&mut [0.0, 0.0], &[1.0]).is_err());
        assert!(a.step(&mut [0.0], &[1.0]).is_err());
    }

    #[test]
    fn plateau_examples() {
        let cfg = SchedulerConfig {
            factor: 0.5,
            patience: 3,
            min_lr: 0.02,
        };
        let mut s = Plateau::new(cfg, 0.1);
        for i in 0..20 {
            assert_eq!(s.step(10.0 - i as f64), 0.1);
        }
        let mut s = Plateau::new(cfg, 0.1);
        s.step(1.0);
        for _ in 0..3 {
            assert_eq!(s.step(1.0), 0.1);
        }
        assert_eq!(s.step(1.0), 0.05);
        for _ in 0..20 {
            s.step(1.0);
        }
        assert_eq!(s.lr, 0.02);
    }

    #[test]
    fn config_validation() {
        let w = LossWeights {
            interior: 1.0,
            ic: 0.0,
            bc: 0.0,
            data: 1.0,
            std: 0.0,
            extra: 0.0,
        };
        let good = TrainConfig {
            epochs: 1,
            batch_size: 4,
            lr: 0.01,
            scheduler: SchedulerConfig::default(),
            weights: w,
            collocation: Collocation::default(),
            stages: Vec::new(),
        };
        assert!(good.validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..good.clone() },
            TrainConfig { batch_size: 0, ..good.clone() },
            TrainConfig { lr: 0.0, ..good.clone() },
            TrainConfig {
                scheduler: SchedulerConfig { factor: 1.0, ..Default::default() },
                ..good.clone()
            },
            TrainConfig {
                scheduler: SchedulerConfig { min_lr: 0.0, ..Default::default() },
                ..good.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn csv_row_matches_header() {
        let r = EpochRecord {
            epoch: 3,
            loss: LossBreakdown::default(),
            lr: 0.01,
        };
        assert_eq!(
            r.csv_row().split(',').count(),
            EpochRecord::CSV_HEADER.split(',').count()
        );
    }
}
