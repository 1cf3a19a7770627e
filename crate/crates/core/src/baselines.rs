//! Comparison models for the regression benchmark: a plain network with a
//! variance head (SNN), Monte Carlo dropout (MCDO), a deep ensemble (DENN)
//! and a mean-field Bayesian network (BNN). All report [`Uq`].

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::kernel::Jets;
use crate::network::{Activation, Mlp};
use crate::problems::Dataset;
use crate::rng::{substream, Rng, Stream};
use crate::training::Adam;
use crate::variational::{kl_normal, Uq};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Snn,
    Bnn,
    Mcdo,
    Denn,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [Self::Snn, Self::Bnn, Self::Mcdo, Self::Denn];

    pub fn name(self) -> &'static str {
        match self {
            Self::Snn => "snn",
            Self::Bnn => "bnn",
            Self::Mcdo => "mcdo",
            Self::Denn => "denn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown baseline kind {s:?}")))
    }

    /// Hidden widths sized to roughly 3,900 parameters.
    pub fn default_hidden(self) -> Vec<usize> {
        match self {
            Self::Snn | Self::Mcdo => vec![60, 60],
            Self::Bnn => vec![42, 42],
            Self::Denn => vec![25, 25],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Hidden widths; `None` uses the kind's default.
    #[serde(default)]
    pub hidden: Option<Vec<usize>>,
    /// Dropout retention probability.
    pub retain: f64,
    pub ensemble: usize,
    /// Initial posterior log-std of every BNN weight.
    pub bnn_init_log_std: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            epochs: 150,
            batch_size: 16,
            lr: 0.001,
            hidden: None,
            retain: 0.9,
            ensemble: 5,
            bnn_init_log_std: -5.0,
        }
    }
}

impl BaselineConfig {
    fn widths(&self, kind: BaselineKind) -> Vec<usize> {
        let mut w = vec![1];
        w.extend(self.hidden.clone().unwrap_or_else(|| kind.default_hidden()));
        w.push(2);
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.ensemble == 0 {
            return Err(Error::Config("baseline epochs, batch_size and ensemble must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("baseline lr must be positive".into()));
        }
        if !(self.retain > 0.0 && self.retain <= 1.0) {
            return Err(Error::Config(format!("retain must be in (0, 1], got {}", self.retain)));
        }
        Ok(())
    }
}

/// `rows x width` matrix of i.i.d. Bernoulli(`p`) entries.
pub fn dropout_mask(rows: usize, width: usize, p: f64, rng: &mut Rng) -> Result<Array2<f64>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(format!("retention probability must be in (0, 1], got {p}")));
    }
    Ok(Array2::from_shape_simple_fn((rows, width), || {
        if rng.random::<f64>() < p {
            1.0
        } else {
            0.0
        }
    }))
}

fn hidden_masks(mlp: &Mlp, rows: usize, p: f64, rng: &mut Rng) -> Result<Vec<Array2<f64>>> {
    let w = mlp.widths();
    w[1..w.len() - 1]
        .iter()
        .map(|&width| dropout_mask(rows, width, p, rng))
        .collect()
}

/// Mean Gaussian negative log-likelihood over the batch (up to the constant)
/// and its adjoints with respect to the two output channels.
fn gaussian_nll(out: &Array2<f64>, y: &Array1<f64>) -> (f64, Array2<f64>) {
    let n = y.len() as f64;
    let mut loss = 0.0;
    let mut g = Array2::zeros(out.raw_dim());
    for i in 0..y.len() {
        let (mu, lv) = (out[[i, 0]], out[[i, 1]]);
        let r = y[i] - mu;
        let prec = (-lv).exp();
        loss += 0.5 * (lv + r * r * prec);
        g[[i, 0]] = -r * prec / n;
        g[[i, 1]] = 0.5 * (1.0 - r * r * prec) / n;
    }
    (loss / n, g)
}

fn nll_grad(mlp: &Mlp, x: ArrayView2<'_, f64>, y: &Array1<f64>, masks: Option<&[Array2<f64>]>) -> Result<(f64, Vec<f64>)> {
    let pass = mlp.forward_batch(Jets::values(x.to_owned()), masks);
    let (loss, g) = gaussian_nll(&pass.output.v, y);
    let mut grad = vec![0.0; mlp.param_count()];
    mlp.backward_batch(&pass, Jets::values(g), &mut grad, false);
    Ok((loss, grad))
}

fn check_finite(loss: f64, grad: &[f64], epoch: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Divergence {
            component: "nll".into(),
            epoch,
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence {
            component: "gradient".into(),
            epoch,
        });
    }
    Ok(())
}

/// Shuffled minibatch loop. `step` returns the loss and gradient for a batch.
fn fit<F>(params: &mut [f64], data: &Dataset, cfg: &BaselineConfig, seed: u64, mut step: F) -> Result<()>
where
    F: FnMut(&[f64], ArrayView2<'_, f64>, &Array1<f64>) -> Result<(f64, Vec<f64>)>,
{
    if data.is_empty() {
        return Err(Error::invalid("baseline training needs data"));
    }
    let mut shuffle = substream(seed, Stream::Shuffle);
    let mut adam = Adam::new(params.len(), cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        for rows in order.chunks(cfg.batch_size) {
            let x = data.points.select(Axis(0), rows);
            let y = data.u.select(Axis(0), rows);
            let (loss, grad) = step(params, x.view(), &y)?;
            check_finite(loss, &grad, epoch)?;
            adam.step(params, &grad)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnnModel {
    pub mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McdoModel {
    pub mlp: Mlp,
    pub retain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DennModel {
    pub members: Vec<SnnModel>,
}

/// Mean-field Gaussian posterior over every weight of `mean`.
#[derive(Debug, Clone, PartialEq)]
pub struct BnnModel {
    pub mean: Mlp,
    pub log_std: Vec<f64>,
}

impl BnnModel {
    pub fn from_mlp(mean: Mlp, log_std: f64) -> Self {
        let n = mean.param_count();
        BnnModel {
            mean,
            log_std: vec![log_std; n],
        }
    }

    fn draw(&self, rng: &mut Rng) -> Result<(Mlp, Vec<f64>)> {
        let eps: Vec<f64> = (0..self.log_std.len()).map(|_| StandardNormal.sample(rng)).collect();
        let w: Vec<f64> = self
            .mean
            .params()
            .iter()
            .zip(&self.log_std)
            .zip(&eps)
            .map(|((m, s), e)| m + s.exp() * e)
            .collect();
        let mut net = self.mean.clone();
        net.set_params(&w)?;
        Ok((net, eps))
    }

    /// Sum of per-weight KL divergences to the standard normal prior.
    pub fn kl(&self) -> f64 {
        self.mean
            .params()
            .iter()
            .zip(&self.log_std)
            .map(|(&m, &s)| kl_normal(m, s.exp()).expect("exp is positive"))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Baseline {
    Snn(SnnModel),
    Mcdo(McdoModel),
    Denn(DennModel),
    Bnn(BnnModel),
}

fn split(out: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    (out.column(0).to_owned(), out.column(1).to_owned())
}

fn uq_from_draws(means: Vec<Array1<f64>>, log_vars: Vec<Array1<f64>>) -> Result<Uq> {
    let n = means[0].len();
    let stack = |v: Vec<Array1<f64>>| {
        let rows = v.len();
        Array2::from_shape_vec((rows, n), v.into_iter().flatten().collect()).expect("rectangular")
    };
    Uq::from_samples(&stack(means), Some(&stack(log_vars)))
}

impl Baseline {
    pub fn kind(&self) -> BaselineKind {
        match self {
            Self::Snn(_) => BaselineKind::Snn,
            Self::Mcdo(_) => BaselineKind::Mcdo,
            Self::Denn(_) => BaselineKind::Denn,
            Self::Bnn(_) => BaselineKind::Bnn,
        }
    }

    /// Trainable scalars. A BNN counts both its posterior means and
    /// log-standard deviations.
    pub fn param_count(&self) -> usize {
        match self {
            Self::Snn(m) => m.mlp.param_count(),
            Self::Mcdo(m) => m.mlp.param_count(),
            Self::Denn(m) => m.members.iter().map(|s| s.mlp.param_count()).sum(),
            Self::Bnn(m) => 2 * m.mean.param_count(),
        }
    }

    /// Predictive statistics at `x` (`N x 1`). `n_samples` is used by the
    /// stochastic kinds (MCDO, BNN) and must be at least 2 there.
    pub fn predict(&self, x: ArrayView2<'_, f64>, n_samples: usize, rng: &mut Rng) -> Result<Uq> {
        match self {
            Self::Snn(m) => {
                let (mean, lv) = split(&m.mlp.eval_batch(x));
                let n = mean.len();
                Ok(Uq::from_parts(mean, Array1::zeros(n), lv.mapv(f64::exp)))
            }
            Self::Denn(m) => {
                if m.members.len() == 1 {
                    return Self::Snn(m.members[0].clone()).predict(x, n_samples, rng);
                }
                let (means, lvs) = m.members.iter().map(|s| split(&s.mlp.eval_batch(x))).unzip();
                uq_from_draws(means, lvs)
            }
            Self::Mcdo(m) => {
                if n_samples < 2 {
                    return Err(Error::invalid("MCDO prediction needs n_samples >= 2"));
                }
                let mut means = Vec::with_capacity(n_samples);
                let mut lvs = Vec::with_capacity(n_samples);
                for _ in 0..n_samples {
                    let masks = hidden_masks(&m.mlp, x.nrows(), m.retain, rng)?;
                    let pass = m.mlp.forward_batch(Jets::values(x.to_owned()), Some(&masks));
                    let (a, b) = split(&pass.output.v);
                    means.push(a);
                    lvs.push(b);
                }
                uq_from_draws(means, lvs)
            }
            Self::Bnn(m) => {
                if n_samples < 2 {
                    return Err(Error::invalid("BNN prediction needs n_samples >= 2"));
                }
                let mut means = Vec::with_capacity(n_samples);
                let mut lvs = Vec::with_capacity(n_samples);
                for _ in 0..n_samples {
                    let (net, _) = m.draw(rng)?;
                    let (a, b) = split(&net.eval_batch(x));
                    means.push(a);
                    lvs.push(b);
                }
                uq_from_draws(means, lvs)
            }
        }
    }
}

fn train_snn(widths: &[usize], data: &Dataset, cfg: &BaselineConfig, seed: u64) -> Result<SnnModel> {
    let mut mlp = Mlp::init(widths, Activation::Identity, seed)?;
    let mut params = mlp.params();
    let mut scratch = mlp.clone();
    fit(&mut params, data, cfg, seed, |p, x, y| {
        scratch.set_params(p)?;
        nll_grad(&scratch, x, y, None)
    })?;
    mlp.set_params(&params)?;
    Ok(SnnModel { mlp })
}

pub fn train_baseline(kind: BaselineKind, data: &Dataset, cfg: &BaselineConfig, seed: u64) -> Result<Baseline> {
    cfg.validate()?;
    let widths = cfg.widths(kind);
    match kind {
        BaselineKind::Snn => Ok(Baseline::Snn(train_snn(&widths, data, cfg, seed)?)),
        BaselineKind::Denn => {
            let members = (0..cfg.ensemble)
                .map(|i| train_snn(&widths, data, cfg, seed.wrapping_add(i as u64)))
                .collect::<Result<Vec<_>>>()?;
            Ok(Baseline::Denn(DennModel { members }))
        }
        BaselineKind::Mcdo => {
            let mut mlp = Mlp::init(&widths, Activation::Identity, seed)?;
            let mut params = mlp.params();
            let mut scratch = mlp.clone();
            let mut drop_rng = substream(seed, Stream::Dropout);
            fit(&mut params, data, cfg, seed, |p, x, y| {
                scratch.set_params(p)?;
                let masks = hidden_masks(&scratch, x.nrows(), cfg.retain, &mut drop_rng)?;
                nll_grad(&scratch, x, y, Some(&masks))
            })?;
            mlp.set_params(&params)?;
            Ok(Baseline::Mcdo(McdoModel {
                mlp,
                retain: cfg.retain,
            }))
        }
        BaselineKind::Bnn => {
            let mean = Mlp::init(&widths, Activation::Identity, seed)?;
            let n_w = mean.param_count();
            let mut model = BnnModel::from_mlp(mean, cfg.bnn_init_log_std);
            // flat layout: means then log-stds
            let mut params = model.mean.params();
            params.extend(&model.log_std);
            let mut weight_rng = substream(seed, Stream::Latent);
            let inv_n = 1.0 / data.len().max(1) as f64;
            let mut scratch = model.clone();
            fit(&mut params, data, cfg, seed, |p, x, y| {
                scratch.mean.set_params(&p[..n_w])?;
                scratch.log_std.copy_from_slice(&p[n_w..]);
                let (net, eps) = scratch.draw(&mut weight_rng)?;
                let (nll, gw) = nll_grad(&net, x, y, None)?;
                let mut grad = vec![0.0; 2 * n_w];
                let mut kl = 0.0;
                for i in 0..n_w {
                    let (m, s) = (p[i], p[n_w + i]);
                    let sigma = s.exp();
                    kl += -s + 0.5 * (sigma * sigma + m * m) - 0.5;
                    grad[i] = gw[i] + m * inv_n;
                    grad[n_w + i] = gw[i] * eps[i] * sigma + (sigma * sigma - 1.0) * inv_n;
                }
                Ok((nll + kl * inv_n, grad))
            })?;
            model.mean.set_params(&params[..n_w])?;
            model.log_std.copy_from_slice(&params[n_w..]);
            Ok(Baseline::Bnn(model))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{make_regression_uq, synthesize_dataset, SensorLayout};

    fn data(n: usize, seed: u64) -> Dataset {
        synthesize_dataset(
            &make_regression_uq(),
            &SensorLayout {
                n_interior: n,
                n_boundary_per_edge: 0,
                n_initial: 0,
            },
            0.0,
            &mut substream(seed, Stream::Data),
        )
        .unwrap()
    }

    fn grid() -> Array2<f64> {
        Array2::from_shape_fn((11, 1), |(i, _)| -1.0 + 0.2 * i as f64)
    }

    #[test]
    fn default_parameter_budgets() {
        for kind in BaselineKind::ALL {
            let cfg = BaselineConfig::default();
            let w = cfg.widths(kind);
            let per = Mlp::zeros(&w, Activation::Identity).unwrap().param_count();
            let count = match kind {
                BaselineKind::Denn => per * cfg.ensemble,
                BaselineKind::Bnn => 2 * per,
                _ => per,
            };
            assert!((3600..=4400).contains(&count), "{kind:?}: {count}");
        }
    }

    #[test]
    fn dropout_mask_examples() {
        let m = dropout_mask(3, 4, 1.0, &mut substream(1, Stream::Dropout)).unwrap();
        assert!(m.iter().all(|&v| v == 1.0));
        let m = dropout_mask(1, 100_000, 0.9, &mut substream(1, Stream::Dropout)).unwrap();
        assert!((m.mean().unwrap() - 0.9).abs() < 0.01);
        let a = dropout_mask(2, 50, 0.5, &mut substream(3, Stream::Dropout)).unwrap();
        let b = dropout_mask(2, 50, 0.5, &mut substream(3, Stream::Dropout)).unwrap();
        assert_eq!(a, b);
        assert!(dropout_mask(1, 1, 0.0, &mut substream(1, Stream::Dropout)).is_err());
        assert!(dropout_mask(1, 1, 1.5, &mut substream(1, Stream::Dropout)).is_err());
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mlp = Mlp::init(&[1, 5, 5, 2], Activation::Identity, 4).unwrap();
        let d = data(7, 2);
        let (_, g) = nll_grad(&mlp, d.points.view(), &d.u, None).unwrap();
        let p = mlp.params();
        let h = 1e-6;
        for i in (0..p.len()).step_by(5) {
            let mut plus = p.clone();
            plus[i] += h;
            let mut minus = p.clone();
            minus[i] -= h;
            let f = |q: &[f64]| {
                let mut m = mlp.clone();
                m.set_params(q).unwrap();
                nll_grad(&m, d.points.view(), &d.u, None).unwrap().0
            };
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn snn_has_zero_epistemic() {
        let cfg = BaselineConfig {
            epochs: 2,
            ..Default::default()
        };
        let m = train_baseline(BaselineKind::Snn, &data(40, 1), &cfg, 1).unwrap();
        let uq = m.predict(grid().view(), 10, &mut substream(1, Stream::Analysis)).unwrap();
        assert!(uq.epistemic_var.iter().all(|&v| v == 0.0));
        assert_eq!(uq.total_var, &uq.epistemic_var + &uq.aleatoric_var);
    }

    #[test]
    fn denn_with_one_member_is_snn() {
        let cfg = BaselineConfig {
            epochs: 3,
            hidden: Some(vec![8, 8]),
            ensemble: 1,
            ..Default::default()
        };
        let d = data(40, 1);
        let a = train_baseline(BaselineKind::Snn, &d, &cfg, 5).unwrap();
        let b = train_baseline(BaselineKind::Denn, &d, &cfg, 5).unwrap();
        let mut rng = substream(1, Stream::Analysis);
        assert_eq!(
            a.predict(grid().view(), 2, &mut rng).unwrap(),
            b.predict(grid().view(), 2, &mut rng).unwrap()
        );
    }

    #[test]
    fn denn_identical_members_have_zero_epistemic() {
        let snn = SnnModel {
            mlp: Mlp::init(&[1, 6, 2], Activation::Identity, 2).unwrap(),
        };
        let m = Baseline::Denn(DennModel {
            members: vec![snn.clone(), snn.clone(), snn],
        });
        let uq = m.predict(grid().view(), 2, &mut substream(1, Stream::Analysis)).unwrap();
        assert!(uq.epistemic_var.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mcdo_full_retention_has_zero_epistemic() {
        let m = Baseline::Mcdo(McdoModel {
            mlp: Mlp::init(&[1, 10, 10, 2], Activation::Identity, 2).unwrap(),
            retain: 1.0,
        });
        let uq = m.predict(grid().view(), 20, &mut substream(1, Stream::Analysis)).unwrap();
        assert!(uq.epistemic_var.iter().all(|&v| v == 0.0));
        let det = Baseline::Snn(SnnModel {
            mlp: Mlp::init(&[1, 10, 10, 2], Activation::Identity, 2).unwrap(),
        });
        let d = det.predict(grid().view(), 2, &mut substream(1, Stream::Analysis)).unwrap();
        for (a, b) in uq.mean.iter().zip(&d.mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bnn_degenerate_posterior_matches_snn() {
        let cfg = BaselineConfig {
            epochs: 5,
            hidden: Some(vec![10, 10]),
            ..Default::default()
        };
        let snn = match train_baseline(BaselineKind::Snn, &data(60, 3), &cfg, 2).unwrap() {
            Baseline::Snn(s) => s,
            _ => unreachable!(),
        };
        let bnn = Baseline::Bnn(BnnModel::from_mlp(snn.mlp.clone(), -30.0));
        let mut rng = substream(1, Stream::Analysis);
        let a = bnn.predict(grid().view(), 8, &mut rng).unwrap();
        let b = Baseline::Snn(snn).predict(grid().view(), 2, &mut rng).unwrap();
        for (x, y) in a.mean.iter().zip(&b.mean) {
            assert!((x - y).abs() < 1e-3);
        }
    }

    #[test]
    fn bnn_draws_differ() {
        let m = BnnModel::from_mlp(Mlp::init(&[1, 4, 2], Activation::Identity, 1).unwrap(), -2.0);
        let mut rng = substream(1, Stream::Latent);
        let (a, _) = m.draw(&mut rng).unwrap();
        let (b, _) = m.draw(&mut rng).unwrap();
        assert_ne!(a.params(), b.params());
        assert!(m.kl() > 0.0);
    }

    #[test]
    fn stochastic_kinds_need_two_samples() {
        let mlp = Mlp::init(&[1, 4, 2], Activation::Identity, 1).unwrap();
        let mut rng = substream(1, Stream::Analysis);
        let m = Baseline::Mcdo(McdoModel { mlp: mlp.clone(), retain: 0.9 });
        assert!(m.predict(grid().view(), 1, &mut rng).is_err());
        let b = Baseline::Bnn(BnnModel::from_mlp(mlp, -3.0));
        assert!(b.predict(grid().view(), 1, &mut rng).is_err());
        assert!(BaselineKind::parse("svm").is_err());
        assert_eq!(BaselineKind::parse("DENN").unwrap(), BaselineKind::Denn);
    }
}
