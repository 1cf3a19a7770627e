//! Priors, KL divergence, loss assembly and prediction with uncertainty.
//!
//! The loss is assembled once, by [`assemble`], from per-point model outputs
//! held as tape nodes. Two routes feed it:
//!
//! - [`loss_tape`] evaluates the whole model on the tape, so every weight is
//!   a graph node. It is the reference.
//! - [`loss_and_grad`] runs the networks through the batched kernel, records
//!   only the per-point outputs as tape leaves, and pushes their adjoints back
//!   through the kernel. Training uses this one.

use std::f64::consts::PI;

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{FieldJets, Tape, Var};
use crate::error::{check_dim, Error, Result};
use crate::network::kernel::Jets;
use crate::network::{DeepOnet, OutputAdjoints, ParamReadout};
use crate::problems::ProblemDef;
use crate::rng::Rng;

/// `n x dim` matrix of i.i.d. standard normal draws.
pub fn sample_prior(dim: usize, n: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, dim), || StandardNormal.sample(rng))
}

/// `KL(N(mu, sigma^2) || N(0, 1))`.
pub fn kl_normal(mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    Ok(-sigma.ln() + 0.5 * (sigma * sigma + mu * mu) - 0.5)
}

/// The same divergence on the tape, parameterized by `log sigma`.
pub fn kl_normal_var<'t>(mu: Var<'t>, log_sigma: Var<'t>) -> Var<'t> {
    -log_sigma + ((log_sigma * 2.0).exp() + mu.square()) * 0.5 - 0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default)]
    pub interior: f64,
    #[serde(default)]
    pub ic: f64,
    #[serde(default)]
    pub bc: f64,
    #[serde(default)]
    pub data: f64,
    #[serde(default)]
    pub std: f64,
    /// Problem-specific penalty (the eigenproblem normalization).
    #[serde(default)]
    pub extra: f64,
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 6] {
        [self.interior, self.ic, self.bc, self.data, self.std, self.extra]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.as_array();
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        if w.iter().all(|&x| x == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaR {
    Fixed(f64),
    #[default]
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KlMode {
    #[default]
    StdPenalty,
    ClosedFormAffine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Weighted sum of the five (six) practical components.
    #[default]
    Practical,
    /// Negative evidence lower bound.
    Elbo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariationalConfig {
    pub sigma_r: SigmaR,
    pub kl_mode: KlMode,
    pub latent_samples: usize,
    pub objective: Objective,
}

impl Default for VariationalConfig {
    fn default() -> Self {
        VariationalConfig {
            sigma_r: SigmaR::Fixed(1.0),
            kl_mode: KlMode::StdPenalty,
            latent_samples: 1,
            objective: Objective::Practical,
        }
    }
}

impl VariationalConfig {
    pub fn validate(&self, model: &DeepOnet) -> Result<()> {
        if self.latent_samples == 0 {
            return Err(Error::Config("latent_samples must be >= 1".into()));
        }
        match self.sigma_r {
            SigmaR::Fixed(s) if !(s > 0.0 && s.is_finite()) => {
                return Err(Error::Config(format!("fixed sigma_R must be positive, got {s}")));
            }
            SigmaR::Learned if model.residual_log_var.is_none() => {
                return Err(Error::Config("learned sigma_R needs a model with residual_log_var".into()));
            }
            SigmaR::Learned if self.objective == Objective::Practical => {
                // R^2 / sigma_R^2 alone is minimized by sigma_R -> infinity.
                return Err(Error::Config("learned sigma_R needs the ELBO objective".into()));
            }
            _ => {}
        }
        if self.kl_mode == KlMode::ClosedFormAffine && model.spec.readout != ParamReadout::Affine {
            return Err(Error::Config("closed-form KL needs the affine parameter readout".into()));
        }
        Ok(())
    }
}

/// Loss components. For the practical objective
/// `total = sum_k w_k * component_k`; for the ELBO, components are the
/// unweighted negative log-likelihood pieces and `std` holds the KL term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub interior: f64,
    pub ic: f64,
    pub bc: f64,
    pub data: f64,
    pub std: f64,
    pub extra: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const NAMES: [&'static str; 7] = ["interior", "ic", "bc", "data", "std", "extra", "total"];

    pub fn values(&self) -> [f64; 7] {
        [
            self.interior,
            self.ic,
            self.bc,
            self.data,
            self.std,
            self.extra,
            self.total,
        ]
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        Self::NAMES
            .iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
    }
}

/// Loss components as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes<'t> {
    pub interior: Var<'t>,
    pub ic: Var<'t>,
    pub bc: Var<'t>,
    pub data: Var<'t>,
    pub std: Var<'t>,
    pub extra: Var<'t>,
    pub total: Var<'t>,
}

impl LossNodes<'_> {
    pub fn values(&self) -> LossBreakdown {
        LossBreakdown {
            interior: self.interior.value(),
            ic: self.ic.value(),
            bc: self.bc.value(),
            data: self.data.value(),
            std: self.std.value(),
            extra: self.extra.value(),
            total: self.total.value(),
        }
    }
}

/// One training batch. Observation groups carry their own targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub interior: Array2<f64>,
    /// Observed forcing at the interior points, if the problem observes it.
    pub interior_forcing: Option<Array1<f64>>,
    pub boundary: Array2<f64>,
    pub initial: Array2<f64>,
    pub data: Array2<f64>,
    pub data_u: Array1<f64>,
}

impl Batch {
    pub fn empty(coord_dim: usize) -> Self {
        Batch {
            interior: Array2::zeros((0, coord_dim)),
            interior_forcing: None,
            boundary: Array2::zeros((0, coord_dim)),
            initial: Array2::zeros((0, coord_dim)),
            data: Array2::zeros((0, coord_dim)),
            data_u: Array1::zeros(0),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.interior.nrows() + self.boundary.nrows() + self.initial.nrows() + self.data.nrows() == 0
    }

    /// Observation rows `[boundary; initial; data]` and their targets.
    fn observations(&self, problem: &ProblemDef) -> (Array2<f64>, Vec<f64>) {
        let coords = concatenate(
            Axis(0),
            &[self.boundary.view(), self.initial.view(), self.data.view()],
        )
        .expect("equal widths");
        let mut targets = Vec::with_capacity(coords.nrows());
        targets.extend(
            self.boundary
                .rows()
                .into_iter()
                .map(|p| problem.boundary_target(&p.to_vec())),
        );
        targets.extend(
            self.initial
                .rows()
                .into_iter()
                .map(|p| problem.initial_target(&p.to_vec())),
        );
        targets.extend(self.data_u.iter().copied());
        (coords, targets)
    }

    fn validate(&self, coord_dim: usize) -> Result<()> {
        for (name, a) in [
            ("interior", &self.interior),
            ("boundary", &self.boundary),
            ("initial", &self.initial),
            ("data", &self.data),
        ] {
            if a.nrows() > 0 && a.ncols() != coord_dim {
                return Err(Error::Dimension {
                    context: name_static(name),
                    expected: coord_dim,
                    actual: a.ncols(),
                });
            }
        }
        check_dim("data targets", self.data.nrows(), self.data_u.len())?;
        if let Some(f) = &self.interior_forcing {
            check_dim("interior forcing", self.interior.nrows(), f.len())?;
        }
        if self.is_empty() {
            return Err(Error::invalid("all batch groups are empty"));
        }
        Ok(())
    }
}

fn name_static(name: &str) -> &'static str {
    match name {
        "interior" => "interior batch width",
        "boundary" => "boundary batch width",
        "initial" => "initial batch width",
        _ => "data batch width",
    }
}

/// Model outputs for one latent draw, as tape nodes.
pub struct SampleOut<'t> {
    /// Interior rows, with jets along the problem's axes.
    pub interior: Vec<FieldJets<'t>>,
    /// Observation rows `[boundary; initial; data]`: mean and log variance.
    pub obs_mean: Vec<Var<'t>>,
    pub obs_log_var: Vec<Option<Var<'t>>>,
    pub phys: Vec<Var<'t>>,
}

fn mean_of<'t>(tape: &'t Tape, terms: Vec<Var<'t>>) -> Var<'t> {
    if terms.is_empty() {
        tape.constant(0.0)
    } else {
        tape.mean(terms)
    }
}

fn sum_of<'t>(tape: &'t Tape, terms: Vec<Var<'t>>) -> Var<'t> {
    if terms.is_empty() {
        tape.constant(0.0)
    } else {
        tape.sum(terms)
    }
}

/// Residual variance handle: fixed value or learned log variance node.
#[derive(Debug, Clone, Copy)]
pub enum ResidualVar<'t> {
    Fixed(f64),
    Learned(Var<'t>),
}

/// Builds every loss component from per-sample outputs. Both routes call
/// this function, so they optimize the same objective by construction.
pub fn assemble<'t>(
    tape: &'t Tape,
    problem: &ProblemDef,
    batch: &Batch,
    samples: &[SampleOut<'t>],
    weights: &LossWeights,
    config: &VariationalConfig,
    residual_var: ResidualVar<'t>,
    kl: Option<Var<'t>>,
) -> Result<LossNodes<'t>> {
    let n_b = batch.boundary.nrows();
    let n_i = batch.initial.nrows();
    let (_, targets) = batch.observations(problem);
    let ln2pi = (2.0 * PI).ln();
    let zero = tape.constant(0.0);

    let mut comps: Vec<[Var<'t>; 6]> = Vec::with_capacity(samples.len());
    for s in samples {
        let mut res_terms = Vec::with_capacity(s.interior.len());
        let mut sq_u = Vec::new();
        for (r, field) in s.interior.iter().enumerate() {
            let p = batch.interior.row(r).to_vec();
            let forcing = batch.interior_forcing.as_ref().map(|f| f[r]);
            if let Some(res) = problem.residual(&p, field, &s.phys, forcing) {
                res_terms.push(res.square());
            }
            if problem.normalization {
                sq_u.push(field.value.square());
            }
        }
        // observation groups: squared error and log variance per row
        let mut groups: [Vec<Var<'t>>; 3] = Default::default();
        let mut nll: [Vec<Var<'t>>; 3] = Default::default();
        let mut abs_lv = Vec::new();
        for (r, (&m, lv)) in s.obs_mean.iter().zip(&s.obs_log_var).enumerate() {
            let g = if r < n_b {
                0
            } else if r < n_b + n_i {
                1
            } else {
                2
            };
            let sq = (m - targets[r]).square();
            match lv {
                Some(lv) => {
                    let scaled = sq * (-*lv).exp();
                    groups[g].push(scaled);
                    nll[g].push(scaled * 0.5 + (*lv + ln2pi) * 0.5);
                    abs_lv.push(lv.abs());
                }
                None => {
                    groups[g].push(sq);
                    nll[g].push(sq * 0.5 + 0.5 * ln2pi);
                }
            }
        }
        let inv_var = match residual_var {
            ResidualVar::Fixed(s) => tape.constant(1.0 / (s * s)),
            ResidualVar::Learned(lv) => (-lv).exp(),
        };
        let extra = if problem.normalization && !sq_u.is_empty() {
            (tape.mean(sq_u) - 1.0).square()
        } else {
            zero
        };
        let [bc, ic, data] = groups;
        let c = match config.objective {
            Objective::Practical => [
                mean_of(tape, res_terms) * inv_var,
                mean_of(tape, ic),
                mean_of(tape, bc),
                mean_of(tape, data),
                mean_of(tape, abs_lv),
                extra,
            ],
            Objective::Elbo => {
                let m = res_terms.len() as f64;
                let log_norm = match residual_var {
                    ResidualVar::Fixed(s) => tape.constant(0.5 * m * (ln2pi + 2.0 * s.ln())),
                    ResidualVar::Learned(lv) => (lv + ln2pi) * (0.5 * m),
                };
                let [nb, ni, nd] = nll;
                let std = match config.kl_mode {
                    KlMode::ClosedFormAffine => zero,
                    KlMode::StdPenalty => mean_of(tape, abs_lv),
                };
                [
                    sum_of(tape, res_terms) * inv_var * 0.5 + log_norm,
                    sum_of(tape, ni),
                    sum_of(tape, nb),
                    sum_of(tape, nd),
                    std,
                    extra,
                ]
            }
        };
        comps.push(c);
    }
    let n_s = comps.len() as f64;
    let avg = |k: usize| -> Var<'t> { tape.sum(comps.iter().map(|c| c[k])) * (1.0 / n_s) };
    let (interior, ic, bc, data, mut std, extra) = (avg(0), avg(1), avg(2), avg(3), avg(4), avg(5));
    let total = match config.objective {
        Objective::Practical => tape.sum([
            interior * weights.interior,
            ic * weights.ic,
            bc * weights.bc,
            data * weights.data,
            std * weights.std,
            extra * weights.extra,
        ]),
        Objective::Elbo => {
            if config.kl_mode == KlMode::ClosedFormAffine {
                std = kl.ok_or_else(|| Error::invalid("closed-form KL requested without terms"))?;
            }
            tape.sum([interior, ic, bc, data, std, extra * weights.extra])
        }
    };
    Ok(LossNodes {
        interior,
        ic,
        bc,
        data,
        std,
        extra,
        total,
    })
}

fn kl_nodes<'t>(tape: &'t Tape, mu: &[Var<'t>], log_sigma: &[Var<'t>]) -> Var<'t> {
    sum_of(
        tape,
        mu.iter()
            .zip(log_sigma)
            .map(|(&m, &s)| kl_normal_var(m, s))
            .collect(),
    )
}

fn check_inputs(model: &DeepOnet, problem: &ProblemDef, batch: &Batch, config: &VariationalConfig, latents: ArrayView2<'_, f64>) -> Result<()> {
    config.validate(model)?;
    check_dim("model coordinates", problem.coord_dim(), model.spec.coord_dim)?;
    check_dim("model parameters", problem.params.len(), model.spec.n_params())?;
    check_dim("latent width", model.spec.latent_dim, latents.ncols())?;
    if latents.nrows() == 0 {
        return Err(Error::invalid("need at least one latent sample"));
    }
    batch.validate(problem.coord_dim())
}

/// Reference route: the entire model on one tape. Returns the loss and the
/// gradient in flat parameter order.
pub fn loss_tape(
    model: &DeepOnet,
    problem: &ProblemDef,
    batch: &Batch,
    weights: &LossWeights,
    config: &VariationalConfig,
    latents: ArrayView2<'_, f64>,
) -> Result<(LossBreakdown, Vec<f64>)> {
    check_inputs(model, problem, batch, config, latents)?;
    let tape = Tape::new();
    let vars = model.register(&tape);
    let (obs, _) = batch.observations(problem);
    let mut samples = Vec::with_capacity(latents.nrows());
    for lat in latents.rows() {
        let lat = lat.to_vec();
        let mut interior = Vec::with_capacity(batch.interior.nrows());
        for p in batch.interior.rows() {
            let out = model.forward_tape(&tape, &vars, &p.to_vec(), &lat, &problem.axes)?;
            interior.push(out.mean);
        }
        let mut obs_mean = Vec::with_capacity(obs.nrows());
        let mut obs_log_var = Vec::with_capacity(obs.nrows());
        for p in obs.rows() {
            let out = model.forward_tape(&tape, &vars, &p.to_vec(), &lat, &[])?;
            obs_mean.push(out.mean.value);
            obs_log_var.push(out.log_var);
        }
        samples.push(SampleOut {
            interior,
            obs_mean,
            obs_log_var,
            phys: model.phys_tape(&tape, &vars, &lat)?,
        });
    }
    let rv = match (config.sigma_r, vars.residual_log_var) {
        (SigmaR::Learned, Some(v)) => ResidualVar::Learned(v),
        (SigmaR::Fixed(s), _) => ResidualVar::Fixed(s),
        (SigmaR::Learned, None) => unreachable!("validated"),
    };
    let kl = (config.kl_mode == KlMode::ClosedFormAffine)
        .then(|| kl_nodes(&tape, &vars.affine_mu, &vars.affine_log_sigma));
    let nodes = assemble(&tape, problem, batch, &samples, weights, config, rv, kl)?;
    let grad = tape.backward(nodes.total)?.gradient().into_inner();
    Ok((nodes.values(), grad))
}

fn broadcast_row(row: &[f64], n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, row.len()), |(_, j)| row[j])
}

struct Leaves<'t> {
    v: Vec<Var<'t>>,
    d: Vec<Vec<Var<'t>>>,
    dd: Vec<Vec<Var<'t>>>,
    lv: Vec<Option<Var<'t>>>,
}

impl<'t> Leaves<'t> {
    fn record(tape: &'t Tape, mean: &Jets, log_var: Option<&Array1<f64>>) -> Self {
        let n = mean.rows();
        let k = mean.dirs();
        Leaves {
            v: (0..n).map(|i| tape.input(mean.v[[i, 0]])).collect(),
            d: (0..n)
                .map(|i| (0..k).map(|a| tape.input(mean.d[a][[i, 0]])).collect())
                .collect(),
            dd: (0..n)
                .map(|i| (0..k).map(|a| tape.input(mean.dd[a][[i, 0]])).collect())
                .collect(),
            lv: (0..n)
                .map(|i| log_var.map(|l| tape.input(l[i])))
                .collect(),
        }
    }

    fn adjoints(&self, adj: &crate::autodiff::Adjoints, n_params: usize) -> OutputAdjoints {
        let n = self.v.len();
        let k = self.d.first().map_or(0, Vec::len);
        let col = |f: &dyn Fn(usize) -> f64| Array2::from_shape_fn((n, 1), |(i, _)| f(i));
        OutputAdjoints {
            mean: Jets {
                v: col(&|i| adj.wrt(self.v[i])),
                d: (0..k).map(|a| col(&|i| adj.wrt(self.d[i][a]))).collect(),
                dd: (0..k).map(|a| col(&|i| adj.wrt(self.dd[i][a]))).collect(),
            },
            log_var: self
                .lv
                .first()
                .is_some_and(Option::is_some)
                .then(|| (0..n).map(|i| self.lv[i].map_or(0.0, |v| adj.wrt(v))).collect()),
            phys: Array2::zeros((n, n_params)),
        }
    }
}

/// Training route: batched kernel for the networks, small tape for the loss.
/// A non-finite total comes back with NaN gradients instead of an error.
pub fn loss_and_grad(
    model: &DeepOnet,
    problem: &ProblemDef,
    batch: &Batch,
    weights: &LossWeights,
    config: &VariationalConfig,
    latents: ArrayView2<'_, f64>,
) -> Result<(LossBreakdown, Vec<f64>)> {
    check_inputs(model, problem, batch, config, latents)?;
    let (obs, _) = batch.observations(problem);
    let n_int = batch.interior.nrows();
    let n_obs = obs.nrows();
    let np = model.spec.n_params();

    let mut passes = Vec::with_capacity(latents.nrows());
    for lat in latents.rows() {
        let lat = lat.to_vec();
        let pi = (n_int > 0)
            .then(|| model.forward_batch(batch.interior.view(), broadcast_row(&lat, n_int).view(), &problem.axes))
            .transpose()?;
        let po = (n_obs > 0)
            .then(|| model.forward_batch(obs.view(), broadcast_row(&lat, n_obs).view(), &[]))
            .transpose()?;
        passes.push((pi, po));
    }

    let tape = Tape::with_capacity(passes.len() * (n_int * 40 + n_obs * 12) + 64);
    let mut leaves = Vec::with_capacity(passes.len());
    let mut samples = Vec::with_capacity(passes.len());
    for (pi, po) in &passes {
        let li = pi.as_ref().map(|p| Leaves::record(&tape, &p.mean, p.log_var.as_ref()));
        let lo = po.as_ref().map(|p| Leaves::record(&tape, &p.mean, p.log_var.as_ref()));
        let phys_row = pi
            .as_ref()
            .or(po.as_ref())
            .expect("batch is not empty")
            .phys
            .row(0)
            .to_vec();
        let phys: Vec<Var<'_>> = phys_row.iter().map(|&v| tape.input(v)).collect();
        let interior = li
            .as_ref()
            .map(|l| {
                (0..l.v.len())
                    .map(|i| FieldJets {
                        value: l.v[i],
                        axes: problem.axes.clone(),
                        first: l.d[i].clone(),
                        second: l.dd[i].clone(),
                    })
                    .collect()
            })
            .unwrap_or_default();
        let (obs_mean, obs_log_var) = lo
            .as_ref()
            .map(|l| (l.v.clone(), l.lv.clone()))
            .unwrap_or_default();
        samples.push(SampleOut {
            interior,
            obs_mean,
            obs_log_var,
            phys: phys.clone(),
        });
        leaves.push((li, lo, phys));
    }
    let rlv = match config.sigma_r {
        SigmaR::Learned => Some(tape.input(model.residual_log_var.expect("validated"))),
        SigmaR::Fixed(_) => None,
    };
    let rv = match (config.sigma_r, rlv) {
        (SigmaR::Learned, Some(v)) => ResidualVar::Learned(v),
        (SigmaR::Fixed(s), _) => ResidualVar::Fixed(s),
        _ => unreachable!("validated"),
    };
    let affine = (config.kl_mode == KlMode::ClosedFormAffine).then(|| {
        let mu: Vec<Var<'_>> = model.affine_mu.iter().map(|&v| tape.input(v)).collect();
        let ls: Vec<Var<'_>> = model.affine_log_sigma.iter().map(|&v| tape.input(v)).collect();
        (mu, ls)
    });
    let kl = affine.as_ref().map(|(mu, ls)| kl_nodes(&tape, mu, ls));
    let nodes = assemble(&tape, problem, batch, &samples, weights, config, rv, kl)?;
    if !nodes.total.value().is_finite() {
        // the caller reports which component diverged
        return Ok((nodes.values(), vec![f64::NAN; model.param_count()]));
    }
    let adj = tape.backward(nodes.total)?;

    let mut grad = vec![0.0; model.param_count()];
    for ((pi, po), (li, lo, phys)) in passes.iter().zip(&leaves) {
        let phys_adj: Vec<f64> = phys.iter().map(|&p| adj.wrt(p)).collect();
        let mut phys_done = false;
        for (pass, l) in [(pi, li), (po, lo)] {
            if let (Some(pass), Some(l)) = (pass, l) {
                let mut oa = l.adjoints(&adj, np);
                if !phys_done {
                    for (p, a) in phys_adj.iter().enumerate() {
                        oa.phys[[0, p]] = *a;
                    }
                    phys_done = true;
                }
                model.backward_batch(pass, &oa, &mut grad)?;
            }
        }
    }
    if let (Some(idx), Some(v)) = (model.residual_log_var_index(), rlv) {
        grad[idx] += adj.wrt(v);
    }
    if let Some((mu, ls)) = &affine {
        let off = model.affine_offset();
        let na = mu.len();
        for p in 0..na {
            grad[off + p] += adj.wrt(mu[p]);
            grad[off + na + p] += adj.wrt(ls[p]);
        }
    }
    Ok((nodes.values(), grad))
}

/// PDE residual of the mean field at `points` for one latent draw. The
/// physical parameters come from that draw unless `phys_override` is given.
/// `None` for problems without physics.
pub fn residual_values(
    model: &DeepOnet,
    problem: &ProblemDef,
    points: ArrayView2<'_, f64>,
    latent: &[f64],
    phys_override: Option<&[f64]>,
    forcing: Option<&Array1<f64>>,
) -> Result<Option<Array1<f64>>> {
    if !problem.has_physics() {
        return Ok(None);
    }
    let n = points.nrows();
    if let Some(f) = forcing {
        check_dim("residual forcing", n, f.len())?;
    }
    if n == 0 {
        return Ok(Some(Array1::zeros(0)));
    }
    let pass = model.forward_batch(points, broadcast_row(latent, n).view(), &problem.axes)?;
    let phys_vals = match phys_override {
        Some(p) => {
            check_dim("parameter override", problem.params.len(), p.len())?;
            p.to_vec()
        }
        None => pass.phys.row(0).to_vec(),
    };
    let k = problem.axes.len();
    let mut out = Array1::zeros(n);
    for i in 0..n {
        let tape = Tape::with_capacity(64);
        let phys: Vec<Var<'_>> = phys_vals.iter().map(|&v| tape.constant(v)).collect();
        let field = FieldJets {
            value: tape.constant(pass.mean.v[[i, 0]]),
            axes: problem.axes.clone(),
            first: (0..k).map(|a| tape.constant(pass.mean.d[a][[i, 0]])).collect(),
            second: (0..k).map(|a| tape.constant(pass.mean.dd[a][[i, 0]])).collect(),
        };
        let p = points.row(i).to_vec();
        let r = problem
            .residual(&p, &field, &phys, forcing.map(|f| f[i]))
            .expect("problem has physics");
        out[i] = r.value();
    }
    Ok(Some(out))
}

/// Per-point predictive statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Uq {
    pub mean: Array1<f64>,
    pub epistemic_var: Array1<f64>,
    pub aleatoric_var: Array1<f64>,
    pub total_var: Array1<f64>,
    pub ci_lo: Array1<f64>,
    pub ci_hi: Array1<f64>,
}

impl Uq {
    pub fn from_parts(mean: Array1<f64>, epistemic_var: Array1<f64>, aleatoric_var: Array1<f64>) -> Self {
        let total_var = &epistemic_var + &aleatoric_var;
        let half = total_var.mapv(|v| 1.96 * v.sqrt());
        Uq {
            ci_lo: &mean - &half,
            ci_hi: &mean + &half,
            mean,
            epistemic_var,
            aleatoric_var,
            total_var,
        }
    }

    /// Statistics over `S x N` sampled means and optional log variances.
    /// Epistemic variance is the unbiased sample variance over draws.
    pub fn from_samples(means: &Array2<f64>, log_vars: Option<&Array2<f64>>) -> Result<Self> {
        let s = means.nrows();
        if s < 2 {
            return Err(Error::invalid("need at least two samples for a variance"));
        }
        let mean = means.mean_axis(Axis(0)).expect("nonempty");
        let epistemic = means.var_axis(Axis(0), 1.0).mapv(|v| v.max(0.0));
        let aleatoric = match log_vars {
            Some(lv) => lv.mapv(f64::exp).mean_axis(Axis(0)).expect("nonempty"),
            None => Array1::zeros(means.ncols()),
        };
        Ok(Self::from_parts(mean, epistemic, aleatoric))
    }
}

/// Mean, epistemic and aleatoric variance and 95% interval at each point.
pub fn predict_with_uq(model: &DeepOnet, points: ArrayView2<'_, f64>, n_latent: usize, rng: &mut Rng) -> Result<Uq> {
    if n_latent < 2 {
        return Err(Error::invalid("predict_with_uq needs n_latent >= 2"));
    }
    let latents = sample_prior(model.spec.latent_dim, n_latent, rng);
    let (means, log_vars) = model.predict_samples(points, latents.view())?;
    Uq::from_samples(&means, log_vars.as_ref())
}

/// `n x P` samples of the physical parameters under the approximate posterior.
pub fn posterior_param_samples(model: &DeepOnet, n: usize, rng: &mut Rng) -> Result<Array2<f64>> {
    if model.spec.n_params() == 0 {
        return Err(Error::invalid("model has no physical parameters"));
    }
    let latents = sample_prior(model.spec.latent_dim, n, rng);
    model.phys_samples(latents.view())
}
