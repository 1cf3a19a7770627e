//! Finite-difference verification suite for the derivative machinery.
//!
//! Rows:
//!
//! - `first-order`: parameter gradients of a scalar loss on random tanh MLPs.
//! - `second-order`: jet first and second directional derivatives with
//!   respect to the input.
//! - `nested`: parameter gradient of the input Laplacian.
//! - `kernel`: batched jet kernel against the tape for a DeepONet loss.
//! - `loss`: the training loss gradient against finite differences.

use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{laplacian, relative_error, seed_jets, AdError, Fault, GradCheck, Jet2, Tape, Var};
use crate::error::{Error, Result};
use crate::network::{random_point, Activation, DeepOnet, DeepOnetSpec, Mlp, ParamReadout};
use crate::problems::make_heat1d;
use crate::rng::{indexed_substream, substream, Stream};
use crate::variational::{loss_and_grad, loss_tape, sample_prior, Batch, LossWeights, VariationalConfig};

pub const TOL_FIRST: f64 = 1e-5;
pub const TOL_SECOND: f64 = 1e-4;
pub const TOL_NESTED: f64 = 1e-3;
pub const TOL_KERNEL: f64 = 1e-9;
pub const TOL_LOSS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    /// MLP widths, input first. The input width must be 1 to 3.
    pub widths: Vec<usize>,
    pub seed: u64,
    pub n_models: usize,
    pub n_points: usize,
    #[serde(skip)]
    pub fault: Option<Fault>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            widths: vec![3, 8, 8, 1],
            seed: 0,
            n_models: 3,
            n_points: 3,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub name: String,
    pub checks: usize,
    pub max_error: f64,
    pub tol: f64,
}

impl GradcheckRow {
    pub fn passed(&self) -> bool {
        self.max_error.is_finite() && self.max_error < self.tol
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(GradcheckRow::passed)
    }

    pub fn row(&self, name: &str) -> Option<&GradcheckRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<14}{:>8}{:>14}{:>10}  status\n", "check", "count", "max rel err", "tol");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<14}{:>8}{:>14.3e}{:>10.0e}  {}",
                r.name,
                r.checks,
                r.max_error,
                r.tol,
                if r.passed() { "pass" } else { "FAIL" }
            );
        }
        s
    }
}

fn tape_for(fault: Option<Fault>) -> Tape {
    match fault {
        Some(f) => Tape::with_fault(f),
        None => Tape::new(),
    }
}

struct Acc {
    checks: usize,
    max: f64,
}

impl Acc {
    fn new() -> Self {
        Acc { checks: 0, max: 0.0 }
    }

    fn push(&mut self, e: f64) {
        self.checks += 1;
        self.max = if e.is_nan() { f64::INFINITY } else { self.max.max(e) };
    }

    fn row(self, name: &str, tol: f64) -> GradcheckRow {
        GradcheckRow {
            name: name.into(),
            checks: self.checks,
            max_error: self.max,
            tol,
        }
    }
}

fn unit_direction(dim: usize, rng: &mut crate::rng::Rng) -> Vec<f64> {
    loop {
        let v = random_point(dim, -1.0, 1.0, rng);
        let n = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        if n > 0.1 {
            return v.iter().map(|c| c / n).collect();
        }
    }
}

fn mlp_value(mlp: &Mlp, x: &[f64]) -> f64 {
    mlp.eval(x).expect("valid input")[0]
}

fn mlp_laplacian(mlp: &Mlp, fault: Option<Fault>, x: &[f64]) -> std::result::Result<f64, AdError> {
    let tape = tape_for(fault);
    let params = mlp.register(&tape);
    Ok(lap_var(&tape, mlp, &params, x)?.value())
}

fn lap_var<'t>(tape: &'t Tape, mlp: &Mlp, params: &[Var<'t>], x: &[f64]) -> std::result::Result<Var<'t>, AdError> {
    let f = |j: &[Jet2<'t>]| Ok(mlp.forward_jets(params, j).expect("valid width")[0]);
    laplacian(tape, f, x)
}

fn ad(e: AdError) -> Error {
    Error::Autodiff(e)
}

/// Runs the full suite.
pub fn run_suite(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let d = *cfg.widths.first().ok_or_else(|| Error::invalid("empty widths"))?;
    if !(1..=3).contains(&d) || cfg.widths.last() != Some(&1) {
        return Err(Error::invalid("gradcheck widths need input width 1..=3 and output width 1"));
    }
    let mut first = Acc::new();
    let mut second = Acc::new();
    let mut nested = Acc::new();
    for m in 0..cfg.n_models {
        let mut rng = indexed_substream(cfg.seed, Stream::Init, m as u64);
        let mlp = Mlp::new(&cfg.widths, Activation::Identity, &mut rng)?;
        let theta = mlp.params();
        let points: Vec<Vec<f64>> = (0..cfg.n_points).map(|_| random_point(d, -1.0, 1.0, &mut rng)).collect();

        // first order: L = sum_x f(x)^2 / 2 over the sample points
        let check = GradCheck {
            step: 1e-5,
            tol: TOL_FIRST,
            fault: cfg.fault,
        };
        let report = check
            .run(
                |_tape, p| {
                    let mut acc = Vec::new();
                    for x in &points {
                        let xs: Vec<_> = x.iter().map(|&v| p[0].tape().constant(v)).collect();
                        acc.push(mlp.forward_vars(p, &xs).expect("widths")[0].square() * 0.5);
                    }
                    Ok(p[0].tape().sum(acc))
                },
                &theta,
            )
            .map_err(ad)?;
        report.errors.iter().for_each(|&e| first.push(e));

        // second order along random unit directions
        for x in &points {
            let dir = unit_direction(d, &mut rng);
            let tape = tape_for(cfg.fault);
            let params = mlp.register(&tape);
            let jets = seed_jets(&tape, x, &dir).map_err(ad)?;
            let out = mlp.forward_jets(&params, &jets)?[0];
            let at = |s: f64| {
                let y: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + s * b).collect();
                mlp_value(&mlp, &y)
            };
            let (h1, h2) = (1e-5, 1e-3);
            let fd1 = (at(h1) - at(-h1)) / (2.0 * h1);
            let fd2 = (at(h2) - 2.0 * at(0.0) + at(-h2)) / (h2 * h2);
            second.push(relative_error(out.d.value(), fd1));
            second.push(relative_error(out.dd.value(), fd2));
        }

        // nested: d/dtheta of the Laplacian at one point
        let x = points[0].clone();
        let analytic = {
            let tape = tape_for(cfg.fault);
            let params = mlp.register(&tape);
            let lap = lap_var(&tape, &mlp, &params, &x).map_err(ad)?;
            tape.backward(lap).map_err(ad)?.gradient().into_inner()
        };
        let h = 1e-5;
        for i in 0..theta.len() {
            let mut plus = theta.clone();
            plus[i] += h;
            let mut minus = theta.clone();
            minus[i] -= h;
            let (mut mp, mut mm) = (mlp.clone(), mlp.clone());
            mp.set_params(&plus)?;
            mm.set_params(&minus)?;
            let fd = (mlp_laplacian(&mp, None, &x).map_err(ad)? - mlp_laplacian(&mm, None, &x).map_err(ad)?) / (2.0 * h);
            nested.push(relative_error(analytic[i], fd));
        }
    }

    let (kernel, loss) = loss_rows(cfg.seed)?;
    Ok(GradcheckReport {
        rows: vec![
            first.row("first-order", TOL_FIRST),
            second.row("second-order", TOL_SECOND),
            nested.row("nested", TOL_NESTED),
            kernel.row("kernel", TOL_KERNEL),
            loss.row("loss", TOL_LOSS),
        ],
    })
}

fn loss_rows(seed: u64) -> Result<(Acc, Acc)> {
    let problem = make_heat1d();
    let spec = DeepOnetSpec {
        coord_dim: 2,
        latent_dim: 2,
        branch_hidden: vec![6, 6],
        trunk_hidden: vec![5],
        width: 4,
        links: problem.links(),
        param_init: vec![],
        log_var: true,
        output_activation: Activation::Identity,
        readout: ParamReadout::Trunk,
        odd_axis: None,
        residual_log_var: false,
    };
    let mut model = DeepOnet::new(spec, seed)?;
    let mut rng = substream(seed, Stream::Collocation);
    let data = problem.domain.sample_interior(4, &mut rng);
    let data_u = data
        .rows()
        .into_iter()
        .map(|r| problem.exact(&r.to_vec()).expect("oracle") + 0.05)
        .collect();
    let batch = Batch {
        interior: problem.domain.sample_interior(5, &mut rng),
        interior_forcing: None,
        boundary: problem.domain.sample_boundary(2, &mut rng),
        initial: problem.domain.sample_initial(2, &mut rng)?,
        data,
        data_u,
    };
    let weights = LossWeights {
        interior: 1.0,
        ic: 3.0,
        bc: 1.0,
        data: 6.0,
        std: 1.0,
        extra: 0.0,
    };
    let vcfg = VariationalConfig {
        latent_samples: 2,
        ..Default::default()
    };
    let lat: Array2<f64> = sample_prior(2, 2, &mut rng);
    let (_, g_tape) = loss_tape(&model, &problem, &batch, &weights, &vcfg, lat.view())?;
    let (_, g_kernel) = loss_and_grad(&model, &problem, &batch, &weights, &vcfg, lat.view())?;
    let mut kernel = Acc::new();
    for (a, b) in g_tape.iter().zip(&g_kernel) {
        kernel.push(relative_error(*a, *b));
    }
    let mut loss = Acc::new();
    let theta = model.params();
    let h = 1e-4;
    for i in 0..theta.len() {
        let mut eval = |delta: f64| -> Result<f64> {
            let mut p = theta.clone();
            p[i] += delta;
            model.set_params(&p)?;
            Ok(loss_and_grad(&model, &problem, &batch, &weights, &vcfg, lat.view())?.0.total)
        };
        let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
        loss.push(relative_error(g_kernel[i], fd));
    }
    model.set_params(&theta)?;
    Ok((kernel, loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let cfg = GradcheckConfig {
            widths: vec![2, 5, 1],
            n_models: 1,
            n_points: 2,
            ..Default::default()
        };
        let r = run_suite(&cfg).unwrap();
        assert!(r.passed(), "{}", r.table());
        assert_eq!(r.rows.len(), 5);
        assert!(r.table().contains("nested"));
    }

    #[test]
    fn injected_fault_fails() {
        let cfg = GradcheckConfig {
            widths: vec![2, 5, 1],
            n_models: 1,
            n_points: 2,
            fault: Some(Fault::TanhDerivative),
            ..Default::default()
        };
        let r = run_suite(&cfg).unwrap();
        assert!(!r.passed());
        assert!(!r.row("first-order").unwrap().passed());
    }

    #[test]
    fn bad_widths_rejected() {
        for w in [vec![4, 3, 1], vec![2, 3, 2], vec![]] {
            let cfg = GradcheckConfig {
                widths: w,
                ..Default::default()
            };
            assert!(run_suite(&cfg).is_err());
        }
    }
}
