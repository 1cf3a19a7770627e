//! Benchmark problems: domains, samplers, residual functionals, exact
//! solutions and synthetic datasets.
//!
//! Coordinates are ordered time first for time-dependent problems, so the
//! heat equation uses `(t, x)`.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{FieldJets, Tape, Var};
use crate::error::{Error, Result};
use crate::network::Link;
use crate::rng::Rng;

/// First root of the order-one spherical Bessel function.
pub const DIPOLE_K: f64 = 4.493_409_457_909_064;
/// Diffusion coefficient of the reaction-diffusion problem.
pub const RD_DIFFUSION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Interval { lo: f64, hi: f64 },
    Rectangle { lo: [f64; 2], hi: [f64; 2] },
    UnitBall,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Domain {
    pub shape: Shape,
    pub time: Option<(f64, f64)>,
}

impl Domain {
    pub fn new(shape: Shape, time: Option<(f64, f64)>) -> Result<Self> {
        let ordered = match shape {
            Shape::Interval { lo, hi } => lo < hi,
            Shape::Rectangle { lo, hi } => lo[0] < hi[0] && lo[1] < hi[1],
            Shape::UnitBall => true,
        };
        if !ordered || time.is_some_and(|(a, b)| a >= b) {
            return Err(Error::invalid(format!("unordered bounds in {shape:?} / {time:?}")));
        }
        Ok(Domain { shape, time })
    }

    pub fn spatial_dim(&self) -> usize {
        match self.shape {
            Shape::Interval { .. } => 1,
            Shape::Rectangle { .. } => 2,
            Shape::UnitBall => 3,
        }
    }

    pub fn coord_dim(&self) -> usize {
        self.spatial_dim() + self.time.is_some() as usize
    }

    fn spatial_interior(&self, rng: &mut Rng) -> Vec<f64> {
        match self.shape {
            Shape::Interval { lo, hi } => vec![rng.random_range(lo..hi)],
            Shape::Rectangle { lo, hi } => vec![
                rng.random_range(lo[0]..hi[0]),
                rng.random_range(lo[1]..hi[1]),
            ],
            Shape::UnitBall => {
                let dir = unit_vector(rng);
                let r = rng.random::<f64>().cbrt();
                dir.iter().map(|c| c * r).collect()
            }
        }
    }

    fn with_time(&self, t: Option<f64>, x: Vec<f64>) -> Vec<f64> {
        match t {
            Some(t) => std::iter::once(t).chain(x).collect(),
            None => x,
        }
    }

    fn time_sample(&self, rng: &mut Rng) -> Option<f64> {
        self.time.map(|(a, b)| rng.random_range(a..b))
    }

    /// Uniform interior (space-time) points.
    pub fn sample_interior(&self, n: usize, rng: &mut Rng) -> Array2<f64> {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let t = self.time_sample(rng);
                let x = self.spatial_interior(rng);
                self.with_time(t, x)
            })
            .collect();
        to_array(&rows, self.coord_dim())
    }

    /// Boundary points: interval endpoints (alternating), `n` uniform points
    /// on each rectangle edge (`4n` total), or `n` uniform points on the
    /// sphere. Time, if present, is uniform.
    pub fn sample_boundary(&self, n: usize, rng: &mut Rng) -> Array2<f64> {
        let mut rows = Vec::new();
        match self.shape {
            Shape::Interval { lo, hi } => {
                for i in 0..n {
                    let t = self.time_sample(rng);
                    rows.push(self.with_time(t, vec![if i % 2 == 0 { lo } else { hi }]));
                }
            }
            Shape::Rectangle { lo, hi } => {
                for edge in 0..4 {
                    for _ in 0..n {
                        let t = self.time_sample(rng);
                        let x = match edge {
                            0 => vec![rng.random_range(lo[0]..hi[0]), lo[1]],
                            1 => vec![rng.random_range(lo[0]..hi[0]), hi[1]],
                            2 => vec![lo[0], rng.random_range(lo[1]..hi[1])],
                            _ => vec![hi[0], rng.random_range(lo[1]..hi[1])],
                        };
                        rows.push(self.with_time(t, x));
                    }
                }
            }
            Shape::UnitBall => {
                for _ in 0..n {
                    let t = self.time_sample(rng);
                    rows.push(self.with_time(t, unit_vector(rng).to_vec()));
                }
            }
        }
        to_array(&rows, self.coord_dim())
    }

    /// Spatial samples at the initial time.
    pub fn sample_initial(&self, n: usize, rng: &mut Rng) -> Result<Array2<f64>> {
        let (t0, _) = self
            .time
            .ok_or_else(|| Error::invalid("initial points need a time span"))?;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let x = self.spatial_interior(rng);
                self.with_time(Some(t0), x)
            })
            .collect();
        Ok(to_array(&rows, self.coord_dim()))
    }
}

fn unit_vector(rng: &mut Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

pub(crate) fn to_array(rows: &[Vec<f64>], cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), cols), |(i, j)| rows[i][j])
}

/// Spherical Bessel function of order 0 or 1.
pub fn spherical_bessel(order: u32, x: f64) -> Result<f64> {
    if x < 0.0 {
        return Err(Error::invalid(format!("spherical Bessel argument {x} < 0")));
    }
    match order {
        0 if x < 1e-3 => Ok(1.0 - x * x / 6.0),
        0 => Ok(x.sin() / x),
        1 if x < 1e-3 => Ok(x / 3.0 - x.powi(3) / 30.0),
        1 => Ok(x.sin() / (x * x) - x.cos() / x),
        _ => Err(Error::invalid(format!("spherical Bessel order {order} unsupported"))),
    }
}

/// `psi(s) = j1(s) / s` and its first two derivatives, plus the regular
/// combinations `psi'(s)/s` and `(psi''(s) - psi'(s)/s)/s^2`. The power
/// series is used below `s = 1`, where the closed forms cancel badly.
fn dipole_radial(s: f64) -> [f64; 5] {
    if s < 1.0 {
        // psi(s) = sum_n a_n s^{2n}, a_n = (-1)^n / (2^n n! (2n+3)!!)
        let s2 = s * s;
        let mut a = 1.0 / 3.0;
        let (mut psi, mut q, mut d2, mut c) = (0.0, 0.0, 0.0, 0.0);
        // powers[n] = s^{2n}
        let mut powers = [1.0; 20];
        for n in 1..20 {
            powers[n] = powers[n - 1] * s2;
        }
        for (n, &pow) in powers.iter().enumerate() {
            let nf = n as f64;
            psi += a * pow;
            if n >= 1 {
                q += 2.0 * nf * a * powers[n - 1];
                d2 += 2.0 * nf * (2.0 * nf - 1.0) * a * powers[n - 1];
            }
            if n >= 2 {
                c += 2.0 * nf * (2.0 * nf - 2.0) * a * powers[n - 2];
            }
            a *= -1.0 / (2.0 * (nf + 1.0) * (2.0 * nf + 5.0));
        }
        return [psi, q * s, d2, q, c];
    }
    let (sn, cs) = s.sin_cos();
    let s2 = s * s;
    let s3 = s2 * s;
    let s4 = s3 * s;
    let s5 = s4 * s;
    let psi = sn / s3 - cs / s2;
    let d1 = sn / s2 + 3.0 * cs / s3 - 3.0 * sn / s4;
    let d2 = cs / s2 - 5.0 * sn / s3 - 12.0 * cs / s4 + 12.0 * sn / s5;
    [psi, d1, d2, d1 / s, (d2 - d1 / s) / s2]
}

/// `I = int_0^1 j1(k r)^2 r^2 dr` at the first root, in closed form.
pub fn dipole_norm_integral() -> f64 {
    0.5 * spherical_bessel(0, DIPOLE_K).expect("positive argument").powi(2)
}

/// Value, gradient and second partials of a scalar field at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactJets {
    pub value: f64,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl ExactJets {
    /// Tape constants restricted to `axes`.
    pub fn to_field<'t>(&self, tape: &'t Tape, axes: &[usize]) -> FieldJets<'t> {
        FieldJets {
            value: tape.constant(self.value),
            axes: axes.to_vec(),
            first: axes.iter().map(|&a| tape.constant(self.first[a])).collect(),
            second: axes.iter().map(|&a| tape.constant(self.second[a])).collect(),
        }
    }
}

/// The normalized dipole eigenmode `C z j1(k r) / r` and its derivatives.
pub fn dipole_mode(p: &[f64]) -> ExactJets {
    let k = DIPOLE_K;
    let c = 1.0 / dipole_norm_integral().sqrt();
    let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    let [psi, _, _, q, cc] = dipole_radial(k * r);
    // phi(r) = k psi(kr); phi'(r)/r = k^3 q; (phi'' - phi'/r)/r^2 = k^5 cc
    let phi = k * psi;
    let phi1_over_r = k.powi(3) * q;
    let curv = k.powi(5) * cc;
    let z = p[2];
    let mut first = vec![0.0; 3];
    let mut second = vec![0.0; 3];
    for i in 0..3 {
        let dz = (i == 2) as u8 as f64;
        first[i] = c * (dz * phi + z * phi1_over_r * p[i]);
        second[i] = c * (2.0 * dz * phi1_over_r * p[i] + z * (curv * p[i] * p[i] + phi1_over_r));
    }
    ExactJets {
        value: c * z * phi,
        first,
        second,
    }
}

/// The radial mode `j0(pi r)` (eigenvalue `pi^2`), unnormalized.
pub fn radial_mode(p: &[f64]) -> f64 {
    let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    spherical_bessel(0, PI * r).expect("nonnegative radius")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    RegressionUq,
    Sin3,
    Heat1d,
    Rd2d,
    Helmholtz3d,
}

impl ProblemKind {
    pub const ALL: [ProblemKind; 5] = [
        ProblemKind::RegressionUq,
        ProblemKind::Sin3,
        ProblemKind::Heat1d,
        ProblemKind::Rd2d,
        ProblemKind::Helmholtz3d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProblemKind::RegressionUq => "regression-uq",
            ProblemKind::Sin3 => "sin3",
            ProblemKind::Heat1d => "heat1d",
            ProblemKind::Rd2d => "rd2d",
            ProblemKind::Helmholtz3d => "helmholtz3d",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment '{s}'")))
    }

    pub fn make(self) -> ProblemDef {
        match self {
            ProblemKind::RegressionUq => make_regression_uq(),
            ProblemKind::Sin3 => make_sin3(),
            ProblemKind::Heat1d => make_heat1d(),
            ProblemKind::Rd2d => make_rd2d(),
            ProblemKind::Helmholtz3d => make_helmholtz3d(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub link: Link,
    pub true_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemDef {
    pub kind: ProblemKind,
    pub domain: Domain,
    pub params: Vec<ParamSpec>,
    /// Coordinate names, in order.
    pub coord_names: Vec<&'static str>,
    /// Axes along which the residual needs derivatives.
    pub axes: Vec<usize>,
    pub has_boundary: bool,
    pub has_initial: bool,
    /// Observations include the forcing term.
    pub observes_forcing: bool,
    /// `(E[u^2] - 1)^2` normalization penalty.
    pub normalization: bool,
}

pub fn make_regression_uq() -> ProblemDef {
    ProblemDef {
        kind: ProblemKind::RegressionUq,
        domain: Domain::new(Shape::Interval { lo: -1.0, hi: 1.0 }, None).expect("valid"),
        params: Vec::new(),
        coord_names: vec!["x"],
        axes: Vec::new(),
        has_boundary: false,
        has_initial: false,
        observes_forcing: false,
        normalization: false,
    }
}

pub fn make_sin3() -> ProblemDef {
    ProblemDef {
        kind: ProblemKind::Sin3,
        domain: Domain::new(Shape::Interval { lo: -1.0, hi: 1.0 }, None).expect("valid"),
        params: vec![ParamSpec {
            name: "omega".into(),
            link: Link::Identity,
            true_value: 6.0,
        }],
        coord_names: vec!["x"],
        axes: Vec::new(),
        has_boundary: false,
        has_initial: false,
        observes_forcing: false,
        normalization: false,
    }
}

pub fn make_heat1d() -> ProblemDef {
    let param = |name: &str| ParamSpec {
        name: name.into(),
        link: Link::Identity,
        true_value: 1.0,
    };
    ProblemDef {
        kind: ProblemKind::Heat1d,
        domain: Domain::new(Shape::Interval { lo: -1.0, hi: 1.0 }, Some((0.0, 1.0))).expect("valid"),
        params: vec![param("D"), param("alpha")],
        coord_names: vec!["t", "x"],
        axes: vec![0, 1],
        has_boundary: true,
        has_initial: true,
        observes_forcing: false,
        normalization: false,
    }
}

pub fn make_rd2d() -> ProblemDef {
    ProblemDef {
        kind: ProblemKind::Rd2d,
        domain: Domain::new(
            Shape::Rectangle {
                lo: [-1.0, -1.0],
                hi: [1.0, 1.0],
            },
            None,
        )
        .expect("valid"),
        params: vec![ParamSpec {
            name: "k".into(),
            link: Link::Identity,
            true_value: 1.0,
        }],
        coord_names: vec!["x", "y"],
        axes: vec![0, 1],
        has_boundary: true,
        has_initial: false,
        observes_forcing: true,
        normalization: false,
    }
}

pub fn make_helmholtz3d() -> ProblemDef {
    ProblemDef {
        kind: ProblemKind::Helmholtz3d,
        domain: Domain::new(Shape::UnitBall, None).expect("valid"),
        params: vec![ParamSpec {
            name: "lambda".into(),
            link: Link::Identity,
            true_value: DIPOLE_K * DIPOLE_K,
        }],
        coord_names: vec!["x", "y", "z"],
        axes: vec![0, 1, 2],
        has_boundary: true,
        has_initial: false,
        observes_forcing: false,
        normalization: true,
    }
}

/// Regression noise variance `(1 - |x|)/16`, clamped at zero outside [-1, 1].
pub fn regression_noise_var(x: f64) -> f64 {
    ((1.0 - x.abs()) / 16.0).max(0.0)
}

impl ProblemDef {
    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn coord_dim(&self) -> usize {
        self.domain.coord_dim()
    }

    pub fn true_params(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.true_value).collect()
    }

    pub fn links(&self) -> Vec<Link> {
        self.params.iter().map(|p| p.link).collect()
    }

    pub fn has_physics(&self) -> bool {
        self.kind != ProblemKind::RegressionUq
    }

    /// Exact solution, where one is known.
    pub fn exact(&self, p: &[f64]) -> Option<f64> {
        match self.kind {
            ProblemKind::RegressionUq => Some((p[0] / 2.0).sin()),
            ProblemKind::Sin3 => Some((6.0 * p[0]).sin().powi(3)),
            ProblemKind::Heat1d => Some((-p[0]).exp() * (PI * p[1]).sin()),
            ProblemKind::Rd2d => Some((PI * p[0]).sin() * (PI * p[1]).sin()),
            ProblemKind::Helmholtz3d => Some(dipole_mode(p).value),
        }
    }

    /// Analytic value and partial derivatives of the exact solution along
    /// every coordinate axis.
    pub fn exact_jets(&self, p: &[f64]) -> Option<ExactJets> {
        match self.kind {
            ProblemKind::Heat1d => {
                let (t, x) = (p[0], p[1]);
                let e = (-t).exp();
                let (s, c) = (PI * x).sin_cos();
                Some(ExactJets {
                    value: e * s,
                    first: vec![-e * s, PI * e * c],
                    second: vec![e * s, -PI * PI * e * s],
                })
            }
            ProblemKind::Rd2d => {
                let (sx, cx) = (PI * p[0]).sin_cos();
                let (sy, cy) = (PI * p[1]).sin_cos();
                let u = sx * sy;
                Some(ExactJets {
                    value: u,
                    first: vec![PI * cx * sy, PI * sx * cy],
                    second: vec![-PI * PI * u, -PI * PI * u],
                })
            }
            ProblemKind::Helmholtz3d => Some(dipole_mode(p)),
            ProblemKind::Sin3 | ProblemKind::RegressionUq => self.exact(p).map(|v| ExactJets {
                value: v,
                first: Vec::new(),
                second: Vec::new(),
            }),
        }
    }

    /// Forcing term of the reaction-diffusion problem, consistent with the
    /// exact solution: `f = -(pi^2/50) u + u^2`.
    pub fn forcing(&self, p: &[f64]) -> Option<f64> {
        match self.kind {
            ProblemKind::Rd2d => {
                let u = self.exact(p)?;
                Some(-(PI * PI / 50.0) * u + u * u)
            }
            _ => None,
        }
    }

    /// Residual functional. `forcing` overrides the oracle forcing where the
    /// problem observes it. Returns `None` for physics-free problems.
    pub fn residual<'t>(
        &self,
        p: &[f64],
        u: &FieldJets<'t>,
        phys: &[Var<'t>],
        forcing: Option<f64>,
    ) -> Option<Var<'t>> {
        match self.kind {
            ProblemKind::RegressionUq => None,
            ProblemKind::Sin3 => Some(u.value - (phys[0] * p[0]).sin().powi(3)),
            ProblemKind::Heat1d => {
                let (t, x) = (p[0], p[1]);
                let (d, alpha) = (phys[0], phys[1]);
                let decay = (alpha * (-t)).exp();
                let rhs = decay * ((1.0 - PI * PI) * (PI * x).sin());
                Some(u.d(0) - d * u.dd(1) + rhs)
            }
            ProblemKind::Rd2d => {
                let f = forcing.or_else(|| self.forcing(p))?;
                let lap = u.dd(0) + u.dd(1);
                Some(lap * RD_DIFFUSION + phys[0] * u.value.square() - f)
            }
            ProblemKind::Helmholtz3d => Some(-u.laplacian() - phys[0] * u.value),
        }
    }

    /// Plain-number residual from analytic jets, for oracles and field maps.
    pub fn residual_value(&self, p: &[f64], jets: &ExactJets, phys: &[f64], forcing: Option<f64>) -> Option<f64> {
        let tape = Tape::new();
        let field = jets.to_field(&tape, &self.axes);
        let ph: Vec<Var<'_>> = phys.iter().map(|&v| tape.constant(v)).collect();
        self.residual(p, &field, &ph, forcing).map(Var::value)
    }

    /// Dirichlet target on the boundary.
    pub fn boundary_target(&self, _p: &[f64]) -> f64 {
        0.0
    }

    pub fn initial_target(&self, p: &[f64]) -> f64 {
        self.exact(p).unwrap_or(0.0)
    }
}

/// Sensor counts for dataset synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorLayout {
    pub n_interior: usize,
    pub n_boundary_per_edge: usize,
    pub n_initial: usize,
}

/// Observed sensors: `u` always, `f` for problems observing the forcing.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub points: Array2<f64>,
    pub u: Array1<f64>,
    pub f: Option<Array1<f64>>,
    pub noise_sigma: f64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            points: self.points.select(ndarray::Axis(0), idx),
            u: self.u.select(ndarray::Axis(0), idx),
            f: self.f.as_ref().map(|f| f.select(ndarray::Axis(0), idx)),
            noise_sigma: self.noise_sigma,
        }
    }

    pub fn write_csv(&self, path: &Path, coord_names: &[&str]) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<&str> = coord_names.to_vec();
        header.extend(["u", "f"]);
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.points.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.u[i].to_string());
            rec.push(self.f.as_ref().map(|f| f[i].to_string()).unwrap_or_default());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, coord_dim: usize) -> Result<Dataset> {
        let mut r = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        let mut u = Vec::new();
        let mut f = Vec::new();
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::invalid(format!("{}: bad number '{s}': {e}", path.display())))
        };
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != coord_dim + 2 {
                return Err(Error::invalid(format!(
                    "{}: expected {} columns, got {}",
                    path.display(),
                    coord_dim + 2,
                    rec.len()
                )));
            }
            rows.push((0..coord_dim).map(|j| parse(&rec[j])).collect::<Result<Vec<_>>>()?);
            u.push(parse(&rec[coord_dim])?);
            let fs = &rec[coord_dim + 1];
            f.push(if fs.is_empty() { None } else { Some(parse(fs)?) });
        }
        let f = if f.iter().all(Option::is_some) && !f.is_empty() {
            Some(f.into_iter().map(|v| v.expect("checked")).collect())
        } else {
            None
        };
        Ok(Dataset {
            points: to_array(&rows, coord_dim),
            u: Array1::from(u),
            f,
            noise_sigma: 0.0,
        })
    }
}

/// Draws sensors uniformly in the domain and observes the exact solution
/// (and forcing, if observed) with i.i.d. Gaussian noise. For the regression
/// problem the noise is the state-dependent model instead.
pub fn synthesize_dataset(
    problem: &ProblemDef,
    layout: &SensorLayout,
    noise_sigma: f64,
    rng: &mut Rng,
) -> Result<Dataset> {
    if noise_sigma < 0.0 {
        return Err(Error::invalid("noise sigma must be nonnegative"));
    }
    let points = problem.domain.sample_interior(layout.n_interior, rng);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut u = Array1::zeros(points.nrows());
    let mut f = problem
        .observes_forcing
        .then(|| Array1::zeros(points.nrows()));
    for (i, p) in points.rows().into_iter().enumerate() {
        let p = p.to_vec();
        let exact = problem
            .exact(&p)
            .ok_or_else(|| Error::invalid("problem has no exact oracle"))?;
        let sigma = if problem.kind == ProblemKind::RegressionUq {
            regression_noise_var(p[0]).sqrt()
        } else {
            noise_sigma
        };
        u[i] = exact + sigma * noise.sample(rng);
        if let Some(f) = f.as_mut() {
            let forcing = problem.forcing(&p).expect("observed forcing has an oracle");
            f[i] = forcing + noise_sigma * noise.sample(rng);
        }
    }
    Ok(Dataset {
        points,
        u,
        f,
        noise_sigma,
    })
}

/// Regression test sets: in-distribution noisy samples on [-1, 1] and
/// out-of-distribution noiseless targets on [-1.5, -1) U (1, 1.5].
pub fn regression_test_sets(n_idd: usize, n_ood: usize, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
    let problem = make_regression_uq();
    let idd = synthesize_dataset(
        &problem,
        &SensorLayout {
            n_interior: n_idd,
            n_boundary_per_edge: 0,
            n_initial: 0,
        },
        0.0,
        rng,
    )?;
    let mut xs = Vec::with_capacity(n_ood);
    for i in 0..n_ood {
        let mag = 1.0 + 0.5 * (1.0 - rng.random::<f64>());
        xs.push(if i % 2 == 0 { -mag } else { mag });
    }
    let ood = Dataset {
        u: xs.iter().map(|&x| (x / 2.0).sin()).collect(),
        points: Array2::from_shape_vec((n_ood, 1), xs).expect("shape"),
        f: None,
        noise_sigma: 0.0,
    };
    Ok((idd, ood))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};

    #[test]
    fn bessel_values() {
        assert_eq!(spherical_bessel(0, 0.0).unwrap(), 1.0);
        assert!(spherical_bessel(0, PI).unwrap().abs() < 1e-15);
        assert!(spherical_bessel(1, DIPOLE_K).unwrap().abs() < 1e-12);
        assert!(spherical_bessel(1, 4.49341).unwrap().abs() < 1e-5);
        let x = 1e-5;
        assert!((spherical_bessel(1, x).unwrap() / x - 1.0 / 3.0).abs() < 1e-10);
        // continuity across the series switch
        let a = spherical_bessel(1, 0.999e-3).unwrap();
        let b = spherical_bessel(1, 1.001e-3).unwrap();
        assert!((a - b).abs() < 1e-6);
        assert!(spherical_bessel(2, 1.0).is_err());
        assert!(spherical_bessel(0, -1.0).is_err());
    }

    #[test]
    fn radial_helpers_continuous_at_switch() {
        let lo = dipole_radial(1.0 - 1e-12);
        let hi = dipole_radial(1.0 + 1e-12);
        for (a, b) in lo.iter().zip(&hi) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn dipole_normalization_by_quadrature() {
        let n = 20_000;
        let h = 1.0 / n as f64;
        let mut sum = 0.0;
        for i in 0..=n {
            let r = i as f64 * h;
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            sum += w * spherical_bessel(1, DIPOLE_K * r).unwrap().powi(2) * r * r;
        }
        let simpson = sum * h / 3.0;
        assert!((simpson - dipole_norm_integral()).abs() < 1e-12);
    }

    #[test]
    fn dipole_mean_square_is_one() {
        let ball = make_helmholtz3d().domain;
        let mut rng = substream(3, Stream::Validation);
        let pts = ball.sample_interior(200_000, &mut rng);
        let ms: f64 = pts
            .rows()
            .into_iter()
            .map(|p| dipole_mode(&p.to_vec()).value.powi(2))
            .sum::<f64>()
            / 200_000.0;
        assert!((ms - 1.0).abs() < 0.02, "{ms}");
    }

    #[test]
    fn dipole_derivatives_match_finite_differences() {
        let mut rng = substream(4, Stream::Validation);
        let ball = make_helmholtz3d().domain;
        let pts = ball.sample_interior(30, &mut rng);
        let h = 1e-4;
        for p in pts.rows() {
            let p = p.to_vec();
            let j = dipole_mode(&p);
            for a in 0..3 {
                let mut pp = p.clone();
                pp[a] += h;
                let mut pm = p.clone();
                pm[a] -= h;
                let (fp, fm) = (dipole_mode(&pp).value, dipole_mode(&pm).value);
                assert!(((fp - fm) / (2.0 * h) - j.first[a]).abs() < 1e-6);
                assert!(((fp - 2.0 * j.value + fm) / (h * h) - j.second[a]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn exact_values() {
        assert!((make_heat1d().exact(&[0.0, 0.5]).unwrap() - 1.0).abs() < 1e-15);
        assert!((make_rd2d().exact(&[0.5, 0.5]).unwrap() - 1.0).abs() < 1e-15);
        assert!((make_rd2d().forcing(&[0.5, 0.5]).unwrap() - (1.0 - PI * PI / 50.0)).abs() < 1e-15);
        assert!((make_sin3().exact(&[PI / 12.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(make_helmholtz3d().exact(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(regression_noise_var(0.0), 1.0 / 16.0);
        assert_eq!(regression_noise_var(1.0), 0.0);
        assert!((make_regression_uq().exact(&[PI / 3.0]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn residual_examples() {
        let heat = make_heat1d();
        let p = [0.3, 0.7];
        let j = heat.exact_jets(&p).unwrap();
        assert!(heat.residual_value(&p, &j, &[1.0, 1.0], None).unwrap().abs() < 1e-12);
        let r = heat.residual_value(&p, &j, &[2.0, 1.0], None).unwrap();
        let expect = PI * PI * (-0.3f64).exp() * (0.7 * PI).sin();
        assert!((r - expect).abs() < 1e-12);
        assert!((r - 5.92).abs() < 0.01);

        let sin3 = make_sin3();
        let x = [PI / 12.0];
        let j = sin3.exact_jets(&x).unwrap();
        assert!(sin3.residual_value(&x, &j, &[6.0], None).unwrap().abs() < 1e-15);
        let r = sin3.residual_value(&x, &j, &[5.0], None).unwrap();
        assert!((r - (1.0 - (5.0 * PI / 12.0).sin().powi(3))).abs() < 1e-15);

        assert!(make_regression_uq().residual_value(&[0.0], &j, &[], None).is_none());
    }

    #[test]
    fn ball_sampler_statistics() {
        let ball = make_helmholtz3d().domain;
        let mut rng = substream(1, Stream::Collocation);
        let pts = ball.sample_interior(100_000, &mut rng);
        let radii: Vec<f64> = pts.rows().into_iter().map(|p| p.dot(&p).sqrt()).collect();
        assert!(radii.iter().all(|&r| r < 1.0));
        let inner = radii.iter().filter(|&&r| r < 0.5).count() as f64 / 1e5;
        assert!((inner - 0.125).abs() < 0.01);
        let sphere = ball.sample_boundary(1000, &mut rng);
        for p in sphere.rows() {
            assert!((p.dot(&p).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn boundary_and_initial_samplers() {
        let mut rng = substream(2, Stream::Collocation);
        let rd = make_rd2d().domain;
        let b = rd.sample_boundary(25, &mut rng);
        assert_eq!(b.nrows(), 100);
        for p in b.rows() {
            assert!(p.iter().any(|c| c.abs() == 1.0));
            assert!(p.iter().all(|c| c.abs() <= 1.0));
        }
        let line = Domain::new(Shape::Interval { lo: -1.0, hi: 1.0 }, None).unwrap();
        let e = line.sample_boundary(6, &mut rng);
        assert!(e.iter().all(|&x| x == -1.0 || x == 1.0));
        let heat = make_heat1d().domain;
        let init = heat.sample_initial(10, &mut rng).unwrap();
        assert!(init.column(0).iter().all(|&t| t == 0.0));
        assert!(line.sample_initial(3, &mut rng).is_err());
        let hb = heat.sample_boundary(10, &mut rng);
        assert!(hb.column(1).iter().all(|&x| x.abs() == 1.0));
        let inside = rd.sample_interior(500, &mut rng);
        assert!(inside.iter().all(|&c| (-1.0..=1.0).contains(&c)));
    }

    #[test]
    fn samplers_deterministic() {
        let d = make_heat1d().domain;
        let a = d.sample_interior(50, &mut substream(9, Stream::Collocation));
        let b = d.sample_interior(50, &mut substream(9, Stream::Collocation));
        assert_eq!(a, b);
    }

    #[test]
    fn dataset_synthesis() {
        let heat = make_heat1d();
        let layout = SensorLayout {
            n_interior: 100,
            n_boundary_per_edge: 0,
            n_initial: 0,
        };
        let ds = synthesize_dataset(&heat, &layout, 0.0, &mut substream(1, Stream::Data)).unwrap();
        assert_eq!(ds.len(), 100);
        for (p, u) in ds.points.rows().into_iter().zip(ds.u.iter()) {
            assert_eq!(heat.exact(&p.to_vec()).unwrap(), *u);
        }
        let rd = make_rd2d();
        let layout = SensorLayout {
            n_interior: 100_000,
            ..layout
        };
        let ds = synthesize_dataset(&rd, &layout, 0.01, &mut substream(1, Stream::Data)).unwrap();
        let resid: Vec<f64> = ds
            .points
            .rows()
            .into_iter()
            .zip(ds.u.iter())
            .map(|(p, u)| u - rd.exact(&p.to_vec()).unwrap())
            .collect();
        let std = (resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64).sqrt();
        assert!((std / 0.01 - 1.0).abs() < 0.02);
        assert!(ds.f.is_some());
    }

    #[test]
    fn dataset_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let rd = make_rd2d();
        let layout = SensorLayout {
            n_interior: 7,
            n_boundary_per_edge: 0,
            n_initial: 0,
        };
        let ds = synthesize_dataset(&rd, &layout, 0.01, &mut substream(5, Stream::Data)).unwrap();
        ds.write_csv(&path, &rd.coord_names).unwrap();
        let back = Dataset::read_csv(&path, 2).unwrap();
        assert_eq!(back.points, ds.points);
        assert_eq!(back.u, ds.u);
        assert_eq!(back.f, ds.f);
    }

    #[test]
    fn regression_split() {
        let (idd, ood) = regression_test_sets(200, 100, &mut substream(1, Stream::Validation)).unwrap();
        assert!(idd.points.iter().all(|x| x.abs() <= 1.0));
        assert!(ood.points.iter().all(|x| x.abs() > 1.0 && x.abs() <= 1.5));
        assert_eq!(ood.len(), 100);
    }
}
