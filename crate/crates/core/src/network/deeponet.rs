use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::kernel::{affine_backward, affine_forward, tanh_backward, tanh_forward, Jets, MlpPass, TanhCache};
use super::{Activation, DenseLayer, Link, Mlp};
use crate::autodiff::{FieldJets, Jet2, Tape, Var};
use crate::error::{check_dim, Error, Result};
use crate::rng::{substream, Stream};

/// How the physical parameters are read out of the trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ParamReadout {
    /// The last `P` trunk channels, through the per-parameter link.
    #[default]
    Trunk,
    /// `link(mu + exp(log_sigma) * latent[p])` with trainable scalars, so the
    /// approximate posterior is Gaussian before the link and the KL term has a
    /// closed form.
    Affine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepOnetSpec {
    pub coord_dim: usize,
    pub latent_dim: usize,
    pub branch_hidden: Vec<usize>,
    pub trunk_hidden: Vec<usize>,
    /// Branch output width `H`.
    pub width: usize,
    /// One link per physical parameter.
    #[serde(default)]
    pub links: Vec<Link>,
    /// Initial pre-link value of each physical parameter (trunk output bias
    /// or affine mean). Empty means zero.
    #[serde(default)]
    pub param_init: Vec<f64>,
    #[serde(default)]
    pub log_var: bool,
    #[serde(default)]
    pub output_activation: Activation,
    #[serde(default)]
    pub readout: ParamReadout,
    /// Antisymmetrize the mean field in this coordinate: `u(x) = M(x) - M(Rx)`
    /// with `R` the reflection of that axis.
    #[serde(default)]
    pub odd_axis: Option<usize>,
    /// Carry a trainable log residual variance after the network parameters.
    #[serde(default)]
    pub residual_log_var: bool,
}

impl DeepOnetSpec {
    pub fn n_params(&self) -> usize {
        self.links.len()
    }

    pub fn n_outputs(&self) -> usize {
        1 + self.log_var as usize
    }

    fn trunk_phys(&self) -> usize {
        match self.readout {
            ParamReadout::Trunk => self.n_params(),
            ParamReadout::Affine => 0,
        }
    }

    fn affine_phys(&self) -> usize {
        self.n_params() - self.trunk_phys()
    }

    pub fn branch_widths(&self) -> Vec<usize> {
        let mut w = vec![self.coord_dim];
        w.extend(&self.branch_hidden);
        w.push(self.width);
        w
    }

    pub fn trunk_widths(&self) -> Vec<usize> {
        let mut w = vec![self.latent_dim];
        w.extend(&self.trunk_hidden);
        w.push(self.width + self.trunk_phys());
        w
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.coord_dim == 0 || self.latent_dim == 0 || self.width == 0 {
            return bad("coordinate, latent and branch widths must be positive".into());
        }
        if self.branch_hidden.is_empty() || self.trunk_hidden.is_empty() {
            return bad("branch and trunk need at least one hidden layer".into());
        }
        if !self.param_init.is_empty() && self.param_init.len() != self.n_params() {
            return bad(format!(
                "param_init has {} entries for {} parameters",
                self.param_init.len(),
                self.n_params()
            ));
        }
        if self.readout == ParamReadout::Affine && self.latent_dim < self.n_params() {
            return bad("affine readout needs latent_dim >= number of parameters".into());
        }
        if let Some(a) = self.odd_axis {
            if a >= self.coord_dim {
                return bad(format!("odd axis {a} out of range"));
            }
        }
        Ok(())
    }
}

/// Point evaluation result.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOut {
    pub mean: f64,
    pub log_var: Option<f64>,
    pub phys: Vec<f64>,
}

/// Branch/trunk operator network with variance and physical-parameter heads.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepOnet {
    pub spec: DeepOnetSpec,
    pub branch: Mlp,
    pub trunk: Mlp,
    pub output: DenseLayer,
    pub affine_mu: Vec<f64>,
    pub affine_log_sigma: Vec<f64>,
    pub residual_log_var: Option<f64>,
}

/// Parameter nodes of a model registered on a tape, in flat order.
#[derive(Debug, Clone)]
pub struct ModelVars<'t> {
    pub branch: Vec<Var<'t>>,
    pub trunk: Vec<Var<'t>>,
    pub output: Vec<Var<'t>>,
    pub affine_mu: Vec<Var<'t>>,
    pub affine_log_sigma: Vec<Var<'t>>,
    pub residual_log_var: Option<Var<'t>>,
}

/// Tape evaluation at one point.
#[derive(Debug, Clone)]
pub struct TapeOutput<'t> {
    pub mean: FieldJets<'t>,
    pub log_var: Option<Var<'t>>,
    pub phys: Vec<Var<'t>>,
}

struct Copy1 {
    branch: MlpPass,
    product: Jets,
    act: Option<TanhCache>,
}

/// Saved state of one batched forward pass.
pub struct BatchPass {
    main: Copy1,
    mirror: Option<Copy1>,
    trunk: MlpPass,
    raw_phys: Array2<f64>,
    latent: Array2<f64>,
    /// `N x 1` mean field jets along the requested axes.
    pub mean: Jets,
    pub log_var: Option<Array1<f64>>,
    /// `N x P` physical parameter samples, one row per point.
    pub phys: Array2<f64>,
}

/// Adjoints of a scalar objective with respect to a [`BatchPass`]'s outputs.
#[derive(Debug, Clone)]
pub struct OutputAdjoints {
    pub mean: Jets,
    pub log_var: Option<Array1<f64>>,
    pub phys: Array2<f64>,
}

impl DeepOnet {
    pub fn new(spec: DeepOnetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = substream(seed, Stream::Init);
        let branch = Mlp::new(&spec.branch_widths(), Activation::Tanh, &mut rng)?;
        let mut trunk = Mlp::new(&spec.trunk_widths(), Activation::Identity, &mut rng)?;
        let output = DenseLayer::xavier(spec.width, spec.n_outputs(), &mut rng);
        let init = |p: usize| spec.param_init.get(p).copied().unwrap_or(0.0);
        let last = trunk.layers.last_mut().expect("trunk has layers");
        for p in 0..spec.trunk_phys() {
            last.biases[spec.width + p] = init(p);
        }
        let na = spec.affine_phys();
        Ok(DeepOnet {
            affine_mu: (0..na).map(init).collect(),
            affine_log_sigma: vec![0.0; na],
            residual_log_var: spec.residual_log_var.then_some(0.0),
            branch,
            trunk,
            output,
            spec,
        })
    }

    pub fn param_count(&self) -> usize {
        self.branch.param_count()
            + self.trunk.param_count()
            + self.output.param_count()
            + 2 * self.affine_mu.len()
            + self.residual_log_var.is_some() as usize
    }

    /// Flat index of the first affine readout mean.
    pub fn affine_offset(&self) -> usize {
        self.branch.param_count() + self.trunk.param_count() + self.output.param_count()
    }

    /// Flat index of the residual log variance, if learned.
    pub fn residual_log_var_index(&self) -> Option<usize> {
        self.residual_log_var.map(|_| self.param_count() - 1)
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = self.branch.params();
        out.extend(self.trunk.params());
        self.output.write_params(&mut out);
        out.extend(&self.affine_mu);
        out.extend(&self.affine_log_sigma);
        out.extend(self.residual_log_var);
        out
    }

    pub fn set_params(&mut self, src: &[f64]) -> Result<()> {
        check_dim("model parameters", self.param_count(), src.len())?;
        let nb = self.branch.param_count();
        let nt = self.trunk.param_count();
        self.branch.set_params(&src[..nb])?;
        self.trunk.set_params(&src[nb..nb + nt])?;
        let mut off = nb + nt;
        off += self.output.read_params(&src[off..]);
        let na = self.affine_mu.len();
        self.affine_mu.copy_from_slice(&src[off..off + na]);
        self.affine_log_sigma
            .copy_from_slice(&src[off + na..off + 2 * na]);
        if let Some(r) = self.residual_log_var.as_mut() {
            *r = src[off + 2 * na];
        }
        Ok(())
    }

    fn mirror_point(&self, x: &[f64]) -> Option<Vec<f64>> {
        self.spec.odd_axis.map(|a| {
            let mut m = x.to_vec();
            m[a] = -m[a];
            m
        })
    }

    fn phys_value(&self, g: &[f64], latent: &[f64]) -> Vec<f64> {
        let h = self.spec.width;
        self.spec
            .links
            .iter()
            .enumerate()
            .map(|(p, link)| {
                let raw = match self.spec.readout {
                    ParamReadout::Trunk => g[h + p],
                    ParamReadout::Affine => {
                        self.affine_mu[p] + self.affine_log_sigma[p].exp() * latent[p]
                    }
                };
                link.apply(raw)
            })
            .collect()
    }

    fn head_value(&self, x: &[f64], g: &[f64]) -> Result<Vec<f64>> {
        let h = self.branch.eval(x)?;
        let prod: Vec<f64> = h.iter().zip(g).map(|(a, b)| a * b).collect();
        let mut out = self.output.eval(&prod);
        out[0] = self.spec.output_activation.apply(out[0]);
        Ok(out)
    }

    pub fn eval(&self, coords: &[f64], latent: &[f64]) -> Result<ForwardOut> {
        check_dim("model coordinates", self.spec.coord_dim, coords.len())?;
        let g = self.trunk.eval(latent)?;
        let out = self.head_value(coords, &g)?;
        let mut mean = out[0];
        if let Some(m) = self.mirror_point(coords) {
            mean -= self.head_value(&m, &g)?[0];
        }
        Ok(ForwardOut {
            mean,
            log_var: out.get(1).copied(),
            phys: self.phys_value(&g, latent),
        })
    }

    pub fn register<'t>(&self, tape: &'t Tape) -> ModelVars<'t> {
        let reg = |v: Vec<f64>| -> Vec<Var<'t>> { v.into_iter().map(|p| tape.param(p)).collect() };
        let mut output = Vec::new();
        self.output.write_params(&mut output);
        ModelVars {
            branch: reg(self.branch.params()),
            trunk: reg(self.trunk.params()),
            output: reg(output),
            affine_mu: reg(self.affine_mu.clone()),
            affine_log_sigma: reg(self.affine_log_sigma.clone()),
            residual_log_var: self.residual_log_var.map(|r| tape.param(r)),
        }
    }

    fn head_jets<'t>(
        &self,
        tape: &'t Tape,
        vars: &ModelVars<'t>,
        x: &[f64],
        slopes: &[f64],
        g: &[Var<'t>],
    ) -> Result<Vec<Jet2<'t>>> {
        let xs: Vec<Jet2<'t>> = x
            .iter()
            .zip(slopes)
            .map(|(&v, &s)| Jet2::coordinate(tape.constant(v), s))
            .collect();
        let h = self.branch.forward_jets(&vars.branch, &xs)?;
        let prod: Vec<Jet2<'t>> = h.iter().zip(g).map(|(a, &b)| a.mul_var(b)).collect();
        let mut out = self.output.forward_jets(&vars.output, &prod);
        out[0] = self.spec.output_activation.apply_jet(out[0]);
        Ok(out)
    }

    /// Evaluates the model on `tape`, with mean-field jets along `axes`.
    pub fn forward_tape<'t>(
        &self,
        tape: &'t Tape,
        vars: &ModelVars<'t>,
        coords: &[f64],
        latent: &[f64],
        axes: &[usize],
    ) -> Result<TapeOutput<'t>> {
        let d = self.spec.coord_dim;
        check_dim("model coordinates", d, coords.len())?;
        check_dim("model latent", self.spec.latent_dim, latent.len())?;
        if let Some(&a) = axes.iter().find(|&&a| a >= d) {
            return Err(Error::invalid(format!("derivative axis {a} out of range")));
        }
        let lat: Vec<Var<'t>> = latent.iter().map(|&v| tape.constant(v)).collect();
        let g = self.trunk.forward_vars(&vars.trunk, &lat)?;
        let mirror = self.mirror_point(coords);
        let field = |slopes: &[f64]| -> Result<(Jet2<'t>, Option<Var<'t>>)> {
            let out = self.head_jets(tape, vars, coords, slopes, &g)?;
            let mut mean = out[0];
            if let (Some(m), Some(a)) = (&mirror, self.spec.odd_axis) {
                let mut ms = slopes.to_vec();
                ms[a] = -ms[a];
                mean = mean - self.head_jets(tape, vars, m, &ms, &g)?[0];
            }
            Ok((mean, out.get(1).map(|j| j.v)))
        };
        let (base, log_var) = field(&vec![0.0; d])?;
        let mut first = Vec::with_capacity(axes.len());
        let mut second = Vec::with_capacity(axes.len());
        for &a in axes {
            let mut slopes = vec![0.0; d];
            slopes[a] = 1.0;
            let (j, _) = field(&slopes)?;
            first.push(j.d);
            second.push(j.dd);
        }
        let h = self.spec.width;
        let phys = self
            .spec
            .links
            .iter()
            .enumerate()
            .map(|(p, link)| {
                let raw = match self.spec.readout {
                    ParamReadout::Trunk => g[h + p],
                    ParamReadout::Affine => {
                        vars.affine_mu[p] + vars.affine_log_sigma[p].exp() * latent[p]
                    }
                };
                link.apply_var(raw)
            })
            .collect();
        Ok(TapeOutput {
            mean: FieldJets {
                value: base.v,
                axes: axes.to_vec(),
                first,
                second,
            },
            log_var,
            phys,
        })
    }

    /// Physical parameters for one latent draw, on the tape.
    pub fn phys_tape<'t>(&self, tape: &'t Tape, vars: &ModelVars<'t>, latent: &[f64]) -> Result<Vec<Var<'t>>> {
        check_dim("model latent", self.spec.latent_dim, latent.len())?;
        let h = self.spec.width;
        let g = match self.spec.readout {
            ParamReadout::Trunk => {
                let lat: Vec<Var<'t>> = latent.iter().map(|&v| tape.constant(v)).collect();
                self.trunk.forward_vars(&vars.trunk, &lat)?
            }
            ParamReadout::Affine => Vec::new(),
        };
        Ok(self
            .spec
            .links
            .iter()
            .enumerate()
            .map(|(p, link)| {
                let raw = match self.spec.readout {
                    ParamReadout::Trunk => g[h + p],
                    ParamReadout::Affine => {
                        vars.affine_mu[p] + vars.affine_log_sigma[p].exp() * latent[p]
                    }
                };
                link.apply_var(raw)
            })
            .collect())
    }

    fn copy_forward(&self, coords: ArrayView2<'_, f64>, seeds: &[Vec<f64>], modulation: &Array2<f64>) -> (Copy1, Jets) {
        let branch = self.branch.forward_batch(Jets::seeded(coords, seeds), None);
        let product = branch.output.times(modulation);
        let out = affine_forward(&self.output, &product);
        let mean = out.column(0);
        let (mean, act) = match self.spec.output_activation {
            Activation::Tanh => {
                let (m, c) = tanh_forward(mean);
                (m, Some(c))
            }
            Activation::Identity => (mean, None),
        };
        let mut head = out;
        head.v.column_mut(0).assign(&mean.v.column(0));
        for (h, m) in head.d.iter_mut().zip(&mean.d) {
            h.column_mut(0).assign(&m.column(0));
        }
        for (h, m) in head.dd.iter_mut().zip(&mean.dd) {
            h.column_mut(0).assign(&m.column(0));
        }
        (
            Copy1 {
                branch,
                product,
                act,
            },
            head,
        )
    }

    /// Batched forward pass. `latent` has one row per coordinate row.
    pub fn forward_batch(
        &self,
        coords: ArrayView2<'_, f64>,
        latent: ArrayView2<'_, f64>,
        axes: &[usize],
    ) -> Result<BatchPass> {
        let d = self.spec.coord_dim;
        check_dim("batch coordinates", d, coords.ncols())?;
        check_dim("batch latent", self.spec.latent_dim, latent.ncols())?;
        check_dim("batch latent rows", coords.nrows(), latent.nrows())?;
        if let Some(&a) = axes.iter().find(|&&a| a >= d) {
            return Err(Error::invalid(format!("derivative axis {a} out of range")));
        }
        let h = self.spec.width;
        let trunk = self.trunk.forward_batch(Jets::values(latent.to_owned()), None);
        let modulation = trunk.output.v.slice(s![.., ..h]).to_owned();
        let seeds: Vec<Vec<f64>> = axes
            .iter()
            .map(|&a| {
                let mut e = vec![0.0; d];
                e[a] = 1.0;
                e
            })
            .collect();
        let (main, head) = self.copy_forward(coords, &seeds, &modulation);
        let mut mean = head.column(0);
        let mirror = self.spec.odd_axis.map(|a| {
            let mut mc = coords.to_owned();
            mc.column_mut(a).mapv_inplace(|v| -v);
            let ms: Vec<Vec<f64>> = seeds
                .iter()
                .map(|e| {
                    let mut e = e.clone();
                    e[a] = -e[a];
                    e
                })
                .collect();
            let (copy, mhead) = self.copy_forward(mc.view(), &ms, &modulation);
            let mut neg = mhead.column(0);
            neg.scale(-1.0);
            mean.add_assign(&neg);
            copy
        });
        let log_var = self
            .spec
            .log_var
            .then(|| head.v.column(1).to_owned());
        let n = coords.nrows();
        let np = self.spec.n_params();
        let mut raw_phys = Array2::zeros((n, np));
        for p in 0..np {
            let col = match self.spec.readout {
                ParamReadout::Trunk => trunk.output.v.column(h + p).to_owned(),
                ParamReadout::Affine => latent
                    .column(p)
                    .mapv(|l| self.affine_mu[p] + self.affine_log_sigma[p].exp() * l),
            };
            raw_phys.column_mut(p).assign(&col);
        }
        let mut phys = raw_phys.clone();
        for (p, link) in self.spec.links.iter().enumerate() {
            phys.column_mut(p).mapv_inplace(|r| link.apply(r));
        }
        Ok(BatchPass {
            main,
            mirror,
            trunk,
            raw_phys,
            latent: latent.to_owned(),
            mean,
            log_var,
            phys,
        })
    }

    fn copy_backward(
        &self,
        copy: &Copy1,
        mean_adj: &Jets,
        log_var_adj: Option<&Array1<f64>>,
        modulation: &Array2<f64>,
        g_branch: &mut [f64],
        g_output: &mut [f64],
        g_mod: &mut Array2<f64>,
    ) {
        let gm = match &copy.act {
            Some(c) => tanh_backward(c, mean_adj),
            None => mean_adj.clone(),
        };
        let n = gm.rows();
        let mut gout = Jets::zeros(n, self.spec.n_outputs(), gm.dirs());
        gout.v.column_mut(0).assign(&gm.v.column(0));
        for k in 0..gm.dirs() {
            gout.d[k].column_mut(0).assign(&gm.d[k].column(0));
            gout.dd[k].column_mut(0).assign(&gm.dd[k].column(0));
        }
        if let Some(lv) = log_var_adj {
            gout.v.column_mut(1).assign(lv);
        }
        let gp = affine_backward(&self.output, &copy.product, &gout, g_output, true)
            .expect("input adjoints requested");
        *g_mod += &gp.contract(&copy.branch.output);
        let gh = gp.times(modulation);
        self.branch.backward_batch(&copy.branch, gh, g_branch, false);
    }

    /// Accumulates into `grad` (flat order) the parameter gradient of the
    /// objective whose output adjoints are `adj`.
    pub fn backward_batch(&self, pass: &BatchPass, adj: &OutputAdjoints, grad: &mut [f64]) -> Result<()> {
        check_dim("gradient buffer", self.param_count(), grad.len())?;
        check_dim("mean adjoint directions", pass.mean.dirs(), adj.mean.dirs())?;
        let h = self.spec.width;
        let (g_branch, rest) = grad.split_at_mut(self.branch.param_count());
        let (g_trunk, rest) = rest.split_at_mut(self.trunk.param_count());
        let (g_output, rest) = rest.split_at_mut(self.output.param_count());
        let na = self.affine_mu.len();
        let (g_mu, rest) = rest.split_at_mut(na);
        let g_ls = &mut rest[..na];

        let modulation = pass.trunk.output.v.slice(s![.., ..h]).to_owned();
        let mut g_mod = Array2::zeros(modulation.dim());
        self.copy_backward(
            &pass.main,
            &adj.mean,
            adj.log_var.as_ref().filter(|_| self.spec.log_var),
            &modulation,
            g_branch,
            g_output,
            &mut g_mod,
        );
        if let Some(m) = &pass.mirror {
            let mut neg = adj.mean.clone();
            neg.scale(-1.0);
            self.copy_backward(m, &neg, None, &modulation, g_branch, g_output, &mut g_mod);
        }

        let mut g_trunk_out = Array2::zeros(pass.trunk.output.v.dim());
        g_trunk_out.slice_mut(s![.., ..h]).assign(&g_mod);
        for (p, link) in self.spec.links.iter().enumerate() {
            let slope = pass.raw_phys.column(p).mapv(|r| link.slope(r));
            let g_raw = &slope * &adj.phys.column(p);
            match self.spec.readout {
                ParamReadout::Trunk => g_trunk_out.column_mut(h + p).assign(&g_raw),
                ParamReadout::Affine => {
                    let sigma = self.affine_log_sigma[p].exp();
                    g_mu[p] += g_raw.sum();
                    g_ls[p] += (&g_raw * &pass.latent.column(p)).sum() * sigma;
                }
            }
        }
        self.trunk
            .backward_batch(&pass.trunk, Jets::values(g_trunk_out), g_trunk, false);
        Ok(())
    }

    /// Branch features for the inputs (and their mirror images, if odd).
    fn features(&self, coords: ArrayView2<'_, f64>) -> (Array2<f64>, Option<Array2<f64>>) {
        let h = self.branch.eval_batch(coords);
        let m = self.spec.odd_axis.map(|a| {
            let mut mc = coords.to_owned();
            mc.column_mut(a).mapv_inplace(|v| -v);
            self.branch.eval_batch(mc.view())
        });
        (h, m)
    }

    /// Mean (and log variance) predictions for every latent row at every
    /// coordinate row: returned arrays are `S x N`. The branch runs once.
    pub fn predict_samples(
        &self,
        coords: ArrayView2<'_, f64>,
        latents: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
        check_dim("batch coordinates", self.spec.coord_dim, coords.ncols())?;
        check_dim("batch latent", self.spec.latent_dim, latents.ncols())?;
        let h = self.spec.width;
        let (feat, mirror) = self.features(coords);
        let g = self.trunk.eval_batch(latents);
        let (s_count, n) = (latents.nrows(), coords.nrows());
        let mut means = Array2::zeros((s_count, n));
        let mut log_vars = self.spec.log_var.then(|| Array2::zeros((s_count, n)));
        let act = self.spec.output_activation;
        let head = |f: &Array2<f64>, gs: &ndarray::ArrayView1<'_, f64>| {
            let prod = f * gs;
            let mut out = prod.dot(&self.output.weights.t());
            out += &self.output.biases;
            out
        };
        for (si, gs) in g.axis_iter(Axis(0)).enumerate() {
            let gs = gs.slice(s![..h]);
            let out = head(&feat, &gs);
            let mut mean = out.column(0).mapv(|v| act.apply(v));
            if let Some(mf) = &mirror {
                mean -= &head(mf, &gs).column(0).mapv(|v| act.apply(v));
            }
            means.row_mut(si).assign(&mean);
            if let Some(lv) = log_vars.as_mut() {
                lv.row_mut(si).assign(&out.column(1));
            }
        }
        Ok((means, log_vars))
    }

    /// Physical parameter samples for each latent row, `S x P`.
    pub fn phys_samples(&self, latents: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_dim("batch latent", self.spec.latent_dim, latents.ncols())?;
        let g = self.trunk.eval_batch(latents);
        let np = self.spec.n_params();
        let mut out = Array2::zeros((latents.nrows(), np));
        for (i, (gr, lr)) in g.rows().into_iter().zip(latents.rows()).enumerate() {
            let p = self.phys_value(&gr.to_vec(), &lr.to_vec());
            out.row_mut(i).assign(&Array1::from(p));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::random_point;

    pub(crate) fn spec(coord_dim: usize, latent_dim: usize, links: Vec<Link>) -> DeepOnetSpec {
        DeepOnetSpec {
            coord_dim,
            latent_dim,
            branch_hidden: vec![6, 6],
            trunk_hidden: vec![5, 5],
            width: 4,
            links,
            param_init: Vec::new(),
            log_var: true,
            output_activation: Activation::Identity,
            readout: ParamReadout::Trunk,
            odd_axis: None,
            residual_log_var: false,
        }
    }

    fn constant_trunk(model: &mut DeepOnet, values: &[f64]) {
        for layer in &mut model.trunk.layers {
            layer.weights.fill(0.0);
            layer.biases.fill(0.0);
        }
        let last = model.trunk.layers.last_mut().unwrap();
        for (b, v) in last.biases.iter_mut().zip(values) {
            *b = *v;
        }
    }

    #[test]
    fn variance_head_adds_h_plus_one() {
        let mut s = spec(2, 2, vec![Link::Identity; 2]);
        let with = DeepOnet::new(s.clone(), 0).unwrap().param_count();
        s.log_var = false;
        let without = DeepOnet::new(s.clone(), 0).unwrap().param_count();
        assert_eq!(with - without, s.width + 1);
    }

    #[test]
    fn all_ones_modulation_is_plain_branch() {
        let mut m = DeepOnet::new(spec(2, 2, vec![Link::Identity; 2]), 1).unwrap();
        constant_trunk(&mut m, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let x = [0.3, -0.2];
        let plain = m.output.eval(&m.branch.eval(&x).unwrap());
        for lat in [[0.0, 0.0], [2.0, -1.5]] {
            let out = m.eval(&x, &lat).unwrap();
            assert!((out.mean - plain[0]).abs() < 1e-14);
            assert_eq!(out.phys, vec![1.0, 1.0]);
        }
    }

    #[test]
    fn zero_modulation_gives_output_bias() {
        let mut s = spec(1, 1, vec![]);
        s.output_activation = Activation::Tanh;
        let mut m = DeepOnet::new(s, 2).unwrap();
        constant_trunk(&mut m, &[0.0; 4]);
        m.output.biases[0] = 0.4;
        let out = m.eval(&[0.7], &[1.0]).unwrap();
        assert!((out.mean - 0.4f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn single_unit_composition_by_hand() {
        let mut s = spec(1, 1, vec![]);
        s.width = 1;
        s.log_var = false;
        s.output_activation = Activation::Tanh;
        let m = DeepOnet::new(s, 3).unwrap();
        let (x, l) = (0.37, -0.8);
        let b = m.branch.eval(&[x]).unwrap()[0];
        let tau = m.trunk.eval(&[l]).unwrap()[0];
        let w = m.output.weights[[0, 0]];
        let expect = (w * b * tau + m.output.biases[0]).tanh();
        assert!((m.eval(&[x], &[l]).unwrap().mean - expect).abs() < 1e-12);
    }

    #[test]
    fn params_roundtrip_and_residual_slot() {
        let mut s = spec(2, 2, vec![Link::Exp, Link::Identity]);
        s.readout = ParamReadout::Affine;
        s.residual_log_var = true;
        s.param_init = vec![0.5, -1.0];
        let m = DeepOnet::new(s.clone(), 4).unwrap();
        assert_eq!(m.affine_mu, vec![0.5, -1.0]);
        let mut p = m.params();
        assert_eq!(p.len(), m.param_count());
        assert_eq!(m.residual_log_var_index(), Some(p.len() - 1));
        let last = p.len() - 1;
        p[last] = 0.25;
        let mut other = DeepOnet::new(s, 99).unwrap();
        other.set_params(&p).unwrap();
        assert_eq!(other.params(), p);
        assert_eq!(other.residual_log_var, Some(0.25));
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec(2, 1, vec![Link::Identity; 2]);
        s.readout = ParamReadout::Affine;
        assert!(DeepOnet::new(s, 0).is_err());
        let mut s = spec(2, 2, vec![]);
        s.odd_axis = Some(2);
        assert!(DeepOnet::new(s, 0).is_err());
        let mut s = spec(2, 2, vec![]);
        s.branch_hidden.clear();
        assert!(DeepOnet::new(s, 0).is_err());
    }

    #[test]
    fn odd_axis_gives_antisymmetric_field() {
        let mut s = spec(3, 1, vec![Link::Identity]);
        s.odd_axis = Some(2);
        let m = DeepOnet::new(s, 5).unwrap();
        let a = m.eval(&[0.1, 0.2, 0.3], &[0.4]).unwrap().mean;
        let b = m.eval(&[0.1, 0.2, -0.3], &[0.4]).unwrap().mean;
        assert!((a + b).abs() < 1e-14);
        assert_eq!(m.eval(&[0.5, -0.1, 0.0], &[0.4]).unwrap().mean, 0.0);
    }

    fn random_adjoints(n: usize, dirs: usize, np: usize, seed: u64) -> OutputAdjoints {
        let mut rng = substream(seed, Stream::Validation);
        let mut r = |rows, cols| {
            Array2::from_shape_fn((rows, cols), |_| random_point(1, -1.0, 1.0, &mut rng)[0])
        };
        let mean = Jets {
            v: r(n, 1),
            d: (0..dirs).map(|_| r(n, 1)).collect(),
            dd: (0..dirs).map(|_| r(n, 1)).collect(),
        };
        let log_var = Some(r(n, 1).column(0).to_owned());
        OutputAdjoints {
            mean,
            log_var,
            phys: r(n, np),
        }
    }

    fn check_kernel_against_tape(s: DeepOnetSpec, axes: &[usize]) {
        let m = DeepOnet::new(s.clone(), 8).unwrap();
        let n = 3;
        let mut rng = substream(21, Stream::Data);
        let coords = Array2::from_shape_fn((n, s.coord_dim), |_| random_point(1, -1.0, 1.0, &mut rng)[0]);
        let latent = Array2::from_shape_fn((n, s.latent_dim), |_| random_point(1, -2.0, 2.0, &mut rng)[0]);
        let pass = m.forward_batch(coords.view(), latent.view(), axes).unwrap();
        let adj = random_adjoints(n, axes.len(), s.n_params(), 33);
        let mut grad = vec![0.0; m.param_count()];
        m.backward_batch(&pass, &adj, &mut grad).unwrap();

        let tape = Tape::new();
        let vars = m.register(&tape);
        let mut terms = Vec::new();
        for i in 0..n {
            let c = coords.row(i).to_vec();
            let l = latent.row(i).to_vec();
            let out = m.forward_tape(&tape, &vars, &c, &l, axes).unwrap();
            assert!((out.mean.value.value() - pass.mean.v[[i, 0]]).abs() < 1e-13);
            terms.push(out.mean.value * adj.mean.v[[i, 0]]);
            for k in 0..axes.len() {
                assert!((out.mean.first[k].value() - pass.mean.d[k][[i, 0]]).abs() < 1e-12);
                assert!((out.mean.second[k].value() - pass.mean.dd[k][[i, 0]]).abs() < 1e-12);
                terms.push(out.mean.first[k] * adj.mean.d[k][[i, 0]]);
                terms.push(out.mean.second[k] * adj.mean.dd[k][[i, 0]]);
            }
            if let Some(lv) = out.log_var {
                assert!((lv.value() - pass.log_var.as_ref().unwrap()[i]).abs() < 1e-13);
                terms.push(lv * adj.log_var.as_ref().unwrap()[i]);
            }
            for (p, v) in out.phys.iter().enumerate() {
                assert!((v.value() - pass.phys[[i, p]]).abs() < 1e-13);
                terms.push(*v * adj.phys[[i, p]]);
            }
        }
        let root = tape.sum(terms);
        let reference = tape.backward(root).unwrap().gradient();
        assert_eq!(reference.len(), grad.len());
        for (j, (a, b)) in grad.iter().zip(reference.iter()).enumerate() {
            assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()), "param {j}: {a} vs {b}");
        }
    }

    #[test]
    fn kernel_matches_tape_trunk_readout() {
        check_kernel_against_tape(spec(2, 2, vec![Link::Exp, Link::Softplus]), &[0, 1]);
    }

    #[test]
    fn kernel_matches_tape_affine_tanh_odd() {
        let mut s = spec(3, 2, vec![Link::Identity]);
        s.readout = ParamReadout::Affine;
        s.output_activation = Activation::Tanh;
        s.odd_axis = Some(1);
        s.log_var = false;
        check_kernel_against_tape(s, &[0, 1, 2]);
    }

    #[test]
    fn predict_samples_matches_eval() {
        let mut s = spec(2, 1, vec![Link::Exp]);
        s.odd_axis = Some(0);
        let m = DeepOnet::new(s, 12).unwrap();
        let coords = Array2::from_shape_vec((2, 2), vec![0.1, 0.5, -0.7, 0.2]).unwrap();
        let lat = Array2::from_shape_vec((3, 1), vec![-1.0, 0.0, 0.8]).unwrap();
        let (means, lvs) = m.predict_samples(coords.view(), lat.view()).unwrap();
        let phys = m.phys_samples(lat.view()).unwrap();
        for si in 0..3 {
            for i in 0..2 {
                let out = m.eval(&[coords[[i, 0]], coords[[i, 1]]], &[lat[[si, 0]]]).unwrap();
                assert!((means[[si, i]] - out.mean).abs() < 1e-13);
                assert!((lvs.as_ref().unwrap()[[si, i]] - out.log_var.unwrap()).abs() < 1e-13);
                assert!((phys[[si, 0]] - out.phys[0]).abs() < 1e-14);
            }
        }
    }
}
