//! Dense networks and the operator-network composition.
//!
//! Every network has three evaluation paths:
//!
//! - plain `f64` evaluation for inference,
//! - tape evaluation ([`Var`] / [`Jet2`]) where each weight is a graph node,
//! - a batched jet kernel ([`kernel`]) that propagates values and directional
//!   derivatives for a whole batch at once and back-propagates adjoints by
//!   hand. Training uses the kernel; the tape path is its reference.
//!
//! Parameters are flattened layer by layer, each layer contributing its
//! weight matrix (row-major, `out x in`) followed by its biases.

mod deeponet;
pub mod file;
pub mod kernel;

use ndarray::{Array1, Array2};
use rand::Rng as _;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Jet2, Tape, Var};
use crate::error::{check_dim, Error, Result};
use crate::rng::Rng;

pub use deeponet::{
    BatchPass, DeepOnet, DeepOnetSpec, ForwardOut, ModelVars, OutputAdjoints, ParamReadout,
    TapeOutput,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Identity,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
        }
    }

    pub fn apply_var(self, x: Var<'_>) -> Var<'_> {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
        }
    }

    pub fn apply_jet(self, x: Jet2<'_>) -> Jet2<'_> {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
        }
    }
}

/// Map from a raw trunk output to a physical parameter value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    #[default]
    Identity,
    Exp,
    Softplus,
}

impl Link {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Link::Identity => x,
            Link::Exp => x.exp(),
            Link::Softplus => {
                if x > 30.0 {
                    x
                } else {
                    x.exp().ln_1p()
                }
            }
        }
    }

    pub fn slope(self, x: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Exp => x.exp(),
            Link::Softplus => 1.0 / (1.0 + (-x).exp()),
        }
    }

    pub fn apply_var(self, x: Var<'_>) -> Var<'_> {
        match self {
            Link::Identity => x,
            Link::Exp => x.exp(),
            Link::Softplus => x.softplus(),
        }
    }
}

/// One affine layer `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

impl DenseLayer {
    pub fn zeros(in_width: usize, out_width: usize) -> Self {
        DenseLayer {
            weights: Array2::zeros((out_width, in_width)),
            biases: Array1::zeros(out_width),
        }
    }

    /// Xavier-uniform weights in `[-sqrt(6/(fan_in+fan_out)), +...]`, zero biases.
    pub fn xavier(in_width: usize, out_width: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / (in_width + out_width) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let weights = Array2::from_shape_simple_fn((out_width, in_width), || dist.sample(rng));
        DenseLayer {
            weights,
            biases: Array1::zeros(out_width),
        }
    }

    pub fn in_width(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_width(&self) -> usize {
        self.weights.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .rows()
            .into_iter()
            .zip(self.biases.iter())
            .map(|(row, b)| row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b)
            .collect()
    }

    fn split_params<'a, 't>(&self, params: &'a [Var<'t>]) -> (&'a [Var<'t>], &'a [Var<'t>]) {
        params[..self.param_count()].split_at(self.weights.len())
    }

    pub fn forward_vars<'t>(&self, params: &[Var<'t>], x: &[Var<'t>]) -> Vec<Var<'t>> {
        let (w, b) = self.split_params(params);
        let n_in = self.in_width();
        (0..self.out_width())
            .map(|o| {
                let row = &w[o * n_in..(o + 1) * n_in];
                row.iter()
                    .zip(x)
                    .fold(b[o], |acc, (&wi, &xi)| acc + wi * xi)
            })
            .collect()
    }

    pub fn forward_jets<'t>(&self, params: &[Var<'t>], x: &[Jet2<'t>]) -> Vec<Jet2<'t>> {
        let (w, b) = self.split_params(params);
        let n_in = self.in_width();
        (0..self.out_width())
            .map(|o| {
                let row = &w[o * n_in..(o + 1) * n_in];
                let mut acc = x[0].mul_var(row[0]);
                for (xi, &wi) in x.iter().zip(row).skip(1) {
                    acc = acc + xi.mul_var(wi);
                }
                acc.add_var(b[o])
            })
            .collect()
    }

    pub(crate) fn write_params(&self, out: &mut Vec<f64>) {
        out.extend(self.weights.iter());
        out.extend(self.biases.iter());
    }

    pub(crate) fn read_params(&mut self, src: &[f64]) -> usize {
        let nw = self.weights.len();
        for (w, s) in self.weights.iter_mut().zip(&src[..nw]) {
            *w = *s;
        }
        for (b, s) in self.biases.iter_mut().zip(&src[nw..]) {
            *b = *s;
        }
        self.param_count()
    }
}

/// Multilayer perceptron: tanh on every hidden layer, configurable final
/// activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
    pub final_activation: Activation,
}

fn validate_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 {
        return Err(Error::invalid(format!(
            "an MLP needs at least an input and an output width, got {widths:?}"
        )));
    }
    if widths.contains(&0) {
        return Err(Error::invalid(format!("zero width in {widths:?}")));
    }
    Ok(())
}

impl Mlp {
    /// Random Xavier initialization drawn from `rng`.
    pub fn new(widths: &[usize], final_activation: Activation, rng: &mut Rng) -> Result<Self> {
        validate_widths(widths)?;
        let layers = widths
            .windows(2)
            .map(|w| DenseLayer::xavier(w[0], w[1], rng))
            .collect();
        Ok(Mlp {
            layers,
            final_activation,
        })
    }

    /// Deterministic initialization from a seed.
    pub fn init(widths: &[usize], final_activation: Activation, seed: u64) -> Result<Self> {
        let mut rng = crate::rng::substream(seed, crate::rng::Stream::Init);
        Self::new(widths, final_activation, &mut rng)
    }

    pub fn zeros(widths: &[usize], final_activation: Activation) -> Result<Self> {
        validate_widths(widths)?;
        Ok(Mlp {
            layers: widths
                .windows(2)
                .map(|w| DenseLayer::zeros(w[0], w[1]))
                .collect(),
            final_activation,
        })
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].in_width()];
        w.extend(self.layers.iter().map(DenseLayer::out_width));
        w
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].in_width()
    }

    pub fn out_width(&self) -> usize {
        self.layers[self.layers.len() - 1].out_width()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.final_activation
        } else {
            Activation::Tanh
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("mlp input", self.in_width(), x.len())?;
        let mut a = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let act = self.activation(l);
            a = layer.eval(&a).into_iter().map(|z| act.apply(z)).collect();
        }
        Ok(a)
    }

    /// Registers every weight and bias on `tape`, in flat order.
    pub fn register<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params().into_iter().map(|p| tape.param(p)).collect()
    }

    /// Forward pass on the tape with `params` laid out as in [`Mlp::params`].
    pub fn forward_vars<'t>(&self, params: &[Var<'t>], x: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        check_dim("mlp input", self.in_width(), x.len())?;
        check_dim("mlp parameters", self.param_count(), params.len())?;
        let mut offset = 0;
        let mut a = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let act = self.activation(l);
            a = layer
                .forward_vars(&params[offset..], &a)
                .into_iter()
                .map(|z| act.apply_var(z))
                .collect();
            offset += layer.param_count();
        }
        Ok(a)
    }

    pub fn forward_jets<'t>(&self, params: &[Var<'t>], x: &[Jet2<'t>]) -> Result<Vec<Jet2<'t>>> {
        check_dim("mlp input", self.in_width(), x.len())?;
        check_dim("mlp parameters", self.param_count(), params.len())?;
        let mut offset = 0;
        let mut a = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let act = self.activation(l);
            a = layer
                .forward_jets(&params[offset..], &a)
                .into_iter()
                .map(|z| act.apply_jet(z))
                .collect();
            offset += layer.param_count();
        }
        Ok(a)
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            layer.write_params(&mut out);
        }
        out
    }

    pub fn set_params(&mut self, src: &[f64]) -> Result<()> {
        check_dim("mlp parameters", self.param_count(), src.len())?;
        let mut offset = 0;
        for layer in &mut self.layers {
            offset += layer.read_params(&src[offset..]);
        }
        Ok(())
    }

    /// Returns a copy with every weight and bias shifted by `delta` (flat order).
    pub fn perturbed(&self, delta: &[f64]) -> Result<Self> {
        let mut p = self.params();
        check_dim("mlp perturbation", p.len(), delta.len())?;
        for (a, b) in p.iter_mut().zip(delta) {
            *a += b;
        }
        let mut out = self.clone();
        out.set_params(&p)?;
        Ok(out)
    }
}

/// Random uniform vector, used by tests and the verification suite.
pub fn random_point(dim: usize, lo: f64, hi: f64, rng: &mut Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(lo..hi)).collect()
}
