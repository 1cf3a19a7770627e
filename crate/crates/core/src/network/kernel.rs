//! Batched second-order jet propagation with a hand-written adjoint sweep.
//!
//! A [`Jets`] value holds, for every row of a batch, the activations and
//! their first and second directional derivatives along K input directions.
//! Affine layers act linearly on every component; tanh follows the Taylor
//! rule `d' = s1 d`, `dd' = s2 d^2 + s1 dd` with `s1 = 1 - t^2` and
//! `s2 = -2 t s1`. The backward pass is the exact vector-Jacobian product of
//! that forward map, which needs the third derivative `s3 = -2 s1^2 + 4 t^2 s1`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};

use super::{Activation, DenseLayer, Mlp};

/// Values plus directional first and second derivatives for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Jets {
    pub v: Array2<f64>,
    pub d: Vec<Array2<f64>>,
    pub dd: Vec<Array2<f64>>,
}

impl Jets {
    pub fn values(v: Array2<f64>) -> Self {
        Jets {
            v,
            d: Vec::new(),
            dd: Vec::new(),
        }
    }

    pub fn zeros(rows: usize, cols: usize, dirs: usize) -> Self {
        Jets {
            v: Array2::zeros((rows, cols)),
            d: vec![Array2::zeros((rows, cols)); dirs],
            dd: vec![Array2::zeros((rows, cols)); dirs],
        }
    }

    /// Input jets: every row moves along each seed direction with zero curvature.
    pub fn seeded(x: ArrayView2<'_, f64>, seeds: &[Vec<f64>]) -> Self {
        let (rows, cols) = x.dim();
        let d = seeds
            .iter()
            .map(|s| {
                assert_eq!(s.len(), cols, "seed dimension");
                Array2::from_shape_fn((rows, cols), |(_, j)| s[j])
            })
            .collect();
        Jets {
            v: x.to_owned(),
            d,
            dd: vec![Array2::zeros((rows, cols)); seeds.len()],
        }
    }

    pub fn dirs(&self) -> usize {
        self.d.len()
    }

    pub fn rows(&self) -> usize {
        self.v.nrows()
    }

    pub fn cols(&self) -> usize {
        self.v.ncols()
    }

    /// Column `c` of every component as an `N x 1` jet batch.
    pub fn column(&self, c: usize) -> Jets {
        let col = |a: &Array2<f64>| a.column(c).to_owned().insert_axis(Axis(1));
        Jets {
            v: col(&self.v),
            d: self.d.iter().map(col).collect(),
            dd: self.dd.iter().map(col).collect(),
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.v *= c;
        for a in self.d.iter_mut().chain(self.dd.iter_mut()) {
            *a *= c;
        }
    }

    pub fn add_assign(&mut self, other: &Jets) {
        self.v += &other.v;
        for (a, b) in self.d.iter_mut().zip(&other.d) {
            *a += b;
        }
        for (a, b) in self.dd.iter_mut().zip(&other.dd) {
            *a += b;
        }
    }

    /// Multiplies every component row-wise by the constant vector `m`.
    pub fn mul_row_vector(&mut self, m: &Array1<f64>) {
        self.v *= m;
        for a in self.d.iter_mut().chain(self.dd.iter_mut()) {
            *a *= m;
        }
    }

    pub fn mul_elementwise(&mut self, mask: &Array2<f64>) {
        self.v *= mask;
        for a in self.d.iter_mut().chain(self.dd.iter_mut()) {
            *a *= mask;
        }
    }

    pub fn times(&self, m: &Array2<f64>) -> Jets {
        let mut out = self.clone();
        out.mul_elementwise(m);
        out
    }

    /// Elementwise sum over all components of `self * other`.
    pub fn contract(&self, other: &Jets) -> Array2<f64> {
        let mut out = &self.v * &other.v;
        for (a, b) in self
            .d
            .iter()
            .zip(&other.d)
            .chain(self.dd.iter().zip(&other.dd))
        {
            Zip::from(&mut out)
                .and(a)
                .and(b)
                .for_each(|o, &a, &b| *o += a * b);
        }
        out
    }

    /// Sum over rows and components of `self * other`, per column.
    pub fn dot_columns(&self, other: &Jets) -> Array1<f64> {
        let mut out = (&self.v * &other.v).sum_axis(Axis(0));
        for (a, b) in self
            .d
            .iter()
            .zip(&other.d)
            .chain(self.dd.iter().zip(&other.dd))
        {
            out += &(a * b).sum_axis(Axis(0));
        }
        out
    }
}

pub fn affine_forward(layer: &DenseLayer, x: &Jets) -> Jets {
    let wt = layer.weights.t();
    let mut v = x.v.dot(&wt);
    v += &layer.biases;
    Jets {
        v,
        d: x.d.iter().map(|a| a.dot(&wt)).collect(),
        dd: x.dd.iter().map(|a| a.dot(&wt)).collect(),
    }
}

/// Accumulates weight and bias gradients into `grad` (layout: weights
/// row-major, then biases) and optionally returns the input adjoints.
pub fn affine_backward(
    layer: &DenseLayer,
    x: &Jets,
    g: &Jets,
    grad: &mut [f64],
    want_input: bool,
) -> Option<Jets> {
    let (gw, gb) = grad[..layer.param_count()].split_at_mut(layer.weights.len());
    let mut gw = ArrayViewMut2::from_shape(layer.weights.dim(), gw).expect("weight shape");
    general_mat_mul(1.0, &g.v.t(), &x.v, 1.0, &mut gw);
    for (gk, xk) in g.d.iter().zip(&x.d).chain(g.dd.iter().zip(&x.dd)) {
        general_mat_mul(1.0, &gk.t(), xk, 1.0, &mut gw);
    }
    let mut gb = ArrayViewMut1::from(gb);
    gb += &g.v.sum_axis(Axis(0));
    want_input.then(|| {
        let w = &layer.weights;
        Jets {
            v: g.v.dot(w),
            d: g.d.iter().map(|a| a.dot(w)).collect(),
            dd: g.dd.iter().map(|a| a.dot(w)).collect(),
        }
    })
}

/// What tanh's backward sweep needs: pre-activation jets and output values.
#[derive(Debug, Clone)]
pub struct TanhCache {
    z: Jets,
    t: Array2<f64>,
}

pub fn tanh_forward(z: Jets) -> (Jets, TanhCache) {
    let t = z.v.mapv(f64::tanh);
    let s1 = t.mapv(|t| 1.0 - t * t);
    let mut d = Vec::with_capacity(z.dirs());
    let mut dd = Vec::with_capacity(z.dirs());
    for (zd, zdd) in z.d.iter().zip(&z.dd) {
        d.push(&s1 * zd);
        let mut out = Array2::zeros(zd.dim());
        Zip::from(&mut out)
            .and(zd)
            .and(zdd)
            .and(&t)
            .for_each(|o, &a, &b, &t| {
                let s1 = 1.0 - t * t;
                let s2 = -2.0 * t * s1;
                *o = s2 * a * a + s1 * b;
            });
        dd.push(out);
    }
    let out = Jets {
        v: t.clone(),
        d,
        dd,
    };
    (out, TanhCache { z, t })
}

pub fn tanh_backward(cache: &TanhCache, g: &Jets) -> Jets {
    let t = &cache.t;
    let mut gv = Array2::zeros(t.dim());
    Zip::from(&mut gv)
        .and(&g.v)
        .and(t)
        .for_each(|o, &gv, &t| *o = gv * (1.0 - t * t));
    let mut gd = Vec::with_capacity(g.dirs());
    let mut gdd = Vec::with_capacity(g.dirs());
    for k in 0..g.dirs() {
        let zd = &cache.z.d[k];
        let zdd = &cache.z.dd[k];
        Zip::from(&mut gv)
            .and(&g.d[k])
            .and(&g.dd[k])
            .and(zd)
            .and(zdd)
            .and(t)
            .for_each(|o, &a, &b, &zd, &zdd, &t| {
                let s1 = 1.0 - t * t;
                let s2 = -2.0 * t * s1;
                let s3 = -2.0 * s1 * s1 + 4.0 * t * t * s1;
                *o += a * s2 * zd + b * (s3 * zd * zd + s2 * zdd);
            });
        let mut d = Array2::zeros(t.dim());
        Zip::from(&mut d)
            .and(&g.d[k])
            .and(&g.dd[k])
            .and(zd)
            .and(t)
            .for_each(|o, &a, &b, &zd, &t| {
                let s1 = 1.0 - t * t;
                let s2 = -2.0 * t * s1;
                *o = a * s1 + 2.0 * b * s2 * zd;
            });
        gd.push(d);
        let mut dd = Array2::zeros(t.dim());
        Zip::from(&mut dd)
            .and(&g.dd[k])
            .and(t)
            .for_each(|o, &b, &t| *o = b * (1.0 - t * t));
        gdd.push(dd);
    }
    Jets {
        v: gv,
        d: gd,
        dd: gdd,
    }
}

#[derive(Debug, Clone)]
struct LayerPass {
    input: Jets,
    tanh: Option<TanhCache>,
    mask: Option<Array2<f64>>,
}

/// Saved activations of one batched MLP forward pass.
#[derive(Debug, Clone)]
pub struct MlpPass {
    layers: Vec<LayerPass>,
    pub output: Jets,
}

impl Mlp {
    /// Value-only batched evaluation.
    pub fn eval_batch(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut a = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weights.t());
            z += &layer.biases;
            if self.activation(l) == Activation::Tanh {
                z.mapv_inplace(f64::tanh);
            }
            a = z;
        }
        a
    }

    /// Batched jet forward pass. `masks`, if given, holds one multiplicative
    /// mask per hidden layer, applied after the activation.
    pub fn forward_batch(&self, x: Jets, masks: Option<&[Array2<f64>]>) -> MlpPass {
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut a = x;
        for (l, layer) in self.layers.iter().enumerate() {
            let z = affine_forward(layer, &a);
            let (mut out, tanh) = match self.activation(l) {
                Activation::Tanh => {
                    let (o, c) = tanh_forward(z);
                    (o, Some(c))
                }
                Activation::Identity => (z, None),
            };
            let mask = masks
                .filter(|_| l + 1 < self.layers.len())
                .map(|m| m[l].clone());
            if let Some(m) = &mask {
                out.mul_elementwise(m);
            }
            layers.push(LayerPass {
                input: std::mem::replace(&mut a, out),
                tanh,
                mask,
            });
        }
        MlpPass { layers, output: a }
    }

    /// Accumulates parameter gradients (flat layout) for output adjoints `g`.
    pub fn backward_batch(
        &self,
        pass: &MlpPass,
        g: Jets,
        grad: &mut [f64],
        want_input: bool,
    ) -> Option<Jets> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for layer in &self.layers {
            offsets.push(off);
            off += layer.param_count();
        }
        let mut g = g;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let lp = &pass.layers[l];
            if let Some(m) = &lp.mask {
                g.mul_elementwise(m);
            }
            let gz = match &lp.tanh {
                Some(cache) => tanh_backward(cache, &g),
                None => g,
            };
            let need = l > 0 || want_input;
            g = affine_backward(layer, &lp.input, &gz, &mut grad[offsets[l]..], need)?;
        }
        Some(g)
    }
}
