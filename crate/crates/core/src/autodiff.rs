//! Scalar reverse-mode automatic differentiation with second-order jets.
//!
//! A [`Tape`] records every elementary operation as a node holding its value,
//! its operation tag and the local partial derivatives with respect to at most
//! two parents. Parents are always created before children, so the creation
//! order is a topological order and [`Tape::backward`] is a single reverse
//! sweep.
//!
//! [`Jet2`] carries a value together with its first and second directional
//! derivatives along one input direction. All three components are tape nodes,
//! so derivatives of a network with respect to its inputs remain
//! differentiable with respect to the network parameters (forward-over-reverse).

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Deref, Mul, Neg, Sub};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AdError {
    #[error("logarithm of non-positive value {0}")]
    LogDomain(f64),
    #[error("square root of negative value {0}")]
    SqrtDomain(f64),
    #[error("division by zero")]
    DivisionByZero,
    #[error("zero direction vector")]
    ZeroDirection,
    #[error("direction must have unit norm, got norm {0}")]
    NonUnitDirection(f64),
    #[error("direction has {direction} components but point has {point}")]
    DirectionDimension { point: usize, direction: usize },
    #[error("laplacian supports 1 to 3 coordinates, got {0}")]
    UnsupportedDimension(usize),
    #[error("backward root does not belong to this tape")]
    ForeignRoot,
    #[error("backward root is not a finite scalar ({0})")]
    NonFiniteRoot(f64),
}

/// Operation tag recorded with every node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Param,
    Input,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Powi(i32),
    Exp,
    Ln,
    Sin,
    Cos,
    Tanh,
    Square,
    Sqrt,
    Abs,
    Softplus,
    Scale,
    Shift,
}

/// Deliberate derivative corruption, used as a negative control for the
/// finite-difference verification suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Records tanh's local derivative scaled by 1.05.
    TanhDerivative,
}

#[derive(Debug, Clone, Copy)]
struct Record {
    value: f64,
    op: Op,
    arity: u8,
    parents: [u32; 2],
    partials: [f64; 2],
}

/// Read-only view of one recorded vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: usize,
    pub value: f64,
    pub op: Op,
    /// Parent ids paired with the local partial derivative.
    pub parents: Vec<(usize, f64)>,
}

/// A computation graph. One tape is built per loss evaluation and dropped
/// afterwards.
#[derive(Default)]
pub struct Tape {
    records: RefCell<Vec<Record>>,
    params: RefCell<Vec<u32>>,
    fault: Option<Fault>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.len())
            .field("params", &self.params.borrow().len())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Tape {
            records: RefCell::new(Vec::with_capacity(nodes)),
            ..Self::default()
        }
    }

    pub fn with_fault(fault: Fault) -> Self {
        Tape {
            fault: Some(fault),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.records.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a trainable parameter. Parameter ids follow registration order.
    pub fn param(&self, value: f64) -> Var<'_> {
        let var = self.leaf(value, Op::Param);
        self.params.borrow_mut().push(var.idx);
        var
    }

    /// A differentiable leaf that is not a trainable parameter.
    pub fn input(&self, value: f64) -> Var<'_> {
        self.leaf(value, Op::Input)
    }

    pub fn constant(&self, value: f64) -> Var<'_> {
        self.leaf(value, Op::Const)
    }

    pub fn param_count(&self) -> usize {
        self.params.borrow().len()
    }

    pub fn node(&self, var: Var<'_>) -> Node {
        let rec = self.records.borrow()[var.idx as usize];
        Node {
            id: var.idx as usize,
            value: rec.value,
            op: rec.op,
            parents: (0..rec.arity as usize)
                .map(|k| (rec.parents[k] as usize, rec.partials[k]))
                .collect(),
        }
    }

    /// Sum of many nodes as a chain of binary additions.
    pub fn sum<'t>(&'t self, vars: impl IntoIterator<Item = Var<'t>>) -> Var<'t> {
        let mut iter = vars.into_iter();
        match iter.next() {
            None => self.constant(0.0),
            Some(first) => iter.fold(first, |acc, v| acc + v),
        }
    }

    /// Arithmetic mean; zero for an empty sequence.
    pub fn mean<'t>(&'t self, vars: impl IntoIterator<Item = Var<'t>>) -> Var<'t> {
        let vars: Vec<Var<'t>> = vars.into_iter().collect();
        if vars.is_empty() {
            return self.constant(0.0);
        }
        let n = vars.len() as f64;
        self.sum(vars) * (1.0 / n)
    }

    fn leaf(&self, value: f64, op: Op) -> Var<'_> {
        self.push(Record {
            value,
            op,
            arity: 0,
            parents: [0, 0],
            partials: [0.0, 0.0],
        })
    }

    fn push(&self, rec: Record) -> Var<'_> {
        let mut records = self.records.borrow_mut();
        let idx = records.len() as u32;
        let value = rec.value;
        records.push(rec);
        Var {
            tape: self,
            idx,
            value,
        }
    }

    /// Reverse sweep from `root`. The returned adjoints hold d(root)/d(node)
    /// for every node created before the root.
    pub fn backward(&self, root: Var<'_>) -> Result<Adjoints, AdError> {
        if !std::ptr::eq(root.tape, self) {
            return Err(AdError::ForeignRoot);
        }
        if !root.value.is_finite() {
            return Err(AdError::NonFiniteRoot(root.value));
        }
        let records = self.records.borrow();
        let end = root.idx as usize + 1;
        let mut adj = vec![0.0; end];
        adj[end - 1] = 1.0;
        for i in (0..end).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let rec = &records[i];
            for k in 0..rec.arity as usize {
                adj[rec.parents[k] as usize] += a * rec.partials[k];
            }
        }
        Ok(Adjoints {
            adj,
            params: self.params.borrow().clone(),
        })
    }
}

/// Adjoints produced by one backward sweep.
#[derive(Debug, Clone)]
pub struct Adjoints {
    adj: Vec<f64>,
    params: Vec<u32>,
}

impl Adjoints {
    /// d(root)/d(var); zero for nodes created after the root.
    pub fn wrt(&self, var: Var<'_>) -> f64 {
        self.adj.get(var.idx as usize).copied().unwrap_or(0.0)
    }

    /// Partials with respect to every registered parameter, in registration order.
    pub fn gradient(&self) -> GradientVector {
        GradientVector(
            self.params
                .iter()
                .map(|&p| self.adj.get(p as usize).copied().unwrap_or(0.0))
                .collect(),
        )
    }
}

/// Partial derivatives keyed by parameter id (the registration index).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for GradientVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Handle to a node on a [`Tape`]. Cheap to copy; carries its value.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
    value: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{} = {})", self.idx, self.value)
    }
}

impl<'t> Var<'t> {
    pub fn value(self) -> f64 {
        self.value
    }

    pub fn id(self) -> usize {
        self.idx as usize
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    fn unary(self, value: f64, op: Op, partial: f64) -> Var<'t> {
        self.tape.push(Record {
            value,
            op,
            arity: 1,
            parents: [self.idx, 0],
            partials: [partial, 0.0],
        })
    }

    fn binary(self, other: Var<'t>, value: f64, op: Op, pa: f64, pb: f64) -> Var<'t> {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands belong to different tapes"
        );
        self.tape.push(Record {
            value,
            op,
            arity: 2,
            parents: [self.idx, other.idx],
            partials: [pa, pb],
        })
    }

    pub fn exp(self) -> Var<'t> {
        let e = self.value.exp();
        self.unary(e, Op::Exp, e)
    }

    pub fn ln(self) -> Result<Var<'t>, AdError> {
        if self.value <= 0.0 {
            return Err(AdError::LogDomain(self.value));
        }
        Ok(self.unary(self.value.ln(), Op::Ln, 1.0 / self.value))
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(self.value.sin(), Op::Sin, self.value.cos())
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(self.value.cos(), Op::Cos, -self.value.sin())
    }

    pub fn tanh(self) -> Var<'t> {
        let t = self.value.tanh();
        let mut slope = 1.0 - t * t;
        if self.tape.fault == Some(Fault::TanhDerivative) {
            slope *= 1.05;
        }
        self.unary(t, Op::Tanh, slope)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(self.value * self.value, Op::Square, 2.0 * self.value)
    }

    pub fn powi(self, n: i32) -> Var<'t> {
        let partial = if n == 0 {
            0.0
        } else {
            n as f64 * self.value.powi(n - 1)
        };
        self.unary(self.value.powi(n), Op::Powi(n), partial)
    }

    pub fn sqrt(self) -> Result<Var<'t>, AdError> {
        if self.value < 0.0 {
            return Err(AdError::SqrtDomain(self.value));
        }
        let s = self.value.sqrt();
        if s == 0.0 {
            return Err(AdError::DivisionByZero);
        }
        Ok(self.unary(s, Op::Sqrt, 0.5 / s))
    }

    /// Absolute value with subgradient 0 at the origin.
    pub fn abs(self) -> Var<'t> {
        let slope = if self.value > 0.0 {
            1.0
        } else if self.value < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.unary(self.value.abs(), Op::Abs, slope)
    }

    pub fn recip(self) -> Result<Var<'t>, AdError> {
        if self.value == 0.0 {
            return Err(AdError::DivisionByZero);
        }
        let r = 1.0 / self.value;
        Ok(self.unary(r, Op::Div, -r * r))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>, AdError> {
        if other.value == 0.0 {
            return Err(AdError::DivisionByZero);
        }
        let q = self.value / other.value;
        Ok(self.binary(other, q, Op::Div, 1.0 / other.value, -q / other.value))
    }

    /// Softplus `ln(1 + e^x)`, computed stably.
    pub fn softplus(self) -> Var<'t> {
        let x = self.value;
        let value = if x > 30.0 { x } else { x.exp().ln_1p() };
        let slope = 1.0 / (1.0 + (-x).exp());
        self.unary(value, Op::Softplus, slope)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.value + rhs.value, Op::Add, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.value - rhs.value, Op::Sub, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.value * rhs.value, Op::Mul, rhs.value, self.value)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(-self.value, Op::Neg, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.unary(self.value + rhs, Op::Shift, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.unary(self.value - rhs, Op::Shift, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.unary(self.value * rhs, Op::Scale, rhs)
    }
}

impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        rhs + self
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        rhs.unary(self - rhs.value, Op::Shift, -1.0)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs * self
    }
}

/// Second-order directional jet: value, first and second derivative along a
/// fixed input direction, all recorded on the same tape.
#[derive(Debug, Clone, Copy)]
pub struct Jet2<'t> {
    pub v: Var<'t>,
    pub d: Var<'t>,
    pub dd: Var<'t>,
}

impl<'t> Jet2<'t> {
    pub fn constant(tape: &'t Tape, value: f64) -> Self {
        Jet2 {
            v: tape.constant(value),
            d: tape.constant(0.0),
            dd: tape.constant(0.0),
        }
    }

    /// Lifts an existing node that does not depend on the input direction.
    pub fn lift(v: Var<'t>) -> Self {
        let tape = v.tape();
        Jet2 {
            v,
            d: tape.constant(0.0),
            dd: tape.constant(0.0),
        }
    }

    /// An input coordinate whose directional derivative is `slope`.
    pub fn coordinate(v: Var<'t>, slope: f64) -> Self {
        let tape = v.tape();
        Jet2 {
            v,
            d: tape.constant(slope),
            dd: tape.constant(0.0),
        }
    }

    /// Taylor propagation through a scalar function given its value and first
    /// two derivatives at `self.v`.
    pub fn chain(self, f0: Var<'t>, f1: Var<'t>, f2: Var<'t>) -> Self {
        Jet2 {
            v: f0,
            d: f1 * self.d,
            dd: f2 * self.d.square() + f1 * self.dd,
        }
    }

    pub fn scale(self, c: f64) -> Self {
        Jet2 {
            v: self.v * c,
            d: self.d * c,
            dd: self.dd * c,
        }
    }

    /// Product with a node that is constant along the direction.
    pub fn mul_var(self, w: Var<'t>) -> Self {
        Jet2 {
            v: self.v * w,
            d: self.d * w,
            dd: self.dd * w,
        }
    }

    pub fn add_var(self, b: Var<'t>) -> Self {
        Jet2 {
            v: self.v + b,
            ..self
        }
    }

    pub fn add_scalar(self, c: f64) -> Self {
        Jet2 {
            v: self.v + c,
            ..self
        }
    }

    pub fn tanh(self) -> Self {
        let t = self.v.tanh();
        let s1 = 1.0 - t.square();
        let s2 = (t * s1) * -2.0;
        self.chain(t, s1, s2)
    }

    pub fn sin(self) -> Self {
        let s = self.v.sin();
        let c = self.v.cos();
        self.chain(s, c, -s)
    }

    pub fn cos(self) -> Self {
        let s = self.v.sin();
        let c = self.v.cos();
        self.chain(c, -s, -c)
    }

    pub fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e, e)
    }

    pub fn ln(self) -> Result<Self, AdError> {
        let l = self.v.ln()?;
        let r = self.v.recip()?;
        let r2 = -r.square();
        Ok(self.chain(l, r, r2))
    }

    pub fn square(self) -> Self {
        let two_v = self.v * 2.0;
        let two = self.v.tape().constant(2.0);
        self.chain(self.v.square(), two_v, two)
    }

    pub fn powi(self, n: i32) -> Self {
        let tape = self.v.tape();
        let f0 = self.v.powi(n);
        let f1 = if n == 0 {
            tape.constant(0.0)
        } else {
            self.v.powi(n - 1) * n as f64
        };
        let f2 = if n == 0 || n == 1 {
            tape.constant(0.0)
        } else {
            self.v.powi(n - 2) * (n * (n - 1)) as f64
        };
        self.chain(f0, f1, f2)
    }

    pub fn recip(self) -> Result<Self, AdError> {
        let r = self.v.recip()?;
        let r2 = r.square();
        let f1 = -r2;
        let f2 = (r2 * r) * 2.0;
        Ok(self.chain(r, f1, f2))
    }

    pub fn div(self, other: Jet2<'t>) -> Result<Self, AdError> {
        Ok(self * other.recip()?)
    }
}

impl<'t> Add for Jet2<'t> {
    type Output = Jet2<'t>;
    fn add(self, rhs: Jet2<'t>) -> Jet2<'t> {
        Jet2 {
            v: self.v + rhs.v,
            d: self.d + rhs.d,
            dd: self.dd + rhs.dd,
        }
    }
}

impl<'t> Sub for Jet2<'t> {
    type Output = Jet2<'t>;
    fn sub(self, rhs: Jet2<'t>) -> Jet2<'t> {
        Jet2 {
            v: self.v - rhs.v,
            d: self.d - rhs.d,
            dd: self.dd - rhs.dd,
        }
    }
}

impl<'t> Mul for Jet2<'t> {
    type Output = Jet2<'t>;
    fn mul(self, rhs: Jet2<'t>) -> Jet2<'t> {
        Jet2 {
            v: self.v * rhs.v,
            d: self.d * rhs.v + self.v * rhs.d,
            dd: self.dd * rhs.v + (self.d * rhs.d) * 2.0 + self.v * rhs.dd,
        }
    }
}

impl<'t> Neg for Jet2<'t> {
    type Output = Jet2<'t>;
    fn neg(self) -> Jet2<'t> {
        Jet2 {
            v: -self.v,
            d: -self.d,
            dd: -self.dd,
        }
    }
}

/// A scalar field's value together with first and second derivatives along a
/// subset of coordinate axes, as consumed by residual functionals.
#[derive(Debug, Clone)]
pub struct FieldJets<'t> {
    pub value: Var<'t>,
    pub axes: Vec<usize>,
    pub first: Vec<Var<'t>>,
    pub second: Vec<Var<'t>>,
}

impl<'t> FieldJets<'t> {
    pub fn value_only(value: Var<'t>) -> Self {
        FieldJets {
            value,
            axes: Vec::new(),
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    fn slot(&self, axis: usize) -> Option<usize> {
        self.axes.iter().position(|&a| a == axis)
    }

    /// First partial derivative along `axis`.
    ///
    /// # Panics
    /// If `axis` was not among the computed axes.
    pub fn d(&self, axis: usize) -> Var<'t> {
        let k = self.slot(axis).expect("derivative axis was not computed");
        self.first[k]
    }

    /// Second partial derivative along `axis`.
    pub fn dd(&self, axis: usize) -> Var<'t> {
        let k = self.slot(axis).expect("derivative axis was not computed");
        self.second[k]
    }

    /// Sum of the second derivatives over all computed axes.
    pub fn laplacian(&self) -> Var<'t> {
        self.value.tape().sum(self.second.iter().copied())
    }
}

fn check_direction(point: &[f64], direction: &[f64]) -> Result<(), AdError> {
    if point.len() != direction.len() {
        return Err(AdError::DirectionDimension {
            point: point.len(),
            direction: direction.len(),
        });
    }
    let norm = direction.iter().map(|c| c * c).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(AdError::ZeroDirection);
    }
    if (norm - 1.0).abs() > 1e-12 {
        return Err(AdError::NonUnitDirection(norm));
    }
    Ok(())
}

/// Input jets for `point` moving along `direction`. Values are registered as
/// differentiable inputs so that reverse mode can be compared against the jets.
pub fn seed_jets<'t>(
    tape: &'t Tape,
    point: &[f64],
    direction: &[f64],
) -> Result<Vec<Jet2<'t>>, AdError> {
    check_direction(point, direction)?;
    Ok(point
        .iter()
        .zip(direction)
        .map(|(&x, &s)| Jet2::coordinate(tape.input(x), s))
        .collect())
}

/// Evaluates `f` at `point` and returns (f, grad f . dir, dir^T H dir).
pub fn jet_eval<'t, F>(
    tape: &'t Tape,
    f: F,
    point: &[f64],
    direction: &[f64],
) -> Result<Jet2<'t>, AdError>
where
    F: FnOnce(&[Jet2<'t>]) -> Result<Jet2<'t>, AdError>,
{
    let inputs = seed_jets(tape, point, direction)?;
    f(&inputs)
}

/// Sum of second derivatives along the coordinate axes, one jet sweep per axis.
pub fn laplacian<'t, F>(tape: &'t Tape, f: F, point: &[f64]) -> Result<Var<'t>, AdError>
where
    F: Fn(&[Jet2<'t>]) -> Result<Jet2<'t>, AdError>,
{
    let dim = point.len();
    if !(1..=3).contains(&dim) {
        return Err(AdError::UnsupportedDimension(dim));
    }
    let mut terms = Vec::with_capacity(dim);
    for axis in 0..dim {
        let mut dir = vec![0.0; dim];
        dir[axis] = 1.0;
        terms.push(jet_eval(tape, &f, point, &dir)?.dd);
    }
    Ok(tape.sum(terms))
}

/// Relative error with a unit floor on the denominator, so that entries much
/// smaller than one are compared in absolute terms.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub errors: Vec<f64>,
    pub max_error: f64,
    pub tol: f64,
    /// Parameter ids whose error exceeds `tol`.
    pub flagged: Vec<usize>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }
}

/// Compares reverse-mode gradients against central finite differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f64,
    pub tol: f64,
    pub fault: Option<Fault>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-4,
            tol: 1e-5,
            fault: None,
        }
    }
}

impl GradCheck {
    fn tape(&self) -> Tape {
        match self.fault {
            Some(fault) => Tape::with_fault(fault),
            None => Tape::new(),
        }
    }

    pub fn run<F>(&self, f: F, params: &[f64]) -> Result<GradCheckReport, AdError>
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, AdError>,
    {
        assert!(self.step > 0.0, "finite-difference step must be positive");
        let analytic = {
            let tape = self.tape();
            let vars: Vec<Var<'_>> = params.iter().map(|&p| tape.param(p)).collect();
            let out = f(&tape, &vars)?;
            tape.backward(out)?.gradient().into_inner()
        };
        let eval = |theta: &[f64]| -> Result<f64, AdError> {
            let tape = self.tape();
            let vars: Vec<Var<'_>> = theta.iter().map(|&p| tape.param(p)).collect();
            Ok(f(&tape, &vars)?.value())
        };
        let mut theta = params.to_vec();
        let mut numeric = Vec::with_capacity(params.len());
        for i in 0..params.len() {
            theta[i] = params[i] + self.step;
            let plus = eval(&theta)?;
            theta[i] = params[i] - self.step;
            let minus = eval(&theta)?;
            theta[i] = params[i];
            numeric.push((plus - minus) / (2.0 * self.step));
        }
        let errors: Vec<f64> = analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| relative_error(a, n))
            .collect();
        let max_error = errors.iter().cloned().fold(0.0, f64::max);
        let flagged = errors
            .iter()
            .enumerate()
            .filter(|(_, &e)| e > self.tol || !e.is_finite())
            .map(|(i, _)| i)
            .collect();
        Ok(GradCheckReport {
            analytic,
            numeric,
            errors,
            max_error,
            tol: self.tol,
            flagged,
        })
    }
}

/// Convenience wrapper around [`GradCheck::run`] on a clean tape.
pub fn grad_check<F>(f: F, params: &[f64], step: f64, tol: f64) -> Result<GradCheckReport, AdError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, AdError>,
{
    GradCheck {
        step,
        tol,
        fault: None,
    }
    .run(f, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{E, FRAC_PI_2, PI};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn mul_records_product_rule() {
        let tape = Tape::new();
        let x = tape.param(3.0);
        let y = tape.param(4.0);
        let z = x * y;
        assert_eq!(z.value(), 12.0);
        let g = tape.backward(z).unwrap().gradient();
        assert_eq!(g[0], 4.0);
        assert_eq!(g[1], 3.0);
    }

    #[test]
    fn tanh_and_exp_at_known_points() {
        let tape = Tape::new();
        let x = tape.param(0.0);
        let t = x.tanh();
        assert_eq!(t.value(), 0.0);
        assert_eq!(tape.backward(t).unwrap().wrt(x), 1.0);

        let tape = Tape::new();
        let x = tape.param(1.0);
        let e = x.exp();
        assert!(close(e.value(), E, 1e-15));
        assert!(close(tape.backward(e).unwrap().wrt(x), E, 1e-15));
    }

    #[test]
    fn domain_violations_are_errors() {
        let tape = Tape::new();
        let zero = tape.param(0.0);
        let neg = tape.param(-1.0);
        let one = tape.param(1.0);
        assert_eq!(zero.ln().unwrap_err(), AdError::LogDomain(0.0));
        assert!(matches!(neg.ln(), Err(AdError::LogDomain(_))));
        assert_eq!(one.div(zero).unwrap_err(), AdError::DivisionByZero);
        assert_eq!(zero.recip().unwrap_err(), AdError::DivisionByZero);
        assert!(matches!(neg.sqrt(), Err(AdError::SqrtDomain(_))));
    }

    #[test]
    fn backward_simple_functions() {
        let tape = Tape::new();
        let w = tape.param(3.0);
        let f = w.square();
        assert_eq!(tape.backward(f).unwrap().wrt(w), 6.0);

        let tape = Tape::new();
        let a = tape.param(0.0);
        let b = tape.param(2.0);
        let f = a * b + a.sin();
        let g = tape.backward(f).unwrap().gradient();
        assert_eq!(g.0, vec![3.0, 0.0]);
    }

    #[test]
    fn diamond_accumulates() {
        let tape = Tape::new();
        let x = tape.param(3.0);
        let y = x + x;
        assert_eq!(tape.backward(y).unwrap().wrt(x), 2.0);
    }

    #[test]
    fn backward_rejects_foreign_or_nonfinite_root() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let x = t2.param(1.0);
        assert_eq!(t1.backward(x).unwrap_err(), AdError::ForeignRoot);
        let y = t1.param(f64::INFINITY);
        assert!(matches!(t1.backward(y), Err(AdError::NonFiniteRoot(_))));
    }

    #[test]
    fn repeated_backward_is_independent() {
        let tape = Tape::new();
        let x = tape.param(2.0);
        let f = x * x * x;
        let a = tape.backward(f).unwrap().gradient();
        let b = tape.backward(f).unwrap().gradient();
        assert_eq!(a, b);
        assert_eq!(a[0], 12.0);
    }

    #[test]
    fn node_view_reports_parents() {
        let tape = Tape::new();
        let a = tape.param(2.0);
        let b = tape.constant(5.0);
        let c = a * b;
        let node = tape.node(c);
        assert_eq!(node.op, Op::Mul);
        assert_eq!(node.parents, vec![(a.id(), 5.0), (b.id(), 2.0)]);
        assert!(node.parents.iter().all(|(p, _)| *p < node.id));
    }

    #[test]
    fn jet_of_sin_and_square() {
        let tape = Tape::new();
        let j = jet_eval(&tape, |x| Ok(x[0].sin()), &[FRAC_PI_2], &[1.0]).unwrap();
        assert!(close(j.v.value(), 1.0, 1e-15));
        assert!(j.d.value().abs() < 1e-15);
        assert!(close(j.dd.value(), -1.0, 1e-15));

        let j = jet_eval(&tape, |x| Ok(x[0].square()), &[2.0], &[1.0]).unwrap();
        assert_eq!((j.v.value(), j.d.value(), j.dd.value()), (4.0, 4.0, 2.0));
    }

    #[test]
    fn jet_direction_validation() {
        let tape = Tape::new();
        fn f<'t>(x: &[Jet2<'t>]) -> Result<Jet2<'t>, AdError> {
            Ok(x[0] * x[1])
        }
        assert_eq!(
            jet_eval(&tape, f, &[1.0, 2.0], &[0.0, 0.0]).unwrap_err(),
            AdError::ZeroDirection
        );
        assert!(matches!(
            jet_eval(&tape, f, &[1.0, 2.0], &[1.0, 1.0]),
            Err(AdError::NonUnitDirection(_))
        ));
    }

    #[test]
    fn laplacian_of_quadratic_and_eigenfunction() {
        let tape = Tape::new();
        let lap = laplacian(
            &tape,
            |x| Ok(x[0].square() + x[1].square() + x[2].square()),
            &[0.3, -1.2, 2.0],
        )
        .unwrap();
        assert!(close(lap.value(), 6.0, 1e-14));

        let lap = laplacian(
            &tape,
            |x| Ok(x[0].scale(PI).sin() * x[1].scale(PI).sin()),
            &[0.5, 0.5],
        )
        .unwrap();
        assert!(close(lap.value(), -2.0 * PI * PI, 1e-14));

        assert_eq!(
            laplacian(&tape, |x| Ok(x[0]), &[0.0; 4]).unwrap_err(),
            AdError::UnsupportedDimension(4)
        );
    }

    #[test]
    fn nested_parameter_gradient_of_second_derivative() {
        // d/dtheta [d^2/dx^2 (theta sin x)] = -sin x
        for &x0 in &[-2.0, -0.3, 0.7, 1.9] {
            let tape = Tape::new();
            let theta = tape.param(1.7);
            let j = jet_eval(&tape, |x| Ok(x[0].sin().mul_var(theta)), &[x0], &[1.0]).unwrap();
            let g = tape.backward(j.dd).unwrap().wrt(theta);
            assert!(close(g, -f64::sin(x0), 1e-10));
        }
    }

    #[test]
    fn cross_mode_agreement() {
        fn f<'t>(x: &[Jet2<'t>]) -> Result<Jet2<'t>, AdError> {
            Ok((x[0] * x[1]).tanh() + x[1].exp().scale(0.5) - x[0].cos())
        }
        let point = [0.4, -0.8];
        for axis in 0..2 {
            let tape = Tape::new();
            let mut dir = [0.0; 2];
            dir[axis] = 1.0;
            let inputs = seed_jets(&tape, &point, &dir).unwrap();
            let j = f(&inputs).unwrap();
            let adj = tape.backward(j.v).unwrap();
            let rev = adj.wrt(inputs[axis].v);
            assert!((j.d.value() - rev).abs() <= 1e-10 * rev.abs().max(1e-300));
        }
    }

    #[test]
    fn jet_rules_match_finite_differences() {
        let h = 1e-3;
        let g = |x: f64| ((x * 1.3).tanh() * x.exp()).powi(3) / (2.0 + x.sin()) + (1.5 + x).ln();
        let x0 = 0.37;
        let tape = Tape::new();
        let j = jet_eval(
            &tape,
            |x| {
                let a = (x[0].scale(1.3).tanh() * x[0].exp()).powi(3);
                let b = x[0].sin().add_scalar(2.0);
                let c = x[0].add_scalar(1.5).ln()?;
                Ok(a.div(b)? + c)
            },
            &[x0],
            &[1.0],
        )
        .unwrap();
        let fd1 = (g(x0 + h) - g(x0 - h)) / (2.0 * h);
        let fd2 = (g(x0 + h) - 2.0 * g(x0) + g(x0 - h)) / (h * h);
        assert!(relative_error(j.v.value(), g(x0)) < 1e-14);
        assert!(relative_error(j.d.value(), fd1) < 1e-4);
        assert!(relative_error(j.dd.value(), fd2) < 1e-4);
    }

    #[test]
    fn grad_check_affine_is_exact() {
        let report = grad_check(
            |tape, p| Ok(p[0] * 3.0 - p[1] * 0.5 + tape.constant(2.0)),
            &[0.2, -1.0],
            1e-4,
            1e-10,
        )
        .unwrap();
        assert!(report.max_error < 1e-10, "{report:?}");
        assert!(report.passed());
    }

    #[test]
    fn grad_check_catches_corrupted_rule() {
        let check = GradCheck {
            fault: Some(Fault::TanhDerivative),
            ..GradCheck::default()
        };
        let report = check
            .run(|_, p| Ok((p[0] * p[1]).tanh() + p[1].tanh()), &[0.3, 0.8])
            .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn softplus_and_abs() {
        let tape = Tape::new();
        let x = tape.param(0.0);
        let s = x.softplus();
        assert!(close(s.value(), 2f64.ln(), 1e-15));
        assert!(close(tape.backward(s).unwrap().wrt(x), 0.5, 1e-15));
        let y = tape.param(-2.0);
        let a = y.abs();
        assert_eq!(a.value(), 2.0);
        assert_eq!(tape.backward(a).unwrap().wrt(y), -1.0);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn gradient_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, x in -2.0f64..2.0, y in -2.0f64..2.0) {
                let grad = |alpha: f64, beta: f64| {
                    let tape = Tape::new();
                    let p = [tape.param(x), tape.param(y)];
                    let f = (p[0] * p[1]).sin();
                    let g = p[0].tanh() * p[1].exp();
                    let out = f * alpha + g * beta;
                    tape.backward(out).unwrap().gradient().into_inner()
                };
                let combined = grad(a, b);
                let gf = grad(1.0, 0.0);
                let gg = grad(0.0, 1.0);
                for i in 0..2 {
                    let expect = a * gf[i] + b * gg[i];
                    prop_assert!((combined[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
                }
            }

            #[test]
            fn nested_second_derivative_rule(x in -3.0f64..3.0, theta in -2.0f64..2.0) {
                let tape = Tape::new();
                let th = tape.param(theta);
                let j = jet_eval(&tape, |v| Ok(v[0].sin().mul_var(th)), &[x], &[1.0]).unwrap();
                let g = tape.backward(j.dd).unwrap().wrt(th);
                prop_assert!((g + x.sin()).abs() <= 1e-10 * x.sin().abs().max(1e-12) + 1e-15);
            }
        }
    }
}
