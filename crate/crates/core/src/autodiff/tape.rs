use std::collections::HashMap;
use std::sync::Arc;

use super::Backend;
use crate::conv;
use crate::error::{QgError, Result};
use crate::spectral::{kernels, Grid, ModeMultiplier, SpectralField, C64};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive identifiers, one per registered vector-Jacobian product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Constant,
    ModalMul,
    ToReal,
    ToRealPair,
    Select,
    ToSpectral,
    Mul,
    LinCombReal,
    LinCombSpec,
    Conv2d,
    Relu,
    MeanSquaredError,
    SumSquares,
    ScalarLinComb,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    ModalMul { x: Var, m: ModeMultiplier },
    ToReal { x: Var },
    ToRealPair { a: Var, b: Var },
    Select { x: Var, channel: usize },
    ToSpectral { x: Var },
    Mul { a: Var, b: Var },
    LinCombReal(Vec<(f64, Var)>),
    LinCombSpec(Vec<(f64, Var)>),
    Conv2d { x: Var, w: Var, b: Var },
    Relu { x: Var },
    MeanSquaredError { a: Var, target: Arc<Tensor> },
    SumSquares { x: Var },
    ScalarLinComb(Vec<(f64, Var)>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Constant => OpKind::Constant,
            Op::ModalMul { .. } => OpKind::ModalMul,
            Op::ToReal { .. } => OpKind::ToReal,
            Op::ToRealPair { .. } => OpKind::ToRealPair,
            Op::Select { .. } => OpKind::Select,
            Op::ToSpectral { .. } => OpKind::ToSpectral,
            Op::Mul { .. } => OpKind::Mul,
            Op::LinCombReal(_) => OpKind::LinCombReal,
            Op::LinCombSpec(_) => OpKind::LinCombSpec,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu { .. } => OpKind::Relu,
            Op::MeanSquaredError { .. } => OpKind::MeanSquaredError,
            Op::SumSquares { .. } => OpKind::SumSquares,
            Op::ScalarLinComb(_) => OpKind::ScalarLinComb,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::ModalMul { x, .. }
            | Op::ToReal { x }
            | Op::Select { x, .. }
            | Op::ToSpectral { x }
            | Op::Relu { x }
            | Op::SumSquares { x } => vec![*x],
            Op::MeanSquaredError { a, .. } => vec![*a],
            Op::ToRealPair { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Conv2d { x, w, b } => vec![*x, *w, *b],
            Op::LinCombReal(t) | Op::LinCombSpec(t) | Op::ScalarLinComb(t) => {
                t.iter().map(|(_, v)| *v).collect()
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Value {
    Real(Tensor),
    Spec(Vec<C64>),
    Scalar(f64),
}

impl Value {
    fn zeros_like(&self) -> Value {
        match self {
            Value::Real(t) => Value::Real(Tensor::zeros(t.shape().to_vec())),
            Value::Spec(c) => Value::Spec(vec![C64::new(0.0, 0.0); c.len()]),
            Value::Scalar(_) => Value::Scalar(0.0),
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Value,
    needs_grad: bool,
}

/// Recorded computation over fields and parameters.
///
/// Nodes are appended in evaluation order, so the recording order is a
/// topological order and the graph is acyclic by construction.
#[derive(Debug)]
pub struct Tape {
    grid: Arc<Grid>,
    nodes: Vec<Node>,
}

/// Cotangents of the leaves after a backward pass.
#[derive(Debug, Default)]
pub struct Adjoints {
    values: HashMap<Var, Value>,
}

impl Adjoints {
    /// Gradient of a real leaf; `None` when the loss does not depend on it.
    pub fn real(&self, v: Var) -> Option<&Tensor> {
        match self.values.get(&v) {
            Some(Value::Real(t)) => Some(t),
            _ => None,
        }
    }

    pub fn spec(&self, v: Var) -> Option<&[C64]> {
        match self.values.get(&v) {
            Some(Value::Spec(c)) => Some(c),
            _ => None,
        }
    }

    pub fn scalar(&self, v: Var) -> Option<f64> {
        match self.values.get(&v) {
            Some(Value::Scalar(s)) => Some(*s),
            _ => None,
        }
    }
}

impl Tape {
    pub fn new(grid: Arc<Grid>) -> Self {
        Self {
            grid,
            nodes: Vec::new(),
        }
    }

    /// Run `f` on a fresh tape and return the scalar it produces.
    pub fn record<F>(grid: Arc<Grid>, f: F) -> Result<(f64, Tape, Var)>
    where
        F: FnOnce(&mut Tape) -> Result<Var>,
    {
        let mut tape = Tape::new(grid);
        let loss = f(&mut tape)?;
        let value = tape.scalar(loss).ok_or(QgError::NonScalarLoss)?;
        Ok((value, tape, loss))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn count(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    pub fn real(&self, v: Var) -> Option<&Tensor> {
        match &self.nodes[v.0].value {
            Value::Real(t) => Some(t),
            _ => None,
        }
    }

    pub fn spec(&self, v: Var) -> Option<&[C64]> {
        match &self.nodes[v.0].value {
            Value::Spec(c) => Some(c),
            _ => None,
        }
    }

    pub fn scalar(&self, v: Var) -> Option<f64> {
        match &self.nodes[v.0].value {
            Value::Scalar(s) => Some(*s),
            _ => None,
        }
    }

    /// Spectral value of `v` as a field on the tape's grid.
    pub fn spec_field(&self, v: Var) -> Option<SpectralField> {
        self.spec(v)
            .map(|c| SpectralField::from_raw(self.grid.clone(), c.to_vec()))
    }

    fn push(&mut self, op: Op, value: Value) -> Var {
        let needs_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            ref other => other.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn real_ref(&self, v: Var) -> &Tensor {
        self.real(v).expect("expected a real-valued node")
    }

    fn spec_ref(&self, v: Var) -> &[C64] {
        self.spec(v).expect("expected a spectral node")
    }

    fn field_tensor(&self, values: Vec<f64>) -> Tensor {
        let n = self.grid.n();
        Tensor::new(vec![1, n, n], values).expect("field tensor shape")
    }

    /// Differentiable real input (parameters).
    pub fn leaf_real(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, Value::Real(value))
    }

    /// Differentiable spectral input (e.g. an initial state).
    pub fn leaf_spec(&mut self, value: &SpectralField) -> Var {
        self.push(Op::Leaf, Value::Spec(value.coeffs().to_vec()))
    }

    pub fn leaf_scalar(&mut self, value: f64) -> Var {
        self.push(Op::Leaf, Value::Scalar(value))
    }

    pub fn const_real(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, Value::Real(value))
    }

    /// `mean((a - target)²)` over every element.
    pub fn mse(&mut self, a: Var, target: Arc<Tensor>) -> Result<Var> {
        let av = self.real_ref(a);
        if av.len() != target.len() {
            return Err(QgError::Shape(format!(
                "mse operands have {} and {} elements",
                av.len(),
                target.len()
            )));
        }
        let sum: f64 = av
            .data()
            .iter()
            .zip(target.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let value = sum / av.len() as f64;
        Ok(self.push(Op::MeanSquaredError { a, target }, Value::Scalar(value)))
    }

    /// `Σ x²` over every element of a real or scalar node.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let value = match &self.nodes[x.0].value {
            Value::Real(t) => t.data().iter().map(|v| v * v).sum(),
            Value::Scalar(s) => s * s,
            Value::Spec(c) => c.iter().map(|v| v.norm_sqr()).sum(),
        };
        self.push(Op::SumSquares { x }, Value::Scalar(value))
    }

    pub fn scalar_lincomb(&mut self, terms: &[(f64, Var)]) -> Var {
        let mut value = 0.0;
        for (i, &(c, v)) in terms.iter().enumerate() {
            let s = self.scalar(v).expect("expected a scalar node");
            if i == 0 {
                value = c * s;
            } else {
                value += c * s;
            }
        }
        self.push(Op::ScalarLinComb(terms.to_vec()), Value::Scalar(value))
    }

    /// Reverse sweep from a scalar `loss`, returning cotangents of all leaves.
    pub fn backward(&self, loss: Var) -> Result<Adjoints> {
        if !matches!(self.nodes[loss.0].value, Value::Scalar(_)) {
            return Err(QgError::NonScalarLoss);
        }
        let mut adj: Vec<Option<Value>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Value::Scalar(1.0));
        let mut out = Adjoints::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    out.values.insert(Var(i), g);
                }
                Op::Constant => {}
                Op::ModalMul { x, m } => {
                    let g = as_spec(&g);
                    self.accumulate_spec(&mut adj, *x, kernels::modal_mul_adjoint(g, m));
                }
                Op::ToReal { x } => {
                    let g = as_real(&g);
                    let gx = kernels::to_real_adjoint(&self.grid, g.data());
                    self.accumulate_spec(&mut adj, *x, gx);
                }
                Op::ToRealPair { a, b } => {
                    let g = as_real(&g);
                    let half = g.len() / 2;
                    let (ga, gb) = g.data().split_at(half);
                    let (da, db) = kernels::to_real_pair_adjoint(&self.grid, ga, gb);
                    self.accumulate_spec(&mut adj, *a, da);
                    self.accumulate_spec(&mut adj, *b, db);
                }
                Op::Select { x, channel } => {
                    let g = as_real(&g);
                    if self.nodes[x.0].needs_grad {
                        let slot = adj[x.0].get_or_insert_with(|| self.nodes[x.0].value.zeros_like());
                        let Value::Real(t) = slot else { unreachable!() };
                        let len = g.len();
                        let dst = &mut t.data_mut()[channel * len..(channel + 1) * len];
                        for (d, v) in dst.iter_mut().zip(g.data()) {
                            *d += v;
                        }
                    }
                }
                Op::ToSpectral { x } => {
                    let g = as_spec(&g);
                    let gx = kernels::to_spectral_adjoint(&self.grid, g);
                    self.accumulate_real(&mut adj, *x, &gx);
                }
                Op::Mul { a, b } => {
                    let g = as_real(&g);
                    let (av, bv) = (self.real_ref(*a), self.real_ref(*b));
                    if self.nodes[a.0].needs_grad {
                        self.accumulate_real(&mut adj, *a, &kernels::mul(g.data(), bv.data()));
                    }
                    if self.nodes[b.0].needs_grad {
                        self.accumulate_real(&mut adj, *b, &kernels::mul(g.data(), av.data()));
                    }
                }
                Op::LinCombReal(terms) => {
                    let g = as_real(&g);
                    for &(c, v) in terms {
                        if self.nodes[v.0].needs_grad {
                            let scaled: Vec<f64> = g.data().iter().map(|x| c * x).collect();
                            self.accumulate_real(&mut adj, v, &scaled);
                        }
                    }
                }
                Op::LinCombSpec(terms) => {
                    let g = as_spec(&g);
                    for &(c, v) in terms {
                        if self.nodes[v.0].needs_grad {
                            let scaled: Vec<C64> = g.iter().map(|x| x * c).collect();
                            self.accumulate_spec(&mut adj, v, scaled);
                        }
                    }
                }
                Op::Conv2d { x, w, b } => {
                    let g = as_real(&g);
                    let (dx, dw, db) =
                        conv::backward(self.real_ref(*x), self.real_ref(*w), self.real_ref(*b), g)?;
                    self.accumulate_real(&mut adj, *x, dx.data());
                    self.accumulate_real(&mut adj, *w, dw.data());
                    self.accumulate_real(&mut adj, *b, db.data());
                }
                Op::Relu { x } => {
                    let g = as_real(&g);
                    let xv = self.real_ref(*x);
                    let gx: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    self.accumulate_real(&mut adj, *x, &gx);
                }
                Op::MeanSquaredError { a, target } => {
                    let g = as_scalar(&g);
                    let av = self.real_ref(*a);
                    let scale = 2.0 * g / av.len() as f64;
                    let ga: Vec<f64> = av
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(x, y)| scale * (x - y))
                        .collect();
                    self.accumulate_real(&mut adj, *a, &ga);
                }
                Op::SumSquares { x } => {
                    let g = as_scalar(&g);
                    match &self.nodes[x.0].value {
                        Value::Real(t) => {
                            let gx: Vec<f64> = t.data().iter().map(|v| 2.0 * g * v).collect();
                            self.accumulate_real(&mut adj, *x, &gx);
                        }
                        Value::Scalar(s) => self.accumulate_scalar(&mut adj, *x, 2.0 * g * s),
                        Value::Spec(c) => {
                            let gx = c.iter().map(|v| v * (2.0 * g)).collect();
                            self.accumulate_spec(&mut adj, *x, gx);
                        }
                    }
                }
                Op::ScalarLinComb(terms) => {
                    let g = as_scalar(&g);
                    for &(c, v) in terms {
                        self.accumulate_scalar(&mut adj, v, c * g);
                    }
                }
            }
        }
        Ok(out)
    }

    fn accumulate_real(&self, adj: &mut [Option<Value>], v: Var, g: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut adj[v.0] {
            Some(Value::Real(t)) => {
                for (a, b) in t.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => {
                let shape = self.real_ref(v).shape().to_vec();
                *slot = Some(Value::Real(Tensor::new(shape, g.to_vec()).expect("adjoint shape")));
            }
            Some(_) => unreachable!("adjoint kind mismatch"),
        }
    }

    fn accumulate_spec(&self, adj: &mut [Option<Value>], v: Var, g: Vec<C64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut adj[v.0] {
            Some(Value::Spec(c)) => {
                for (a, b) in c.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(Value::Spec(g)),
            Some(_) => unreachable!("adjoint kind mismatch"),
        }
    }

    fn accumulate_scalar(&self, adj: &mut [Option<Value>], v: Var, g: f64) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut adj[v.0] {
            Some(Value::Scalar(s)) => *s += g,
            slot @ None => *slot = Some(Value::Scalar(g)),
            Some(_) => unreachable!("adjoint kind mismatch"),
        }
    }
}

fn as_real(v: &Value) -> &Tensor {
    match v {
        Value::Real(t) => t,
        _ => unreachable!("expected real cotangent"),
    }
}

fn as_spec(v: &Value) -> &[C64] {
    match v {
        Value::Spec(c) => c,
        _ => unreachable!("expected spectral cotangent"),
    }
}

fn as_scalar(v: &Value) -> f64 {
    match v {
        Value::Scalar(s) => *s,
        _ => unreachable!("expected scalar cotangent"),
    }
}

impl Backend for Tape {
    type Spec = Var;
    type Real = Var;

    fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    fn spec_const(&mut self, value: &SpectralField) -> Var {
        self.push(Op::Constant, Value::Spec(value.coeffs().to_vec()))
    }

    fn modal_mul(&mut self, x: &Var, m: &ModeMultiplier) -> Var {
        let value = kernels::modal_mul(self.spec_ref(*x), m);
        self.push(Op::ModalMul { x: *x, m: m.clone() }, Value::Spec(value))
    }

    fn to_real(&mut self, x: &Var) -> Var {
        let value = self.field_tensor(kernels::to_real(&self.grid, self.spec_ref(*x)));
        self.push(Op::ToReal { x: *x }, Value::Real(value))
    }

    fn to_real_pair(&mut self, a: &Var, b: &Var) -> (Var, Var) {
        let (re, im) = kernels::to_real_pair(&self.grid, self.spec_ref(*a), self.spec_ref(*b));
        let n = self.grid.n();
        let mut both = re.clone();
        both.extend_from_slice(&im);
        let pair = Tensor::new(vec![2, n, n], both).expect("pair shape");
        let pair = self.push(Op::ToRealPair { a: *a, b: *b }, Value::Real(pair));
        let re = self.field_tensor(re);
        let im = self.field_tensor(im);
        let first = self.push(Op::Select { x: pair, channel: 0 }, Value::Real(re));
        let second = self.push(Op::Select { x: pair, channel: 1 }, Value::Real(im));
        (first, second)
    }

    fn to_spectral(&mut self, x: &Var) -> Var {
        let value = kernels::to_spectral(&self.grid, self.real_ref(*x).data());
        self.push(Op::ToSpectral { x: *x }, Value::Spec(value))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Var {
        let (av, bv) = (self.real_ref(*a), self.real_ref(*b));
        let value = Tensor::new(av.shape().to_vec(), kernels::mul(av.data(), bv.data()))
            .expect("mul shape");
        self.push(Op::Mul { a: *a, b: *b }, Value::Real(value))
    }

    fn lincomb_real(&mut self, terms: &[(f64, &Var)]) -> Var {
        let slices: Vec<(f64, &[f64])> = terms
            .iter()
            .map(|(c, v)| (*c, self.real_ref(**v).data()))
            .collect();
        let shape = self.real_ref(*terms[0].1).shape().to_vec();
        let value = Tensor::new(shape, kernels::lincomb_real(&slices)).expect("lincomb shape");
        let op = Op::LinCombReal(terms.iter().map(|(c, v)| (*c, **v)).collect());
        self.push(op, Value::Real(value))
    }

    fn lincomb_spec(&mut self, terms: &[(f64, &Var)]) -> Var {
        let slices: Vec<(f64, &[C64])> = terms
            .iter()
            .map(|(c, v)| (*c, self.spec_ref(**v)))
            .collect();
        let value = kernels::lincomb_complex(&slices);
        let op = Op::LinCombSpec(terms.iter().map(|(c, v)| (*c, **v)).collect());
        self.push(op, Value::Spec(value))
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: &Var) -> Result<Var> {
        let value = conv::forward(self.real_ref(*x), self.real_ref(*w), self.real_ref(*b))?;
        Ok(self.push(
            Op::Conv2d {
                x: *x,
                w: *w,
                b: *b,
            },
            Value::Real(value),
        ))
    }

    fn relu(&mut self, x: &Var) -> Var {
        let value = conv::relu(self.real_ref(*x));
        self.push(Op::Relu { x: *x }, Value::Real(value))
    }

    fn spec_data<'a>(&'a self, x: &'a Var) -> &'a [C64] {
        self.spec_ref(*x)
    }

    fn real_data<'a>(&'a self, x: &'a Var) -> &'a Tensor {
        self.real_ref(*x)
    }

    fn opaque_spec(
        &mut self,
        name: &'static str,
        _x: &Var,
        _f: &dyn Fn(&SpectralField) -> Result<SpectralField>,
    ) -> Result<Var> {
        Err(QgError::UnregisteredPrimitive(name))
    }
}
