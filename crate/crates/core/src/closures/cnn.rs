//! Fully convolutional closure `M_NN(ω̄ | θ)`: circular 2D convolutions with
//! ReLU between layers, one input channel (ω̄) and one output channel (R).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ClosureTerm;
use crate::autodiff::{Adjoints, Backend, Eager, Tape, Var};
use crate::error::{QgError, Result};
use crate::spectral::{RealField, SpectralField};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnArchitecture {
    pub depth: usize,
    pub width: usize,
    pub kernel: usize,
}

impl Default for CnnArchitecture {
    /// 10 layers of 64 features with 5×5 kernels.
    fn default() -> Self {
        Self {
            depth: 10,
            width: 64,
            kernel: 5,
        }
    }
}

impl CnnArchitecture {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.width < 1 || self.kernel % 2 == 0 {
            return Err(QgError::Config(format!(
                "CNN needs depth >= 1, width >= 1 and an odd kernel (got {self:?})"
            )));
        }
        Ok(())
    }

    /// Channel counts at every layer boundary: `[1, w, …, w, 1]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.width; self.depth + 1];
        w[0] = 1;
        w[self.depth] = 1;
        w
    }

    fn layer_shapes(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        let w = self.widths();
        (0..self.depth)
            .map(|l| (vec![w[l + 1], w[l], self.kernel, self.kernel], vec![w[l + 1]]))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|(w, b)| w.iter().product::<usize>() + b[0])
            .sum()
    }
}

/// Weights `[out, in, k, k]` and biases `[out]` per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnParams {
    arch: CnnArchitecture,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

impl CnnParams {
    pub fn zeros(arch: CnnArchitecture) -> Result<Self> {
        arch.validate()?;
        let (weights, biases) = arch
            .layer_shapes()
            .into_iter()
            .map(|(w, b)| (Tensor::zeros(w), Tensor::zeros(b)))
            .unzip();
        Ok(Self {
            arch,
            weights,
            biases,
        })
    }

    /// Parameters from the flat layout: per layer, weights then biases.
    pub fn from_flat(arch: CnnArchitecture, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        p.set_flat(flat)?;
        Ok(p)
    }

    pub fn architecture(&self) -> &CnnArchitecture {
        &self.arch
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    pub fn len(&self) -> usize {
        self.arch.param_count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.biases).all(Tensor::is_finite)
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b.data());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(QgError::Shape(format!(
                "expected {} parameters, got {}",
                self.len(),
                flat.len()
            )));
        }
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for t in [w, b] {
                let n = t.len();
                t.data_mut().copy_from_slice(&flat[at..at + n]);
                at += n;
            }
        }
        Ok(())
    }

    fn layer_refs(&self) -> Vec<(&Tensor, &Tensor)> {
        self.weights.iter().zip(&self.biases).collect()
    }
}

/// Uniform weights in `±√(1 / (c_in·k²))`, zero biases.
pub fn cnn_init(arch: CnnArchitecture, seed: u64) -> Result<CnnParams> {
    let mut p = CnnParams::zeros(arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for w in p.weights.iter_mut() {
        let fan_in = w.shape()[1] * arch.kernel * arch.kernel;
        let bound = (1.0 / fan_in as f64).sqrt();
        for v in w.data_mut() {
            *v = rng.gen_range(-bound..bound);
        }
    }
    Ok(p)
}

/// Input/output scales, frozen from the training data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub omega_scale: f64,
    pub residual_scale: f64,
}

impl Normalization {
    pub fn new(omega_scale: f64, residual_scale: f64) -> Result<Self> {
        let n = Self {
            omega_scale,
            residual_scale,
        };
        n.validate()?;
        Ok(n)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega_scale > 0.0 && self.residual_scale > 0.0)
            || !self.omega_scale.is_finite()
            || !self.residual_scale.is_finite()
        {
            return Err(QgError::Config(format!(
                "normalization scales must be positive and finite (got {}, {})",
                self.omega_scale, self.residual_scale
            )));
        }
        Ok(())
    }

    pub fn identity() -> Self {
        Self {
            omega_scale: 1.0,
            residual_scale: 1.0,
        }
    }
}

/// Network output in real space for a real-space vorticity `[1, n, n]`.
pub fn cnn_output_with<B: Backend>(
    b: &mut B,
    omega: &B::Real,
    layers: &[(&B::Real, &B::Real)],
    norm: &Normalization,
) -> Result<B::Real> {
    let mut h = b.lincomb_real(&[(1.0 / norm.omega_scale, omega)]);
    for (i, (w, bias)) in layers.iter().enumerate() {
        h = b.conv2d(&h, w, bias)?;
        if i + 1 < layers.len() {
            h = b.relu(&h);
        }
    }
    Ok(b.lincomb_real(&[(norm.residual_scale, &h)]))
}

/// Closure tendency for a spectral vorticity. The network output is
/// restricted to the dealiased modes without the mean, the support of the
/// resolved nonlinear term, so the closure cannot create mean vorticity or
/// drive modes the Jacobian never drains.
pub fn cnn_tendency_with<B: Backend>(
    b: &mut B,
    omega: &B::Spec,
    layers: &[(&B::Real, &B::Real)],
    norm: &Normalization,
) -> Result<B::Spec> {
    let w = b.to_real(omega);
    let out = cnn_output_with(b, &w, layers, norm)?;
    let spec = b.to_spectral(&out);
    let support = b.grid().closure_support_op().clone();
    Ok(b.modal_mul(&spec, &support))
}

/// `M_NN(ω̄ | θ)` in spectral form.
pub fn cnn_eval(omega_bar: &RealField, params: &CnnParams, norm: &Normalization) -> Result<SpectralField> {
    let grid = omega_bar.grid().clone();
    let n = grid.n();
    let mut eager = Eager::new(grid);
    let x = Tensor::new(vec![1, n, n], omega_bar.values().to_vec())?;
    let out = cnn_output_with(&mut eager, &x, &params.layer_refs(), norm)?;
    if !out.is_finite() {
        return Err(QgError::NonFinite("CNN activations".into()));
    }
    let spec = eager.to_spectral(&out);
    Ok(eager.modal_mul(&spec, omega_bar.grid().closure_support_op()))
}

/// Trained network plus its normalization.
#[derive(Debug, Clone)]
pub struct CnnClosure {
    pub params: CnnParams,
    pub norm: Normalization,
}

impl ClosureTerm<Eager> for CnnClosure {
    fn tendency(&self, b: &mut Eager, omega: &SpectralField) -> Result<Option<SpectralField>> {
        cnn_tendency_with(b, omega, &self.params.layer_refs(), &self.norm).map(Some)
    }
}

/// CNN parameters placed on a tape, as leaves or as constants.
#[derive(Debug, Clone)]
pub struct TapedCnn {
    layers: Vec<(Var, Var)>,
    norm: Normalization,
}

impl TapedCnn {
    /// Differentiable copy of `closure`'s parameters.
    pub fn leaves(tape: &mut Tape, closure: &CnnClosure) -> Self {
        Self::place(tape, closure, Tape::leaf_real)
    }

    pub fn constant(tape: &mut Tape, closure: &CnnClosure) -> Self {
        Self::place(tape, closure, Tape::const_real)
    }

    fn place(tape: &mut Tape, closure: &CnnClosure, put: fn(&mut Tape, Tensor) -> Var) -> Self {
        let layers = closure
            .params
            .weights
            .iter()
            .zip(&closure.params.biases)
            .map(|(w, b)| (put(tape, w.clone()), put(tape, b.clone())))
            .collect();
        Self {
            layers,
            norm: closure.norm,
        }
    }

    pub fn layer_vars(&self) -> &[(Var, Var)] {
        &self.layers
    }

    pub fn output(&self, tape: &mut Tape, omega_real: &Var) -> Result<Var> {
        let refs: Vec<(&Var, &Var)> = self.layers.iter().map(|(w, b)| (w, b)).collect();
        cnn_output_with(tape, omega_real, &refs, &self.norm)
    }

    /// Gradient in the flat parameter layout; leaves that never influenced
    /// the loss get zeros.
    pub fn gradient(&self, adjoints: &Adjoints, arch: &CnnArchitecture) -> Vec<f64> {
        let mut out = Vec::with_capacity(arch.param_count());
        for ((w, b), (ws, bs)) in self.layers.iter().zip(arch.layer_shapes()) {
            for (v, shape) in [(w, ws), (b, bs)] {
                match adjoints.real(*v) {
                    Some(g) => out.extend_from_slice(g.data()),
                    None => out.extend(std::iter::repeat(0.0).take(shape.iter().product())),
                }
            }
        }
        out
    }
}

impl ClosureTerm<Tape> for TapedCnn {
    fn tendency(&self, b: &mut Tape, omega: &Var) -> Result<Option<Var>> {
        let refs: Vec<(&Var, &Var)> = self.layers.iter().map(|(w, b)| (w, b)).collect();
        cnn_tendency_with(b, omega, &refs, &self.norm).map(Some)
    }
}
