//! Reverse-mode differentiation through the spectral solver and the CNN.
//!
//! Every numerical path that must be differentiated is written once against
//! the [`Backend`] trait. [`Eager`] evaluates values directly; [`Tape`]
//! evaluates the same kernels while recording each primitive so that
//! [`Tape::backward`] can replay vector-Jacobian products in reverse order.
//! Sharing the code path is what makes a taped rollout bitwise identical to
//! an eager simulation.

mod eager;
mod gradcheck;
mod tape;

use std::sync::Arc;

pub use eager::Eager;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use tape::{Adjoints, OpKind, Tape, Var};

use crate::error::Result;
use crate::spectral::{Grid, ModeMultiplier, SpectralField, C64};
use crate::tensor::Tensor;

/// Primitive operations on spectral and real fields.
///
/// Real handles carry `[c, n, n]` tensors (one channel for plain fields),
/// spectral handles carry one `n × n` coefficient array.
pub trait Backend {
    type Spec: Clone;
    type Real: Clone;

    fn grid(&self) -> &Arc<Grid>;

    /// Inject a value that carries no gradient.
    fn spec_const(&mut self, value: &SpectralField) -> Self::Spec;

    fn modal_mul(&mut self, x: &Self::Spec, m: &ModeMultiplier) -> Self::Spec;

    fn to_real(&mut self, x: &Self::Spec) -> Self::Real;

    /// Two inverse transforms sharing one complex FFT.
    fn to_real_pair(&mut self, a: &Self::Spec, b: &Self::Spec) -> (Self::Real, Self::Real);

    fn to_spectral(&mut self, x: &Self::Real) -> Self::Spec;

    fn mul(&mut self, a: &Self::Real, b: &Self::Real) -> Self::Real;

    fn lincomb_real(&mut self, terms: &[(f64, &Self::Real)]) -> Self::Real;

    fn lincomb_spec(&mut self, terms: &[(f64, &Self::Spec)]) -> Self::Spec;

    fn conv2d(&mut self, x: &Self::Real, w: &Self::Real, b: &Self::Real) -> Result<Self::Real>;

    fn relu(&mut self, x: &Self::Real) -> Self::Real;

    fn spec_data<'a>(&'a self, x: &'a Self::Spec) -> &'a [C64];

    fn real_data<'a>(&'a self, x: &'a Self::Real) -> &'a Tensor;

    /// Evaluate a black-box spectral map. Backends that must differentiate
    /// refuse it with [`crate::QgError::UnregisteredPrimitive`].
    fn opaque_spec(
        &mut self,
        name: &'static str,
        x: &Self::Spec,
        f: &dyn Fn(&SpectralField) -> Result<SpectralField>,
    ) -> Result<Self::Spec>;
}

/// Real inner product of complex arrays, `Σ Re(conj(a)·b)`.
pub fn real_inner(a: &[C64], b: &[C64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.re * y.re + x.im * y.im).sum()
}
