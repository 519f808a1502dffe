//! Subgrid closures: the zero baseline, dynamic Smagorinsky and the
//! convolutional model.

mod cnn;
mod smagorinsky;

pub use cnn::{
    cnn_eval, cnn_init, cnn_output_with, cnn_tendency_with, CnnArchitecture, CnnClosure, CnnParams,
    Normalization, TapedCnn,
};
pub use smagorinsky::{eddy_viscosity_tendency, smagorinsky_dynamic_eval, DynamicSmagorinsky, SmagorinskyOutput};

use crate::autodiff::{Backend, Eager, Tape};
use crate::error::Result;
use crate::spectral::SpectralField;

/// Contribution of a closure to the vorticity tendency on backend `B`.
/// `None` means "no term", which keeps the unclosed arithmetic untouched.
pub trait ClosureTerm<B: Backend> {
    fn tendency(&self, b: &mut B, omega: &B::Spec) -> Result<Option<B::Spec>>;
}

#[derive(Debug, Clone)]
pub enum ClosureModel {
    Zero,
    SmagorinskyDynamic(DynamicSmagorinsky),
    Cnn(CnnClosure),
}

impl ClosureModel {
    pub fn name(&self) -> &'static str {
        match self {
            ClosureModel::Zero => "zero",
            ClosureModel::SmagorinskyDynamic(_) => "smagorinsky",
            ClosureModel::Cnn(_) => "cnn",
        }
    }

    /// Tendency contribution for an LES-grid state.
    pub fn eval(&self, omega_hat: &SpectralField) -> Result<SpectralField> {
        let mut eager = Eager::new(omega_hat.grid().clone());
        Ok(self
            .tendency(&mut eager, omega_hat)?
            .unwrap_or_else(|| zero_eval(omega_hat)))
    }
}

pub fn zero_eval(omega_hat: &SpectralField) -> SpectralField {
    SpectralField::zeros(omega_hat.grid().clone())
}

impl ClosureTerm<Eager> for ClosureModel {
    fn tendency(&self, b: &mut Eager, omega: &SpectralField) -> Result<Option<SpectralField>> {
        match self {
            ClosureModel::Zero => Ok(None),
            ClosureModel::SmagorinskyDynamic(s) => s.tendency(b, omega),
            ClosureModel::Cnn(c) => c.tendency(b, omega),
        }
    }
}

/// Fixed (non-differentiated) closures on a tape; the CNN weights enter as
/// constants. Smagorinsky has no vector-Jacobian product and is refused.
impl ClosureTerm<Tape> for ClosureModel {
    fn tendency(&self, b: &mut Tape, omega: &crate::autodiff::Var) -> Result<Option<crate::autodiff::Var>> {
        match self {
            ClosureModel::Zero => Ok(None),
            ClosureModel::SmagorinskyDynamic(s) => s.tendency(b, omega),
            ClosureModel::Cnn(c) => {
                let taped = TapedCnn::constant(b, c);
                taped.tendency(b, omega)
            }
        }
    }
}
