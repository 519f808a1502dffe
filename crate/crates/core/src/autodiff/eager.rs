use std::sync::Arc;

use super::Backend;
use crate::conv;
use crate::error::Result;
use crate::spectral::{kernels, Grid, ModeMultiplier, SpectralField, C64};
use crate::tensor::Tensor;

/// Direct evaluation with no recording.
#[derive(Debug, Clone)]
pub struct Eager {
    grid: Arc<Grid>,
}

impl Eager {
    pub fn new(grid: Arc<Grid>) -> Self {
        Self { grid }
    }

    fn field_tensor(&self, values: Vec<f64>) -> Tensor {
        let n = self.grid.n();
        Tensor::new(vec![1, n, n], values).expect("field tensor shape")
    }
}

impl Backend for Eager {
    type Spec = SpectralField;
    type Real = Tensor;

    fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    fn spec_const(&mut self, value: &SpectralField) -> SpectralField {
        value.clone()
    }

    fn modal_mul(&mut self, x: &SpectralField, m: &ModeMultiplier) -> SpectralField {
        SpectralField::from_raw(self.grid.clone(), kernels::modal_mul(x.coeffs(), m))
    }

    fn to_real(&mut self, x: &SpectralField) -> Tensor {
        self.field_tensor(kernels::to_real(&self.grid, x.coeffs()))
    }

    fn to_real_pair(&mut self, a: &SpectralField, b: &SpectralField) -> (Tensor, Tensor) {
        let (re, im) = kernels::to_real_pair(&self.grid, a.coeffs(), b.coeffs());
        (self.field_tensor(re), self.field_tensor(im))
    }

    fn to_spectral(&mut self, x: &Tensor) -> SpectralField {
        SpectralField::from_raw(self.grid.clone(), kernels::to_spectral(&self.grid, x.data()))
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        Tensor::new(a.shape().to_vec(), kernels::mul(a.data(), b.data())).expect("mul shape")
    }

    fn lincomb_real(&mut self, terms: &[(f64, &Tensor)]) -> Tensor {
        let slices: Vec<(f64, &[f64])> = terms.iter().map(|(c, t)| (*c, t.data())).collect();
        Tensor::new(terms[0].1.shape().to_vec(), kernels::lincomb_real(&slices))
            .expect("lincomb shape")
    }

    fn lincomb_spec(&mut self, terms: &[(f64, &SpectralField)]) -> SpectralField {
        let slices: Vec<(f64, &[C64])> = terms.iter().map(|(c, f)| (*c, f.coeffs())).collect();
        SpectralField::from_raw(self.grid.clone(), kernels::lincomb_complex(&slices))
    }

    fn conv2d(&mut self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        conv::forward(x, w, b)
    }

    fn relu(&mut self, x: &Tensor) -> Tensor {
        conv::relu(x)
    }

    fn spec_data<'a>(&'a self, x: &'a SpectralField) -> &'a [C64] {
        x.coeffs()
    }

    fn real_data<'a>(&'a self, x: &'a Tensor) -> &'a Tensor {
        x
    }

    fn opaque_spec(
        &mut self,
        _name: &'static str,
        x: &SpectralField,
        f: &dyn Fn(&SpectralField) -> Result<SpectralField>,
    ) -> Result<SpectralField> {
        f(x)
    }
}
