//! Dynamic Smagorinsky closure in vorticity form.
//!
//! `R = ∇·(ν_e ∇ω̄)`, `ν_e = C Δ² |S̄|`, with `C = C_s²` fitted each call from
//! the Germano identity between the grid filter and a test filter at
//! `test_ratio · Δ`, averaged over the whole domain and clipped at zero.

use serde::{Deserialize, Serialize};

use super::ClosureTerm;
use crate::autodiff::Backend;
use crate::coarse::cutoff_filter;
use crate::error::{QgError, Result};
use crate::spectral::{inv_laplacian, kernels, SpectralField};

/// Below this mean `⟨M·M⟩` the least-squares fit is considered degenerate.
const DEGENERATE_DENOMINATOR: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicSmagorinsky {
    pub test_ratio: f64,
}

impl Default for DynamicSmagorinsky {
    fn default() -> Self {
        Self { test_ratio: 2.0 }
    }
}

#[derive(Debug, Clone)]
pub struct SmagorinskyOutput {
    pub tendency: SpectralField,
    /// Fitted `C_s²` after clipping.
    pub coefficient: f64,
}

/// Real-space quantities derived from one vorticity field.
struct Resolved {
    u: Vec<f64>,
    v: Vec<f64>,
    omega: Vec<f64>,
    omega_x: Vec<f64>,
    omega_y: Vec<f64>,
    strain: Vec<f64>,
}

impl Resolved {
    fn new(omega_hat: &SpectralField) -> Self {
        let grid = omega_hat.grid();
        let w = omega_hat.coeffs();
        let psi_hat = inv_laplacian(omega_hat);
        let psi = psi_hat.coeffs();
        let d = |x: &[_], m| kernels::modal_mul(x, m);
        let psi_x = d(psi, grid.ddx());
        let psi_y = d(psi, grid.ddy());
        let (u_neg, v) = kernels::to_real_pair(grid, &psi_y, &psi_x);
        let u = u_neg.into_iter().map(|x| -x).collect();
        let (omega_x, omega_y) = kernels::to_real_pair(grid, &d(w, grid.ddx()), &d(w, grid.ddy()));
        let omega = kernels::to_real(grid, w);
        // second derivatives from the exact wavenumbers
        let psi_xy = d(&psi_x, grid.ddy());
        let psi_xx = d(&psi_x, grid.ddx());
        let psi_yy = d(&psi_y, grid.ddy());
        let (pxy, pxx) = kernels::to_real_pair(grid, &psi_xy, &psi_xx);
        let pyy = kernels::to_real(grid, &psi_yy);
        let strain = (0..grid.len())
            .map(|i| {
                let s11 = -pxy[i];
                let s12 = 0.5 * (pxx[i] - pyy[i]);
                2.0 * (s11 * s11 + s12 * s12).sqrt()
            })
            .collect();
        Self {
            u,
            v,
            omega,
            omega_x,
            omega_y,
            strain,
        }
    }
}

impl DynamicSmagorinsky {
    pub fn evaluate(&self, omega_hat: &SpectralField) -> Result<SmagorinskyOutput> {
        if !(self.test_ratio > 1.0) {
            return Err(QgError::Config(format!(
                "test filter ratio must exceed 1, got {}",
                self.test_ratio
            )));
        }
        if !omega_hat.is_finite() {
            return Err(QgError::NonFinite("Smagorinsky input".into()));
        }
        let grid = omega_hat.grid().clone();
        let delta = grid.spacing();
        let d2 = delta * delta;
        let k_test = grid.n() as f64 / (2.0 * self.test_ratio);
        let ratio2 = self.test_ratio * self.test_ratio;

        let hat = |values: &[f64]| -> Vec<f64> {
            let spec = SpectralField::from_raw(grid.clone(), kernels::to_spectral(&grid, values));
            kernels::to_real(&grid, cutoff_filter(&spec, k_test).coeffs())
        };
        let prod = |a: &[f64], b: &[f64]| kernels::mul(a, b);

        let res = Resolved::new(omega_hat);
        let test = Resolved::new(&cutoff_filter(omega_hat, k_test));

        let lx: Vec<f64> = hat(&prod(&res.u, &res.omega))
            .iter()
            .zip(prod(&test.u, &test.omega))
            .map(|(a, b)| a - b)
            .collect();
        let ly: Vec<f64> = hat(&prod(&res.v, &res.omega))
            .iter()
            .zip(prod(&test.v, &test.omega))
            .map(|(a, b)| a - b)
            .collect();
        let grid_flux = |g: &[f64]| -> Vec<f64> {
            res.strain.iter().zip(g).map(|(s, gi)| d2 * s * gi).collect()
        };
        let m_of = |test_grad: &[f64], grid_grad: &[f64]| -> Vec<f64> {
            let filtered = hat(&grid_flux(grid_grad));
            (0..grid.len())
                .map(|i| ratio2 * d2 * test.strain[i] * test_grad[i] - filtered[i])
                .collect()
        };
        let mx = m_of(&test.omega_x, &res.omega_x);
        let my = m_of(&test.omega_y, &res.omega_y);

        let len = grid.len() as f64;
        let num: f64 = (0..grid.len()).map(|i| lx[i] * mx[i] + ly[i] * my[i]).sum::<f64>() / len;
        let den: f64 = (0..grid.len()).map(|i| mx[i] * mx[i] + my[i] * my[i]).sum::<f64>() / len;
        let coefficient = if den < DEGENERATE_DENOMINATOR {
            0.0
        } else {
            (-num / den).max(0.0)
        };
        Ok(SmagorinskyOutput {
            tendency: tendency_from(&res, omega_hat, coefficient),
            coefficient,
        })
    }
}

fn tendency_from(res: &Resolved, omega_hat: &SpectralField, coefficient: f64) -> SpectralField {
    let grid = omega_hat.grid();
    if coefficient == 0.0 {
        return SpectralField::zeros(grid.clone());
    }
    let scale = coefficient * grid.spacing() * grid.spacing();
    let qx: Vec<f64> = (0..grid.len()).map(|i| scale * res.strain[i] * res.omega_x[i]).collect();
    let qy: Vec<f64> = (0..grid.len()).map(|i| scale * res.strain[i] * res.omega_y[i]).collect();
    let div_x = kernels::modal_mul(&kernels::to_spectral(grid, &qx), grid.ddx());
    let div_y = kernels::modal_mul(&kernels::to_spectral(grid, &qy), grid.ddy());
    let coeffs = kernels::lincomb_complex(&[(1.0, &div_x), (1.0, &div_y)]);
    SpectralField::from_raw(grid.clone(), coeffs)
}

/// `∇·(C Δ² |S̄| ∇ω̄)` for a given coefficient `C`.
pub fn eddy_viscosity_tendency(omega_hat: &SpectralField, coefficient: f64) -> SpectralField {
    tendency_from(&Resolved::new(omega_hat), omega_hat, coefficient)
}

/// Dynamic Smagorinsky tendency with the default test filter.
pub fn smagorinsky_dynamic_eval(omega_hat_lo: &SpectralField) -> Result<SpectralField> {
    Ok(DynamicSmagorinsky::default().evaluate(omega_hat_lo)?.tendency)
}

impl<B: Backend> ClosureTerm<B> for DynamicSmagorinsky {
    fn tendency(&self, b: &mut B, omega: &B::Spec) -> Result<Option<B::Spec>> {
        let out = b.opaque_spec("dynamic_smagorinsky", omega, &|w| Ok(self.evaluate(w)?.tendency))?;
        Ok(Some(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::mean_product;
    use crate::spectral::{derivative, to_real, to_spectral, Axis, Grid, RealField};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn turbulent(n: usize, seed: u64) -> SpectralField {
        let g = Grid::new(n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = SpectralField::zeros(g.clone());
        for idx in 0..g.len() {
            let (kx, ky) = g.mode(idx);
            let k = g.mode_magnitude(idx);
            let upper = ky > 0 || (ky == 0 && kx > 0);
            if upper && k < n as f64 / 2.0 - 1.0 {
                let amp = 1.0 / (1.0 + k * k).sqrt();
                f.set_mode(kx, ky, crate::spectral::C64::from_polar(amp, rng.gen_range(0.0..2.0 * PI)));
            }
        }
        f
    }

    #[test]
    fn zero_state_gives_zero() {
        let g = Grid::new(32).unwrap();
        let out = DynamicSmagorinsky::default().evaluate(&SpectralField::zeros(g)).unwrap();
        assert_eq!(out.coefficient, 0.0);
        assert_eq!(out.tendency.max_abs(), 0.0);
    }

    #[test]
    fn single_mode_matches_hand_assembled_divergence() {
        // ψ = cos x: ω = −cos x, ∂xω = sin x, |S| = |cos x|.
        let g = Grid::new(32).unwrap();
        let c = 0.03;
        let omega = to_spectral(&RealField::from_fn(g.clone(), |x, _| -x.cos())).unwrap();
        let r = eddy_viscosity_tendency(&omega, c);
        let d2 = g.spacing() * g.spacing();
        let q = RealField::from_fn(g.clone(), |x, _| c * d2 * x.cos().abs() * x.sin());
        let expected = derivative(&to_spectral(&q).unwrap(), Axis::X, 1);
        let scale = expected.max_abs();
        assert!(scale > 0.0);
        for (a, b) in r.coeffs().iter().zip(expected.coeffs()) {
            assert!((a - b).norm() <= 1e-12 * scale, "{a} vs {b}");
        }
    }

    #[test]
    fn turbulent_states_are_dissipated() {
        let model = DynamicSmagorinsky::default();
        for seed in 0..5 {
            let w = turbulent(32, seed);
            let out = model.evaluate(&w).unwrap();
            assert!(out.coefficient >= 0.0);
            assert!(mean_product(&w, &out.tendency) <= 0.0);
            let r = to_real(&out.tendency).unwrap();
            assert!(r.is_finite());
        }
    }

    #[test]
    fn eddy_tendency_is_dissipative_for_any_positive_coefficient() {
        let w = turbulent(32, 11);
        for c in [1e-3, 0.1, 1.0] {
            let r = eddy_viscosity_tendency(&w, c);
            assert!(mean_product(&w, &r) < 0.0);
        }
    }

    #[test]
    fn rejects_bad_ratio() {
        let s = DynamicSmagorinsky { test_ratio: 1.0 };
        assert!(s.evaluate(&turbulent(16, 0)).is_err());
    }
}
