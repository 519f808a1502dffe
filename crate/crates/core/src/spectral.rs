//! Doubly periodic spectral arithmetic on square `2π × 2π` grids.
//!
//! Coefficients are stored as a full complex `n × n` array, row-major with
//! the row index running over `ky` and the column index over `kx`. Index `i`
//! carries wavenumber `i` for `i < n/2` and `i - n` otherwise, so each axis
//! spans `-n/2 ..= n/2 - 1`. The forward transform divides by `n²`, which
//! makes the `k = 0` coefficient equal to the field mean and turns Parseval
//! into `mean(f²) = Σ|f̂|²`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::autodiff::{Backend, Eager};
use crate::error::{QgError, Result};

pub type C64 = Complex<f64>;

/// Relative tolerance used when checking Hermitian symmetry of coefficients.
pub const HERMITIAN_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

/// Fixed per-mode complex multiplier (derivatives, Poisson inversion, masks).
#[derive(Clone)]
pub struct ModeMultiplier(Arc<[C64]>);

impl ModeMultiplier {
    pub fn new(values: Vec<C64>) -> Self {
        Self(values.into())
    }

    pub fn from_real(values: impl IntoIterator<Item = f64>) -> Self {
        Self(values.into_iter().map(|v| C64::new(v, 0.0)).collect())
    }

    pub fn values(&self) -> &[C64] {
        &self.0
    }
}

impl fmt::Debug for ModeMultiplier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ModeMultiplier(len = {})", self.0.len())
    }
}

pub struct Grid {
    n: usize,
    length: f64,
    wavenumbers: Vec<i64>,
    dealias_mask: Vec<bool>,
    ddx: ModeMultiplier,
    ddy: ModeMultiplier,
    laplacian: ModeMultiplier,
    inv_laplacian: ModeMultiplier,
    dealias: ModeMultiplier,
    closure_support: ModeMultiplier,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid")
            .field("n", &self.n)
            .field("length", &self.length)
            .finish()
    }
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n && self.length == other.length
    }
}

impl Grid {
    pub fn new(n: usize) -> Result<Arc<Grid>> {
        if n < 8 || n % 2 != 0 {
            return Err(QgError::InvalidGrid(format!(
                "grid size must be even and at least 8, got {n}"
            )));
        }
        let half = (n / 2) as i64;
        let wavenumbers: Vec<i64> = (0..n as i64)
            .map(|i| if i < half { i } else { i - n as i64 })
            .collect();
        let n2 = n * n;
        let mut dealias_mask = vec![false; n2];
        let mut ddx = Vec::with_capacity(n2);
        let mut ddy = Vec::with_capacity(n2);
        let mut lap = Vec::with_capacity(n2);
        let mut inv_lap = Vec::with_capacity(n2);
        // |k| < n/3. When 3 divides n, keeping |k| = n/3 would let the
        // product at 2n/3 alias back onto -n/3 and break conservation.
        let keep = |k: i64| 3 * (k.unsigned_abs() as usize) < n;
        for iy in 0..n {
            let ky = wavenumbers[iy];
            for ix in 0..n {
                let kx = wavenumbers[ix];
                dealias_mask[iy * n + ix] = keep(kx) && keep(ky);
                ddx.push(C64::new(0.0, odd_derivative_wavenumber(kx, n)));
                ddy.push(C64::new(0.0, odd_derivative_wavenumber(ky, n)));
                let k2 = (kx * kx + ky * ky) as f64;
                lap.push(-k2);
                inv_lap.push(if k2 == 0.0 { 0.0 } else { -1.0 / k2 });
            }
        }
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        let ifft = planner.plan_fft_inverse(n);
        let dealias = ModeMultiplier::from_real(dealias_mask.iter().map(|&m| f64::from(m as u8)));
        let closure_support = ModeMultiplier::from_real((0..n2).map(|idx| f64::from((dealias_mask[idx] && idx != 0) as u8)));
        Ok(Arc::new(Grid {
            n,
            length: 2.0 * PI,
            wavenumbers,
            dealias_mask,
            ddx: ModeMultiplier::new(ddx),
            ddy: ModeMultiplier::new(ddy),
            laplacian: ModeMultiplier::from_real(lap),
            inv_laplacian: ModeMultiplier::from_real(inv_lap),
            dealias,
            closure_support,
            fft,
            ifft,
        }))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    /// Grid spacing `L / n`.
    pub fn spacing(&self) -> f64 {
        self.length / self.n as f64
    }

    /// Collocation coordinate of index `i` along either axis.
    pub fn coord(&self, i: usize) -> f64 {
        i as f64 * self.spacing()
    }

    pub fn wavenumbers(&self) -> &[i64] {
        &self.wavenumbers
    }

    /// `(kx, ky)` of flat mode index `idx`.
    pub fn mode(&self, idx: usize) -> (i64, i64) {
        (
            self.wavenumbers[idx % self.n],
            self.wavenumbers[idx / self.n],
        )
    }

    /// Flat index of mode `(kx, ky)`; wavenumbers wrap modulo `n`.
    pub fn index_of(&self, kx: i64, ky: i64) -> usize {
        let n = self.n as i64;
        (ky.rem_euclid(n) * n + kx.rem_euclid(n)) as usize
    }

    /// Flat index of the mode `-k` for flat index `idx`.
    pub fn conjugate_index(&self, idx: usize) -> usize {
        let n = self.n;
        let (ix, iy) = (idx % n, idx / n);
        ((n - iy) % n) * n + (n - ix) % n
    }

    pub fn mode_magnitude(&self, idx: usize) -> f64 {
        let (kx, ky) = self.mode(idx);
        ((kx * kx + ky * ky) as f64).sqrt()
    }

    /// 2/3-rule mask: true where `max(|kx|, |ky|) < n/3`.
    pub fn dealias_mask(&self) -> &[bool] {
        &self.dealias_mask
    }

    pub fn ddx(&self) -> &ModeMultiplier {
        &self.ddx
    }

    pub fn ddy(&self) -> &ModeMultiplier {
        &self.ddy
    }

    pub fn laplacian_op(&self) -> &ModeMultiplier {
        &self.laplacian
    }

    pub fn inv_laplacian_op(&self) -> &ModeMultiplier {
        &self.inv_laplacian
    }

    /// Dealiased modes without the mean: where a closure tendency may act.
    /// Outside it the resolved nonlinear term is zero, so a closure there
    /// would act on modes that nothing else couples to the flow.
    pub fn closure_support_op(&self) -> &ModeMultiplier {
        &self.closure_support
    }

    pub fn dealias_op(&self) -> &ModeMultiplier {
        &self.dealias
    }

    /// Unnormalized forward 2D DFT (`e^{-ik·x}`), in place.
    pub(crate) fn fft_forward(&self, buf: &mut [C64]) {
        self.fft2(buf, &self.fft);
    }

    /// Unnormalized inverse 2D DFT (`e^{+ik·x}`), in place.
    pub(crate) fn fft_inverse(&self, buf: &mut [C64]) {
        self.fft2(buf, &self.ifft);
    }

    fn fft2(&self, buf: &mut [C64], plan: &Arc<dyn Fft<f64>>) {
        debug_assert_eq!(buf.len(), self.n * self.n);
        let mut scratch = vec![C64::new(0.0, 0.0); plan.get_inplace_scratch_len()];
        plan.process_with_scratch(buf, &mut scratch);
        transpose_square(buf, self.n);
        plan.process_with_scratch(buf, &mut scratch);
        transpose_square(buf, self.n);
    }
}

/// Wavenumber used by first-order derivatives: the Nyquist mode has no
/// sign-consistent derivative on an even grid and is mapped to zero.
fn odd_derivative_wavenumber(k: i64, n: usize) -> f64 {
    if k.unsigned_abs() as usize * 2 == n {
        0.0
    } else {
        k as f64
    }
}

fn transpose_square(buf: &mut [C64], n: usize) {
    for i in 0..n {
        for j in (i + 1)..n {
            buf.swap(i * n + j, j * n + i);
        }
    }
}

/// Real collocation values of a periodic scalar.
#[derive(Debug, Clone)]
pub struct RealField {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl RealField {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(QgError::Shape(format!(
                "real field on {}² grid needs {} values, got {}",
                grid.n(),
                grid.len(),
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(QgError::NonFinite(format!("real field at index {pos}")));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Arc<Grid>) -> Self {
        let values = vec![0.0; grid.len()];
        Self { grid, values }
    }

    /// Sample `f(x, y)` at the collocation points.
    pub fn from_fn(grid: Arc<Grid>, f: impl Fn(f64, f64) -> f64) -> Self {
        let n = grid.n();
        let mut values = Vec::with_capacity(n * n);
        for iy in 0..n {
            let y = grid.coord(iy);
            for ix in 0..n {
                values.push(f(grid.coord(ix), y));
            }
        }
        Self { grid, values }
    }

    pub(crate) fn from_raw(grid: Arc<Grid>, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.grid.n() + ix]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn mean_square(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>() / self.values.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Fourier coefficients of a real periodic scalar.
#[derive(Debug, Clone)]
pub struct SpectralField {
    grid: Arc<Grid>,
    coeffs: Vec<C64>,
}

impl SpectralField {
    pub fn new(grid: Arc<Grid>, coeffs: Vec<C64>) -> Result<Self> {
        if coeffs.len() != grid.len() {
            return Err(QgError::Shape(format!(
                "spectral field on {}² grid needs {} coefficients, got {}",
                grid.n(),
                grid.len(),
                coeffs.len()
            )));
        }
        Ok(Self { grid, coeffs })
    }

    pub fn zeros(grid: Arc<Grid>) -> Self {
        let coeffs = vec![C64::new(0.0, 0.0); grid.len()];
        Self { grid, coeffs }
    }

    pub(crate) fn from_raw(grid: Arc<Grid>, coeffs: Vec<C64>) -> Self {
        debug_assert_eq!(coeffs.len(), grid.len());
        Self { grid, coeffs }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn coeffs(&self) -> &[C64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [C64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<C64> {
        self.coeffs
    }

    pub fn coeff(&self, kx: i64, ky: i64) -> C64 {
        self.coeffs[self.grid.index_of(kx, ky)]
    }

    /// Set mode `k` to `value` and `-k` to its conjugate.
    pub fn set_mode(&mut self, kx: i64, ky: i64, value: C64) {
        let idx = self.grid.index_of(kx, ky);
        let cidx = self.grid.conjugate_index(idx);
        if idx == cidx {
            self.coeffs[idx] = C64::new(value.re, 0.0);
        } else {
            self.coeffs[idx] = value;
            self.coeffs[cidx] = value.conj();
        }
    }

    /// Field mean (the `k = 0` coefficient).
    pub fn mean(&self) -> f64 {
        self.coeffs[0].re
    }

    /// `Σ|f̂|²`, equal to `mean(f²)` under the mean-preserving convention.
    pub fn power(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    /// Largest `|f̂(-k) - conj(f̂(k))|` over all modes.
    pub fn hermitian_defect(&self) -> f64 {
        (0..self.coeffs.len())
            .map(|idx| {
                let cidx = self.grid.conjugate_index(idx);
                (self.coeffs[cidx] - self.coeffs[idx].conj()).norm()
            })
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// Scale every coefficient by a real factor.
    pub fn scaled(&self, factor: f64) -> SpectralField {
        let coeffs = self.coeffs.iter().map(|c| c * factor).collect();
        SpectralField::from_raw(self.grid.clone(), coeffs)
    }
}

pub(crate) fn ensure_same_grid(a: &Grid, b: &Grid) -> Result<()> {
    if a != b {
        return Err(QgError::GridMismatch {
            expected: a.n(),
            got: b.n(),
        });
    }
    Ok(())
}

/// Raw transform and pointwise kernels shared by the eager and taped backends.
pub mod kernels {
    use super::{Grid, ModeMultiplier, C64};

    /// Forward transform with `1/n²` normalization.
    pub fn to_spectral(grid: &Grid, values: &[f64]) -> Vec<C64> {
        let mut buf: Vec<C64> = values.iter().map(|&v| C64::new(v, 0.0)).collect();
        grid.fft_forward(&mut buf);
        let scale = 1.0 / grid.len() as f64;
        for c in &mut buf {
            *c *= scale;
        }
        buf
    }

    /// Real part of the inverse transform.
    pub fn to_real(grid: &Grid, coeffs: &[C64]) -> Vec<f64> {
        let mut buf = coeffs.to_vec();
        grid.fft_inverse(&mut buf);
        buf.into_iter().map(|c| c.re).collect()
    }

    /// Two inverse transforms in one pass: `(Re, Im)` of `ifft(a + i b)`.
    pub fn to_real_pair(grid: &Grid, a: &[C64], b: &[C64]) -> (Vec<f64>, Vec<f64>) {
        let mut buf: Vec<C64> = a
            .iter()
            .zip(b)
            .map(|(x, y)| C64::new(x.re - y.im, x.im + y.re))
            .collect();
        grid.fft_inverse(&mut buf);
        let re = buf.iter().map(|c| c.re).collect();
        let im = buf.iter().map(|c| c.im).collect();
        (re, im)
    }

    /// Adjoint of [`to_spectral`] under the real inner product.
    pub fn to_spectral_adjoint(grid: &Grid, g: &[C64]) -> Vec<f64> {
        let mut buf = g.to_vec();
        grid.fft_inverse(&mut buf);
        let scale = 1.0 / grid.len() as f64;
        buf.into_iter().map(|c| c.re * scale).collect()
    }

    /// Adjoint of [`to_real`] under the real inner product.
    pub fn to_real_adjoint(grid: &Grid, g: &[f64]) -> Vec<C64> {
        let mut buf: Vec<C64> = g.iter().map(|&v| C64::new(v, 0.0)).collect();
        grid.fft_forward(&mut buf);
        buf
    }

    /// Adjoint of [`to_real_pair`]: returns cotangents for `(a, b)`.
    pub fn to_real_pair_adjoint(grid: &Grid, ga: &[f64], gb: &[f64]) -> (Vec<C64>, Vec<C64>) {
        let mut buf: Vec<C64> = ga.iter().zip(gb).map(|(&x, &y)| C64::new(x, y)).collect();
        grid.fft_forward(&mut buf);
        let for_b = buf.iter().map(|h| C64::new(h.im, -h.re)).collect();
        (buf, for_b)
    }

    pub fn modal_mul(x: &[C64], m: &ModeMultiplier) -> Vec<C64> {
        x.iter().zip(m.values()).map(|(a, b)| a * b).collect()
    }

    pub fn modal_mul_adjoint(g: &[C64], m: &ModeMultiplier) -> Vec<C64> {
        g.iter().zip(m.values()).map(|(a, b)| a * b.conj()).collect()
    }

    pub fn mul(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x * y).collect()
    }

    pub fn lincomb_real(terms: &[(f64, &[f64])]) -> Vec<f64> {
        let (c0, x0) = terms[0];
        let mut out: Vec<f64> = x0.iter().map(|v| c0 * v).collect();
        for &(c, x) in &terms[1..] {
            for (o, v) in out.iter_mut().zip(x) {
                *o += c * v;
            }
        }
        out
    }

    pub fn lincomb_complex(terms: &[(f64, &[C64])]) -> Vec<C64> {
        let (c0, x0) = terms[0];
        let mut out: Vec<C64> = x0.iter().map(|v| v * c0).collect();
        for &(c, x) in &terms[1..] {
            for (o, v) in out.iter_mut().zip(x) {
                *o += v * c;
            }
        }
        out
    }
}

/// Forward transform; rejects non-finite input.
pub fn to_spectral(f: &RealField) -> Result<SpectralField> {
    if let Some(pos) = f.values.iter().position(|v| !v.is_finite()) {
        return Err(QgError::NonFinite(format!(
            "to_spectral input at index {pos}"
        )));
    }
    let coeffs = kernels::to_spectral(&f.grid, &f.values);
    Ok(SpectralField::from_raw(f.grid.clone(), coeffs))
}

/// Inverse transform; rejects coefficients that do not describe a real field.
pub fn to_real(fh: &SpectralField) -> Result<RealField> {
    let defect = fh.hermitian_defect();
    let tolerance = HERMITIAN_TOLERANCE * fh.max_abs().max(f64::MIN_POSITIVE);
    if !(defect <= tolerance) {
        return Err(QgError::NotHermitian { defect, tolerance });
    }
    let values = kernels::to_real(&fh.grid, &fh.coeffs);
    Ok(RealField::from_raw(fh.grid.clone(), values))
}

/// Spectral derivative `∂^order / ∂axis^order`.
pub fn derivative(fh: &SpectralField, axis: Axis, order: u32) -> SpectralField {
    let grid = &fh.grid;
    let n = grid.n();
    let coeffs = fh
        .coeffs
        .iter()
        .enumerate()
        .map(|(idx, c)| {
            let (kx, ky) = grid.mode(idx);
            let k = match axis {
                Axis::X => kx,
                Axis::Y => ky,
            };
            let k = if order % 2 == 1 {
                odd_derivative_wavenumber(k, n)
            } else {
                k as f64
            };
            c * C64::new(0.0, k).powu(order)
        })
        .collect();
    SpectralField::from_raw(grid.clone(), coeffs)
}

pub fn laplacian(fh: &SpectralField) -> SpectralField {
    let coeffs = kernels::modal_mul(&fh.coeffs, fh.grid.laplacian_op());
    SpectralField::from_raw(fh.grid.clone(), coeffs)
}

/// Solve `∇²ψ = f` with the zero-mean gauge.
pub fn inv_laplacian(fh: &SpectralField) -> SpectralField {
    let coeffs = kernels::modal_mul(&fh.coeffs, fh.grid.inv_laplacian_op());
    SpectralField::from_raw(fh.grid.clone(), coeffs)
}

/// Apply the 2/3-rule dealiasing mask.
pub fn dealias(fh: &SpectralField) -> SpectralField {
    let coeffs = kernels::modal_mul(&fh.coeffs, fh.grid.dealias_op());
    SpectralField::from_raw(fh.grid.clone(), coeffs)
}

/// Dealiased pseudo-spectral Jacobian `∂xψ ∂yω − ∂yψ ∂xω`.
pub fn jacobian(psih: &SpectralField, omegah: &SpectralField) -> Result<SpectralField> {
    ensure_same_grid(&psih.grid, &omegah.grid)?;
    let mut eager = Eager::new(psih.grid.clone());
    Ok(jacobian_with(&mut eager, psih, omegah))
}

/// Backend-generic Jacobian; the solver and the tape share this path.
pub fn jacobian_with<B: Backend>(b: &mut B, psih: &B::Spec, omegah: &B::Spec) -> B::Spec {
    let grid = b.grid().clone();
    let psi_x_hat = b.modal_mul(psih, grid.ddx());
    let psi_y_hat = b.modal_mul(psih, grid.ddy());
    let omega_x_hat = b.modal_mul(omegah, grid.ddx());
    let omega_y_hat = b.modal_mul(omegah, grid.ddy());
    let (psi_x, psi_y) = b.to_real_pair(&psi_x_hat, &psi_y_hat);
    let (omega_x, omega_y) = b.to_real_pair(&omega_x_hat, &omega_y_hat);
    let a = b.mul(&psi_x, &omega_y);
    let c = b.mul(&psi_y, &omega_x);
    let j = b.lincomb_real(&[(1.0, &a), (-1.0, &c)]);
    let jh = b.to_spectral(&j);
    b.modal_mul(&jh, grid.dealias_op())
}

/// Velocity `(u, v) = (-∂yψ, ∂xψ)` in real space.
pub fn velocity(psih: &SpectralField) -> (RealField, RealField) {
    let grid = &psih.grid;
    let dx = kernels::modal_mul(&psih.coeffs, grid.ddx());
    let dy = kernels::modal_mul(&psih.coeffs, grid.ddy());
    let (psi_x, psi_y) = kernels::to_real_pair(grid, &dx, &dy);
    let u = psi_y.into_iter().map(|v| -v).collect();
    (
        RealField::from_raw(grid.clone(), u),
        RealField::from_raw(grid.clone(), psi_x),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_real(grid: &Arc<Grid>, seed: u64) -> RealField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        RealField::new(grid.clone(), values).unwrap()
    }

    /// Random real field with every mode outside the 2/3 mask removed.
    fn random_dealiased(grid: &Arc<Grid>, seed: u64) -> SpectralField {
        dealias(&to_spectral(&random_real(grid, seed)).unwrap())
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn rejects_bad_grid_sizes() {
        assert!(Grid::new(7).is_err());
        assert!(Grid::new(6).is_err());
        assert!(Grid::new(9).is_err());
        assert!(Grid::new(8).is_ok());
    }

    #[test]
    fn wavenumber_layout_and_mask() {
        let g = Grid::new(12).unwrap();
        assert_eq!(g.wavenumbers(), &[0, 1, 2, 3, 4, 5, -6, -5, -4, -3, -2, -1]);
        for idx in 0..g.len() {
            let (kx, ky) = g.mode(idx);
            let keep = kx.abs().max(ky.abs()) < 4;
            assert_eq!(g.dealias_mask()[idx], keep);
            assert_eq!(g.dealias_mask()[idx], g.dealias_mask()[g.conjugate_index(idx)]);
        }
    }

    #[test]
    fn zero_field_transforms_to_zero() {
        let g = Grid::new(16).unwrap();
        let fh = to_spectral(&RealField::zeros(g.clone())).unwrap();
        assert!(fh.coeffs().iter().all(|c| c.norm() == 0.0));
        let f = to_real(&SpectralField::zeros(g)).unwrap();
        assert!(f.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cosine_has_two_half_amplitude_modes() {
        let g = Grid::new(64).unwrap();
        let fh = to_spectral(&RealField::from_fn(g.clone(), |x, _| (3.0 * x).cos())).unwrap();
        for idx in 0..g.len() {
            let (kx, ky) = g.mode(idx);
            let c = fh.coeffs()[idx];
            if ky == 0 && kx.abs() == 3 {
                assert!((c.re - 0.5).abs() < 1e-14 && c.im.abs() < 1e-14);
            } else {
                assert!(c.norm() < 1e-14, "mode ({kx},{ky}) = {c}");
            }
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let g = Grid::new(8).unwrap();
        let mut values = vec![0.0; 64];
        values[5] = f64::NAN;
        assert!(RealField::new(g.clone(), values.clone()).is_err());
        let f = RealField::from_raw(g, values);
        assert!(matches!(to_spectral(&f), Err(QgError::NonFinite(_))));
    }

    #[test]
    fn single_mode_inverts_to_cosine() {
        let g = Grid::new(16).unwrap();
        let mut fh = SpectralField::zeros(g.clone());
        fh.set_mode(1, 0, C64::new(0.5, 0.0));
        let f = to_real(&fh).unwrap();
        let expected = RealField::from_fn(g, |x, _| x.cos());
        assert!(max_diff(f.values(), expected.values()) < 1e-14);
    }

    #[test]
    fn broken_hermitian_symmetry_is_rejected() {
        let g = Grid::new(16).unwrap();
        let mut fh = SpectralField::zeros(g.clone());
        fh.coeffs_mut()[g.index_of(2, 1)] = C64::new(1.0, 0.0);
        assert!(matches!(to_real(&fh), Err(QgError::NotHermitian { .. })));
    }

    #[test]
    fn hermitian_coefficients_give_real_signal() {
        // Build arbitrary Hermitian coefficients directly and check the
        // imaginary residue of the raw inverse transform.
        let g = Grid::new(16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut fh = SpectralField::zeros(g.clone());
        for idx in 0..g.len() {
            let (kx, ky) = g.mode(idx);
            let v = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            fh.set_mode(kx, ky, v);
        }
        assert!(fh.hermitian_defect() == 0.0);
        let mut buf = fh.coeffs().to_vec();
        g.fft_inverse(&mut buf);
        let residue = buf.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
        assert!(residue < 1e-13, "imaginary residue {residue}");
    }

    #[test]
    fn round_trip_and_parseval_all_sizes() {
        for (i, n) in [16usize, 32, 64, 128, 256].into_iter().enumerate() {
            let g = Grid::new(n).unwrap();
            let f = random_real(&g, i as u64);
            let fh = to_spectral(&f).unwrap();
            let back = to_real(&fh).unwrap();
            let scale = f.values().iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(max_diff(f.values(), back.values()) <= 1e-12 * scale, "n = {n}");
            let ms = f.mean_square();
            assert!((ms - fh.power()).abs() <= 1e-12 * ms, "n = {n}");
        }
    }

    #[test]
    fn analytic_derivatives() {
        let g = Grid::new(64).unwrap();
        let fh = to_spectral(&RealField::from_fn(g.clone(), |x, _| (3.0 * x).cos())).unwrap();
        let dx = to_real(&derivative(&fh, Axis::X, 1)).unwrap();
        let expected = RealField::from_fn(g.clone(), |x, _| -3.0 * (3.0 * x).sin());
        assert!(max_diff(dx.values(), expected.values()) < 3e-12);

        let dy = to_real(&derivative(&fh, Axis::Y, 1)).unwrap();
        assert!(dy.values().iter().all(|v| v.abs() < 1e-12));

        let dxx = to_real(&derivative(&fh, Axis::X, 2)).unwrap();
        let expected = RealField::from_fn(g, |x, _| -9.0 * (3.0 * x).cos());
        // 1e-12 relative to the amplitude
        let diff = max_diff(dxx.values(), expected.values());
        assert!(diff < 9e-12, "{diff}");
    }

    #[test]
    fn derivative_keeps_hermitian_symmetry() {
        let g = Grid::new(16).unwrap();
        let fh = to_spectral(&random_real(&g, 3)).unwrap();
        for order in 1..4 {
            let d = derivative(&fh, Axis::X, order);
            assert!(d.hermitian_defect() <= 1e-12 * d.max_abs());
        }
    }

    #[test]
    fn laplacian_examples() {
        let g = Grid::new(32).unwrap();
        let fh = to_spectral(&RealField::from_fn(g.clone(), |x, _| (3.0 * x).cos())).unwrap();
        let lap = to_real(&laplacian(&fh)).unwrap();
        let expected = RealField::from_fn(g.clone(), |x, _| -9.0 * (3.0 * x).cos());
        assert!(max_diff(lap.values(), expected.values()) < 1e-12);

        let constant = to_spectral(&RealField::from_fn(g.clone(), |_, _| 2.5)).unwrap();
        assert!(laplacian(&constant).max_abs() == 0.0);

        let mut mode = SpectralField::zeros(g);
        mode.set_mode(3, 4, C64::new(1.0, 0.0));
        assert_eq!(laplacian(&mode).coeff(3, 4), C64::new(-25.0, 0.0));
    }

    #[test]
    fn poisson_inversion_examples() {
        let g = Grid::new(32).unwrap();
        let fh = to_spectral(&RealField::from_fn(g.clone(), |x, _| (3.0 * x).cos())).unwrap();
        let psi = to_real(&inv_laplacian(&fh)).unwrap();
        let expected = RealField::from_fn(g.clone(), |x, _| -(3.0 * x).cos() / 9.0);
        assert!(max_diff(psi.values(), expected.values()) < 1e-14);

        let mut mode = SpectralField::zeros(g.clone());
        mode.set_mode(3, 4, C64::new(1.0, 0.0));
        assert_eq!(inv_laplacian(&mode).coeff(3, 4), C64::new(-1.0 / 25.0, 0.0));

        let constant = to_spectral(&RealField::from_fn(g.clone(), |_, _| 4.0)).unwrap();
        assert!(inv_laplacian(&constant).max_abs() == 0.0);

        let f = to_spectral(&random_real(&g, 9)).unwrap();
        let back = laplacian(&inv_laplacian(&f));
        let mut expected = f.clone();
        expected.coeffs_mut()[0] = C64::new(0.0, 0.0);
        let err = back
            .coeffs()
            .iter()
            .zip(expected.coeffs())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(err <= 1e-12 * f.max_abs());
    }

    #[test]
    fn jacobian_of_sines() {
        let g = Grid::new(64).unwrap();
        let psi = to_spectral(&RealField::from_fn(g.clone(), |x, _| x.sin())).unwrap();
        let omega = to_spectral(&RealField::from_fn(g.clone(), |_, y| y.sin())).unwrap();
        let j = to_real(&jacobian(&psi, &omega).unwrap()).unwrap();
        let expected = RealField::from_fn(g, |x, y| x.cos() * y.cos());
        assert!(max_diff(j.values(), expected.values()) < 1e-12);
    }

    #[test]
    fn jacobian_vanishes_for_single_mode() {
        let g = Grid::new(32).unwrap();
        let mut omega = SpectralField::zeros(g);
        omega.set_mode(3, 2, C64::new(0.7, -0.2));
        let psi = inv_laplacian(&omega);
        let j = jacobian(&psi, &omega).unwrap();
        assert!(j.max_abs() < 1e-14);
    }

    #[test]
    fn jacobian_rejects_grid_mismatch() {
        let a = SpectralField::zeros(Grid::new(16).unwrap());
        let b = SpectralField::zeros(Grid::new(32).unwrap());
        assert!(matches!(jacobian(&a, &b), Err(QgError::GridMismatch { .. })));
    }

    #[test]
    fn jacobian_is_antisymmetric_bitwise() {
        let g = Grid::new(32).unwrap();
        let a = to_spectral(&random_real(&g, 1)).unwrap();
        let b = to_spectral(&random_real(&g, 2)).unwrap();
        let ab = jacobian(&a, &b).unwrap();
        let ba = jacobian(&b, &a).unwrap();
        for (x, y) in ab.coeffs().iter().zip(ba.coeffs()) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn jacobian_matches_fine_grid_quadrature() {
        // Oracle: evaluate the product on a 64² grid, which resolves every
        // product of two 32²-dealiased fields exactly, then truncate.
        let coarse = Grid::new(32).unwrap();
        let fine = Grid::new(64).unwrap();
        let psi = random_dealiased(&coarse, 5);
        let omega = random_dealiased(&coarse, 6);
        let lift = |f: &SpectralField| {
            let mut out = SpectralField::zeros(fine.clone());
            for idx in 0..coarse.len() {
                let (kx, ky) = coarse.mode(idx);
                out.coeffs_mut()[fine.index_of(kx, ky)] = f.coeffs()[idx];
            }
            out
        };
        let (pf, of) = (lift(&psi), lift(&omega));
        let px = to_real(&derivative(&pf, Axis::X, 1)).unwrap();
        let py = to_real(&derivative(&pf, Axis::Y, 1)).unwrap();
        let ox = to_real(&derivative(&of, Axis::X, 1)).unwrap();
        let oy = to_real(&derivative(&of, Axis::Y, 1)).unwrap();
        let product: Vec<f64> = (0..fine.len())
            .map(|i| px.values()[i] * oy.values()[i] - py.values()[i] * ox.values()[i])
            .collect();
        let product_hat = to_spectral(&RealField::new(fine.clone(), product).unwrap()).unwrap();

        let j = jacobian(&psi, &omega).unwrap();
        let scale = j.max_abs();
        for idx in 0..coarse.len() {
            let (kx, ky) = coarse.mode(idx);
            let oracle = if coarse.dealias_mask()[idx] {
                product_hat.coeff(kx, ky)
            } else {
                C64::new(0.0, 0.0)
            };
            assert!((j.coeffs()[idx] - oracle).norm() <= 1e-12 * scale);
        }
    }

    #[test]
    fn jacobian_integrals_vanish() {
        let g = Grid::new(32).unwrap();
        let omega = random_dealiased(&g, 21);
        let psi = inv_laplacian(&omega);
        let j = to_real(&jacobian(&psi, &omega).unwrap()).unwrap();
        let w = to_real(&omega).unwrap();
        let p = to_real(&psi).unwrap();
        let jn = j.mean_square().sqrt();
        let mean_j = j.mean();
        let mean_wj: f64 = w.values().iter().zip(j.values()).map(|(a, b)| a * b).sum::<f64>()
            / g.len() as f64;
        let mean_pj: f64 = p.values().iter().zip(j.values()).map(|(a, b)| a * b).sum::<f64>()
            / g.len() as f64;
        assert!(mean_j.abs() <= 1e-10 * jn);
        assert!(mean_wj.abs() <= 1e-10 * jn * w.mean_square().sqrt());
        assert!(mean_pj.abs() <= 1e-10 * jn * p.mean_square().sqrt());
    }

    #[test]
    fn velocity_examples() {
        let g = Grid::new(32).unwrap();
        let psi = to_spectral(&RealField::from_fn(g.clone(), |_, y| y.cos())).unwrap();
        let (u, v) = velocity(&psi);
        let expected = RealField::from_fn(g.clone(), |_, y| y.sin());
        assert!(max_diff(u.values(), expected.values()) < 1e-12);
        assert!(v.values().iter().all(|x| x.abs() < 1e-12));

        let psi = to_spectral(&RealField::from_fn(g.clone(), |x, _| x.cos())).unwrap();
        let (u, v) = velocity(&psi);
        let expected = RealField::from_fn(g, |x, _| -x.sin());
        assert!(u.values().iter().all(|x| x.abs() < 1e-12));
        assert!(max_diff(v.values(), expected.values()) < 1e-12);
    }

    #[test]
    fn velocity_is_divergence_free() {
        let g = Grid::new(32).unwrap();
        let psi = to_spectral(&random_real(&g, 4)).unwrap();
        let (u, v) = velocity(&psi);
        let div = derivative(&to_spectral(&u).unwrap(), Axis::X, 1);
        let div2 = derivative(&to_spectral(&v).unwrap(), Axis::Y, 1);
        let total: f64 = div
            .coeffs()
            .iter()
            .zip(div2.coeffs())
            .map(|(a, b)| (a + b).norm())
            .fold(0.0, f64::max);
        let (su, sv) = (u.mean_square().sqrt(), v.mean_square().sqrt());
        assert!(total <= 1e-12 * (su + sv));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn round_trip_and_hermitian_output(seed in 0u64..10_000, half in 4usize..17) {
            let g = Grid::new(2 * half).unwrap();
            let f = random_real(&g, seed);
            let fh = to_spectral(&f).unwrap();
            // FFT rounding scales with the field, not with its largest mode
            prop_assert!(fh.hermitian_defect() <= 1e-15 * f.mean_square().sqrt());
            let back = to_real(&fh).unwrap();
            prop_assert!(max_diff(back.values(), f.values()) <= 1e-14);
        }

        #[test]
        fn jacobian_is_antisymmetric_and_conservative(seed in 0u64..10_000, half in 4usize..17) {
            let g = Grid::new(2 * half).unwrap();
            let omega = random_dealiased(&g, seed);
            let other = random_dealiased(&g, seed + 1);
            let ab = jacobian(&omega, &other).unwrap();
            let ba = jacobian(&other, &omega).unwrap();
            for (x, y) in ab.coeffs().iter().zip(ba.coeffs()) {
                prop_assert_eq!(*x, -*y);
            }

            let psi = inv_laplacian(&omega);
            let j = to_real(&jacobian(&psi, &omega).unwrap()).unwrap();
            let (w, p) = (to_real(&omega).unwrap(), to_real(&psi).unwrap());
            let mean = |a: &RealField| {
                a.values().iter().zip(j.values()).map(|(x, y)| x * y).sum::<f64>() / g.len() as f64
            };
            let jn = j.mean_square().sqrt();
            prop_assert!(mean(&w).abs() <= 1e-10 * jn * w.mean_square().sqrt());
            prop_assert!(mean(&p).abs() <= 1e-10 * jn * p.mean_square().sqrt());
        }
    }
}
