//! Spectral cutoff filtering, DNS → LES projection, subgrid residuals and
//! training-sample extraction.

use std::sync::Arc;

use crate::dynamics::Trajectory;
use crate::error::{QgError, Result};
use crate::spectral::{ensure_same_grid, inv_laplacian, jacobian, Grid, SpectralField, C64};

/// Coarse-graining ratio and the two grids it connects.
#[derive(Debug, Clone)]
pub struct FilterSpec {
    delta: usize,
    grid_hi: Arc<Grid>,
    grid_lo: Arc<Grid>,
}

impl FilterSpec {
    pub fn new(n_hi: usize, delta: usize) -> Result<Self> {
        if delta < 2 || n_hi % delta != 0 {
            return Err(QgError::Config(format!(
                "n_hi = {n_hi} must be divisible by delta = {delta} >= 2"
            )));
        }
        Ok(Self {
            delta,
            grid_hi: Grid::new(n_hi)?,
            grid_lo: Grid::new(n_hi / delta)?,
        })
    }

    pub fn delta(&self) -> usize {
        self.delta
    }

    pub fn n_hi(&self) -> usize {
        self.grid_hi.n()
    }

    pub fn n_lo(&self) -> usize {
        self.grid_lo.n()
    }

    /// `k_c = n_hi / (2δ) = n_lo / 2`.
    pub fn k_c(&self) -> f64 {
        self.n_lo() as f64 / 2.0
    }

    pub fn grid_hi(&self) -> &Arc<Grid> {
        &self.grid_hi
    }

    pub fn grid_lo(&self) -> &Arc<Grid> {
        &self.grid_lo
    }
}

/// Zero every mode with `|k| > k_c`.
pub fn cutoff_filter(fh: &SpectralField, k_c: f64) -> SpectralField {
    let grid = fh.grid();
    let coeffs = fh
        .coeffs()
        .iter()
        .enumerate()
        .map(|(idx, &c)| {
            if grid.mode_magnitude(idx) > k_c {
                C64::new(0.0, 0.0)
            } else {
                c
            }
        })
        .collect();
    SpectralField::from_raw(grid.clone(), coeffs)
}

/// Filter at `k_c`, then copy the retained modes onto the LES grid.
///
/// Modes on the LES Nyquist lines (`|kx|` or `|ky| = n_lo/2`) are dropped:
/// the LES grid holds only one of each ±pair there, so a real field cannot
/// keep them without breaking Hermitian symmetry.
pub fn project(fh_hi: &SpectralField, spec: &FilterSpec) -> Result<SpectralField> {
    ensure_same_grid(spec.grid_hi(), fh_hi.grid())?;
    let lo = spec.grid_lo();
    let half = (lo.n() / 2) as i64;
    let k_c = spec.k_c();
    let mut out = SpectralField::zeros(lo.clone());
    let hi = fh_hi.grid();
    let coeffs = out.coeffs_mut();
    for (idx, slot) in coeffs.iter_mut().enumerate() {
        let (kx, ky) = lo.mode(idx);
        if kx.abs() >= half || ky.abs() >= half {
            continue;
        }
        let src = hi.index_of(kx, ky);
        if hi.mode_magnitude(src) <= k_c {
            *slot = fh_hi.coeffs()[src];
        }
    }
    Ok(out)
}

/// Embed an LES-grid field into a finer grid by zero padding.
pub fn upsample(fh_lo: &SpectralField, grid_hi: &Arc<Grid>) -> Result<SpectralField> {
    let lo = fh_lo.grid();
    if grid_hi.n() < lo.n() {
        return Err(QgError::GridMismatch {
            expected: lo.n(),
            got: grid_hi.n(),
        });
    }
    let half = (lo.n() / 2) as i64;
    let mut out = SpectralField::zeros(grid_hi.clone());
    let coeffs = out.coeffs_mut();
    for (idx, &c) in fh_lo.coeffs().iter().enumerate() {
        let (kx, ky) = lo.mode(idx);
        // Nyquist lines have no conjugate partner on the coarse grid
        if grid_hi.n() > lo.n() && (kx == -half || ky == -half) {
            continue;
        }
        coeffs[grid_hi.index_of(kx, ky)] = c;
    }
    Ok(out)
}

/// `R = J(ψ̄, ω̄) − project(J(ψ, ω))` on the LES grid.
pub fn sgs_residual(omega_hat_hi: &SpectralField, spec: &FilterSpec) -> Result<SpectralField> {
    ensure_same_grid(spec.grid_hi(), omega_hat_hi.grid())?;
    let psi = inv_laplacian(omega_hat_hi);
    let filtered_jac = project(&jacobian(&psi, omega_hat_hi)?, spec)?;
    let omega_bar = project(omega_hat_hi, spec)?;
    let psi_bar = inv_laplacian(&omega_bar);
    let jac_bar = jacobian(&psi_bar, &omega_bar)?;
    let coeffs = jac_bar
        .coeffs()
        .iter()
        .zip(filtered_jac.coeffs())
        .map(|(a, b)| a - b)
        .collect();
    Ok(SpectralField::from_raw(spec.grid_lo().clone(), coeffs))
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub omega_bar: SpectralField,
    pub residual: SpectralField,
    pub t: f64,
}

/// Time-ordered samples from one DNS trajectory.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
    pub source_id: u32,
    pub dt_sample: f64,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Start indices of the non-overlapping windows of `n_rollout + 1`
    /// consecutive samples (stride `n_rollout`, so windows share endpoints).
    pub fn window_starts(&self, n_rollout: usize) -> Vec<usize> {
        if n_rollout == 0 || self.samples.len() < n_rollout + 1 {
            return Vec::new();
        }
        (0..=self.samples.len() - n_rollout - 1).step_by(n_rollout).collect()
    }
}

/// One sample per stored state. The trajectory must be stored every δ
/// DNS steps so that samples sit on the LES time grid.
pub fn extract_samples(traj: &Trajectory, spec: &FilterSpec, source_id: u32) -> Result<SampleSet> {
    if traj.cadence != spec.delta() {
        return Err(QgError::Config(format!(
            "trajectory stored every {} steps, LES cadence is delta = {}",
            traj.cadence,
            spec.delta()
        )));
    }
    let samples = traj
        .states
        .iter()
        .map(|s| {
            Ok(Sample {
                omega_bar: project(&s.omega_hat, spec)?,
                residual: sgs_residual(&s.omega_hat, spec)?,
                t: s.t,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleSet {
        samples,
        source_id,
        dt_sample: traj.dt * spec.delta() as f64,
    })
}
