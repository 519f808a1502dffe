//! Integral invariants, shell spectra, enstrophy flux and divergence
//! monitoring.

use std::fmt;

use crate::autodiff::real_inner;
use crate::dynamics::QGState;
use crate::error::{QgError, Result};
use crate::spectral::{ensure_same_grid, jacobian, SpectralField};

/// Divergence threshold on enstrophy relative to the run's initial value.
pub const BLOWUP_FACTOR: f64 = 1e6;

/// `½⟨ω²⟩ = ½ Σ|ω̂|²`.
pub fn total_enstrophy(omega_hat: &SpectralField) -> f64 {
    0.5 * omega_hat.power()
}

/// `½⟨|∇ψ|²⟩ = ½ Σ_{k≠0} |ω̂|²/k²`.
pub fn total_energy(omega_hat: &SpectralField) -> f64 {
    let grid = omega_hat.grid();
    0.5 * omega_hat
        .coeffs()
        .iter()
        .enumerate()
        .filter_map(|(idx, c)| {
            let k2 = grid.mode_magnitude(idx).powi(2);
            (k2 > 0.0).then(|| c.norm_sqr() / k2)
        })
        .sum::<f64>()
}

/// Grid mean of the product of two real fields given by their spectra.
pub fn mean_product(a: &SpectralField, b: &SpectralField) -> f64 {
    real_inner(a.coeffs(), b.coeffs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectrumKind {
    EnstrophySpectrum,
    EnstrophyFlux,
    EnergySpectrum,
}

/// One value per integer shell `k = 0..=n/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumSeries {
    pub kind: SpectrumKind,
    pub values: Vec<f64>,
}

impl SpectrumSeries {
    pub fn k_bins(&self) -> impl Iterator<Item = usize> {
        0..self.values.len()
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Shell index `round(|k|)`; corner modes beyond `n/2` go to the last bin.
fn shell_sums(field: &SpectralField, per_mode: impl Fn(usize) -> f64) -> Vec<f64> {
    let grid = field.grid();
    let bins = grid.n() / 2 + 1;
    let mut out = vec![0.0; bins];
    for idx in 0..grid.len() {
        let shell = (grid.mode_magnitude(idx).round() as usize).min(bins - 1);
        out[shell] += per_mode(idx);
    }
    out
}

pub fn enstrophy_spectrum(omega_hat: &SpectralField) -> SpectrumSeries {
    let c = omega_hat.coeffs();
    SpectrumSeries {
        kind: SpectrumKind::EnstrophySpectrum,
        values: shell_sums(omega_hat, |i| 0.5 * c[i].norm_sqr()),
    }
}

pub fn energy_spectrum(omega_hat: &SpectralField) -> SpectrumSeries {
    let grid = omega_hat.grid();
    let c = omega_hat.coeffs();
    SpectrumSeries {
        kind: SpectrumKind::EnergySpectrum,
        values: shell_sums(omega_hat, |i| {
            let k2 = grid.mode_magnitude(i).powi(2);
            if k2 > 0.0 {
                0.5 * c[i].norm_sqr() / k2
            } else {
                0.0
            }
        }),
    }
}

/// Shell transfer `T(k) = Σ Re[conj(ω̂)·(−Ĵ)]`.
pub fn enstrophy_transfer(omega_hat: &SpectralField, psi_hat: &SpectralField) -> Result<Vec<f64>> {
    ensure_same_grid(omega_hat.grid(), psi_hat.grid())?;
    let j = jacobian(psi_hat, omega_hat)?;
    let (w, jc) = (omega_hat.coeffs(), j.coeffs());
    Ok(shell_sums(omega_hat, |i| -(w[i].re * jc[i].re + w[i].im * jc[i].im)))
}

/// `Π_Z(k) = −Σ_{k' ≤ k} T(k')`, positive for a forward cascade.
pub fn enstrophy_flux(omega_hat: &SpectralField, psi_hat: &SpectralField) -> Result<SpectrumSeries> {
    let transfer = enstrophy_transfer(omega_hat, psi_hat)?;
    let mut acc = 0.0;
    let values = transfer
        .iter()
        .map(|t| {
            acc -= t;
            acc
        })
        .collect();
    Ok(SpectrumSeries {
        kind: SpectrumKind::EnstrophyFlux,
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivergenceCause {
    NonFinite,
    NormBlowup,
}

impl fmt::Display for DivergenceCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DivergenceCause::NonFinite => "non_finite",
            DivergenceCause::NormBlowup => "norm_blowup",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StabilityStatus {
    Ok,
    Diverged { cause: DivergenceCause, t_event: f64 },
}

impl StabilityStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, StabilityStatus::Ok)
    }
}

impl fmt::Display for StabilityStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StabilityStatus::Ok => f.write_str("ok"),
            StabilityStatus::Diverged { cause, t_event } => write!(f, "diverged({cause}) at t = {t_event}"),
        }
    }
}

/// Diverged on any non-finite coefficient or enstrophy above
/// `BLOWUP_FACTOR × reference_norm`. A zero reference disables the norm test.
pub fn stability_check(state: &QGState, reference_norm: f64) -> StabilityStatus {
    if !state.omega_hat.is_finite() {
        return StabilityStatus::Diverged {
            cause: DivergenceCause::NonFinite,
            t_event: state.t,
        };
    }
    let z = total_enstrophy(&state.omega_hat);
    if !z.is_finite() {
        return StabilityStatus::Diverged {
            cause: DivergenceCause::NonFinite,
            t_event: state.t,
        };
    }
    if reference_norm > 0.0 && z > BLOWUP_FACTOR * reference_norm {
        return StabilityStatus::Diverged {
            cause: DivergenceCause::NormBlowup,
            t_event: state.t,
        };
    }
    StabilityStatus::Ok
}

/// Latching [`stability_check`] over a run: the first divergence sticks.
#[derive(Debug, Clone)]
pub struct StabilityMonitor {
    reference_norm: f64,
    status: StabilityStatus,
}

impl StabilityMonitor {
    pub fn new(initial: &SpectralField) -> Self {
        Self {
            reference_norm: total_enstrophy(initial),
            status: StabilityStatus::Ok,
        }
    }

    pub fn check(&mut self, state: &QGState) -> &StabilityStatus {
        if self.status.is_ok() {
            self.status = stability_check(state, self.reference_norm);
        }
        &self.status
    }

    /// Latch a divergence detected elsewhere, e.g. inside a time step.
    pub fn mark(&mut self, cause: DivergenceCause, t_event: f64) {
        if self.status.is_ok() {
            self.status = StabilityStatus::Diverged { cause, t_event };
        }
    }

    pub fn status(&self) -> &StabilityStatus {
        &self.status
    }
}

/// Running mean of spectra of one kind.
#[derive(Debug, Clone, Default)]
pub struct SpectrumAccumulator {
    sum: Vec<f64>,
    kind: Option<SpectrumKind>,
    count: usize,
}

impl SpectrumAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn add(&mut self, s: &SpectrumSeries) -> Result<()> {
        if self.count == 0 {
            self.sum = s.values.clone();
            self.kind = Some(s.kind);
        } else {
            if s.values.len() != self.sum.len() || Some(s.kind) != self.kind {
                return Err(QgError::Shape(format!(
                    "cannot average {} bins of {:?} into {} bins of {:?}",
                    s.values.len(),
                    s.kind,
                    self.sum.len(),
                    self.kind
                )));
            }
            for (a, v) in self.sum.iter_mut().zip(&s.values) {
                *a += v;
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn mean(&self) -> Option<SpectrumSeries> {
        let kind = self.kind?;
        let c = self.count as f64;
        Some(SpectrumSeries {
            kind,
            values: self.sum.iter().map(|v| v / c).collect(),
        })
    }
}

/// Accumulator update in functional form.
pub fn time_average(mut acc: SpectrumAccumulator, s: &SpectrumSeries) -> Result<SpectrumAccumulator> {
    acc.add(s)?;
    Ok(acc)
}

/// Mean `|log Z_a − log Z_b|` over bins `k_lo..=k_hi` where both are positive.
pub fn log_spectrum_error(a: &SpectrumSeries, b: &SpectrumSeries, k_lo: usize, k_hi: usize) -> Result<f64> {
    if a.values.len() != b.values.len() || k_hi >= a.values.len() || k_lo > k_hi {
        return Err(QgError::Shape(format!(
            "spectrum comparison over {k_lo}..={k_hi} with {} and {} bins",
            a.values.len(),
            b.values.len()
        )));
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    for k in k_lo..=k_hi {
        let (x, y) = (a.values[k], b.values[k]);
        if x > 0.0 && y > 0.0 {
            sum += (x.ln() - y.ln()).abs();
            used += 1;
        }
    }
    if used == 0 {
        return Err(QgError::NonFinite("no positive bins to compare".into()));
    }
    Ok(sum / used as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{inv_laplacian, to_real, to_spectral, Grid, RealField};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dealiased(n: usize, seed: u64) -> SpectralField {
        let g = Grid::new(n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        crate::spectral::dealias(&to_spectral(&RealField::new(g, values).unwrap()).unwrap())
    }

    #[test]
    fn analytic_invariants() {
        let g = Grid::new(32).unwrap();
        let w = to_spectral(&RealField::from_fn(g.clone(), |x, _| (3.0 * x).cos())).unwrap();
        assert!((total_enstrophy(&w) - 0.25).abs() < 1e-15);
        assert!((total_energy(&w) - 1.0 / 36.0).abs() < 1e-15);
        let z = SpectralField::zeros(g);
        assert_eq!(total_energy(&z), 0.0);
        assert_eq!(total_enstrophy(&z), 0.0);
    }

    #[test]
    fn enstrophy_matches_quadrature() {
        let w = random_dealiased(32, 1);
        let quad = 0.5 * to_real(&w).unwrap().mean_square();
        assert!((total_enstrophy(&w) - quad).abs() <= 1e-12 * quad);
    }

    #[test]
    fn single_mode_spectrum() {
        let g = Grid::new(32).unwrap();
        let a = 1.7;
        let w = to_spectral(&RealField::from_fn(g, |x, _| a * (5.0 * x).cos())).unwrap();
        let s = enstrophy_spectrum(&w);
        assert_eq!(s.values.len(), 17);
        for (k, v) in s.values.iter().enumerate() {
            if k == 5 {
                assert!((v - a * a / 4.0).abs() < 1e-14);
            } else {
                assert!(v.abs() < 1e-28);
            }
        }
        assert!(enstrophy_spectrum(&SpectralField::zeros(Grid::new(16).unwrap()))
            .values
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn flux_of_single_mode_is_zero() {
        let g = Grid::new(32).unwrap();
        let w = to_spectral(&RealField::from_fn(g, |x, y| (2.0 * x + 3.0 * y).sin())).unwrap();
        let flux = enstrophy_flux(&w, &inv_laplacian(&w)).unwrap();
        assert!(flux.values.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn flux_closes_and_starts_at_zero() {
        let w = random_dealiased(32, 2);
        let flux = enstrophy_flux(&w, &inv_laplacian(&w)).unwrap();
        let scale = total_enstrophy(&w) * w.max_abs();
        // only the mean of J enters the k = 0 shell, zero up to rounding
        assert!(flux.values[0].abs() <= 1e-14 * scale);
        assert!(flux.values.last().unwrap().abs() <= 1e-10 * scale);
        assert!(flux.values.iter().any(|v| v.abs() > 1e-6 * scale));
    }

    #[test]
    fn stability_examples() {
        let w = random_dealiased(16, 3);
        let z0 = total_enstrophy(&w);
        let ok = QGState { omega_hat: w.clone(), t: 1.0 };
        assert!(stability_check(&ok, z0).is_ok());
        let mut bad = w.clone();
        bad.coeffs_mut()[5].re = f64::NAN;
        let nan = QGState { omega_hat: bad, t: 2.0 };
        assert_eq!(
            stability_check(&nan, z0),
            StabilityStatus::Diverged {
                cause: DivergenceCause::NonFinite,
                t_event: 2.0
            }
        );
        let big = QGState { omega_hat: w.scaled(1e4), t: 3.0 };
        assert!(matches!(
            stability_check(&big, z0),
            StabilityStatus::Diverged {
                cause: DivergenceCause::NormBlowup,
                ..
            }
        ));
    }

    #[test]
    fn monitor_latches() {
        let w = random_dealiased(16, 4);
        let mut m = StabilityMonitor::new(&w);
        let big = QGState { omega_hat: w.scaled(1e4), t: 1.0 };
        assert!(!m.check(&big).is_ok());
        let calm = QGState { omega_hat: w, t: 2.0 };
        assert_eq!(
            m.check(&calm),
            &StabilityStatus::Diverged {
                cause: DivergenceCause::NormBlowup,
                t_event: 1.0
            }
        );
    }

    #[test]
    fn time_average_examples() {
        let s = SpectrumSeries {
            kind: SpectrumKind::EnstrophyFlux,
            values: vec![0.0, 1.5, -2.0],
        };
        let neg = SpectrumSeries {
            values: s.values.iter().map(|v| -v).collect(),
            ..s.clone()
        };
        let one = time_average(SpectrumAccumulator::new(), &s).unwrap();
        assert_eq!(one.mean().unwrap(), s);
        let two = time_average(one.clone(), &s).unwrap();
        assert_eq!(two.mean().unwrap(), s);
        let cancel = time_average(one, &neg).unwrap();
        assert!(cancel.mean().unwrap().values.iter().all(|v| *v == 0.0));
        let short = SpectrumSeries {
            values: vec![1.0],
            ..s
        };
        assert!(time_average(two, &short).is_err());
    }

    #[test]
    fn log_error_is_zero_for_identical_spectra() {
        let s = enstrophy_spectrum(&random_dealiased(32, 5));
        assert_eq!(log_spectrum_error(&s, &s, 2, 8).unwrap(), 0.0);
        let t = SpectrumSeries {
            values: s.values.iter().map(|v| v * std::f64::consts::E).collect(),
            ..s.clone()
        };
        assert!((log_spectrum_error(&s, &t, 2, 8).unwrap() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn shell_sums_match_totals(seed in 0u64..500, n in prop::sample::select(vec![8usize, 16, 32])) {
            let w = random_dealiased(n, seed);
            let z = total_enstrophy(&w);
            prop_assert!((enstrophy_spectrum(&w).total() - z).abs() <= 1e-12 * z);
            let e = total_energy(&w);
            prop_assert!((energy_spectrum(&w).total() - e).abs() <= 1e-12 * e);
            let flux = enstrophy_flux(&w, &inv_laplacian(&w)).unwrap();
            prop_assert!(flux.values.last().unwrap().abs() <= 1e-10 * z * w.max_abs().max(1.0));
        }
    }
}
