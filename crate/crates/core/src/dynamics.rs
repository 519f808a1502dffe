//! Time integration of the forced barotropic QG vorticity equation
//!
//! `∂tω = −J(ψ, ω) + ν∇²ω − μω + F (+ closure)`, `ω = ∇²ψ`,
//!
//! with classical fixed-step RK4, at any grid resolution.

use std::f64::consts::PI;
use std::sync::Arc;

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Backend, Eager};
use crate::closures::ClosureTerm;
use crate::diagnostics::{DivergenceCause, StabilityMonitor, StabilityStatus};
use crate::error::{QgError, Result};
use crate::spectral::{jacobian_with, ensure_same_grid, Grid, ModeMultiplier, RealField, SpectralField, C64};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QGParams {
    pub nu: f64,
    pub mu: f64,
    pub dt: f64,
}

impl QGParams {
    pub fn new(nu: f64, mu: f64, dt: f64) -> Result<Self> {
        let p = Self { nu, mu, dt };
        p.validate()?;
        Ok(p)
    }

    /// Non-dimensional DNS values of the reference configuration
    /// (2048² grid, Δt = 120 s in dimensional units).
    pub fn reference_dns() -> Self {
        Self {
            nu: 1.02e-5,
            mu: 2.0e-2,
            dt: 1.0e-4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu >= 0.0 && self.mu >= 0.0 && self.dt > 0.0) || !self.dt.is_finite() {
            return Err(QgError::Config(format!(
                "need nu >= 0, mu >= 0, dt > 0 (got nu = {}, mu = {}, dt = {})",
                self.nu, self.mu, self.dt
            )));
        }
        Ok(())
    }

    /// Same physics with the time step multiplied by `factor`.
    pub fn with_dt_scaled(&self, factor: f64) -> Self {
        Self {
            dt: self.dt * factor,
            ..*self
        }
    }
}

/// Wind forcing `F = C_F [cos(k_f y + s·sin(a t)) − cos(k_f x + s·sin(b t))]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForcingParams {
    pub amplitude: f64,
    pub k_f: i64,
    pub freq_a: f64,
    pub freq_b: f64,
    pub phase_scale: f64,
}

impl Default for ForcingParams {
    /// `C_F = √6`, which gives `⟨F²⟩/2 = 3` at every instant.
    fn default() -> Self {
        Self {
            amplitude: 6f64.sqrt(),
            k_f: 4,
            freq_a: 1.4,
            freq_b: 1.5,
            phase_scale: PI,
        }
    }
}

impl ForcingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude > 0.0) || self.k_f < 1 {
            return Err(QgError::Config(format!(
                "forcing needs amplitude > 0 and k_f >= 1 (got {}, {})",
                self.amplitude, self.k_f
            )));
        }
        Ok(())
    }

    fn phases(&self, t: f64) -> (f64, f64) {
        (
            self.phase_scale * (self.freq_a * t).sin(),
            self.phase_scale * (self.freq_b * t).sin(),
        )
    }
}

/// Pointwise forcing on the collocation grid.
pub fn forcing_field(t: f64, grid: &Arc<Grid>, fp: &ForcingParams) -> RealField {
    let (pa, pb) = fp.phases(t);
    let k = fp.k_f as f64;
    RealField::from_fn(grid.clone(), |x, y| {
        fp.amplitude * ((k * y + pa).cos() - (k * x + pb).cos())
    })
}

/// Exact Fourier coefficients of [`forcing_field`]: the forcing occupies the
/// four modes `(0, ±k_f)` and `(±k_f, 0)`.
pub fn forcing_spectral(t: f64, grid: &Arc<Grid>, fp: &ForcingParams) -> SpectralField {
    let (pa, pb) = fp.phases(t);
    let half = 0.5 * fp.amplitude;
    let mut out = SpectralField::zeros(grid.clone());
    if 2 * fp.k_f.unsigned_abs() as usize >= grid.n() {
        return out;
    }
    out.set_mode(0, fp.k_f, C64::from_polar(half, pa));
    out.set_mode(fp.k_f, 0, C64::from_polar(-half, pb));
    out
}

#[derive(Debug, Clone)]
pub struct QGState {
    pub omega_hat: SpectralField,
    pub t: f64,
}

impl QGState {
    pub fn new(omega_hat: SpectralField, t: f64) -> Result<Self> {
        if !omega_hat.is_finite() {
            return Err(QgError::NonFinite("initial vorticity".into()));
        }
        Ok(Self { omega_hat, t })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.omega_hat.grid()
    }
}

/// States stored every `cadence` steps of size `dt`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<QGState>,
    pub cadence: usize,
    pub dt: f64,
    /// Final stability status; `Diverged` marks a truncated run.
    pub status: StabilityStatus,
}

impl Trajectory {
    pub fn is_truncated(&self) -> bool {
        !self.status.is_ok()
    }

    pub fn last(&self) -> &QGState {
        self.states.last().expect("trajectory holds the initial state")
    }
}

/// `t0 + i·dt`, the time of step `i`; used everywhere so that stage and
/// storage times agree bitwise between runs.
pub fn time_at(t0: f64, step: usize, dt: f64) -> f64 {
    t0 + step as f64 * dt
}

/// Right-hand side and RK4 stepper for one grid and parameter set.
#[derive(Debug, Clone)]
pub struct Dynamics {
    grid: Arc<Grid>,
    params: QGParams,
    forcing: Option<ForcingParams>,
    linear: ModeMultiplier,
}

impl Dynamics {
    pub fn new(grid: Arc<Grid>, params: QGParams, forcing: Option<ForcingParams>) -> Result<Self> {
        params.validate()?;
        if let Some(fp) = &forcing {
            fp.validate()?;
        }
        let linear = ModeMultiplier::from_real(
            grid.laplacian_op()
                .values()
                .iter()
                .map(|lap| params.nu * lap.re - params.mu),
        );
        Ok(Self {
            grid,
            params,
            forcing,
            linear,
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn params(&self) -> &QGParams {
        &self.params
    }

    pub fn forcing(&self) -> Option<&ForcingParams> {
        self.forcing.as_ref()
    }

    /// Tendency on any backend.
    pub fn rhs_with<B, C>(&self, b: &mut B, omega: &B::Spec, t: f64, closure: Option<&C>) -> Result<B::Spec>
    where
        B: Backend,
        C: ClosureTerm<B> + ?Sized,
    {
        let psi = b.modal_mul(omega, self.grid.inv_laplacian_op());
        let jac = jacobian_with(b, &psi, omega);
        let lin = b.modal_mul(omega, &self.linear);
        let forcing = self
            .forcing
            .as_ref()
            .map(|fp| b.spec_const(&forcing_spectral(t, &self.grid, fp)));
        let closure_term = match closure {
            Some(c) => c.tendency(b, omega)?,
            None => None,
        };
        let mut terms = vec![(-1.0, &jac), (1.0, &lin)];
        if let Some(f) = &forcing {
            terms.push((1.0, f));
        }
        if let Some(r) = &closure_term {
            terms.push((1.0, r));
        }
        Ok(b.lincomb_spec(&terms))
    }

    /// One classical RK4 step from time `t`; forcing is evaluated at
    /// `t`, `t + dt/2` (twice) and `t + dt`.
    pub fn step_with<B, C>(&self, b: &mut B, omega: &B::Spec, t: f64, closure: Option<&C>) -> Result<B::Spec>
    where
        B: Backend,
        C: ClosureTerm<B> + ?Sized,
    {
        let dt = self.params.dt;
        let k1 = self.rhs_with(b, omega, t, closure)?;
        let w2 = b.lincomb_spec(&[(1.0, omega), (0.5 * dt, &k1)]);
        let k2 = self.rhs_with(b, &w2, t + 0.5 * dt, closure)?;
        let w3 = b.lincomb_spec(&[(1.0, omega), (0.5 * dt, &k2)]);
        let k3 = self.rhs_with(b, &w3, t + 0.5 * dt, closure)?;
        let w4 = b.lincomb_spec(&[(1.0, omega), (dt, &k3)]);
        let k4 = self.rhs_with(b, &w4, t + dt, closure)?;
        Ok(b.lincomb_spec(&[
            (1.0, omega),
            (dt / 6.0, &k1),
            (dt / 3.0, &k2),
            (dt / 3.0, &k3),
            (dt / 6.0, &k4),
        ]))
    }

    pub fn rhs<C>(&self, state: &QGState, closure: Option<&C>) -> Result<SpectralField>
    where
        C: ClosureTerm<Eager> + ?Sized,
    {
        ensure_same_grid(&self.grid, state.grid())?;
        if !state.omega_hat.is_finite() {
            return Err(QgError::NonFinite(format!("state at t = {}", state.t)));
        }
        let mut eager = Eager::new(self.grid.clone());
        self.rhs_with(&mut eager, &state.omega_hat, state.t, closure)
    }

    /// Single step; the returned time is `state.t + dt`.
    pub fn step_rk4<C>(&self, state: &QGState, closure: Option<&C>) -> Result<QGState>
    where
        C: ClosureTerm<Eager> + ?Sized,
    {
        ensure_same_grid(&self.grid, state.grid())?;
        let mut eager = Eager::new(self.grid.clone());
        let omega_hat = self.step_with(&mut eager, &state.omega_hat, state.t, closure)?;
        let t = state.t + self.params.dt;
        if !omega_hat.is_finite() {
            return Err(QgError::Diverged {
                t,
                cause: "non-finite state".into(),
            });
        }
        Ok(QGState { omega_hat, t })
    }

    /// Integrate `n_steps`, storing every `store_cadence`-th state (the
    /// initial state included). A divergence ends the run early and is
    /// recorded in the trajectory status rather than returned as an error.
    pub fn simulate<C>(
        &self,
        initial: &QGState,
        n_steps: usize,
        closure: Option<&C>,
        store_cadence: usize,
    ) -> Result<Trajectory>
    where
        C: ClosureTerm<Eager> + ?Sized,
    {
        self.simulate_observed(initial, n_steps, closure, store_cadence, |_, _| Ok(()))
    }

    /// [`Dynamics::simulate`] with a callback on every step's state.
    pub fn simulate_observed<C, F>(
        &self,
        initial: &QGState,
        n_steps: usize,
        closure: Option<&C>,
        store_cadence: usize,
        mut observe: F,
    ) -> Result<Trajectory>
    where
        C: ClosureTerm<Eager> + ?Sized,
        F: FnMut(usize, &QGState) -> Result<()>,
    {
        if n_steps < 1 || store_cadence < 1 {
            return Err(QgError::Config(
                "simulate needs n_steps >= 1 and store_cadence >= 1".into(),
            ));
        }
        ensure_same_grid(&self.grid, initial.grid())?;
        let mut eager = Eager::new(self.grid.clone());
        let mut monitor = StabilityMonitor::new(&initial.omega_hat);
        let mut states = vec![initial.clone()];
        let mut omega = initial.omega_hat.clone();
        let dt = self.params.dt;
        observe(0, initial)?;
        for step in 0..n_steps {
            let t = time_at(initial.t, step, dt);
            let t_next = time_at(initial.t, step + 1, dt);
            // a closure that rejects a non-finite stage ends the run like a blow-up
            omega = match self.step_with(&mut eager, &omega, t, closure) {
                Ok(w) => w,
                Err(QgError::NonFinite(what)) => {
                    debug!("run diverged at t = {t_next}: non-finite {what}");
                    monitor.mark(DivergenceCause::NonFinite, t_next);
                    break;
                }
                Err(e) => return Err(e),
            };
            let state = QGState {
                omega_hat: omega.clone(),
                t: t_next,
            };
            if !monitor.check(&state).is_ok() {
                debug!("run diverged at t = {t_next}");
                if (step + 1) % store_cadence == 0 {
                    states.push(state);
                }
                break;
            }
            observe(step + 1, &state)?;
            if (step + 1) % store_cadence == 0 {
                states.push(state);
            }
        }
        Ok(Trajectory {
            states,
            cadence: store_cadence,
            dt,
            status: monitor.status().clone(),
        })
    }
}

/// Random initial condition with unit-amplitude random-phase modes on the
/// shell `3.5 <= |k| <= 4.5`, normalized so that `⟨ω²⟩ = 1`.
pub fn random_shell_state(grid: &Arc<Grid>, seed: u64) -> SpectralField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field = SpectralField::zeros(grid.clone());
    let n = grid.n();
    for idx in 0..grid.len() {
        let (kx, ky) = grid.mode(idx);
        // one representative of each ±k pair: upper half plane
        let upper = ky > 0 || (ky == 0 && kx > 0);
        let magnitude = grid.mode_magnitude(idx);
        let nyquist = 2 * kx.unsigned_abs() as usize == n || 2 * ky.unsigned_abs() as usize == n;
        if upper && !nyquist && (3.5..=4.5).contains(&magnitude) {
            let phase = rng.gen_range(0.0..2.0 * PI);
            field.set_mode(kx, ky, C64::from_polar(1.0, phase));
        }
    }
    let power = field.power();
    field.scaled(1.0 / power.sqrt())
}

/// Integrate the random shell state for `duration` (rounded to whole steps).
pub fn spinup(
    grid: &Arc<Grid>,
    params: &QGParams,
    forcing: Option<&ForcingParams>,
    seed: u64,
    duration: f64,
) -> Result<QGState> {
    spinup_observed(grid, params, forcing, seed, duration, |_, _| Ok(()))
}

/// [`spinup`] with a callback on every state, the initial one included.
pub fn spinup_observed<F>(
    grid: &Arc<Grid>,
    params: &QGParams,
    forcing: Option<&ForcingParams>,
    seed: u64,
    duration: f64,
    mut observe: F,
) -> Result<QGState>
where
    F: FnMut(usize, &QGState) -> Result<()>,
{
    if !(duration >= 0.0) {
        return Err(QgError::Config(format!("spin-up duration must be >= 0, got {duration}")));
    }
    let dynamics = Dynamics::new(grid.clone(), *params, forcing.copied())?;
    let initial = QGState::new(random_shell_state(grid, seed), 0.0)?;
    let n_steps = (duration / params.dt).round() as usize;
    if n_steps == 0 {
        observe(0, &initial)?;
        return Ok(initial);
    }
    let traj = dynamics.simulate_observed::<crate::closures::ClosureModel, _>(
        &initial, n_steps, None, n_steps, observe,
    )?;
    if let StabilityStatus::Diverged { t_event, cause } = &traj.status {
        return Err(QgError::Diverged {
            t: *t_event,
            cause: cause.to_string(),
        });
    }
    Ok(traj.last().clone())
}
