//! A priori and a posteriori losses, Adam, and the training loops.

use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Backend, Eager, Tape, Var};
use crate::closures::{cnn_init, cnn_output_with, CnnArchitecture, CnnClosure, Normalization, TapedCnn};
use crate::coarse::{Sample, SampleSet};
use crate::diagnostics::{stability_check, total_enstrophy};
use crate::dynamics::{time_at, Dynamics, QGState};
use crate::error::{QgError, Result};
use crate::spectral::{to_real, SpectralField};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Apriori,
    Aposteriori,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub n_rollout: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Set by the caller, never read from a config file.
    #[serde(skip)]
    pub seed: u64,
    pub architecture: CnnArchitecture,
    /// Cap on optimizer steps per epoch; the shuffled remainder is skipped.
    pub max_batches_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Aposteriori,
            n_rollout: 5,
            lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 10,
            batch_size: 16,
            seed: 0,
            architecture: CnnArchitecture::default(),
            max_batches_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(QgError::Config(msg.to_string()));
        if !(self.lr > 0.0) {
            return bad("lr must be > 0");
        }
        if self.n_rollout < 1 {
            return bad("n_rollout must be >= 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0");
        }
        if self.max_batches_per_epoch == Some(0) {
            return bad("max_batches_per_epoch must be >= 1");
        }
        self.architecture.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }
}

/// One bias-corrected Adam step in place. A non-finite gradient leaves
/// both `theta` and the state untouched and returns `false`.
pub fn adam_update(theta: &mut [f64], g: &[f64], s: &mut AdamState, cfg: &TrainConfig) -> Result<bool> {
    if theta.len() != g.len() || s.m.len() != g.len() {
        return Err(QgError::Shape(format!(
            "Adam sizes: theta {}, gradient {}, state {}",
            theta.len(),
            g.len(),
            s.m.len()
        )));
    }
    if !g.iter().all(|v| v.is_finite()) {
        warn!("non-finite gradient, Adam step {} skipped", s.step + 1);
        return Ok(false);
    }
    s.step += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(s.step as i32);
    let c2 = 1.0 - b2.powi(s.step as i32);
    for i in 0..theta.len() {
        s.m[i] = b1 * s.m[i] + (1.0 - b1) * g[i];
        s.v[i] = b2 * s.v[i] + (1.0 - b2) * g[i] * g[i];
        let m_hat = s.m[i] / c1;
        let v_hat = s.v[i] / c2;
        theta[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
    Ok(true)
}

fn field_tensor(f: &SpectralField) -> Result<Tensor> {
    let n = f.grid().n();
    Tensor::new(vec![1, n, n], to_real(f)?.into_values())
}

/// Mean over batch and grid of `(R − M_NN(ω̄))²` in real space.
pub fn apriori_loss(closure: &CnnClosure, batch: &[&Sample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(QgError::Config("empty batch".into()));
    }
    let grid = batch[0].omega_bar.grid().clone();
    let mut eager = Eager::new(grid);
    let layers: Vec<(&Tensor, &Tensor)> = closure.params.weights().iter().zip(closure.params.biases()).collect();
    // same weighting and order as the taped loss, so the two agree bitwise
    let w = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for s in batch {
        let out = cnn_output_with(&mut eager, &field_tensor(&s.omega_bar)?, &layers, &closure.norm)?;
        let target = field_tensor(&s.residual)?;
        if !out.is_finite() {
            return Err(QgError::NonFinite("CNN output".into()));
        }
        total += w * mse(&out, &target);
    }
    Ok(total)
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    sum / a.len() as f64
}

/// [`apriori_loss`] and its gradient in the flat parameter layout.
pub fn apriori_loss_and_grad(closure: &CnnClosure, batch: &[&Sample]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(QgError::Config("empty batch".into()));
    }
    let grid = batch[0].omega_bar.grid().clone();
    let mut cnn = None;
    let (value, tape, loss) = Tape::record(grid, |tape| {
        let taped = TapedCnn::leaves(tape, closure);
        let mut terms = Vec::with_capacity(batch.len());
        for s in batch {
            let x = tape.const_real(field_tensor(&s.omega_bar)?);
            let out = taped.output(tape, &x)?;
            terms.push(tape.mse(out, Arc::new(field_tensor(&s.residual)?))?);
        }
        let w = 1.0 / batch.len() as f64;
        let weighted: Vec<(f64, Var)> = terms.into_iter().map(|t| (w, t)).collect();
        cnn = Some(taped);
        Ok(tape.scalar_lincomb(&weighted))
    })?;
    if !value.is_finite() {
        return Err(QgError::NonFinite("a priori loss".into()));
    }
    let adjoints = tape.backward(loss)?;
    let grad = cnn.expect("recorded").gradient(&adjoints, closure.params.architecture());
    Ok((value, grad))
}

/// Outcome of one rollout window.
#[derive(Debug, Clone, PartialEq)]
pub enum RolloutLoss {
    Finite(f64),
    Diverged { step: usize },
}

fn check_window(window: &[Sample], dynamics: &Dynamics) -> Result<usize> {
    if window.len() < 2 {
        return Err(QgError::Config("a rollout window needs at least two samples".into()));
    }
    let dt = dynamics.params().dt;
    for pair in window.windows(2) {
        let gap = pair[1].t - pair[0].t;
        if (gap - dt).abs() > 1e-9 * dt.max(pair[1].t.abs()) {
            return Err(QgError::Config(format!(
                "window spacing {gap} does not match the LES step {dt}"
            )));
        }
    }
    Ok(window.len() - 1)
}

/// Eq. 9 loss `(1/N) Σ_i mean((ω_i − ω̄_i)²)` for a rollout with `closure`
/// from the first sample of `window`, evaluated without recording.
pub fn aposteriori_loss(closure: &CnnClosure, window: &[Sample], dynamics: &Dynamics) -> Result<RolloutLoss> {
    let n = check_window(window, dynamics)?;
    let mut eager = Eager::new(window[0].omega_bar.grid().clone());
    let reference = total_enstrophy(&window[0].omega_bar);
    let t0 = window[0].t;
    let dt = dynamics.params().dt;
    let mut omega = window[0].omega_bar.clone();
    let w = 1.0 / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        omega = dynamics.step_with(&mut eager, &omega, time_at(t0, i, dt), Some(closure))?;
        let state = QGState {
            omega_hat: omega.clone(),
            t: time_at(t0, i + 1, dt),
        };
        if !stability_check(&state, reference).is_ok() {
            return Ok(RolloutLoss::Diverged { step: i + 1 });
        }
        total += w * mse(&field_tensor(&omega)?, &field_tensor(&window[i + 1].omega_bar)?);
    }
    let loss = total;
    Ok(if loss.is_finite() {
        RolloutLoss::Finite(loss)
    } else {
        RolloutLoss::Diverged { step: n }
    })
}

/// Taped rollout: loss plus gradient, or `None` if the rollout diverged.
pub fn aposteriori_loss_and_grad(
    closure: &CnnClosure,
    window: &[Sample],
    dynamics: &Dynamics,
) -> Result<Option<(f64, Vec<f64>)>> {
    let n = check_window(window, dynamics)?;
    let grid = window[0].omega_bar.grid().clone();
    let reference = total_enstrophy(&window[0].omega_bar);
    let t0 = window[0].t;
    let dt = dynamics.params().dt;
    let mut tape = Tape::new(grid);
    let cnn = TapedCnn::leaves(&mut tape, closure);
    let mut omega = tape.spec_const(&window[0].omega_bar);
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        omega = dynamics.step_with(&mut tape, &omega, time_at(t0, i, dt), Some(&cnn))?;
        let state = QGState {
            omega_hat: tape.spec_field(omega).expect("spectral node"),
            t: time_at(t0, i + 1, dt),
        };
        if !stability_check(&state, reference).is_ok() {
            return Ok(None);
        }
        let real = tape.to_real(&omega);
        terms.push(tape.mse(real, Arc::new(field_tensor(&window[i + 1].omega_bar)?))?);
    }
    let w = 1.0 / n as f64;
    let weighted: Vec<(f64, Var)> = terms.into_iter().map(|t| (w, t)).collect();
    let loss = tape.scalar_lincomb(&weighted);
    let value = tape.scalar(loss).expect("scalar loss");
    if !value.is_finite() {
        return Ok(None);
    }
    let adjoints = tape.backward(loss)?;
    let grad = cnn.gradient(&adjoints, closure.params.architecture());
    Ok(Some((value, grad)))
}

/// Standard deviations of `ω̄` and `R` over every sample and grid point.
pub fn normalization_from(data: &[SampleSet]) -> Result<Normalization> {
    let mut stats = [(0.0f64, 0.0f64, 0usize); 2];
    for set in data {
        for s in &set.samples {
            for (slot, field) in stats.iter_mut().zip([&s.omega_bar, &s.residual]) {
                for v in to_real(field)?.values() {
                    slot.0 += v;
                    slot.1 += v * v;
                    slot.2 += 1;
                }
            }
        }
    }
    let std = |(sum, sq, count): (f64, f64, usize)| {
        let c = count as f64;
        let mean = sum / c;
        (sq / c - mean * mean).max(0.0).sqrt()
    };
    Normalization::new(std(stats[0]), std(stats[1]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss over the epoch's finite evaluations; NaN if none.
    pub loss: f64,
    pub wall_time: f64,
    pub diverged_count: usize,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub closure: CnnClosure,
    pub initial_loss: Option<f64>,
    pub aborted: bool,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

/// Fit a CNN closure to `data`.
///
/// A posteriori training needs the LES `dynamics`; its time step must equal
/// the sample spacing. Windows of `N + 1` samples never cross set
/// boundaries and are reshuffled each epoch.
pub fn train(
    cfg: &TrainConfig,
    data: &[SampleSet],
    dynamics: Option<&Dynamics>,
    init: Option<CnnClosure>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.iter().all(|s| s.is_empty()) {
        return Err(QgError::Config("training data is empty".into()));
    }
    let mut closure = match init {
        Some(c) => c,
        None => CnnClosure {
            params: cnn_init(cfg.architecture, cfg.seed)?,
            norm: normalization_from(data)?,
        },
    };
    let items: Vec<(usize, usize)> = match cfg.strategy {
        Strategy::Apriori => data
            .iter()
            .enumerate()
            .flat_map(|(i, s)| (0..s.len()).map(move |j| (i, j)))
            .collect(),
        Strategy::Aposteriori => data
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.window_starts(cfg.n_rollout).into_iter().map(move |j| (i, j)))
            .collect(),
    };
    if items.is_empty() {
        return Err(QgError::Config(format!(
            "no complete windows of {} samples in the data",
            cfg.n_rollout + 1
        )));
    }
    let dynamics = match cfg.strategy {
        Strategy::Aposteriori => Some(dynamics.ok_or_else(|| {
            QgError::Config("a posteriori training needs the LES dynamics".into())
        })?),
        Strategy::Apriori => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = AdamState::new(closure.params.len());
    let mut theta = closure.params.flatten();
    let mut report = TrainReport {
        epochs: Vec::new(),
        closure: closure.clone(),
        initial_loss: None,
        aborted: false,
    };
    let start = Instant::now();

    for epoch in 0..cfg.epochs {
        let mut order = items.clone();
        order.shuffle(&mut rng);
        let mut batches: Vec<&[(usize, usize)]> = order.chunks(cfg.batch_size).collect();
        if let Some(cap) = cfg.max_batches_per_epoch {
            batches.truncate(cap);
        }
        let (mut loss_sum, mut loss_count, mut diverged) = (0.0, 0usize, 0usize);
        for batch in batches {
            let mut grad_sum = vec![0.0; theta.len()];
            let mut used = 0usize;
            match (cfg.strategy, dynamics) {
                (Strategy::Aposteriori, Some(dyn_les)) => {
                    for &(set, start_idx) in batch {
                        let window = &data[set].samples[start_idx..=start_idx + cfg.n_rollout];
                        match aposteriori_loss_and_grad(&closure, window, dyn_les)? {
                            Some((l, g)) => {
                                loss_sum += l;
                                loss_count += 1;
                                used += 1;
                                for (a, b) in grad_sum.iter_mut().zip(&g) {
                                    *a += b;
                                }
                            }
                            None => {
                                diverged += 1;
                                warn!(
                                    "epoch {epoch}: rollout from t = {} diverged, window skipped",
                                    window[0].t
                                );
                            }
                        }
                    }
                }
                _ => {
                    let samples: Vec<&Sample> = batch.iter().map(|&(i, j)| &data[i].samples[j]).collect();
                    match apriori_loss_and_grad(&closure, &samples) {
                        Ok((l, g)) => {
                            loss_sum += l * samples.len() as f64;
                            loss_count += samples.len();
                            used = 1;
                            grad_sum = g;
                        }
                        Err(QgError::NonFinite(what)) => {
                            diverged += samples.len();
                            warn!("epoch {epoch}: non-finite {what}, batch skipped");
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
            if report.initial_loss.is_none() && loss_count > 0 {
                report.initial_loss = Some(loss_sum / loss_count as f64);
            }
            if used == 0 {
                continue;
            }
            let scale = 1.0 / used as f64;
            grad_sum.iter_mut().for_each(|g| *g *= scale);
            if adam_update(&mut theta, &grad_sum, &mut adam, cfg)? {
                closure.params.set_flat(&theta)?;
            }
        }
        let loss = if loss_count > 0 {
            loss_sum / loss_count as f64
        } else {
            f64::NAN
        };
        let record = EpochRecord {
            epoch,
            loss,
            wall_time: start.elapsed().as_secs_f64(),
            diverged_count: diverged,
        };
        info!(
            "epoch {epoch}: loss {loss:.6e}, diverged {diverged}, {:.1} s",
            record.wall_time
        );
        report.epochs.push(record);
        if loss_count == 0 {
            report.aborted = true;
            break;
        }
    }
    report.closure = closure;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closures::{CnnParams, ClosureModel};
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};
    use crate::dynamics::{ForcingParams, QGParams};
    use crate::spectral::{to_spectral, Grid, RealField};

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn adam_first_step_hand_computed() {
        let c = cfg();
        let mut theta = vec![0.0];
        let mut s = AdamState::new(1);
        adam_update(&mut theta, &[1.0], &mut s, &c).unwrap();
        // m̂ = 1, v̂ = 1: Δθ = −lr / (1 + eps)
        assert!((theta[0] + 1e-4 / (1.0 + 1e-8)).abs() < 1e-20);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut theta = vec![0.3, -1.2];
        let mut s = AdamState::new(2);
        adam_update(&mut theta, &[0.0, 0.0], &mut s, &cfg()).unwrap();
        assert_eq!(theta, vec![0.3, -1.2]);
    }

    #[test]
    fn adam_two_steps_hand_computed() {
        let c = cfg();
        let g = 0.5;
        let mut theta = vec![1.0];
        let mut s = AdamState::new(1);
        adam_update(&mut theta, &[g], &mut s, &c).unwrap();
        adam_update(&mut theta, &[g], &mut s, &c).unwrap();
        // constant g: m̂ = g and v̂ = g² at every step
        let step = c.lr * g / (g + c.adam_eps);
        let expected = 1.0 - 2.0 * step;
        assert!((theta[0] - expected).abs() < 1e-15, "{}", theta[0] - expected);
        let m2 = 0.9 * (0.1 * g) + 0.1 * g;
        assert!((s.moments().0[0] - m2).abs() < 1e-16);
    }

    #[test]
    fn adam_skips_non_finite_gradient() {
        let mut theta = vec![1.0];
        let mut s = AdamState::new(1);
        assert!(!adam_update(&mut theta, &[f64::NAN], &mut s, &cfg()).unwrap());
        assert_eq!(theta, vec![1.0]);
        assert_eq!(s.step(), 0);
        assert!(adam_update(&mut theta, &[1.0, 2.0], &mut s, &cfg()).is_err());
    }

    fn tiny_arch() -> CnnArchitecture {
        CnnArchitecture {
            depth: 2,
            width: 3,
            kernel: 3,
        }
    }

    fn sample_from(g: &Arc<Grid>, seed: u64, t: f64) -> Sample {
        let w = RealField::from_fn(g.clone(), |x, y| ((seed + 1) as f64 * 0.3 + x).sin() * (2.0 * y).cos());
        let r = RealField::from_fn(g.clone(), |x, y| 0.1 * (x + 2.0 * y).cos());
        Sample {
            omega_bar: to_spectral(&w).unwrap(),
            residual: to_spectral(&r).unwrap(),
            t,
        }
    }

    #[test]
    fn apriori_loss_examples() {
        let g = Grid::new(8).unwrap();
        let s = sample_from(&g, 0, 0.0);
        let zero = CnnClosure {
            params: CnnParams::zeros(tiny_arch()).unwrap(),
            norm: Normalization::identity(),
        };
        let loss = apriori_loss(&zero, &[&s]).unwrap();
        let r = to_real(&s.residual).unwrap();
        assert!((loss - r.mean_square()).abs() < 1e-15);

        // single-channel identity network on the residual itself → exactly 0
        let arch = CnnArchitecture {
            depth: 1,
            width: 1,
            kernel: 1,
        };
        let mut flat = vec![0.0; arch.param_count()];
        flat[0] = 1.0;
        let ident = CnnClosure {
            params: CnnParams::from_flat(arch, &flat).unwrap(),
            norm: Normalization::identity(),
        };
        let perfect = Sample {
            omega_bar: s.residual.clone(),
            ..s.clone()
        };
        assert_eq!(apriori_loss(&ident, &[&perfect]).unwrap(), 0.0);
    }

    #[test]
    fn apriori_hand_arithmetic() {
        // Constant fields: a 1×1 network maps ω̄ = 2 to 3·2 + 0.5 = 6.5;
        // residual 4 → error 2.5² = 6.25 at every point.
        let g = Grid::new(8).unwrap();
        let s = Sample {
            omega_bar: to_spectral(&RealField::from_fn(g.clone(), |_, _| 2.0)).unwrap(),
            residual: to_spectral(&RealField::from_fn(g, |_, _| 4.0)).unwrap(),
            t: 0.0,
        };
        let arch = CnnArchitecture {
            depth: 1,
            width: 1,
            kernel: 1,
        };
        let c = CnnClosure {
            params: CnnParams::from_flat(arch, &[3.0, 0.5]).unwrap(),
            norm: Normalization::identity(),
        };
        assert!((apriori_loss(&c, &[&s]).unwrap() - 6.25).abs() < 1e-12);
        let (l, g) = apriori_loss_and_grad(&c, &[&s]).unwrap();
        assert!((l - 6.25).abs() < 1e-12);
        // ∂/∂w = 2·2.5·2 = 10, ∂/∂b = 2·2.5 = 5
        assert!((g[0] - 10.0).abs() < 1e-10 && (g[1] - 5.0).abs() < 1e-10);
    }

    fn les_dynamics(g: &Arc<Grid>, dt: f64) -> Dynamics {
        Dynamics::new(g.clone(), QGParams::new(1e-3, 0.02, dt).unwrap(), Some(ForcingParams::default())).unwrap()
    }

    fn rolled_window(d: &Dynamics, n: usize, closure: Option<&ClosureModel>) -> Vec<Sample> {
        let g = d.grid().clone();
        let w0 = to_spectral(&RealField::from_fn(g.clone(), |x, y| x.sin() + (2.0 * y + x).cos())).unwrap();
        let s0 = QGState::new(w0, 0.25).unwrap();
        let traj = d.simulate(&s0, n, closure, 1).unwrap();
        traj.states
            .iter()
            .map(|s| Sample {
                omega_bar: s.omega_hat.clone(),
                residual: SpectralField::zeros(g.clone()),
                t: s.t,
            })
            .collect()
    }

    #[test]
    fn aposteriori_loss_is_zero_on_own_rollout() {
        let g = Grid::new(16).unwrap();
        let d = les_dynamics(&g, 0.01);
        let closure = CnnClosure {
            params: cnn_init(tiny_arch(), 1).unwrap(),
            norm: Normalization::new(2.0, 0.1).unwrap(),
        };
        let model = ClosureModel::Cnn(closure.clone());
        let window = rolled_window(&d, 3, Some(&model));
        assert_eq!(aposteriori_loss(&closure, &window, &d).unwrap(), RolloutLoss::Finite(0.0));
        let (l, _) = aposteriori_loss_and_grad(&closure, &window, &d).unwrap().unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn aposteriori_n1_zero_closure_is_a_single_step_error() {
        let g = Grid::new(16).unwrap();
        let d = les_dynamics(&g, 0.01);
        let mut window = rolled_window(&d, 1, None);
        // perturb the target so the error is nonzero
        window[1].omega_bar = window[1].omega_bar.scaled(1.1);
        let zero = CnnClosure {
            params: CnnParams::zeros(tiny_arch()).unwrap(),
            norm: Normalization::identity(),
        };
        let stepped = d
            .step_rk4::<ClosureModel>(&QGState::new(window[0].omega_bar.clone(), window[0].t).unwrap(), None)
            .unwrap();
        let a = to_real(&stepped.omega_hat).unwrap();
        let b = to_real(&window[1].omega_bar).unwrap();
        let expected = a.values().iter().zip(b.values()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 256.0;
        match aposteriori_loss(&zero, &window, &d).unwrap() {
            RolloutLoss::Finite(l) => assert!((l - expected).abs() <= 1e-12 * expected),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn aposteriori_rejects_wrong_spacing() {
        let g = Grid::new(16).unwrap();
        let d = les_dynamics(&g, 0.01);
        let window = rolled_window(&d, 2, None);
        let other = les_dynamics(&g, 0.02);
        let c = CnnClosure {
            params: CnnParams::zeros(tiny_arch()).unwrap(),
            norm: Normalization::identity(),
        };
        assert!(aposteriori_loss(&c, &window, &other).is_err());
    }

    fn toy_set(g: &Arc<Grid>, n: usize) -> SampleSet {
        SampleSet {
            samples: (0..n).map(|i| sample_from(g, i as u64, i as f64 * 0.01)).collect(),
            source_id: 0,
            dt_sample: 0.01,
        }
    }

    #[test]
    fn apriori_training_reduces_loss_and_is_deterministic() {
        let g = Grid::new(8).unwrap();
        let data = vec![toy_set(&g, 6)];
        let c = TrainConfig {
            strategy: Strategy::Apriori,
            epochs: 30,
            batch_size: 3,
            lr: 1e-2,
            architecture: tiny_arch(),
            ..cfg()
        };
        let a = train(&c, &data, None, None).unwrap();
        let b = train(&c, &data, None, None).unwrap();
        let losses = |r: &TrainReport| r.epochs.iter().map(|e| e.loss).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
        assert!(a.final_loss().unwrap() < a.epochs[0].loss);
        assert_eq!(a.closure.params, b.closure.params);
    }

    #[test]
    fn aposteriori_training_runs_and_needs_dynamics() {
        let g = Grid::new(16).unwrap();
        let d = les_dynamics(&g, 0.01);
        let mut window = rolled_window(&d, 4, None);
        for s in window.iter_mut() {
            s.residual = s.omega_bar.scaled(0.01);
        }
        let data = vec![SampleSet {
            samples: window,
            source_id: 0,
            dt_sample: 0.01,
        }];
        let c = TrainConfig {
            strategy: Strategy::Aposteriori,
            n_rollout: 2,
            epochs: 2,
            batch_size: 2,
            architecture: tiny_arch(),
            ..cfg()
        };
        assert!(train(&c, &data, None, None).is_err());
        let r = train(&c, &data, Some(&d), None).unwrap();
        assert_eq!(r.epochs.len(), 2);
        assert!(r.epochs.iter().all(|e| e.loss.is_finite() && e.diverged_count == 0));
        let too_long = TrainConfig { n_rollout: 9, ..c };
        assert!(train(&too_long, &data, Some(&d), None).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { lr: 0.0, ..cfg() }.validate().is_err());
        assert!(TrainConfig { n_rollout: 0, ..cfg() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..cfg() }.validate().is_err());
        assert!(cfg().validate().is_ok());
    }

    proptest! {
        #[test]
        fn adam_first_step_moves_against_the_gradient_by_at_most_lr(
            pairs in prop::collection::vec((-10f64..10.0, -1e3f64..1e3), 1..32),
        ) {
            let cfg = cfg();
            let mut theta: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let g: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let before = theta.clone();
            let mut s = AdamState::new(theta.len());
            prop_assert!(adam_update(&mut theta, &g, &mut s, &cfg).unwrap());
            for ((t, b), gi) in theta.iter().zip(&before).zip(&g) {
                let d = t - b;
                prop_assert!(d.abs() <= cfg.lr * (1.0 + 1e-12));
                prop_assert!(d * gi <= 0.0);
                if *gi == 0.0 {
                    prop_assert_eq!(d, 0.0);
                }
            }
        }
    }
}
