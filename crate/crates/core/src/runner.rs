//! The five workflow commands behind the `qgles` binary. Each reads its
//! inputs from disk, writes its outputs atomically under `out`, and returns a
//! summary for the caller to print.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;

use crate::closures::ClosureModel;
use crate::coarse::{project, sgs_residual, upsample, Sample, SampleSet};
use crate::config::{ClosureSpec, RunConfig, REFERENCE_LABEL};
use crate::diagnostics::{
    enstrophy_flux, enstrophy_spectrum, total_energy, total_enstrophy, SpectrumAccumulator, SpectrumKind,
    SpectrumSeries, StabilityStatus,
};
use crate::dynamics::{spinup_observed, time_at, QGState};
use crate::error::{QgError, Result};
use crate::io::{
    atomic_write, fmt_f64, read_spectrum, write_spectrum, write_training_log, Checkpoint, Dataset, FieldSnapshot,
    Manifest, ManifestEntry,
};
use crate::spectral::{inv_laplacian, Grid, SpectralField};
use crate::training::{train, TrainReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

/// Process exit code for an error.
pub fn exit_code(e: &QgError) -> i32 {
    match e {
        QgError::Config(_) => EXIT_CONFIG,
        QgError::Diverged { .. } | QgError::TrainingAborted(_) => EXIT_DIVERGED,
        _ => EXIT_FAILURE,
    }
}

fn config_err(msg: impl Into<String>) -> QgError {
    QgError::Config(msg.into())
}

/// Relative closeness used for time bookkeeping.
fn times_agree(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

#[derive(Debug, Clone)]
pub struct SpinupSummary {
    pub snapshot: PathBuf,
    pub t_final: f64,
    pub energy: f64,
    pub enstrophy: f64,
    /// Mean energy over the two halves of the last 20% of the run.
    pub window_means: Option<(f64, f64)>,
}

impl SpinupSummary {
    /// `|E₂ − E₁| / mean`, the stationarity measure.
    pub fn stationarity(&self) -> Option<f64> {
        self.window_means
            .map(|(a, b)| (b - a).abs() / (0.5 * (a + b)).max(f64::MIN_POSITIVE))
    }
}

/// Spin up from the seeded random shell state and write `spinup.qgf`.
/// With `spinup_n` set the run happens on that grid and is zero-padded to
/// `n_hi` at the end.
pub fn cmd_spinup(cfg: &RunConfig, out: &Path) -> Result<SpinupSummary> {
    let n = cfg.grid.spinup_n.unwrap_or(cfg.grid.n_hi);
    let grid = Grid::new(n)?;
    let steps = cfg.run.spinup_steps;
    let window_start = steps - steps / 5;
    let mut energies = Vec::new();
    let duration = steps as f64 * cfg.physics.dt;
    let forcing = cfg.forcing_params();
    let state = spinup_observed(&grid, &cfg.physics, forcing.as_ref(), cfg.seed, duration, |step, s| {
        if steps > 0 && step >= window_start {
            energies.push(total_energy(&s.omega_hat));
        }
        Ok(())
    })?;
    let state = if n == cfg.grid.n_hi {
        state
    } else {
        let hi = cfg.filter()?.grid_hi().clone();
        QGState::new(upsample(&state.omega_hat, &hi)?, state.t)?
    };
    let window_means = (energies.len() >= 2).then(|| {
        let half = energies.len() / 2;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        (mean(&energies[..half]), mean(&energies[half..]))
    });
    let snapshot = out.join("spinup.qgf");
    FieldSnapshot::from_state(&state)?.write(&snapshot)?;
    let summary = SpinupSummary {
        snapshot,
        t_final: state.t,
        energy: total_energy(&state.omega_hat),
        enstrophy: total_enstrophy(&state.omega_hat),
        window_means,
    };
    info!("spin-up done: t = {}, E = {}, Z = {}", summary.t_final, summary.energy, summary.enstrophy);
    Ok(summary)
}

fn load_state(path: &Path, n: usize) -> Result<QGState> {
    let snap = FieldSnapshot::read(path)?;
    if snap.n as usize != n {
        return Err(config_err(format!(
            "{} holds a {}² field, expected {n}²",
            path.display(),
            snap.n
        )));
    }
    snap.to_state()
}

#[derive(Debug, Clone)]
pub struct DnsSummary {
    pub manifest: PathBuf,
    pub stored: usize,
    pub final_snapshot: PathBuf,
    pub status: StabilityStatus,
}

pub fn snapshot_name(step: usize) -> String {
    format!("snap_{step:08}.qgf")
}

/// Integrate `dns_steps` from `initial`, writing every `store_cadence`-th
/// state plus `manifest.csv` and `final.qgf`. On divergence the files
/// written so far stay in place, the manifest included, and the error is
/// returned.
pub fn cmd_dns(cfg: &RunConfig, initial: &Path, out: &Path) -> Result<DnsSummary> {
    let steps = cfg.run.dns_steps;
    if steps == 0 {
        return Err(config_err("dns_steps must be >= 1"));
    }
    let dynamics = cfg.dns_dynamics()?;
    let s0 = load_state(initial, cfg.grid.n_hi)?;
    let cadence = cfg.store_cadence();
    let mut entries = Vec::new();
    let mut last = s0.clone();
    let traj = dynamics.simulate_observed::<ClosureModel, _>(&s0, steps, None, steps, |step, s| {
        if step % cadence == 0 {
            let file = snapshot_name(step);
            FieldSnapshot::from_state(s)?.write(&out.join(&file))?;
            entries.push(ManifestEntry { step, time: s.t, file });
        }
        if step == steps {
            last = s.clone();
        }
        Ok(())
    })?;
    let manifest_path = out.join("manifest.csv");
    let stored = entries.len();
    Manifest {
        n: cfg.grid.n_hi,
        dt: cfg.physics.dt,
        cadence,
        entries,
    }
    .write(&manifest_path)?;
    if let StabilityStatus::Diverged { cause, t_event } = &traj.status {
        return Err(QgError::Diverged {
            t: *t_event,
            cause: cause.to_string(),
        });
    }
    let final_snapshot = out.join("final.qgf");
    FieldSnapshot::from_state(&last)?.write(&final_snapshot)?;
    Ok(DnsSummary {
        manifest: manifest_path,
        stored,
        final_snapshot,
        status: traj.status,
    })
}

#[derive(Debug, Clone)]
pub struct DatasetSummary {
    pub path: PathBuf,
    pub segment_sizes: Vec<usize>,
}

/// Project every stored state of every manifest onto the LES grid and pair
/// it with its subgrid residual. One segment per manifest.
pub fn cmd_make_dataset(cfg: &RunConfig, manifests: &[PathBuf], out: &Path) -> Result<DatasetSummary> {
    if manifests.is_empty() {
        return Err(config_err("make-dataset needs at least one manifest"));
    }
    let spec = cfg.filter()?;
    let mut sets = Vec::new();
    for (id, path) in manifests.iter().enumerate() {
        let m = Manifest::read(path)?;
        if m.cadence != spec.delta() {
            return Err(config_err(format!(
                "{}: stored every {} steps, the LES cadence is delta = {}",
                path.display(),
                m.cadence,
                spec.delta()
            )));
        }
        if m.n != spec.n_hi() || m.dt != cfg.physics.dt {
            return Err(config_err(format!(
                "{}: trajectory (n = {}, dt = {}) does not match the config (n = {}, dt = {})",
                path.display(),
                m.n,
                m.dt,
                spec.n_hi(),
                cfg.physics.dt
            )));
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        let samples = m
            .entries
            .iter()
            .map(|e| {
                let s = load_state(&dir.join(&e.file), spec.n_hi())?;
                if s.t != e.time {
                    return Err(QgError::Format(format!("{}: time differs from the manifest", e.file)));
                }
                Ok(Sample {
                    omega_bar: project(&s.omega_hat, &spec)?,
                    residual: sgs_residual(&s.omega_hat, &spec)?,
                    t: s.t,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        sets.push(SampleSet {
            samples,
            source_id: u32::try_from(id).map_err(|_| config_err("too many manifests"))?,
            dt_sample: m.dt * m.cadence as f64,
        });
    }
    let path = out.join("dataset.qgds");
    Dataset::from_sets(&sets)?.write(&path)?;
    Ok(DatasetSummary {
        path,
        segment_sizes: sets.iter().map(|s| s.len()).collect(),
    })
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub report: TrainReport,
}

/// Train a CNN closure on a dataset; writes `closure.qgnn` and
/// `train_log.csv`. An aborted run still writes both, then fails.
pub fn cmd_train(cfg: &RunConfig, dataset: &Path, out: &Path) -> Result<TrainSummary> {
    let ds = Dataset::read(dataset)?;
    let spec = cfg.filter()?;
    if ds.n as usize != spec.n_lo() {
        return Err(config_err(format!(
            "dataset is on a {}² grid, the LES grid is {}²",
            ds.n,
            spec.n_lo()
        )));
    }
    let les = cfg.les_dynamics()?;
    for seg in &ds.segments {
        if !times_agree(seg.dt_sample, les.params().dt) {
            return Err(config_err(format!(
                "dataset sample spacing {} differs from the LES step {}",
                seg.dt_sample,
                les.params().dt
            )));
        }
    }
    let sets = ds.to_sets()?;
    let report = train(&cfg.train_config(), &sets, Some(&les), None)?;
    let checkpoint = out.join("closure.qgnn");
    let log = out.join("train_log.csv");
    write_training_log(&log, &report.epochs)?;
    Checkpoint::from_closure(&report.closure).write(&checkpoint)?;
    if report.aborted {
        return Err(QgError::TrainingAborted(format!(
            "every rollout diverged in epoch {}",
            report.epochs.len().saturating_sub(1)
        )));
    }
    Ok(TrainSummary { checkpoint, log, report })
}

/// LES and DNS must span the same interval: `les_steps · δ` DNS steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Coverage {
    pub les_steps: usize,
    pub delta: usize,
    pub dns_steps: usize,
    pub t_start: f64,
    pub t_end_les: f64,
    pub t_end_dns: f64,
}

impl Coverage {
    pub fn new(t_start: f64, les_steps: usize, delta: usize, dt_dns: f64) -> Self {
        let dns_steps = les_steps * delta;
        Self {
            les_steps,
            delta,
            dns_steps,
            t_start,
            t_end_les: time_at(t_start, les_steps, dt_dns * delta as f64),
            t_end_dns: time_at(t_start, dns_steps, dt_dns),
        }
    }

    pub fn verify(&self) -> Result<()> {
        if self.dns_steps != self.les_steps * self.delta || !times_agree(self.t_end_les, self.t_end_dns) {
            return Err(QgError::Config(format!(
                "LES ({} steps, ends {}) and DNS ({} steps, ends {}) cover different intervals",
                self.les_steps, self.t_end_les, self.dns_steps, self.t_end_dns
            )));
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        format!(
            "les_steps,delta,dns_steps,t_start,t_end_les,t_end_dns\n{},{},{},{},{},{}\n",
            self.les_steps,
            self.delta,
            self.dns_steps,
            fmt_f64(self.t_start),
            fmt_f64(self.t_end_les),
            fmt_f64(self.t_end_dns)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub label: String,
    pub status: StabilityStatus,
    /// Averaged diagnostics collected, zero for a diverged run's files.
    pub samples: usize,
}

#[derive(Debug, Clone)]
pub struct EvaluationReport {
    pub runs: Vec<RunRecord>,
    pub coverage: Coverage,
}

impl EvaluationReport {
    pub fn run(&self, label: &str) -> Option<&RunRecord> {
        self.runs.iter().find(|r| r.label == label)
    }
}

pub fn status_csv(runs: &[RunRecord]) -> String {
    let mut out = String::from("run,status,cause,t_event,samples\n");
    for r in runs {
        match &r.status {
            StabilityStatus::Ok => writeln!(out, "{},ok,,,{}", r.label, r.samples).unwrap(),
            StabilityStatus::Diverged { cause, t_event } => writeln!(
                out,
                "{},diverged,{cause},{},{}",
                r.label,
                fmt_f64(*t_event),
                r.samples
            )
            .unwrap(),
        }
    }
    out
}

/// Time-averaged spectra of one run.
struct Averages {
    spectrum: SpectrumAccumulator,
    flux: SpectrumAccumulator,
}

impl Averages {
    fn new() -> Self {
        Self {
            spectrum: SpectrumAccumulator::new(),
            flux: SpectrumAccumulator::new(),
        }
    }

    fn add(&mut self, omega_lo: &SpectralField) -> Result<()> {
        self.spectrum.add(&enstrophy_spectrum(omega_lo))?;
        self.flux.add(&enstrophy_flux(omega_lo, &inv_laplacian(omega_lo))?)
    }

    fn write(&self, out: &Path, label: &str) -> Result<()> {
        let (Some(z), Some(p)) = (self.spectrum.mean(), self.flux.mean()) else {
            return Ok(());
        };
        write_spectrum(&spectrum_path(out, label), &z)?;
        write_spectrum(&flux_path(out, label), &p)
    }
}

pub fn spectrum_path(out: &Path, label: &str) -> PathBuf {
    out.join(format!("{label}_spectrum.csv"))
}

pub fn flux_path(out: &Path, label: &str) -> PathBuf {
    out.join(format!("{label}_flux.csv"))
}

pub fn final_path(out: &Path, label: &str) -> PathBuf {
    out.join(format!("{label}_final.qgf"))
}

/// Run the filtered-DNS reference and one LES per closure from the same
/// filtered initial condition.
///
/// Diagnostics are taken on the LES grid every `average_every` LES steps
/// (the reference is projected first) and averaged. A diverged closure run
/// is reported in `status.csv` and gets no spectrum, flux or final files;
/// only a diverged reference fails the command.
pub fn cmd_evaluate(cfg: &RunConfig, initial: &Path, closures: &[ClosureSpec], out: &Path) -> Result<EvaluationReport> {
    let les_steps = cfg.run.les_steps;
    let every = cfg.run.average_every;
    if les_steps == 0 || les_steps < every {
        return Err(config_err(format!(
            "les_steps = {les_steps} must be >= average_every = {every} and >= 1"
        )));
    }
    let models = closures
        .iter()
        .map(|c| Ok((c.label().to_string(), c.load()?)))
        .collect::<Result<Vec<_>>>()?;
    let spec = cfg.filter()?;
    let s0 = load_state(initial, spec.n_hi())?;
    let coverage = Coverage::new(s0.t, les_steps, spec.delta(), cfg.physics.dt);
    coverage.verify()?;

    // filtered DNS reference
    let dns = cfg.dns_dynamics()?;
    let mut reference = Averages::new();
    let dns_every = every * spec.delta();
    let mut ref_final = None;
    let traj = dns.simulate_observed::<ClosureModel, _>(&s0, coverage.dns_steps, None, coverage.dns_steps, |step, s| {
        if step > 0 && step % dns_every == 0 {
            reference.add(&project(&s.omega_hat, &spec)?)?;
        }
        if step == coverage.dns_steps {
            ref_final = Some(QGState::new(project(&s.omega_hat, &spec)?, s.t)?);
        }
        Ok(())
    })?;
    if let StabilityStatus::Diverged { cause, t_event } = &traj.status {
        return Err(QgError::Diverged {
            t: *t_event,
            cause: format!("reference DNS: {cause}"),
        });
    }
    let ref_final = ref_final.ok_or_else(|| QgError::Format("reference run produced no final state".into()))?;
    if !times_agree(ref_final.t, coverage.t_end_les) {
        return Err(config_err("reference end time does not match the LES end time"));
    }
    reference.write(out, REFERENCE_LABEL)?;
    FieldSnapshot::from_state(&ref_final)?.write(&final_path(out, REFERENCE_LABEL))?;
    let mut runs = vec![RunRecord {
        label: REFERENCE_LABEL.to_string(),
        status: StabilityStatus::Ok,
        samples: reference.spectrum.count(),
    }];

    let les = cfg.les_dynamics()?;
    let les0 = QGState::new(project(&s0.omega_hat, &spec)?, s0.t)?;
    for (label, model) in &models {
        info!("evaluating closure {label}");
        let mut acc = Averages::new();
        let mut last = None;
        let traj = les.simulate_observed(&les0, les_steps, Some(model), les_steps, |step, s| {
            if step > 0 && step % every == 0 {
                acc.add(&s.omega_hat)?;
            }
            if step == les_steps {
                last = Some(s.clone());
            }
            Ok(())
        })?;
        let samples = match (&traj.status, last) {
            (StabilityStatus::Ok, Some(last)) => {
                acc.write(out, label)?;
                FieldSnapshot::from_state(&last)?.write(&final_path(out, label))?;
                acc.spectrum.count()
            }
            _ => 0,
        };
        runs.push(RunRecord {
            label: label.clone(),
            status: traj.status.clone(),
            samples,
        });
    }
    atomic_write(&out.join("status.csv"), status_csv(&runs).as_bytes())?;
    atomic_write(&out.join("coverage.csv"), coverage.to_csv().as_bytes())?;
    Ok(EvaluationReport { runs, coverage })
}

/// Mean Z(k) of a finished evaluation, read back from its CSV.
pub fn read_run_spectrum(out: &Path, label: &str) -> Result<SpectrumSeries> {
    Ok(SpectrumSeries {
        kind: SpectrumKind::EnstrophySpectrum,
        values: read_spectrum(&spectrum_path(out, label))?,
    })
}
