//! Scaled-down version of the full pipeline: spin-up, two DNS training
//! trajectories, a held-out initial condition, a priori and a posteriori
//! training, and one evaluation of every closure against the filtered DNS.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use crate::closures::CnnArchitecture;
use crate::config::{ClosureSpec, RunConfig, REFERENCE_LABEL};
use crate::diagnostics::log_spectrum_error;
use crate::error::{QgError, Result};
use crate::io::{atomic_write, fmt_f64, FieldSnapshot};
use crate::runner::{
    cmd_dns, cmd_evaluate, cmd_make_dataset, cmd_spinup, cmd_train, read_run_spectrum, EvaluationReport,
};
use crate::spectral::{inv_laplacian, velocity};
use crate::training::{Strategy, TrainConfig};

/// One trained model of the comparison.
#[derive(Debug, Clone)]
pub struct ModelPlan {
    pub label: String,
    pub train: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct DeskExperiment {
    /// Physics, grids and seed; the run lengths below override its `[run]`.
    pub base: RunConfig,
    pub spinup_steps: usize,
    /// DNS steps after the spin-up before the first trajectory.
    pub burn_steps: usize,
    /// DNS steps per training trajectory.
    pub trajectory_steps: usize,
    /// DNS steps between the last trajectory and the evaluation start.
    pub gap_steps: usize,
    pub les_steps: usize,
    pub models: Vec<ModelPlan>,
}

fn train_plan(strategy: Strategy, n_rollout: usize, epochs: usize, batch_size: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        strategy,
        n_rollout,
        lr,
        epochs,
        batch_size,
        architecture: CnnArchitecture {
            depth: 4,
            width: 16,
            kernel: 5,
        },
        ..TrainConfig::default()
    }
}

impl DeskExperiment {
    /// 256² DNS, δ = 8, 32² LES, 4 × 16 CNN, 3000 LES steps of evaluation.
    pub fn desk_scale(seed: u64) -> Self {
        let base = RunConfig::from_toml(&format!(
            r#"
            seed = {seed}
            [grid]
            n_hi = 256
            delta = 8
            spinup_n = 128
            [physics]
            nu = 5e-4
            mu = 2e-2
            dt = 3e-3
            [run]
            average_every = 10
            "#
        ))
        .expect("desk configuration is valid");
        let models = vec![
            ModelPlan {
                label: "apriori".into(),
                train: train_plan(Strategy::Apriori, 1, 10, 16, 1e-3),
            },
            ModelPlan {
                label: "apost_n1".into(),
                train: train_plan(Strategy::Aposteriori, 1, 4, 32, 1e-3),
            },
            ModelPlan {
                label: "apost_n5".into(),
                train: train_plan(Strategy::Aposteriori, 5, 4, 8, 1e-3),
            },
            ModelPlan {
                label: "apost_n30".into(),
                train: train_plan(Strategy::Aposteriori, 30, 4, 2, 1e-3),
            },
        ];
        Self {
            base,
            spinup_steps: 53_334,
            burn_steps: 1_667,
            // 1500 stored states per trajectory at cadence δ = 8
            trajectory_steps: 11_992,
            gap_steps: 3_334,
            les_steps: 3_000,
            models,
        }
    }

    /// Same pipeline on tiny grids, for tests.
    pub fn smoke(seed: u64) -> Self {
        let base = RunConfig::from_toml(&format!(
            r#"
            seed = {seed}
            [grid]
            n_hi = 32
            delta = 2
            [physics]
            nu = 5e-3
            mu = 2e-2
            dt = 1e-2
            [run]
            average_every = 2
            "#
        ))
        .expect("smoke configuration is valid");
        let small = |strategy, n, epochs| TrainConfig {
            architecture: CnnArchitecture {
                depth: 2,
                width: 4,
                kernel: 3,
            },
            ..train_plan(strategy, n, epochs, 4, 1e-3)
        };
        Self {
            base,
            spinup_steps: 50,
            burn_steps: 4,
            trajectory_steps: 24,
            gap_steps: 6,
            les_steps: 10,
            models: vec![
                ModelPlan {
                    label: "apriori".into(),
                    train: small(Strategy::Apriori, 1, 2),
                },
                ModelPlan {
                    label: "apost_n3".into(),
                    train: small(Strategy::Aposteriori, 3, 2),
                },
            ],
        }
    }

    fn with_run(&self, f: impl FnOnce(&mut RunConfig)) -> Result<RunConfig> {
        let mut c = self.base.clone();
        c.run.store_cadence = None;
        f(&mut c);
        c.validate()?;
        Ok(c)
    }

    /// Spin-up, burn-in, two training trajectories and the held-out start.
    pub fn prepare(&self, dir: &Path) -> Result<PreparedData> {
        let spin = self.with_run(|c| c.run.spinup_steps = self.spinup_steps)?;
        let s = cmd_spinup(&spin, &dir.join("spinup"))?;
        info!("spin-up stationarity {:?}", s.stationarity());
        let advective_number = advective_number(&s.snapshot, self.base.physics.dt)?;
        let dns = |steps: usize, from: &Path, sub: &str| -> Result<_> {
            let c = self.with_run(|c| c.run.dns_steps = steps)?;
            cmd_dns(&c, from, &dir.join(sub))
        };
        let burn = dns(self.burn_steps, &s.snapshot, "burn")?;
        let a = dns(self.trajectory_steps, &burn.final_snapshot, "traj_a")?;
        let b = dns(self.trajectory_steps, &a.final_snapshot, "traj_b")?;
        let gap = dns(self.gap_steps, &b.final_snapshot, "gap")?;
        let data = cmd_make_dataset(&self.base, &[a.manifest, b.manifest], &dir.join("data"))?;
        Ok(PreparedData {
            dataset: data.path,
            held_out: gap.final_snapshot,
            spinup_stationarity: s.stationarity(),
            advective_number,
        })
    }

    /// Train every model, then evaluate them with the zero and dynamic
    /// Smagorinsky baselines from the held-out start.
    pub fn train_and_evaluate(&self, data: &PreparedData, dir: &Path) -> Result<ExperimentOutcome> {
        let mut closures = vec![ClosureSpec::Zero, ClosureSpec::Smagorinsky];
        let mut logs = Vec::new();
        for m in &self.models {
            let mut c = self.base.clone();
            c.train = m.train.clone();
            c.validate()?;
            info!("training {}", m.label);
            let t = cmd_train(&c, &data.dataset, &dir.join(&m.label))?;
            logs.push(t.log);
            closures.push(ClosureSpec::Checkpoint {
                label: m.label.clone(),
                path: t.checkpoint,
            });
        }
        let eval_cfg = self.with_run(|c| c.run.les_steps = self.les_steps)?;
        let eval_dir = dir.join("evaluate");
        let evaluation = cmd_evaluate(&eval_cfg, &data.held_out, &closures, &eval_dir)?;
        let k_hi = (self.base.filter()?.k_c() / 2.0).floor() as usize;
        let reference = read_run_spectrum(&eval_dir, REFERENCE_LABEL)?;
        let mut errors = Vec::new();
        for run in evaluation.runs.iter().filter(|r| r.label != REFERENCE_LABEL) {
            let err = if run.status.is_ok() {
                Some(log_spectrum_error(&read_run_spectrum(&eval_dir, &run.label)?, &reference, 2, k_hi)?)
            } else {
                None
            };
            errors.push((run.label.clone(), err));
        }
        let outcome = ExperimentOutcome {
            evaluation,
            spectrum_errors: errors,
            k_range: (2, k_hi),
            logs,
            eval_dir,
        };
        atomic_write(&dir.join("summary.csv"), outcome.summary_csv().as_bytes())?;
        Ok(outcome)
    }
}

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub dataset: PathBuf,
    pub held_out: PathBuf,
    pub spinup_stationarity: Option<f64>,
    /// `dt · (n/3) · max(|u| + |v|)` on the spun-up state.
    pub advective_number: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub evaluation: EvaluationReport,
    /// Mean |Δ ln Z(k)| against the filtered DNS; `None` for diverged runs.
    pub spectrum_errors: Vec<(String, Option<f64>)>,
    pub k_range: (usize, usize),
    pub logs: Vec<PathBuf>,
    pub eval_dir: PathBuf,
}

impl ExperimentOutcome {
    pub fn error_of(&self, label: &str) -> Option<f64> {
        self.spectrum_errors
            .iter()
            .find(|(l, _)| l == label)
            .and_then(|(_, e)| *e)
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("run,status,log_spectrum_error\n");
        for (label, err) in &self.spectrum_errors {
            let status = self
                .evaluation
                .run(label)
                .map(|r| if r.status.is_ok() { "ok" } else { "diverged" })
                .unwrap_or("missing");
            let err = err.map(fmt_f64).unwrap_or_default();
            out.push_str(&format!("{label},{status},{err}\n"));
        }
        out
    }
}

/// Spectral RK4 advective stability number of a stored state.
pub fn advective_number(snapshot: &Path, dt: f64) -> Result<f64> {
    let state = FieldSnapshot::read(snapshot)?.to_state()?;
    let n = state.grid().n() as f64;
    let (u, v) = velocity(&inv_laplacian(&state.omega_hat));
    let max_u = u.values().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let max_v = v.values().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    Ok(dt * n / 3.0 * (max_u + max_v))
}

/// Training logs with the `wall_time` column dropped.
pub fn log_without_wall_time(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(QgError::Format(format!("{}: not a training log", path.display())));
            }
            Ok(format!("{},{},{}\n", f[0], f[1], f[3]))
        })
        .collect::<Result<Vec<_>>>()?
        .concat())
}
