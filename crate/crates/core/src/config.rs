//! Run configuration, read from TOML.
//!
//! ```toml
//! seed = 7
//! out = "runs/demo"          # optional, --out wins
//!
//! [grid]
//! n_hi = 256
//! delta = 8
//! spinup_n = 128             # optional coarser spin-up grid
//!
//! [physics]
//! nu = 5e-4
//! mu = 2e-2
//! dt = 3e-3                  # DNS step; the LES step is delta * dt
//!
//! [forcing]                  # every key optional
//! enabled = true
//! amplitude = 2.449489742783178
//! k_f = 4
//!
//! [run]
//! spinup_steps = 10000
//! dns_steps = 8000
//! les_steps = 3000
//! store_cadence = 8          # default delta
//! average_every = 10         # LES steps between averaged diagnostics
//!
//! [evaluate]
//! closures = ["zero", "smagorinsky", "apost5:runs/apost5/closure.qgnn"]
//!
//! [train]                    # see TrainConfig; the seed comes from `seed`
//! strategy = "aposteriori"
//! n_rollout = 5
//!
//! [paths]                    # inputs, each overridable on the command line
//! initial = "runs/spinup/spinup.qgf"
//! manifests = ["runs/dns_a/manifest.csv"]
//! dataset = "runs/data/dataset.qgds"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::closures::{ClosureModel, DynamicSmagorinsky};
use crate::coarse::FilterSpec;
use crate::dynamics::{Dynamics, ForcingParams, QGParams};
use crate::error::{QgError, Result};
use crate::io::Checkpoint;
use crate::training::TrainConfig;

/// Bound on `dt·ν·k²` at the largest retained wavenumber `n/3`; RK4 is
/// stable on the negative real axis up to about 2.785.
pub const DIFFUSION_GUARD: f64 = 2.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub grid: GridSection,
    pub physics: QGParams,
    #[serde(default)]
    pub forcing: ForcingSection,
    pub run: RunSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub paths: PathsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub n_hi: usize,
    pub delta: usize,
    #[serde(default)]
    pub spinup_n: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForcingSection {
    pub enabled: bool,
    pub amplitude: f64,
    pub k_f: i64,
    pub freq_a: f64,
    pub freq_b: f64,
    pub phase_scale: f64,
}

impl Default for ForcingSection {
    fn default() -> Self {
        let f = ForcingParams::default();
        Self {
            enabled: true,
            amplitude: f.amplitude,
            k_f: f.k_f,
            freq_a: f.freq_a,
            freq_b: f.freq_b,
            phase_scale: f.phase_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default)]
    pub spinup_steps: usize,
    #[serde(default)]
    pub dns_steps: usize,
    #[serde(default)]
    pub les_steps: usize,
    #[serde(default)]
    pub store_cadence: Option<usize>,
    #[serde(default = "default_average_every")]
    pub average_every: usize,
}

fn default_average_every() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub closures: Vec<String>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            closures: vec!["zero".into()],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub initial: Option<PathBuf>,
    pub manifests: Vec<PathBuf>,
    pub dataset: Option<PathBuf>,
}

/// Label of the filtered-DNS reference run in evaluation outputs.
pub const REFERENCE_LABEL: &str = "filtered_dns";

/// A closure named in an evaluation list.
#[derive(Debug, Clone, PartialEq)]
pub enum ClosureSpec {
    Zero,
    Smagorinsky,
    Checkpoint { label: String, path: PathBuf },
}

impl ClosureSpec {
    /// `zero`, `smagorinsky`, or `LABEL:PATH` for a CNN checkpoint.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zero" => return Ok(Self::Zero),
            "smagorinsky" => return Ok(Self::Smagorinsky),
            _ => {}
        }
        let (label, path) = s.split_once(':').ok_or_else(|| {
            QgError::Config(format!("closure `{s}`: expected zero, smagorinsky or LABEL:PATH"))
        })?;
        let label_ok = !label.is_empty()
            && label.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
        if !label_ok || path.is_empty() {
            return Err(QgError::Config(format!("closure `{s}`: bad label or empty path")));
        }
        if ["zero", "smagorinsky", REFERENCE_LABEL].contains(&label) {
            return Err(QgError::Config(format!("closure label `{label}` is reserved")));
        }
        Ok(Self::Checkpoint {
            label: label.to_string(),
            path: PathBuf::from(path),
        })
    }

    pub fn label(&self) -> &str {
        match self {
            Self::Zero => "zero",
            Self::Smagorinsky => "smagorinsky",
            Self::Checkpoint { label, .. } => label,
        }
    }

    pub fn load(&self) -> Result<ClosureModel> {
        Ok(match self {
            Self::Zero => ClosureModel::Zero,
            Self::Smagorinsky => ClosureModel::SmagorinskyDynamic(DynamicSmagorinsky::default()),
            Self::Checkpoint { path, .. } => ClosureModel::Cnn(Checkpoint::read(path)?.to_closure()?),
        })
    }
}

/// Parse a list and reject duplicate labels.
pub fn parse_closure_list(items: &[String]) -> Result<Vec<ClosureSpec>> {
    let specs = items.iter().map(|s| ClosureSpec::parse(s)).collect::<Result<Vec<_>>>()?;
    for (i, a) in specs.iter().enumerate() {
        if specs[..i].iter().any(|b| b.label() == a.label()) {
            return Err(QgError::Config(format!("closure label `{}` listed twice", a.label())));
        }
    }
    Ok(specs)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| QgError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| QgError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| QgError::Config(e.to_string()))
    }

    /// Every failure is reported as [`QgError::Config`].
    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|e| match e {
            QgError::Config(_) => e,
            other => QgError::Config(other.to_string()),
        })
    }

    fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(QgError::Config(msg));
        let filter = self.filter()?;
        self.physics.validate()?;
        let kmax = self.grid.n_hi as f64 / 3.0;
        let guard = self.physics.dt * self.physics.nu * kmax * kmax;
        if !(guard < DIFFUSION_GUARD) {
            return bad(format!(
                "dt*nu*(n_hi/3)^2 = {guard:.4} violates the explicit-diffusion bound {DIFFUSION_GUARD}"
            ));
        }
        if let Some(f) = self.forcing_params() {
            f.validate()?;
            if 3 * f.k_f.unsigned_abs() as usize >= filter.n_lo() {
                return bad(format!("forcing wavenumber {} is not resolved on the LES grid", f.k_f));
            }
        }
        if let Some(ns) = self.grid.spinup_n {
            if ns > self.grid.n_hi || ns < 8 || ns % 2 != 0 {
                return bad(format!("spinup_n = {ns} must be even, >= 8 and <= n_hi"));
            }
        }
        if self.run.store_cadence == Some(0) || self.run.average_every == 0 {
            return bad("store_cadence and average_every must be >= 1".into());
        }
        self.train.validate()?;
        parse_closure_list(&self.evaluate.closures)?;
        Ok(())
    }

    pub fn filter(&self) -> Result<FilterSpec> {
        FilterSpec::new(self.grid.n_hi, self.grid.delta)
    }

    pub fn forcing_params(&self) -> Option<ForcingParams> {
        let f = &self.forcing;
        f.enabled.then_some(ForcingParams {
            amplitude: f.amplitude,
            k_f: f.k_f,
            freq_a: f.freq_a,
            freq_b: f.freq_b,
            phase_scale: f.phase_scale,
        })
    }

    pub fn store_cadence(&self) -> usize {
        self.run.store_cadence.unwrap_or(self.grid.delta)
    }

    /// LES physics: same coefficients, time step `δ · dt`.
    pub fn les_params(&self) -> QGParams {
        self.physics.with_dt_scaled(self.grid.delta as f64)
    }

    pub fn dns_dynamics(&self) -> Result<Dynamics> {
        Dynamics::new(self.filter()?.grid_hi().clone(), self.physics, self.forcing_params())
    }

    pub fn les_dynamics(&self) -> Result<Dynamics> {
        Dynamics::new(self.filter()?.grid_lo().clone(), self.les_params(), self.forcing_params())
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}
