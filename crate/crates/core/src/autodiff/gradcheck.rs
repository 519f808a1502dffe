use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{QgError, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub epsilon: f64,
    /// Coordinates checked; vectors longer than this are subsampled.
    pub max_coords: usize,
    pub seed: u64,
    /// Denominator floor, relative to the largest analytic component.
    pub relative_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            max_coords: 256,
            seed: 0,
            relative_floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

/// Compare an analytic gradient against central finite differences of `f`.
///
/// Per coordinate the error is `|fd - g| / max(|fd|, |g|, floor)` with
/// `floor = relative_floor · max|g|`.
pub fn grad_check<F>(
    f: F,
    analytic: &[f64],
    theta0: &[f64],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if analytic.len() != theta0.len() {
        return Err(QgError::Shape(format!(
            "gradient has {} entries, parameters {}",
            analytic.len(),
            theta0.len()
        )));
    }
    let dim = theta0.len();
    let coords: Vec<usize> = if dim <= opts.max_coords {
        (0..dim).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut idx = sample(&mut rng, dim, opts.max_coords).into_vec();
        idx.sort_unstable();
        idx
    };
    let gmax = analytic.iter().map(|g| g.abs()).fold(0.0, f64::max);
    let floor = (opts.relative_floor * gmax).max(f64::MIN_POSITIVE);

    let mut theta = theta0.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: coords.first().copied().unwrap_or(0),
        checked: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    for &i in &coords {
        let orig = theta[i];
        let (hi, lo) = (orig + opts.epsilon, orig - opts.epsilon);
        theta[i] = hi;
        let plus = f(&theta)?;
        theta[i] = lo;
        let minus = f(&theta)?;
        theta[i] = orig;
        // divide by the step actually taken after rounding
        let numeric = (plus - minus) / (hi - lo);
        let denom = numeric.abs().max(analytic[i].abs()).max(floor);
        let err = (numeric - analytic[i]).abs() / denom;
        if !err.is_finite() {
            return Err(QgError::NonFinite(format!("finite difference at coordinate {i}")));
        }
        report.checked += 1;
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_index = i;
            report.analytic_at_worst = analytic[i];
            report.numeric_at_worst = numeric;
        }
    }
    Ok(report)
}
