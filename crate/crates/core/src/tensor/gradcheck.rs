use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::rng::seeded;

/// Coordinates checked before switching to a random subsample.
const MAX_COORDS: usize = 10_000;

/// One evaluation of the checked function.
#[derive(Clone, Copy, Debug)]
pub struct Probe {
    pub value: f64,
    /// Branch signature of kinked ops (see [`super::Graph::branch_signature`]).
    pub signature: u64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst: Option<usize>,
    pub checked: usize,
    /// Probes whose ±step moved some ReLU/max/clamp across its kink; the
    /// finite difference is meaningless there so they are not scored.
    pub skipped_kinks: usize,
    pub total: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub(crate) fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compare `analytic` against central differences of `f` around `x`.
///
/// Every coordinate is probed, or a seeded random subset of 10⁴ when there
/// are more.
pub fn grad_check<F>(mut f: F, x: &[f64], analytic: &[f64], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<Probe>,
{
    if step <= 0.0 {
        return Err(Error::Config(format!("grad_check step must be > 0, got {step}")));
    }
    if x.len() != analytic.len() {
        return Err(Error::shape(
            "grad_check",
            format!("{} inputs vs {} gradient entries", x.len(), analytic.len()),
        ));
    }
    let coords: Vec<usize> = if x.len() > MAX_COORDS {
        let mut v = sample(&mut seeded(0x6772_6164), x.len(), MAX_COORDS).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..x.len()).collect()
    };
    let base = f(x)?.signature;
    let mut probe = x.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped_kinks: 0,
        total: x.len(),
        tolerance,
    };
    for i in coords {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&probe)?;
        probe[i] = orig - step;
        let minus = f(&probe)?;
        probe[i] = orig;
        let numeric = (plus.value - minus.value) / (2.0 * step);
        let a = analytic[i];
        if !a.is_finite() || !numeric.is_finite() {
            return Err(Error::Numerical(format!(
                "grad_check coordinate {i}: analytic {a}, numeric {numeric}"
            )));
        }
        if plus.signature != base || minus.signature != base {
            report.skipped_kinks += 1;
            continue;
        }
        report.checked += 1;
        let e = relative_error(a, numeric);
        if report.worst.is_none() || e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst = Some(i);
        }
    }
    Ok(report)
}

/// [`grad_check`] for a function without kinks.
pub fn grad_check_smooth<F>(mut f: F, x: &[f64], analytic: &[f64], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    grad_check(
        |p| {
            Ok(Probe {
                value: f(p),
                signature: 0,
            })
        },
        x,
        analytic,
        step,
        tolerance,
    )
}
