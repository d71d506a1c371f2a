//! Central finite-difference verification of analytic gradients.
//!
//! Runs in `f64` only: at 32-bit precision the difference quotient loses too
//! many digits to say anything useful. Vector-valued operations are reduced
//! to a scalar through a fixed random projection, so one backward pass with
//! the projection as upstream gradient yields the full analytic gradient.

use rand::Rng;

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest per-element relative error observed.
    pub max_rel_err: f64,
    /// Threshold the sweep was judged against.
    pub tolerance: f64,
    /// Number of elements perturbed.
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Compare `analytic` against central differences of `f` around `x`.
///
/// Relative error per element is `|a - n| / max(|a|, |n|, 1e-6)`; the floor
/// keeps near-zero gradients from blowing up the ratio.
pub fn gradient_check<F>(
    f: F,
    x: &[f64],
    analytic: &[f64],
    epsilon: f64,
    tolerance: f64,
) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "gradient length must match input");
    let mut probe = x.to_vec();
    let mut max_rel_err: f64 = 0.0;
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + epsilon;
        let plus = f(&probe);
        probe[i] = orig - epsilon;
        let minus = f(&probe);
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
        max_rel_err = max_rel_err.max((analytic[i] - numeric).abs() / denom);
    }
    GradCheckReport {
        max_rel_err,
        tolerance,
        checked: probe.len(),
    }
}

/// Random projection weights for reducing a vector output to a scalar.
/// Drawn away from zero so every output element participates.
pub fn projection(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(0.25..1.0)
        })
        .collect()
}
