//! Central-difference verification of analytic gradients.
//!
//! The losses in this crate are piecewise smooth: hinges, rectifiers, argmin
//! routing, and exponent clamps all introduce kinks where finite differences
//! lie. Every loss evaluation therefore reports how far it stayed from the
//! nearest kink, and the checker sizes its half-step to fit well inside that
//! margin. The margin is a minimum over thousands of pre-activations and
//! row-wise distance gaps, so on a healthy batch it is routinely around
//! 1e-4 — demanding a large margin and hunting for a point that has one is
//! hopeless, while stepping blindly at a fixed width straddles whichever
//! kink set the margin. Only a degenerate margin, one too small for even the
//! smallest usable step (a parameter sitting exactly on a kink, say), makes
//! the checker jitter the probe point deterministically; if jitter cannot
//! escape either, it refuses rather than comparing garbage. This is what
//! lets the check run on arbitrary seeds instead of hand-picked "safe"
//! inputs.

use crate::net::{Gradients, ModelParams};
use crate::rng::Stream;
use crate::{Error, Result};

/// Required ratio between the kink margin and the half-step. A one-element
/// +-eps step moves any internal quantity by at most the path gain between
/// that parameter and the quantity, so this must bound the gain; 64 covers
/// the gains seen through six 64-wide blocks with room to spare.
const KINK_SAFETY: f64 = 64.0;
/// Smallest usable half-step, matching the lower bound of the public
/// `epsilon` contract. A margin below `KINK_SAFETY * EPS_FLOOR` admits no
/// step that both fits inside it and stays above f64 resolution.
const EPS_FLOOR: f64 = 1e-8;
/// Standard deviation of the deterministic jitter applied to escape a
/// degenerate point.
const JITTER_SCALE: f64 = 1e-2;
const MAX_JITTER_ATTEMPTS: usize = 8;

/// One evaluation of a differentiable objective: its value, its analytic
/// gradients, and the distance to the nearest non-smooth point.
pub struct LossProbe {
    pub value: f64,
    pub grads: Gradients,
    pub smooth_margin: f64,
}

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error across all checked elements.
    pub max_rel_error: f64,
    /// Tensor containing the worst element.
    pub worst_tensor: String,
    /// Flat element index of the worst element within that tensor.
    pub worst_element: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    /// Number of elements compared.
    pub checked: usize,
    /// How many degenerate-point jitters were needed before comparing.
    pub jitters: usize,
    /// Kink distance at the point actually checked.
    pub smooth_margin: f64,
    /// Half-step actually used: the requested `epsilon`, shrunk when the
    /// kink margin was too tight for it.
    pub epsilon_used: f64,
}

/// Compare analytic gradients of `loss` against central finite differences.
///
/// `epsilon` is the requested half-step (must lie in `[1e-8, 1e-4]`);
/// `max_per_tensor` optionally caps how many elements of each tensor are
/// probed (chosen deterministically from `stream`). The step actually used
/// is shrunk so it fits [`KINK_SAFETY`] times inside the probe point's kink
/// margin; only a point whose margin is degenerate even for the smallest
/// legal step gets jittered and retried.
pub fn grad_check<F>(
    params: &ModelParams,
    loss: F,
    epsilon: f64,
    max_per_tensor: Option<usize>,
    stream: &mut Stream,
) -> Result<GradCheckReport>
where
    F: Fn(&ModelParams) -> Result<LossProbe>,
{
    if !(1e-8..=1e-4).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!("gradcheck epsilon must lie in [1e-8, 1e-4], got {epsilon}")));
    }
    if max_per_tensor == Some(0) {
        return Err(Error::InvalidArgument("max_per_tensor must be >= 1 when set".into()));
    }

    // A margin this small leaves no room for any legal step; such points
    // (a parameter exactly on a kink, an exact distance tie) are escaped by
    // deterministic jitter rather than compared at.
    let degenerate_below = KINK_SAFETY * EPS_FLOOR;
    let mut working = params.clone();
    let mut probe = loss(&working)?;
    let mut jitters = 0;
    while probe.smooth_margin < degenerate_below && jitters < MAX_JITTER_ATTEMPTS {
        jitters += 1;
        working = params.clone();
        let mut noise = stream.child("jitter").child_index(jitters as u64);
        for t in 0..working.tensor_count() {
            for v in working.tensor_mut(t) {
                *v += noise.next_gaussian() * JITTER_SCALE;
            }
        }
        probe = loss(&working)?;
    }
    if probe.smooth_margin < degenerate_below {
        return Err(Error::InvalidState(format!(
            "every probe point sits on a kink (closest non-smoothness at {:.3e} after {MAX_JITTER_ATTEMPTS} jitters); no usable step fits inside that margin",
            probe.smooth_margin
        )));
    }
    if !probe.value.is_finite() {
        return Err(Error::NonFinite("gradcheck objective value".into()));
    }
    // Fit the step inside the margin. The guard above keeps the shrunken
    // step at or above EPS_FLOOR.
    let epsilon_used = epsilon.min(probe.smooth_margin / KINK_SAFETY);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_tensor: String::new(),
        worst_element: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
        jitters,
        smooth_margin: probe.smooth_margin,
        epsilon_used,
    };

    for t in 0..working.tensor_count() {
        let len = working.tensor(t).len();
        let indices: Vec<usize> = match max_per_tensor {
            Some(k) if k < len => {
                let mut all: Vec<usize> = (0..len).collect();
                stream.shuffle(&mut all);
                all.truncate(k);
                all.sort_unstable();
                all
            }
            _ => (0..len).collect(),
        };
        for idx in indices {
            let mut hi = working.clone();
            hi.tensor_mut(t)[idx] += epsilon_used;
            let mut lo = working.clone();
            lo.tensor_mut(t)[idx] -= epsilon_used;
            let numeric = (loss(&hi)?.value - loss(&lo)?.value) / (2.0 * epsilon_used);
            let analytic = probe.grads.tensor(t)[idx];
            // The additive floor keeps elements whose true gradient is ~0
            // from flagging finite-difference noise as relative error.
            let rel = (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + 1e-6);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_tensor = working.tensor_name(t);
                report.worst_element = idx;
                report.analytic_at_worst = analytic;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}
