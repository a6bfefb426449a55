//! Central finite-difference verification of analytic gradients.
//!
//! The function under test is rebuilt on a fresh tape for every probe, so it
//! must be deterministic (no dropout). Coordinates where the function is not
//! differentiable (relu/leaky-relu kinks) are detected by comparing the two
//! one-sided difference quotients and reported as excluded rather than failed.

use super::{Array, Tape, TensorId};
use crate::error::{Error, Result};

/// One checked input coordinate.
#[derive(Debug, Clone)]
pub struct CoordReport {
    /// Which input array the coordinate belongs to.
    pub input: usize,
    /// Flat index within that input.
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    /// True when the one-sided quotients disagree, i.e. the function has a
    /// kink at this coordinate and the comparison is meaningless.
    pub excluded: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coords: Vec<CoordReport>,
    /// Maximum relative error over non-excluded coordinates.
    pub max_rel_err: f64,
    pub excluded: usize,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    /// Coordinates that failed the tolerance (excluded ones never fail).
    pub fn failures(&self) -> impl Iterator<Item = &CoordReport> {
        let tol = self.tol;
        self.coords
            .iter()
            .filter(move |c| !c.excluded && c.rel_err >= tol)
    }
}

/// Ratio by which the one-sided difference quotients must disagree (relative
/// to their magnitude) for a coordinate to count as a kink. Smooth functions
/// disagree by O(eps * f''), far below this.
const KINK_TOL: f64 = 1e-3;

/// Check the gradient of a scalar-valued function of several arrays.
///
/// `f` receives a fresh tape and one differentiable leaf per input and must
/// return a single-element tensor. Every coordinate of every input is probed
/// with central differences of step `eps` and compared to the tape gradient
/// at relative tolerance `tol` (relative to `max(|analytic|, |numeric|, 1e-8)`).
pub fn grad_check_multi<F>(
    mut f: F,
    inputs: &[Array],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    if inputs.is_empty() {
        return Err(Error::InvalidArgument(
            "grad_check requires at least one input".into(),
        ));
    }
    if !(eps > 0.0) || !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "grad_check eps and tol must be positive (eps={eps}, tol={tol})"
        )));
    }

    // Base evaluation: forward value plus analytic gradients.
    let mut base_tape = Tape::new();
    let base_ids: Vec<TensorId> = inputs
        .iter()
        .map(|a| base_tape.leaf(a.clone()))
        .collect::<Result<_>>()?;
    let root = f(&mut base_tape, &base_ids)?;
    if base_tape.value(root).numel() != 1 {
        return Err(Error::InvalidArgument(format!(
            "grad_check requires a scalar output, got shape {:?}",
            base_tape.value(root).shape()
        )));
    }
    let f0 = base_tape.value(root).data()[0];
    let grads = base_tape.backward(root)?;
    let analytic: Vec<Array> = base_ids
        .iter()
        .map(|&id| grads.get_or_zeros(&base_tape, id))
        .collect();

    let probe = |arrays: &[Array], f: &mut F| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = arrays
            .iter()
            .map(|a| tape.leaf(a.clone()))
            .collect::<Result<_>>()?;
        let root = f(&mut tape, &ids)?;
        tape.scalar_value(root)
    };

    let mut coords = Vec::new();
    let mut work: Vec<Array> = inputs.to_vec();
    for (ai, input) in inputs.iter().enumerate() {
        for ci in 0..input.numel() {
            let orig = input.data()[ci];
            work[ai].data_mut()[ci] = orig + eps;
            let f_plus = probe(&work, &mut f)?;
            work[ai].data_mut()[ci] = orig - eps;
            let f_minus = probe(&work, &mut f)?;
            work[ai].data_mut()[ci] = orig;

            let central = (f_plus - f_minus) / (2.0 * eps);
            let fwd = (f_plus - f0) / eps;
            let bwd = (f0 - f_minus) / eps;
            let kink_scale = fwd.abs().max(bwd.abs()).max(1.0);
            let excluded = (fwd - bwd).abs() > KINK_TOL * kink_scale;

            let a = analytic[ai].data()[ci];
            let rel_err = (a - central).abs() / a.abs().max(central.abs()).max(1e-8);
            coords.push(CoordReport {
                input: ai,
                index: ci,
                analytic: a,
                numeric: central,
                rel_err,
                excluded,
            });
        }
    }

    let max_rel_err = coords
        .iter()
        .filter(|c| !c.excluded)
        .map(|c| c.rel_err)
        .fold(0.0, f64::max);
    let excluded = coords.iter().filter(|c| c.excluded).count();
    let passed = coords.iter().all(|c| c.excluded || c.rel_err < tol);
    Ok(GradCheckReport {
        coords,
        max_rel_err,
        excluded,
        tol,
        passed,
    })
}

/// Single-input convenience wrapper around [`grad_check_multi`].
pub fn grad_check<F>(mut f: F, x: &Array, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, TensorId) -> Result<TensorId>,
{
    grad_check_multi(|tape, ids| f(tape, ids[0]), std::slice::from_ref(x), eps, tol)
}
