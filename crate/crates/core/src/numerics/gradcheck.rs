use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{CkfError, Result};

/// Worst coordinate of an analytic-vs-numeric gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Largest raw `|a - c|` over all coordinates, floor not applied.
    pub max_abs_err: f64,
}

/// Compares the tape gradient of `f` at `x` with central differences.
///
/// `f` builds a scalar on a fresh tape from the leaf it is handed. The
/// per-coordinate error is `|a - c| / (|a| + |c| + 1e-12)`, except that a
/// disagreement smaller than the rounding resolution of the central
/// difference itself (`4 ε_mach max(|f±|, 1) / eps`) counts as zero.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(CkfError::contract("finite_diff_check: eps must be positive"));
    }
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let out = f(&mut tape, leaf)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get(leaf).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.constant(t);
        let out = f(&mut tape, leaf)?;
        Ok(tape.value(out).item())
    };

    let mut worst = GradCheck {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        max_abs_err: 0.0,
    };
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let (fp, fm) = (eval(plus)?, eval(minus)?);
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        let resolution = 4.0 * f64::EPSILON * fp.abs().max(fm.abs()).max(1.0) / eps;
        let rel = if (a - numeric).abs() <= resolution {
            0.0
        } else {
            (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12)
        };
        if rel > worst.max_rel_err || i == 0 {
            worst = GradCheck {
                max_rel_err: rel.max(worst.max_rel_err),
                worst_index: i,
                analytic: a,
                numeric,
                ..worst
            };
        }
        worst.max_abs_err = worst.max_abs_err.max((a - numeric).abs());
    }
    Ok(worst)
}
