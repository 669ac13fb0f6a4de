//! Finite-difference verification of analytic gradients.
//!
//! Everything here runs in f64: central differences lose roughly half the
//! mantissa, which still leaves plenty of headroom against the tolerances
//! used by the test suite, while f32 would not.

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::Result;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct FdReport {
    /// number of coordinates compared
    pub checked: usize,
    /// max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1)
    pub max_rel_err: f64,
    /// flat index of the worst coordinate
    pub worst_index: usize,
    /// false if any loss value or gradient entry was NaN/inf
    pub finite: bool,
    /// tolerance the check was requested with
    pub tol: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.finite && self.max_rel_err < self.tol
    }
}

/// Compare the tape gradient of a scalar-valued function against central
/// differences at every coordinate of `x`.
///
/// `f` receives the tape (or `None` for the plain numeric evaluations) and
/// `x` as a variable; it must return a scalar.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, h: f64, tol: f64) -> Result<FdReport>
where
    F: Fn(Option<&Tape<f64>>, &Var<f64>) -> Result<Var<f64>>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    finite_difference_check_coords(f, x, &coords, h, tol)
}

/// Same as [`finite_difference_check`] but restricted to a subset of
/// coordinates, for parameters too large to probe exhaustively.
pub fn finite_difference_check_coords<F>(
    f: F,
    x: &Tensor<f64>,
    coords: &[usize],
    h: f64,
    tol: f64,
) -> Result<FdReport>
where
    F: Fn(Option<&Tape<f64>>, &Var<f64>) -> Result<Var<f64>>,
{
    let tape = Tape::new();
    let xv = tape.watch(x.clone());
    let loss = f(Some(&tape), &xv)?;
    let loss_value = loss.value().item()?;
    let mut finite = loss_value.is_finite();
    let mut grads = tape.backward(&loss)?;
    let analytic = grads
        .take(&xv)
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    if !analytic.all_finite() {
        finite = false;
    }

    let mut max_rel_err = 0.0f64;
    let mut worst_index = 0usize;
    for &i in coords {
        let mut lo = x.clone();
        lo.data_mut()[i] -= h;
        let mut hi = x.clone();
        hi.data_mut()[i] += h;
        let f_lo = f(None, &Var::constant(lo))?.value().item()?;
        let f_hi = f(None, &Var::constant(hi))?.value().item()?;
        if !f_lo.is_finite() || !f_hi.is_finite() {
            finite = false;
            continue;
        }
        let numeric = (f_hi - f_lo) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    Ok(FdReport {
        checked: coords.len(),
        max_rel_err,
        worst_index,
        finite,
        tol,
    })
}

/// Directional check over a whole parameter set: compares
/// `(f(p + h d) - f(p - h d)) / 2h` against `sum_i <grad_i, d_i>`.
///
/// Returns the relative error under the same definition as the coordinate
/// check. This scales to parameter sets where per-coordinate probing is
/// infeasible; one call exercises every parameter at once.
pub fn directional_derivative_check(
    mut value_at: impl FnMut(&[Tensor<f64>]) -> Result<f64>,
    params: &[Tensor<f64>],
    grads: &[Tensor<f64>],
    direction: &[Tensor<f64>],
    h: f64,
) -> Result<f64> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), direction.len());
    let mut analytic = 0.0f64;
    for (g, d) in grads.iter().zip(direction) {
        for (gv, dv) in g.data().iter().zip(d.data()) {
            analytic += gv * dv;
        }
    }
    let shift = |sign: f64| -> Vec<Tensor<f64>> {
        params
            .iter()
            .zip(direction)
            .map(|(p, d)| {
                let mut t = p.clone();
                let td = t.data_mut();
                for (v, dv) in td.iter_mut().zip(d.data()) {
                    *v += sign * h * dv;
                }
                t
            })
            .collect()
    };
    let f_hi = value_at(&shift(1.0))?;
    let f_lo = value_at(&shift(-1.0))?;
    let numeric = (f_hi - f_lo) / (2.0 * h);
    Ok((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0))
}
