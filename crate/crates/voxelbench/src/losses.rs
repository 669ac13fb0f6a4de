//! Segmentation losses over foreground-probability maps.
//!
//! Every loss takes the predicted foreground probability `p` (any shape)
//! and a binary target of the same shape, and returns a scalar. Inputs
//! are clamped to `[CLAMP, 1-CLAMP]` before any logarithm; the gradient
//! is zero where the clamp is active.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::lincomb;
use crate::tensor::{s, Scalar, Tape, Tensor, Var};

/// Probability floor; also applied symmetrically as `1 - CLAMP` ceiling.
pub const CLAMP: f64 = 1e-7;

fn check_targets<T: Scalar>(op: &'static str, p: &Var<T>, y: &Tensor<T>) -> Result<()> {
    if p.shape() != y.shape() {
        return Err(Error::invalid(
            op,
            format!(
                "prediction shape {:?} does not match target shape {:?}",
                p.shape(),
                y.shape()
            ),
        ));
    }
    for (i, &t) in y.data().iter().enumerate() {
        if t != T::zero() && t != T::one() {
            return Err(Error::invalid(
                op,
                format!("target must be binary, found {t} at index {i}"),
            ));
        }
    }
    Ok(())
}

fn clamp<T: Scalar>(p: T) -> T {
    let lo = s::<T>(CLAMP);
    let hi = T::one() - lo;
    if p < lo {
        lo
    } else if p > hi {
        hi
    } else {
        p
    }
}

fn clamp_open<T: Scalar>(p: T) -> bool {
    let lo = s::<T>(CLAMP);
    p >= lo && p <= T::one() - lo
}

/// Generic fused scalar loss: `value` folds over `(p_clamped, y)`, and
/// `slope` gives the per-element derivative with respect to the clamped
/// probability. The recorded backward closes over the raw inputs.
fn pointwise_loss<T: Scalar>(
    tape: Option<&Tape<T>>,
    p: &Var<T>,
    y: &Tensor<T>,
    value: impl Fn(T, bool) -> T,
    slope: impl Fn(T, bool) -> T + 'static,
) -> Result<Var<T>> {
    let n = p.value().numel();
    let inv_n = T::one() / s::<T>(n as f64);
    let mut acc = T::zero();
    for (&pv, &yv) in p.value().iter().zip(y.iter()) {
        acc += value(clamp(pv), yv == T::one());
    }
    let out = Tensor::scalar(-acc * inv_n);
    let node = match tape {
        Some(tape) if p.tracked() => {
            let pn = p.node.unwrap();
            let pd = p.value().clone();
            let yd = y.clone();
            Some(tape.push(Box::new(move |grad, sink| {
                let g = grad.data()[0];
                let mut dx = Tensor::zeros(pd.shape());
                for ((d, &pv), &yv) in dx.data_mut().iter_mut().zip(pd.iter()).zip(yd.iter()) {
                    if clamp_open(pv) {
                        *d = -g * inv_n * slope(pv, yv == T::one());
                    }
                }
                sink.accumulate(pn, dx);
            })))
        }
        _ => None,
    };
    Ok(Var { value: out, node })
}

/// `-(1/N) sum[ omega*y*ln(p) + (1-omega)*(1-y)*ln(1-p) ]`.
pub fn weighted_cross_entropy<T: Scalar>(
    tape: Option<&Tape<T>>,
    p: &Var<T>,
    y: &Tensor<T>,
    omega: T,
) -> Result<Var<T>> {
    check_targets("weighted_cross_entropy", p, y)?;
    pointwise_loss(
        tape,
        p,
        y,
        move |q, fg| {
            if fg {
                omega * q.ln()
            } else {
                (T::one() - omega) * (T::one() - q).ln()
            }
        },
        move |q, fg| {
            if fg {
                omega / q
            } else {
                -(T::one() - omega) / (T::one() - q)
            }
        },
    )
}

/// Plain cross entropy, both classes weighted 1.
pub fn cross_entropy<T: Scalar>(
    tape: Option<&Tape<T>>,
    p: &Var<T>,
    y: &Tensor<T>,
) -> Result<Var<T>> {
    check_targets("cross_entropy", p, y)?;
    pointwise_loss(
        tape,
        p,
        y,
        |q, fg| if fg { q.ln() } else { (T::one() - q).ln() },
        |q, fg| {
            if fg {
                T::one() / q
            } else {
                -T::one() / (T::one() - q)
            }
        },
    )
}

/// `-(1/N) sum[ omega_t * (1-p_t)^gamma * ln(p_t) ]` with
/// `p_t = p` and `omega_t = omega` on foreground, `1-p` and `1-omega`
/// on background. `gamma = 0` takes the plain weighted path so the
/// `0 * inf` corner never forms.
pub fn focal<T: Scalar>(
    tape: Option<&Tape<T>>,
    p: &Var<T>,
    y: &Tensor<T>,
    omega: T,
    gamma: T,
) -> Result<Var<T>> {
    check_targets("focal", p, y)?;
    if gamma == T::zero() {
        return weighted_cross_entropy(tape, p, y, omega);
    }
    let value = move |q: T, fg: bool| {
        let (pt, wt) = if fg { (q, omega) } else { (T::one() - q, T::one() - omega) };
        wt * (T::one() - pt).powf(gamma) * pt.ln()
    };
    let slope = move |q: T, fg: bool| {
        let (pt, wt) = if fg { (q, omega) } else { (T::one() - q, T::one() - omega) };
        let focus = T::one() - pt;
        let d_pt = wt * (focus.powf(gamma) / pt - gamma * focus.powf(gamma - T::one()) * pt.ln());
        if fg {
            d_pt
        } else {
            -d_pt
        }
    };
    pointwise_loss(tape, p, y, value, slope)
}

/// Soft overlap loss `1 - (c*sum(p*y) + eps) / (sum(p) + sum(y) + eps)`
/// with `eps = 1`. With `doubled = false` the numerator counts the
/// intersection once, so a perfect binary match scores about one half;
/// `doubled = true` uses the conventional `2*intersection` numerator.
pub fn soft_dice<T: Scalar>(
    tape: Option<&Tape<T>>,
    p: &Var<T>,
    y: &Tensor<T>,
    doubled: bool,
) -> Result<Var<T>> {
    check_targets("soft_dice", p, y)?;
    let eps = T::one();
    let cnum = if doubled { s::<T>(2.0) } else { T::one() };
    let mut inter = T::zero();
    let mut total = T::zero();
    for (&pv, &yv) in p.value().iter().zip(y.iter()) {
        let q = clamp(pv);
        if yv == T::one() {
            inter += q;
        }
        total += q + yv;
    }
    let num = cnum * inter + eps;
    let den = total + eps;
    let out = Tensor::scalar(T::one() - num / den);
    let node = match tape {
        Some(tape) if p.tracked() => {
            let pn = p.node.unwrap();
            let pd = p.value().clone();
            let yd = y.clone();
            Some(tape.push(Box::new(move |grad, sink| {
                let g = grad.data()[0];
                let den2 = den * den;
                let mut dx = Tensor::zeros(pd.shape());
                for ((d, &pv), &yv) in dx.data_mut().iter_mut().zip(pd.iter()).zip(yd.iter()) {
                    if clamp_open(pv) {
                        // d/dq of -(c*I+eps)/(S+eps)
                        let dnum = if yv == T::one() { cnum } else { T::zero() };
                        *d = -g * (dnum * den - num) / den2;
                    }
                }
                sink.accumulate(pn, dx);
            })))
        }
        _ => None,
    };
    Ok(Var { value: out, node })
}

/// `alpha * soft_dice + (1 - alpha) * cross_entropy`, composed with
/// `lincomb` so the value is exactly linear in `alpha`.
pub fn combined<T: Scalar>(
    tape: Option<&Tape<T>>,
    p: &Var<T>,
    y: &Tensor<T>,
    alpha: T,
) -> Result<Var<T>> {
    let sd = soft_dice(tape, p, y, false)?;
    let ce = cross_entropy(tape, p, y)?;
    lincomb(tape, &sd, alpha, &ce, T::one() - alpha)
}

/// Loss selection as it appears in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    WeightedCrossEntropy { omega: f64 },
    Focal { omega: f64, gamma: f64 },
    SoftDice { doubled: bool },
    Combined { alpha: f64 },
}

impl LossKind {
    pub fn evaluate<T: Scalar>(
        &self,
        tape: Option<&Tape<T>>,
        p: &Var<T>,
        y: &Tensor<T>,
    ) -> Result<Var<T>> {
        match *self {
            LossKind::CrossEntropy => cross_entropy(tape, p, y),
            LossKind::WeightedCrossEntropy { omega } => {
                weighted_cross_entropy(tape, p, y, s::<T>(omega))
            }
            LossKind::Focal { omega, gamma } => focal(tape, p, y, s::<T>(omega), s::<T>(gamma)),
            LossKind::SoftDice { doubled } => soft_dice(tape, p, y, doubled),
            LossKind::Combined { alpha } => combined(tape, p, y, s::<T>(alpha)),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            LossKind::CrossEntropy => "ce".into(),
            LossKind::WeightedCrossEntropy { omega } => format!("wce(omega={omega})"),
            LossKind::Focal { omega, gamma } => format!("focal(omega={omega},gamma={gamma})"),
            LossKind::SoftDice { doubled } => {
                if doubled {
                    "soft_dice(doubled)".into()
                } else {
                    "soft_dice".into()
                }
            }
            LossKind::Combined { alpha } => format!("combined(alpha={alpha})"),
        }
    }
}

/// Class-weight settings swept when tuning the weighted cross entropy.
pub const OMEGA_GRID: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

/// Focusing exponents swept together with `OMEGA_GRID` for the focal loss.
pub const GAMMA_GRID: [f64; 4] = [1.0, 1.5, 2.0, 2.5];

/// Mixing weights swept for the combined loss.
pub const ALPHA_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// All weighted-cross-entropy settings, one per omega.
pub fn wce_grid() -> Vec<LossKind> {
    OMEGA_GRID
        .iter()
        .map(|&omega| LossKind::WeightedCrossEntropy { omega })
        .collect()
}

/// The full 16-point focal sweep (omega x gamma).
pub fn focal_grid() -> Vec<LossKind> {
    let mut out = Vec::with_capacity(16);
    for &omega in &OMEGA_GRID {
        for &gamma in &GAMMA_GRID {
            out.push(LossKind::Focal { omega, gamma });
        }
    }
    out
}

/// The 9-point combined-loss sweep.
pub fn combined_grid() -> Vec<LossKind> {
    ALPHA_GRID.iter().map(|&alpha| LossKind::Combined { alpha }).collect()
}
