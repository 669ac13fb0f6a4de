//! Optimizers and the validation-loss schedule.
//!
//! Both optimizers update a flat parameter list in place. State slots are
//! allocated on the first step and shape-checked afterwards, so a model
//! must always present its parameters in the same order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{s, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimKind {
    SgdNesterov,
    Adam,
}

impl std::fmt::Display for OptimKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimKind::SgdNesterov => "sgd_nesterov",
            OptimKind::Adam => "adam",
        })
    }
}

fn check_lists<T: Scalar>(
    op: &'static str,
    params: &[Tensor<T>],
    grads: &[Tensor<T>],
    state_len: usize,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::invalid(
            op,
            format!("{} parameters but {} gradients", params.len(), grads.len()),
        ));
    }
    if state_len != 0 && state_len != params.len() {
        return Err(Error::invalid(
            op,
            format!("optimizer state holds {state_len} slots, step got {}", params.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::invalid(
                op,
                format!(
                    "parameter {i}: shape {:?} but gradient shape {:?}",
                    p.shape(),
                    g.shape()
                ),
            ));
        }
    }
    Ok(())
}

fn check_slots<T: Scalar>(op: &'static str, params: &[Tensor<T>], slots: &[Tensor<T>]) -> Result<()> {
    for (i, (p, v)) in params.iter().zip(slots).enumerate() {
        if p.shape() != v.shape() {
            return Err(Error::invalid(
                op,
                format!(
                    "parameter {i}: shape {:?} but optimizer slot shape {:?}",
                    p.shape(),
                    v.shape()
                ),
            ));
        }
    }
    Ok(())
}

/// Momentum SGD in the formulation where the look-ahead is folded into
/// the parameter update:
///
/// ```text
/// v <- mu * v - lr * g
/// p <- p + mu * v - lr * g
/// ```
#[derive(Debug, Clone)]
pub struct SgdNesterov<T: Scalar> {
    pub lr: T,
    pub momentum: T,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> SgdNesterov<T> {
    pub fn new(lr: T, momentum: T) -> Self {
        Self { lr, momentum, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        check_lists("sgd_nesterov", params, grads, self.velocity.len())?;
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        check_slots("sgd_nesterov", params, &self.velocity)?;
        let (lr, mu) = (self.lr, self.momentum);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let pv = p.data_mut();
            let vv = v.data_mut();
            for ((pe, &ge), ve) in pv.iter_mut().zip(g.iter()).zip(vv.iter_mut()) {
                *ve = mu * *ve - lr * ge;
                *pe += mu * *ve - lr * ge;
            }
        }
        Ok(())
    }

    pub fn state(&self) -> Vec<(String, Tensor<T>)> {
        self.velocity
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("velocity.{i}"), v.clone()))
            .collect()
    }

    pub fn load_state(&mut self, slots: Vec<Tensor<T>>) -> Result<()> {
        self.velocity = slots;
        Ok(())
    }
}

/// Adam with bias correction; epsilon is added outside the square root.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: T) -> Self {
        Self {
            lr,
            beta1: s(0.9),
            beta2: s(0.999),
            eps: s(1e-7),
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        check_lists("adam", params, grads, self.m.len())?;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        check_slots("adam", params, &self.m)?;
        self.t += 1;
        let c1 = T::one() - self.beta1.powi(self.t as i32);
        let c2 = T::one() - self.beta2.powi(self.t as i32);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let pv = p.data_mut();
            let mv = m.data_mut();
            let vv = v.data_mut();
            for (((pe, &ge), me), ve) in pv.iter_mut().zip(g.iter()).zip(mv.iter_mut()).zip(vv.iter_mut())
            {
                *me = b1 * *me + (T::one() - b1) * ge;
                *ve = b2 * *ve + (T::one() - b2) * ge * ge;
                let mhat = *me / c1;
                let vhat = *ve / c2;
                *pe -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn state(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * self.m.len() + 1);
        out.push(("t".to_string(), Tensor::scalar(s::<T>(self.t as f64))));
        for (i, m) in self.m.iter().enumerate() {
            out.push((format!("m.{i}"), m.clone()));
        }
        for (i, v) in self.v.iter().enumerate() {
            out.push((format!("v.{i}"), v.clone()));
        }
        out
    }

    pub fn load_state(&mut self, t: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<()> {
        if m.len() != v.len() {
            return Err(Error::invalid("adam", "mismatched moment slot counts"));
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

/// Either optimizer behind one face, so training code stays generic.
#[derive(Debug, Clone)]
pub enum Optimizer<T: Scalar> {
    Sgd(SgdNesterov<T>),
    Adam(Adam<T>),
}

impl<T: Scalar> Optimizer<T> {
    /// Default settings for each kind: momentum 0.99 for SGD.
    pub fn new(kind: OptimKind, lr: T) -> Self {
        match kind {
            OptimKind::SgdNesterov => Optimizer::Sgd(SgdNesterov::new(lr, s(0.99))),
            OptimKind::Adam => Optimizer::Adam(Adam::new(lr)),
        }
    }

    pub fn kind(&self) -> OptimKind {
        match self {
            Optimizer::Sgd(_) => OptimKind::SgdNesterov,
            Optimizer::Adam(_) => OptimKind::Adam,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        match self {
            Optimizer::Sgd(o) => o.step(params, grads),
            Optimizer::Adam(o) => o.step(params, grads),
        }
    }

    pub fn lr(&self) -> T {
        match self {
            Optimizer::Sgd(o) => o.lr,
            Optimizer::Adam(o) => o.lr,
        }
    }

    pub fn set_lr(&mut self, lr: T) {
        match self {
            Optimizer::Sgd(o) => o.lr = lr,
            Optimizer::Adam(o) => o.lr = lr,
        }
    }

    pub fn state(&self) -> Vec<(String, Tensor<T>)> {
        match self {
            Optimizer::Sgd(o) => o.state(),
            Optimizer::Adam(o) => o.state(),
        }
    }
}

/// Learning rates explored when tuning either optimizer.
pub const LR_GRID: [f64; 3] = [1e-4, 1e-3, 1e-2];

/// What the schedule asks the trainer to do after a validation pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleAction {
    Continue,
    /// Divide the learning rate by `PlateauSchedule::factor`.
    ReduceLr,
    Stop,
}

/// Plateau watcher over the validation loss.
///
/// An observation improves on the best seen so far only if it undercuts
/// it by more than `min_delta`. `reduce_patience` stale observations ask
/// for a learning-rate cut (and restart that count); `stop_patience`
/// stale observations end training. The stop test runs first, so a
/// plateau long enough for both only stops.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub reduce_patience: usize,
    pub stop_patience: usize,
    pub min_delta: f64,
    pub factor: f64,
    best: Option<f64>,
    stale_reduce: usize,
    stale_stop: usize,
}

impl Default for PlateauSchedule {
    fn default() -> Self {
        Self::new(5, 10, 1e-4, 5.0)
    }
}

impl PlateauSchedule {
    pub fn new(reduce_patience: usize, stop_patience: usize, min_delta: f64, factor: f64) -> Self {
        Self {
            reduce_patience,
            stop_patience,
            min_delta,
            factor,
            best: None,
            stale_reduce: 0,
            stale_stop: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn observe(&mut self, val_loss: f64) -> ScheduleAction {
        let improved = match self.best {
            None => true,
            Some(best) => val_loss < best - self.min_delta,
        };
        if improved {
            self.best = Some(val_loss);
            self.stale_reduce = 0;
            self.stale_stop = 0;
            return ScheduleAction::Continue;
        }
        self.stale_reduce += 1;
        self.stale_stop += 1;
        if self.stale_stop >= self.stop_patience {
            return ScheduleAction::Stop;
        }
        if self.stale_reduce >= self.reduce_patience {
            self.stale_reduce = 0;
            return ScheduleAction::ReduceLr;
        }
        ScheduleAction::Continue
    }
}
