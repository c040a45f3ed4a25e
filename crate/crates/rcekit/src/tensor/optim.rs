//! SGD with momentum and a step-indexed piecewise-constant learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Piecewise-constant schedule: `rates[i]` applies on the half-open step
/// interval `[boundaries[i-1], boundaries[i])`; steps at or beyond the last
/// boundary use the final rate.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LrSchedule {
    pub boundaries: Vec<u64>,
    pub rates: Vec<f64>,
}

impl LrSchedule {
    pub fn constant(rate: f64) -> Self {
        LrSchedule { boundaries: vec![], rates: vec![rate] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rates.len() != self.boundaries.len() + 1 {
            return Err(Error::InvalidArgument(format!(
                "lr schedule needs {} rates for {} boundaries, got {}",
                self.boundaries.len() + 1,
                self.boundaries.len(),
                self.rates.len()
            )));
        }
        if self.boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("lr boundaries must be strictly increasing".into()));
        }
        if self.rates.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return Err(Error::InvalidArgument("lr rates must be positive and finite".into()));
        }
        Ok(())
    }

    pub fn rate_at(&self, step: u64) -> f64 {
        let idx = self.boundaries.iter().take_while(|&&b| step >= b).count();
        self.rates[idx]
    }
}

/// Per-parameter velocity state for momentum SGD.
///
/// Update rule: v <- mu*v + g + wd*p; p <- p - lr(step)*v.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    velocity: Vec<Tensor>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

impl OptimizerState {
    pub fn new(params: &[Tensor], momentum: f64, weight_decay: f64, schedule: LrSchedule) -> Result<Self> {
        schedule.validate()?;
        let velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Ok(OptimizerState { velocity, momentum, weight_decay, schedule })
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// One update over all parameters; `grads[i]` pairs with `params[i]`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], step_index: u64) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "sgd_step",
                format!(
                    "{} params, {} grads, {} velocities",
                    params.len(),
                    grads.len(),
                    self.velocity.len()
                ),
            ));
        }
        let lr = self.schedule.rate_at(step_index);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut().iter_mut()) {
                *vv = self.momentum * *vv + gv + self.weight_decay * *pv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_gradient_step() {
        let mut params = vec![Tensor::scalar(0.0)];
        let grads = vec![Tensor::scalar(1.0)];
        let mut opt =
            OptimizerState::new(&params, 0.0, 0.0, LrSchedule::constant(0.1)).unwrap();
        opt.step(&mut params, &grads, 0).unwrap();
        assert!((params[0].item().unwrap() - (-0.1)).abs() < 1e-15);
    }

    #[test]
    fn momentum_two_step_recurrence() {
        // mu=0.9, wd=0, lr=1, g=1: after two steps p = -(1 + 1.9) = -2.9
        let mut params = vec![Tensor::scalar(0.0)];
        let grads = vec![Tensor::scalar(1.0)];
        let mut opt = OptimizerState::new(&params, 0.9, 0.0, LrSchedule::constant(1.0)).unwrap();
        opt.step(&mut params, &grads, 0).unwrap();
        opt.step(&mut params, &grads, 1).unwrap();
        assert!((params[0].item().unwrap() - (-2.9)).abs() < 1e-12);
    }

    #[test]
    fn schedule_boundary_is_half_open() {
        let sched = LrSchedule { boundaries: vec![10], rates: vec![0.1, 0.01] };
        sched.validate().unwrap();
        assert_eq!(sched.rate_at(9), 0.1);
        assert_eq!(sched.rate_at(10), 0.01);
        // steps beyond the schedule keep the last rate
        assert_eq!(sched.rate_at(1_000_000), 0.01);
    }

    #[test]
    fn schedule_validation() {
        assert!(LrSchedule { boundaries: vec![5, 5], rates: vec![0.1, 0.01, 0.001] }
            .validate()
            .is_err());
        assert!(LrSchedule { boundaries: vec![5], rates: vec![0.1] }.validate().is_err());
    }

    #[test]
    fn weight_decay_enters_velocity() {
        let mut params = vec![Tensor::scalar(2.0)];
        let grads = vec![Tensor::scalar(0.0)];
        let mut opt = OptimizerState::new(&params, 0.0, 0.5, LrSchedule::constant(1.0)).unwrap();
        opt.step(&mut params, &grads, 0).unwrap();
        // v = 0 + 0 + 0.5*2 = 1; p = 2 - 1 = 1
        assert!((params[0].item().unwrap() - 1.0).abs() < 1e-15);
    }
}
