//! SGD with momentum, coupled L2 weight decay, and milestone learning-rate
//! decay.

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};
use std::collections::{BTreeMap, BTreeSet};

/// Milestone schedule: each (step, factor) multiplies the base rate once the
/// step counter reaches `step`.
#[derive(Clone, Debug, Default)]
pub struct LrSchedule {
    pub milestones: Vec<(u64, f64)>,
}

impl LrSchedule {
    pub fn new(milestones: Vec<(u64, f64)>) -> Self {
        LrSchedule { milestones }
    }

    pub fn factor_at(&self, step: u64) -> f64 {
        self.milestones
            .iter()
            .filter(|(s, _)| step >= *s)
            .map(|(_, f)| f)
            .product()
    }
}

/// Velocity buffers plus hyperparameters for momentum SGD.
#[derive(Clone, Debug)]
pub struct OptimizerState<F: Real> {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    velocity: BTreeMap<String, Tensor<F>>,
    /// Parameter names excluded from updates (frozen heads keep their bits).
    frozen: BTreeSet<String>,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64, schedule: LrSchedule) -> Result<Self> {
        if learning_rate <= 0.0 {
            return Err(Error::Parameter(format!(
                "learning rate must be strictly positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Parameter(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        if weight_decay < 0.0 {
            return Err(Error::Parameter(format!(
                "weight decay must be nonnegative, got {weight_decay}"
            )));
        }
        Ok(OptimizerState {
            learning_rate,
            momentum,
            weight_decay,
            schedule,
            velocity: BTreeMap::new(),
            frozen: BTreeSet::new(),
        })
    }

    pub fn freeze(&mut self, name: impl Into<String>) {
        self.frozen.insert(name.into());
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        self.learning_rate * self.schedule.factor_at(step)
    }

    pub fn velocity_of(&self, name: &str) -> Option<&Tensor<F>> {
        self.velocity.get(name)
    }
}

/// One momentum-SGD update over every (parameter, gradient) pair:
/// g' = g + wd*w; v = mu*v + g'; w = w - lr(step)*v.
pub fn sgd_step<F: Real>(
    params: &mut ParamStore<F>,
    grads: &BTreeMap<String, Tensor<F>>,
    state: &mut OptimizerState<F>,
    step_index: u64,
) -> Result<()> {
    let lr = F::from_f64(state.lr_at(step_index));
    let momentum = F::from_f64(state.momentum);
    let wd = F::from_f64(state.weight_decay);
    for (name, grad) in grads {
        if state.frozen.contains(name) {
            continue;
        }
        let w = params.get_mut(name)?;
        if grad.shape() != w.shape() {
            return Err(Error::Dim(format!(
                "gradient shape {:?} does not match parameter {name:?} {:?}",
                grad.shape(),
                w.shape()
            )));
        }
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(w.shape().to_vec()));
        for ((wv, vv), &gv) in w
            .data_mut()
            .iter_mut()
            .zip(v.data_mut().iter_mut())
            .zip(grad.data().iter())
        {
            let g = gv + wd * *wv;
            *vv = momentum * *vv + g;
            *wv -= lr * *vv;
        }
    }
    params.step = step_index + 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(v: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(vec![1], vec![v]).unwrap());
        p
    }

    fn grad_of(v: f64) -> BTreeMap<String, Tensor<f64>> {
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::new(vec![1], vec![v]).unwrap());
        g
    }

    #[test]
    fn hand_traced_update() {
        // w=1, g=0.1, lr=0.1, momentum=0.9, wd=0 -> v=0.1, w=0.99
        let mut params = single_param(1.0);
        let mut state = OptimizerState::new(0.1, 0.9, 0.0, LrSchedule::default()).unwrap();
        sgd_step(&mut params, &grad_of(0.1), &mut state, 0).unwrap();
        assert!((params.get("w").unwrap().data()[0] - 0.99).abs() < 1e-15);
        assert!((state.velocity_of("w").unwrap().data()[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_identity() {
        let mut params = single_param(3.5);
        let mut state = OptimizerState::new(0.1, 0.9, 0.0, LrSchedule::default()).unwrap();
        sgd_step(&mut params, &grad_of(0.0), &mut state, 0).unwrap();
        assert_eq!(params.get("w").unwrap().data()[0], 3.5);
    }

    #[test]
    fn zero_momentum_is_vanilla_sgd() {
        let mut params = single_param(2.0);
        let mut state = OptimizerState::new(0.5, 0.0, 0.1, LrSchedule::default()).unwrap();
        sgd_step(&mut params, &grad_of(1.0), &mut state, 0).unwrap();
        // w - lr*(g + wd*w) = 2 - 0.5*(1 + 0.2) = 1.4
        assert!((params.get("w").unwrap().data()[0] - 1.4).abs() < 1e-15);
    }

    #[test]
    fn milestone_decay() {
        let sched = LrSchedule::new(vec![(300, 0.1), (350, 0.1)]);
        let state =
            OptimizerState::<f64>::new(4e-3, 0.9, 0.0, sched).unwrap();
        assert!((state.lr_at(0) - 4e-3).abs() < 1e-18);
        assert!((state.lr_at(299) - 4e-3).abs() < 1e-18);
        assert!((state.lr_at(300) - 4e-4).abs() < 1e-18);
        assert!((state.lr_at(350) - 4e-5).abs() < 1e-18);
    }

    #[test]
    fn frozen_param_untouched() {
        let mut params = single_param(1.0);
        let mut state = OptimizerState::new(0.1, 0.9, 0.0, LrSchedule::default()).unwrap();
        state.freeze("w");
        sgd_step(&mut params, &grad_of(5.0), &mut state, 0).unwrap();
        assert_eq!(params.get("w").unwrap().data()[0], 1.0);
    }

    #[test]
    fn invalid_hyperparameters() {
        assert!(OptimizerState::<f64>::new(0.0, 0.9, 0.0, LrSchedule::default()).is_err());
        assert!(OptimizerState::<f64>::new(0.1, 1.0, 0.0, LrSchedule::default()).is_err());
        assert!(OptimizerState::<f64>::new(0.1, 0.5, -0.1, LrSchedule::default()).is_err());
    }
}
