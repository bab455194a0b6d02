use std::collections::HashMap;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::{Module, Real};

/// Step-decay learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub base_lr: f64,
    /// Iterations at which the rate is multiplied by `decay_factor`.
    pub decay_steps: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::constant(0.01)
    }
}

impl LrSchedule {
    pub fn constant(base_lr: f64) -> Self {
        LrSchedule {
            base_lr,
            decay_steps: Vec::new(),
            decay_factor: 0.1,
        }
    }

    pub fn rate_at(&self, step: usize) -> f64 {
        let drops = self.decay_steps.iter().filter(|&&s| step >= s).count();
        self.base_lr * self.decay_factor.powi(drops as i32)
    }
}

/// SGD with momentum and L2 weight decay.
///
/// Only parameters that received a gradient since the last `zero_grad` are
/// updated; branches excluded from the loss stay bit-identical.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, ArrayD<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    pub fn step<M: Module<T> + ?Sized>(&mut self, model: &mut M, lr: f64) {
        let (lr, mom, wd) = (T::of(lr), T::of(self.momentum), T::of(self.weight_decay));
        let velocity = &mut self.velocity;
        model.visit_mut("", &mut |name, p| {
            if !p.trainable || !p.touched {
                return;
            }
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            ndarray::Zip::from(&mut p.value)
                .and(v)
                .and(&p.grad)
                .for_each(|w, v, &g| {
                    *v = mom * *v + g + wd * *w;
                    *w -= lr * *v;
                });
        });
    }
}
