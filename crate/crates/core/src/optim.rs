//! Adaptive-moment (Adam) optimizer with checkpointable state.

use nirgan_tensor::{ParameterSet, Scalar, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    config: AdamConfig,
    steps: u64,
    first: ParameterSet<T>,
    second: ParameterSet<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            steps: 0,
            first: ParameterSet::new(),
            second: ParameterSet::new(),
        }
    }

    pub fn from_state(
        config: AdamConfig,
        steps: u64,
        first: ParameterSet<T>,
        second: ParameterSet<T>,
    ) -> Self {
        Adam {
            config,
            steps,
            first,
            second,
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn first_moments(&self) -> &ParameterSet<T> {
        &self.first
    }

    pub fn second_moments(&self) -> &ParameterSet<T> {
        &self.second
    }

    /// Applies one update to every parameter that has a gradient in `grads`.
    pub fn step(&mut self, params: &mut ParameterSet<T>, grads: &ParameterSet<T>, lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let b1 = self.config.beta1;
        let b2 = self.config.beta2;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let (one_b1, one_b2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
        let step_size = T::lit(lr / c1);
        let inv_c2 = T::lit(1.0 / c2);
        let eps = T::lit(self.config.eps);
        for (name, grad) in grads.iter() {
            let Some(param) = params.get_mut(name) else {
                continue;
            };
            let shape = param.shape().to_vec();
            if !self.first.contains(name) {
                self.first.insert(name.clone(), Tensor::zeros(shape.clone()));
                self.second.insert(name.clone(), Tensor::zeros(shape));
            }
            let m = self.first.get_mut(name).expect("inserted above").data_mut();
            let v = self.second.get_mut(name).expect("inserted above").data_mut();
            for (((p, &g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1t * *m + one_b1 * g;
                *v = b2t * *v + one_b2 * g * g;
                *p -= step_size * *m / ((*v * inv_c2).sqrt() + eps);
            }
        }
    }
}
