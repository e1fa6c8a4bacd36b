use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment buffers for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f32>,
    pub second_moment: Vec<f32>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, cfg: &AdamConfig, params: &mut [f32], grads: &[f32]) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(Error::shape(
                "adam_step",
                "params",
                self.first_moment.len(),
                params.len(),
            ));
        }
        if grads.len() != params.len() {
            return Err(Error::shape("adam_step", "grads", params.len(), grads.len()));
        }
        if !(cfg.lr > 0.0) {
            return Err(Error::invalid("adam_step", "learning rate must be positive"));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mhat = *m as f64 / bc1;
            let vhat = *v as f64 / bc2;
            *p -= (cfg.lr * mhat / (vhat.sqrt() + cfg.epsilon)) as f32;
        }
        Ok(())
    }
}

/// Adam over a list of parameter tensors, one [`AdamState`] per tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub states: Vec<AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Adam {
            config,
            states: sizes.iter().map(|&n| AdamState::new(n)).collect(),
        }
    }

    /// Updates tensor `i`; tensors that are never stepped keep their moments untouched.
    pub fn step(&mut self, i: usize, params: &mut [f32], grads: &[f32]) -> Result<()> {
        let cfg = self.config;
        self.states[i].step(&cfg, params, grads)
    }
}
