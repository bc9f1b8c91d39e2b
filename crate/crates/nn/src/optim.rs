use std::collections::BTreeMap;

use crate::{Param, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias-corrected moments. Moment buffers are keyed by parameter
/// name, so one optimizer can drive any named parameter set.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<Scalar>, Vec<Scalar>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Advance the step counter. Call once per optimization step, before
    /// [`Adam::update`] is applied to each parameter.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, p: &mut Param) {
        assert!(self.step > 0, "begin_step must precede update");
        let c = self.config;
        let (m, v) = self
            .moments
            .entry(name.to_owned())
            .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let step_size = (c.lr / bc1) as Scalar;
        let bc2_sqrt = bc2.sqrt() as Scalar;
        let (b1, b2) = (c.beta1 as Scalar, c.beta2 as Scalar);
        let eps = c.eps as Scalar;
        let wd = c.weight_decay as Scalar;
        for i in 0..p.value.len() {
            let mut g = p.grad[i];
            if wd != 0.0 {
                g += wd * p.value[i];
            }
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let denom = v[i].sqrt() / bc2_sqrt + eps;
            p.value[i] -= step_size * m[i] / denom;
        }
    }
}
