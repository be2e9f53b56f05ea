use serde::{Deserialize, Serialize};

use super::{Grads, Parameterized};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Default::default()
        }
    }
}

/// Adam moments for one parameter set, with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<P: Parameterized + ?Sized>(model: &P, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = model
            .params()
            .iter()
            .map(|(_, p)| vec![0.0; p.len()])
            .collect();
        AdamState {
            config,
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// Applies one update. Nothing is modified if any gradient entry is
    /// non-finite or a block shape disagrees.
    pub fn step<P: Parameterized + ?Sized>(&mut self, model: &mut P, grads: &Grads) -> Result<()> {
        {
            let params = model.params();
            if params.len() != grads.blocks.len() || params.len() != self.first_moment.len() {
                return Err(Error::shape(
                    "adam blocks",
                    params.len(),
                    grads.blocks.len(),
                ));
            }
            for (((name, p), g), m) in params.iter().zip(&grads.blocks).zip(&self.first_moment) {
                if p.len() != g.len() || p.len() != m.len() {
                    return Err(Error::shape("adam block length", p.len(), g.len()));
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(name.clone()));
                }
            }
        }
        self.step_count += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in model
            .params_mut()
            .into_iter()
            .zip(&grads.blocks)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
