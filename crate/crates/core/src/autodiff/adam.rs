use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// ADAM moments for a list of parameter tensors. Steps ascend the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let first_moment: Vec<Tensor> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            config,
            step: 0,
            second_moment: first_moment.clone(),
            first_moment,
        }
    }

    /// One bias-corrected ADAM update `p += lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn ascend(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::Shape {
                op: "adam",
                lhs: (params.len(), 1),
                rhs: (grads.len(), self.first_moment.len()),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first_moment) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: p.shape(),
                    rhs: g.shape(),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
        } = self.config;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let g = grads[k].data();
            let m = self.first_moment[k].data_mut();
            let v = self.second_moment[k].data_mut();
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *x += lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
