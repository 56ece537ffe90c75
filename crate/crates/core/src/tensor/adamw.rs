//! AdamW with decoupled weight decay over named parameter collections.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Per-parameter first/second moment buffers plus the shared step counter.
/// Moments are keyed by parameter name and created on first use.
#[derive(Clone, Debug)]
pub struct AdamWState {
    pub config: AdamWConfig,
    step: u64,
    first_moment: BTreeMap<String, Tensor>,
    second_moment: BTreeMap<String, Tensor>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig) -> Self {
        AdamWState {
            config,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One optimizer step. Updates exactly the parameters that received a
    /// gradient; decay is decoupled (`p -= lr*wd*p`, independent of the
    /// gradient). Deterministic: same inputs give bit-identical outputs.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor)>,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        if lr < 0.0 || !lr.is_finite() {
            return Err(Error::config(format!("learning rate must be >= 0, got {lr}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let beta1 = self.config.beta1 as f32;
        let beta2 = self.config.beta2 as f32;
        let bias1 = (1.0 - self.config.beta1.powi(t)) as f32;
        let bias2 = (1.0 - self.config.beta2.powi(t)) as f32;
        let eps = self.config.eps as f32;
        let lr32 = lr as f32;
        let decay = (lr * self.config.weight_decay) as f32;

        for (name, param) in params {
            let Some(grad) = grads.get(name) else {
                continue;
            };
            if grad.shape() != param.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw_step",
                    left: param.shape().to_vec(),
                    right: grad.shape().to_vec(),
                });
            }
            let m = self
                .first_moment
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(param.shape()));
            let v = self
                .second_moment
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(param.shape()));
            for (((p, &g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= decay * *p;
                *p -= lr32 * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scale all gradients so their global L2 norm does not exceed `max_norm`.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) {
    let mut sq = 0.0f64;
    for g in grads.values() {
        for &x in g.data() {
            sq += (x as f64) * (x as f64);
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
}
