use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParameterStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerSettings {
    pub fn sgd(lr: f64) -> Self {
        OptimizerSettings {
            kind: OptimizerKind::Sgd,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerSettings {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Apply one update to every parameter from its accumulated gradient,
/// then zero the gradients.
///
/// Calling this without any accumulated gradients is a contract error:
/// it means backward never ran.
pub fn optimizer_step(store: &mut ParameterStore, settings: &OptimizerSettings) -> Result<()> {
    if !store.grads_pending() {
        return Err(Error::Contract(
            "optimizer_step called with no accumulated gradients".into(),
        ));
    }
    for (_, p) in store.params_mut() {
        match settings.kind {
            OptimizerKind::Sgd => {
                let grad = p.grad.data().to_vec();
                for (w, g) in p.value.data_mut().iter_mut().zip(&grad) {
                    *w -= settings.lr * g;
                }
            }
            OptimizerKind::Adam => {
                p.adam_step += 1;
                let t = p.adam_step as i32;
                let bc1 = 1.0 - settings.beta1.powi(t);
                let bc2 = 1.0 - settings.beta2.powi(t);
                let grad = p.grad.data().to_vec();
                for i in 0..grad.len() {
                    let g = grad[i];
                    p.adam_m[i] = settings.beta1 * p.adam_m[i] + (1.0 - settings.beta1) * g;
                    p.adam_v[i] = settings.beta2 * p.adam_v[i] + (1.0 - settings.beta2) * g * g;
                    let m_hat = p.adam_m[i] / bc1;
                    let v_hat = p.adam_v[i] / bc2;
                    p.value.data_mut()[i] -= settings.lr * m_hat / (v_hat.sqrt() + settings.eps);
                }
            }
        }
    }
    store.clear_grads();
    Ok(())
}
