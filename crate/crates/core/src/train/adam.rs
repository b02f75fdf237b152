//! Adam with bias correction. Moments exist only for trainable tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Gradients, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    /// Indexed like the parameter groups; `None` for frozen tensors.
    moments: Vec<Vec<Option<Moments>>>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        let moments = params
            .groups
            .iter()
            .map(|g| {
                g.tensors
                    .iter()
                    .map(|t| {
                        (!g.frozen).then(|| Moments {
                            m: vec![0.0; t.data.len()],
                            v: vec![0.0; t.data.len()],
                        })
                    })
                    .collect()
            })
            .collect();
        Self { config, step: 0, moments }
    }

    pub fn has_moments(&self, group: usize, tensor: usize) -> bool {
        self.moments[group][tensor].is_some()
    }
}

/// One update of every trainable tensor. Gradients are validated before any
/// parameter changes, so a non-finite value leaves the model untouched.
pub fn optimizer_step(params: &mut ModelParams, grads: &Gradients, state: &mut OptimizerState, lr: f64) -> Result<()> {
    let step = state.step + 1;
    for (g, gg) in params.groups.iter().zip(&grads.groups) {
        if g.frozen {
            continue;
        }
        for (t, gt) in g.tensors.iter().zip(gg) {
            if gt.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    tensor: format!("{}/{}", g.group.name(), t.name),
                    step,
                });
            }
        }
    }
    state.step = step;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let c1 = 1.0 - beta1.powi(step as i32);
    let c2 = 1.0 - beta2.powi(step as i32);
    for ((g, gg), gm) in params.groups.iter_mut().zip(&grads.groups).zip(&mut state.moments) {
        if g.frozen {
            continue;
        }
        for ((t, gt), mom) in g.tensors.iter_mut().zip(gg).zip(gm.iter_mut()) {
            let mom = mom.get_or_insert_with(|| Moments {
                m: vec![0.0; t.data.len()],
                v: vec![0.0; t.data.len()],
            });
            for (((w, &d), m), v) in t.data.iter_mut().zip(gt).zip(&mut mom.m).zip(&mut mom.v) {
                *m = beta1 * *m + (1.0 - beta1) * d;
                *v = beta2 * *v + (1.0 - beta2) * d * d;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
    Ok(())
}
