use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter moment buffers, created lazily on the first step.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// Bias-corrected Adam over every trainable element, then clears gradients.
///
/// Frozen rows keep their value and their moments stay at zero.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    if state.first.is_empty() {
        state.first = params.ids().map(|id| vec![0.0; params.get(id).numel()]).collect();
        state.second = state.first.clone();
    }
    if state.first.len() != params.len() {
        return Err(Error::Invalid("optimizer state built for a different parameter set".into()));
    }
    for id in params.ids() {
        let t = params.get(id);
        if t.requires_grad && t.grad.is_none() {
            return Err(Error::MissingGradient { name: params.name(id).to_string() });
        }
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - (beta1 as f64).powi(state.step as i32);
    let bc2 = 1.0 - (beta2 as f64).powi(state.step as i32);
    for id in params.ids() {
        if !params.get(id).requires_grad {
            continue;
        }
        let cols = params.get(id).dims2().1;
        let rows = params.row_mask(id).map(<[bool]>::to_vec);
        let t = params.get_mut(id);
        let grad = t.grad.take().expect("checked above");
        let (m, v) = (&mut state.first[id], &mut state.second[id]);
        for (i, (w, &g)) in t.data_mut().iter_mut().zip(&grad).enumerate() {
            if let Some(rows) = &rows {
                if !rows[i / cols] {
                    continue;
                }
            }
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] as f64 / bc1;
            let v_hat = v[i] as f64 / bc2;
            *w -= (lr as f64 * m_hat / (v_hat.sqrt() + eps as f64)) as f32;
        }
    }
    params.zero_grads();
    Ok(())
}
