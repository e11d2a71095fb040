use crate::error::{NritError, Result};
use crate::mask::{GradientMask, ParamUpdate, UpdateMask};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay and optional entry-level masking.
///
/// Entries outside the mask are skipped entirely: no decay, no moment
/// update, no write. Gradients of every parameter are zeroed after a step.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> Option<&Tensor> {
        self.first.get(index)
    }

    pub fn second_moment(&self, index: usize) -> Option<&Tensor> {
        self.second.get(index)
    }

    fn ensure_state(&mut self, store: &ParamStore) -> Result<()> {
        if self.first.is_empty() {
            for (_, p) in store.iter() {
                self.first.push(Tensor::zeros(p.value.shape()));
                self.second.push(Tensor::zeros(p.value.shape()));
            }
        }
        if self.first.len() != store.len()
            || self
                .first
                .iter()
                .zip(store.iter())
                .any(|(m, (_, p))| m.shape() != p.value.shape())
        {
            return Err(NritError::Contract("optimizer state does not match parameters".into()));
        }
        Ok(())
    }

    /// One update using the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore, mask: Option<&UpdateMask>) -> Result<()> {
        self.ensure_state(store)?;
        if let Some(m) = mask {
            if m.len() != store.len() {
                return Err(NritError::Contract("update mask built for a different model".into()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let update = mask.map_or(&ParamUpdate::All(1.0), |m| m.param(i));
            let scales: Option<&[f64]> = match update {
                ParamUpdate::Frozen => continue,
                ParamUpdate::All(_) => None,
                ParamUpdate::Entries(v) => Some(v),
            };
            let uniform = match update {
                ParamUpdate::All(s) => *s,
                _ => 1.0,
            };
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let g = p.gradient.data();
            let w = p.value.data_mut();
            for j in 0..w.len() {
                let s = match scales {
                    Some(sc) => sc[j],
                    None => uniform,
                };
                if s == 0.0 {
                    continue;
                }
                let lr = c.lr * s;
                w[j] -= lr * c.weight_decay * w[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                w[j] -= lr * mhat / (vhat.sqrt() + c.eps);
            }
            if !p.value.all_finite() {
                return Err(NritError::numeric(
                    format!("optimizer step {} on {}", self.step, p.name),
                    "non-finite parameter value",
                ));
            }
        }
        store.zero_grad();
        Ok(())
    }

    /// Convenience wrapper that resolves a named mask first.
    pub fn step_masked(&mut self, store: &mut ParamStore, mask: Option<&GradientMask>) -> Result<()> {
        let compiled = mask.map(|m| m.compile(store, 1.0)).transpose()?;
        self.step(store, compiled.as_ref())
    }
}
