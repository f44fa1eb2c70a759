use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::{Gradients, Parameter, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moments are keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` must cover exactly the trainable parameters.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Parameter>, grads: &Gradients) -> Result<()> {
        let mut params: BTreeMap<String, &'a mut Parameter> = params.into_iter().map(|p| (p.name.clone(), p)).collect();
        for (name, g) in grads {
            let p = params.get(name).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            if !p.trainable {
                return Err(Error::FrozenGradient(name.clone()));
            }
            if g.shape() != p.value.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("`{name}` gradient {:?} vs parameter {:?}", g.shape(), p.value.shape()),
                ));
            }
        }
        if let Some(p) = params.values().find(|p| p.trainable && !grads.contains_key(&p.name)) {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("validated above");
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                let mi = &mut m.data_mut()[i];
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                let mi = *mi;
                let vi = &mut v.data_mut()[i];
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let vi = *vi;
                w[i] -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
