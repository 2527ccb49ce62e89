//! Adam with decoupled weight decay, one learning rate per parameter group.

use serde::{Deserialize, Serialize};

use crate::numerics::{ParamGroup, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

fn group_index(g: ParamGroup) -> usize {
    match g {
        ParamGroup::Encoder => 0,
        ParamGroup::Decoder => 1,
    }
}

/// First and second moments per parameter plus a step counter per group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub(crate) m: Vec<Vec<f32>>,
    pub(crate) v: Vec<Vec<f32>>,
    pub(crate) steps: [u64; 2],
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0f32; p.value.len()]).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            steps: [0, 0],
        }
    }

    pub fn steps(&self, group: ParamGroup) -> u64 {
        self.steps[group_index(group)]
    }

    /// One update from the gradients held in `store`. Frozen parameters are
    /// left untouched, and a group whose parameters are all frozen does not
    /// advance its step counter.
    pub fn step(&mut self, store: &mut ParamStore, lr_encoder: f64, lr_decoder: f64) {
        let mut active = [false; 2];
        for (_, p) in store.iter() {
            active[group_index(p.group)] |= p.trainable;
        }
        for (g, a) in active.iter().enumerate() {
            if *a {
                self.steps[g] += 1;
            }
        }
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        for (id, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let gi = group_index(p.group);
            let lr = if gi == 0 { lr_encoder } else { lr_decoder };
            let t = self.steps[gi] as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2_sqrt = (1.0 - beta2.powi(t)).sqrt();
            let step_size = (lr / bc1) as f32;
            let shrink = if p.decay { (1.0 - lr * weight_decay) as f32 } else { 1.0 };
            let (b1, b2) = (beta1 as f32, beta2 as f32);
            // Complements in f64: 1 - 0.999f32 is off by about 1e-5 relative.
            let (c1, c2) = ((1.0 - beta1) as f32, (1.0 - beta2) as f32);
            let (bc2_sqrt, eps) = (bc2_sqrt as f32, eps as f32);
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let grad = p.grad.data();
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *w *= shrink;
                *m = b1 * *m + c1 * g;
                *v = b2 * *v + c2 * g * g;
                let denom = v.sqrt() / bc2_sqrt + eps;
                *w -= step_size * *m / denom;
            }
        }
    }
}
