//! Decoupled-weight-decay Adam with global-norm gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Grads, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
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

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Moment estimates are kept per parameter, with a per-parameter step
/// count, so a parameter frozen for a while resumes its own bias correction.
pub struct AdamW {
    cfg: AdamWConfig,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            state: BTreeMap::new(),
        }
    }

    /// Updates exactly the parameters named in `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) {
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        for (name, g) in grads {
            let p = params.get_mut(name).expect("gradient for a known parameter");
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                t: 0,
            });
            st.t += 1;
            let c1 = 1.0 - beta1.powi(st.t);
            let c2 = 1.0 - beta2.powi(st.t);
            for (((w, &gi), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(&mut st.m).zip(&mut st.v) {
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                *w -= lr * (update + weight_decay * *w);
            }
        }
    }
}

pub fn global_norm(grads: &Grads) -> f64 {
    grads.values().map(|t| t.sq_norm()).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            for x in t.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}
