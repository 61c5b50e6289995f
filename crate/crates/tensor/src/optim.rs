use std::collections::HashMap;

use ndarray::{ArrayD, Zip};

use crate::param::ParamId;
use crate::{Elem, Grads, Param};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay applied as `p -= lr * wd * p`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
            weight_decay: 0.0,
        }
    }
}

struct Moments<T: Elem> {
    m: ArrayD<T>,
    v: ArrayD<T>,
    t: i32,
}

/// Adam with per-parameter step counters; frozen parameters are skipped and
/// keep their moments untouched.
pub struct Adam<T: Elem = f32> {
    cfg: AdamConfig,
    state: HashMap<ParamId, Moments<T>>,
}

impl<T: Elem> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            state: HashMap::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Applies one update; returns how many parameters moved.
    pub fn step(&mut self, params: &[Param<T>], grads: &Grads<T>) -> usize {
        let c = self.cfg;
        let mut updated = 0;
        for p in params {
            if !p.is_trainable() {
                continue;
            }
            let Some(g) = grads.param(p) else { continue };
            let st = self.state.entry(p.id()).or_insert_with(|| Moments {
                m: ArrayD::zeros(g.raw_dim()),
                v: ArrayD::zeros(g.raw_dim()),
                t: 0,
            });
            st.t += 1;
            let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
            let bc1 = 1.0 - c.beta1.powi(st.t);
            let bc2 = 1.0 - c.beta2.powi(st.t);
            let step = T::of(c.lr * bc2.sqrt() / bc1);
            let eps = T::of(c.eps * bc2.sqrt());
            let decay = T::of(1.0 - c.lr * c.weight_decay);
            let (m, v) = (&mut st.m, &mut st.v);
            p.update(|w| {
                Zip::from(w).and(m).and(v).and(g).for_each(|w, m, v, &g| {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    if c.weight_decay > 0.0 {
                        *w *= decay;
                    }
                    *w -= step * *m / (v.sqrt() + eps);
                });
            });
            updated += 1;
        }
        updated
    }
}
