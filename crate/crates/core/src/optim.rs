//! Adaptive-moment optimizer, gradient clipping and the learning-rate schedule.

use ndarray::Array2;

use crate::params::{ParamGroup, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied only to `decay_groups`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Array2<f64>,
    v: Array2<f64>,
    t: i32,
}

/// Adam with per-parameter step counters, so parameters updated in different
/// phases of the schedule keep correct bias correction. Parameters in
/// `decay_groups` additionally get decoupled weight decay (AdamW).
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    decay_groups: Vec<ParamGroup>,
    state: Vec<Option<Moments>>,
}

impl Adam {
    pub fn new(config: AdamConfig, decay_groups: &[ParamGroup]) -> Self {
        Adam {
            config,
            decay_groups: decay_groups.to_vec(),
            state: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Array2<f64>)], lr: f64) {
        let c = self.config;
        for (id, g) in grads {
            if self.state.len() <= id.0 {
                self.state.resize(id.0 + 1, None);
            }
            let st = self.state[id.0].get_or_insert_with(|| Moments {
                m: Array2::zeros(g.dim()),
                v: Array2::zeros(g.dim()),
                t: 0,
            });
            st.t += 1;
            st.m.zip_mut_with(g, |m, &g| *m = c.beta1 * *m + (1.0 - c.beta1) * g);
            st.v.zip_mut_with(g, |v, &g| *v = c.beta2 * *v + (1.0 - c.beta2) * g * g);
            let bc1 = 1.0 - c.beta1.powi(st.t);
            let bc2 = 1.0 - c.beta2.powi(st.t);
            let decay = if self.decay_groups.contains(&store.group(*id)) {
                c.weight_decay
            } else {
                0.0
            };
            let value = store.value_mut(*id);
            if decay > 0.0 {
                value.mapv_inplace(|w| w * (1.0 - lr * decay));
            }
            ndarray::Zip::from(value)
                .and(&st.m)
                .and(&st.v)
                .for_each(|w, &m, &v| {
                    *w -= lr * (m / bc1) / ((v / bc2).sqrt() + c.eps);
                });
        }
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Array2<f64>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.mapv_inplace(|v| v * k);
        }
    }
    norm
}

/// Linear warmup to `peak`, then constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmupSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
}

impl WarmupSchedule {
    pub fn new(peak: f64, warmup_fraction: f64, total_steps: usize) -> Self {
        let warmup_steps = (warmup_fraction * total_steps as f64).round() as usize;
        WarmupSchedule { peak, warmup_steps }
    }

    pub fn at(&self, step: usize) -> f64 {
        if step >= self.warmup_steps {
            self.peak
        } else {
            self.peak * (step + 1) as f64 / self.warmup_steps as f64
        }
    }
}

/// KL weight ramp: 0 at step 0, reaching 1 after `anneal_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaSchedule {
    pub anneal_steps: usize,
}

impl BetaSchedule {
    pub fn new(anneal_fraction: f64, total_steps: usize) -> Self {
        BetaSchedule {
            anneal_steps: (anneal_fraction * total_steps as f64).ceil() as usize,
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        if self.anneal_steps == 0 {
            1.0
        } else {
            (step as f64 / self.anneal_steps as f64).min(1.0)
        }
    }
}
