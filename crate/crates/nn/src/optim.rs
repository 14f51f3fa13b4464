use std::collections::{HashMap, HashSet};

use ndarray::Array2;

use crate::params::{ParamId, ParamStore};

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Rescale the global gradient norm to at most this value.
    pub clip_norm: Option<f64>,
    step: u64,
    m: HashMap<ParamId, Array2<f64>>,
    v: HashMap<ParamId, Array2<f64>>,
    frozen: HashSet<ParamId>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip_norm: None,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
            frozen: HashSet::new(),
        }
    }

    pub fn with_clip(mut self, norm: f64) -> Self {
        self.clip_norm = Some(norm);
        self
    }

    pub fn freeze(&mut self, id: ParamId) {
        self.frozen.insert(id);
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<ParamId, Array2<f64>>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);

        let scale = match self.clip_norm {
            Some(max) => {
                let norm = grads
                    .values()
                    .map(|g| g.iter().map(|x| x * x).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        // Sorted for a deterministic update order.
        let mut ids: Vec<_> = grads.keys().copied().collect();
        ids.sort();
        for id in ids {
            if self.frozen.contains(&id) {
                continue;
            }
            let g = &grads[&id] * scale;
            let m = self
                .m
                .entry(id)
                .or_insert_with(|| Array2::zeros(g.dim()));
            m.zip_mut_with(&g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            let v = self
                .v
                .entry(id)
                .or_insert_with(|| Array2::zeros(g.dim()));
            v.zip_mut_with(&g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);

            let (m, v) = (&self.m[&id], &self.v[&id]);
            let p = store.get_mut(id);
            let decay = 1.0 - self.lr * self.weight_decay;
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                let update = (m / bc1) / ((v / bc2).sqrt() + self.eps);
                *p = *p * decay - self.lr * update;
            });
        }
    }
}
