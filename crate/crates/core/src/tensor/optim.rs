use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;

use super::graph::Grads;
use super::params::{ParamId, ParamStore};

/// Adam with bias correction. Only parameters in the trainable set are
/// touched; gradients for anything else are ignored.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    trainable: BTreeSet<ParamId>,
    moments: BTreeMap<ParamId, (Array2<f64>, Array2<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, trainable: impl IntoIterator<Item = ParamId>) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            trainable: trainable.into_iter().collect(),
            moments: BTreeMap::new(),
        }
    }

    pub fn trainable(&self) -> &BTreeSet<ParamId> {
        &self.trainable
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in &grads.by_param {
            if !self.trainable.contains(id) {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (Array2::zeros(g.dim()), Array2::zeros(g.dim())));
            let (b1, b2) = (self.beta1, self.beta2);
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let (lr, eps) = (self.lr, self.eps);
            let p = store.value_mut(*id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
    }
}
