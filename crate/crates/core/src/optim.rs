//! Plain SGD with momentum.
//!
//! Frozen parameters are skipped entirely: no velocity update, no value
//! change, so their bytes stay bitwise identical across any number of steps.

use crate::params::ParamStore;

pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, lr: f64, momentum: f64) -> Self {
        let velocity = store
            .ids()
            .map(|id| vec![0.0; store.get(id).numel()])
            .collect();
        Sgd {
            lr,
            momentum,
            velocity,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// One update from the gradients currently held in the store.
    pub fn step(&mut self, store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for (slot, id) in ids.into_iter().enumerate() {
            let t = store.get_mut(id);
            if t.frozen() || !t.trainable() {
                continue;
            }
            let Some(grad) = t.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let vel = &mut self.velocity[slot];
            for ((v, w), g) in vel.iter_mut().zip(t.values_mut()).zip(&grad) {
                *v = self.momentum * *v - self.lr * g;
                *w += *v;
            }
        }
    }
}
