use crate::graph::Gradients;
use crate::params::ParamStore;

/// SGD with classical momentum: `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64) -> Self {
        let velocity = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Self { momentum, velocity }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        for (id, g) in grads.params() {
            let v = &mut self.velocity[id.0];
            let p = store.get_mut(id).data_mut();
            for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = self.momentum * *v + g;
                *p -= lr * *v;
            }
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns the original norm.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}
