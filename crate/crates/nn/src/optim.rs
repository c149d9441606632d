//! Adam optimizer.

use crate::graph::Graph;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f32, beta1: f32, beta2: f32) -> Self {
        let zeros = |i| Tensor::zeros(store.get(i).shape());
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: (0..store.len()).map(zeros).collect(),
            v: (0..store.len()).map(zeros).collect(),
        }
    }

    /// Applies one update from the gradients `graph` holds for `store`.
    /// Parameters the loss did not reach are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, graph: &Graph) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = self.lr / bc1;
        for i in 0..store.len() {
            let Some(g) = graph.param_grad(store, i) else {
                continue;
            };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(i).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                p[k] -= step_size * m[k] / ((v[k] / bc2).sqrt() + self.eps);
            }
        }
    }
}
