//! AdamW with decoupled weight decay.

use crate::tensor::{GradStore, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update with learning rate `lr` (the caller owns any schedule).
    /// Tensors not marked for decay in the store skip weight decay.
    pub fn update(&mut self, store: &mut ParamStore, grads: &GradStore, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let decay = if store.decays(id) { self.weight_decay } else { 0.0 };
            let (m, v, g) = (&mut self.m[id.0], &mut self.v[id.0], grads.get(id));
            let p = store.get_mut(id);
            for k in 0..p.data.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p.data[k] -= lr * (mh / (vh.sqrt() + self.eps) + decay * p.data[k]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::row(vec![3.0, -2.0]), false);
        let mut opt = AdamW::new(&store, 0.1, 0.0);
        for _ in 0..500 {
            let mut g = GradStore::zeros_like(&store);
            g.grads[0] = store.get(id).data.iter().map(|x| 2.0 * (x - 1.0)).collect();
            opt.update(&mut store, &g, 0.05);
        }
        for x in &store.get(id).data {
            assert!((x - 1.0).abs() < 1e-3);
        }
    }
}
