//! AdamW with decoupled weight decay.

use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Optimizer state for one parameter store.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    steps: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = |s: &ParamStore<T>| s.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamW {
            config,
            steps: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. A missing gradient counts as zero, so such a
    /// parameter still decays by `1 - lr * weight_decay`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        self.steps += 1;
        let c = self.config;
        let decay = T::from_f64(1.0 - lr * c.weight_decay);
        let b1 = T::from_f64(c.beta1);
        let b2 = T::from_f64(c.beta2);
        let one_b1 = T::from_f64(1.0 - c.beta1);
        let one_b2 = T::from_f64(1.0 - c.beta2);
        let bc1 = T::from_f64(1.0 - c.beta1.powi(self.steps as i32));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(self.steps as i32));
        let lr_t = T::from_f64(lr);
        let eps = T::from_f64(c.eps);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = grads[i].as_ref().map(|g| g.data());
            for j in 0..p.len() {
                let gj = g.map(|g| g[j]).unwrap_or_else(T::zero);
                p[j] = p[j] * decay;
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn untouched_parameter_decays_by_exact_factor() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]));
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let lr = 1e-3;
        let before = store.iter().next().unwrap().1.clone();
        opt.step(&mut store, &[None], lr);
        let after = store.iter().next().unwrap().1;
        let f = 1.0 - lr * 1e-5;
        for (a, b) in after.data().iter().zip(before.data()) {
            assert_eq!(*a, b * f);
        }
        let zero = Tensor::zeros(&[3]);
        let before = after.clone();
        opt.step(&mut store, &[Some(zero)], lr);
        for (a, b) in store.iter().next().unwrap().1.data().iter().zip(before.data()) {
            assert_eq!(*a, b * f);
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::new(vec![2], vec![0.0, 0.0]));
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        let g = Tensor::new(vec![2], vec![3.0, -0.5]);
        opt.step(&mut store, &[Some(g)], 0.1);
        let p = store.iter().next().unwrap().1.data().to_vec();
        assert!((p[0] + 0.1).abs() < 1e-6);
        assert!((p[1] - 0.1).abs() < 1e-6);
    }
}
