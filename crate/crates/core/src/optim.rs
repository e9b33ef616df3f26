use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Adam with bias correction. Moments are part of the training state and are
/// checkpointed alongside the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), store.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, param) in store.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in param.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_each_weight_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[3], vec![1.0, 1.0, 1.0]).unwrap());
        let mut adam = Adam::new(&store, 0.1);
        adam.update(&mut store, &[Tensor::new(&[3], vec![2.0, -0.5, 0.0]).unwrap()]);
        let w = store.tensors()[0].data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - 1.1).abs() < 1e-6);
        assert_eq!(w[2], 1.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[2], vec![3.0, -2.0]).unwrap());
        let mut adam = Adam::new(&store, 0.05);
        for _ in 0..2000 {
            let g = store.tensors()[0].map(|x| 2.0 * x);
            adam.update(&mut store, &[g]);
        }
        assert!(store.tensors()[0].data().iter().all(|x| x.abs() < 1e-3));
    }
}
