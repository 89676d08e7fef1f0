//! Adam with L2-style weight decay folded into the gradient.

use crate::autodiff::Tensor;
use crate::policy::store::ParamStore;

#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(param_count: usize) -> Adam {
        Adam {
            m: vec![Vec::new(); param_count],
            v: vec![Vec::new(); param_count],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn set_step_count(&mut self, t: u64) {
        self.t = t;
    }

    pub fn moments(&self, idx: usize, len: usize) -> (Vec<f64>, Vec<f64>) {
        let m = if self.m[idx].is_empty() {
            vec![0.0; len]
        } else {
            self.m[idx].clone()
        };
        let v = if self.v[idx].is_empty() {
            vec![0.0; len]
        } else {
            self.v[idx].clone()
        };
        (m, v)
    }

    pub fn set_moments(&mut self, idx: usize, m: Vec<f64>, v: Vec<f64>) {
        self.m[idx] = m;
        self.v[idx] = v;
    }

    /// Applies one update to every unfrozen parameter that received a
    /// gradient. Frozen parameters are never touched, not even by weight
    /// decay.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Tensor>],
        lr: f64,
        weight_decay: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for idx in 0..grads.len() {
            let Some(grad) = &grads[idx] else { continue };
            if store.is_frozen(idx) {
                continue;
            }
            let value = store.value(idx).clone();
            let len = value.len();
            if self.m[idx].is_empty() {
                self.m[idx] = vec![0.0; len];
                self.v[idx] = vec![0.0; len];
            }
            let mut new = value.data().to_vec();
            for i in 0..len {
                let g = grad.data()[i] + weight_decay * new[i];
                self.m[idx][i] = self.beta1 * self.m[idx][i] + (1.0 - self.beta1) * g;
                self.v[idx][i] = self.beta2 * self.v[idx][i] + (1.0 - self.beta2) * g * g;
                let m_hat = self.m[idx][i] / bc1;
                let v_hat = self.v[idx][i] / bc2;
                new[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            store.set_value(idx, Tensor::new(value.shape().to_vec(), new));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moves_against_gradient_and_skips_frozen() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::new(vec![2], vec![1.0, 1.0]));
        store.insert("b", Tensor::new(vec![1], vec![5.0]));
        store.set_frozen(1, true);

        let mut adam = Adam::new(2);
        let grads = vec![
            Some(Tensor::new(vec![2], vec![1.0, -1.0])),
            Some(Tensor::new(vec![1], vec![100.0])),
        ];
        adam.step(&mut store, &grads, 0.1, 0.0);
        let a = store.value(0).data();
        assert!(a[0] < 1.0 && a[1] > 1.0);
        assert_eq!(store.value(1).data(), &[5.0], "frozen parameter untouched");
    }
}
