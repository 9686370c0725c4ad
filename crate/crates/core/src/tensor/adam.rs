use crate::scalar::Real;
use crate::tensor::{Matrix, ParamStore};

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub epsilon: F,
    step_count: u64,
    first_moment: Vec<Matrix<F>>,
    second_moment: Vec<Matrix<F>>,
}

impl<F: Real> Adam<F> {
    /// Moments sized after `store`; β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn new(store: &ParamStore<F>, lr: F) -> Self {
        let zeros = || -> Vec<Matrix<F>> {
            store
                .ids()
                .map(|id| {
                    let (r, c) = store.value(id).shape();
                    Matrix::zeros(r, c)
                })
                .collect()
        };
        Adam {
            lr,
            beta1: F::from_f(0.9),
            beta2: F::from_f(0.999),
            epsilon: F::from_f(1e-8),
            step_count: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update from the gradients currently held by `store`.
    /// Gradients are left in place; callers zero them between steps.
    pub fn step(&mut self, store: &mut ParamStore<F>) {
        assert_eq!(self.first_moment.len(), store.len(), "optimizer/store mismatch");
        self.step_count += 1;
        let t = self.step_count as i32;
        let one = F::one();
        let correct1 = one - self.beta1.powi(t);
        let correct2 = one - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (slot, id) in ids.into_iter().enumerate() {
            let grad = store.grad(id).as_slice().to_vec();
            let m = self.first_moment[slot].as_mut_slice();
            let v = self.second_moment[slot].as_mut_slice();
            let value = store.value_mut(id).as_mut_slice();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (one - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (one - self.beta2) * g * g;
                let m_hat = m[i] / correct1;
                let v_hat = v[i] / correct2;
                value[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> (ParamStore<f64>, crate::tensor::ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("x", Matrix::scalar(x));
        (store, id)
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let (mut store, id) = scalar_store(0.5);
        let mut adam = Adam::new(&store, 0.001);
        store.grad_mut(id)[(0, 0)] = 2.0;
        adam.step(&mut store);
        let expected = 0.5 - 0.001 * (2.0 / (2.0 + 1e-8));
        assert!((store.value(id)[(0, 0)] - expected).abs() < 1e-15);
        assert!((store.value(id)[(0, 0)] - 0.499).abs() < 1e-9);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut store, id) = scalar_store(0.7);
        let mut adam = Adam::new(&store, 0.1);
        for _ in 0..5 {
            adam.step(&mut store);
        }
        assert_eq!(store.value(id)[(0, 0)], 0.7);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn quadratic_descent_shrinks_magnitude() {
        // scalar simulation of x <- adam(x, 2x)
        let (mut store, id) = scalar_store(1.0);
        let mut adam = Adam::new(&store, 0.1);
        let mut prev = 1.0f64;
        for _ in 0..10 {
            let x = store.value(id)[(0, 0)];
            store.zero_grads();
            store.grad_mut(id)[(0, 0)] = 2.0 * x;
            adam.step(&mut store);
            let next = store.value(id)[(0, 0)];
            assert!(next.abs() < prev.abs());
            prev = next;
        }
    }

    #[test]
    fn works_in_single_precision() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("x", Matrix::scalar(0.5f32));
        let mut adam = Adam::new(&store, 0.001f32);
        store.grad_mut(id)[(0, 0)] = -3.0;
        adam.step(&mut store);
        assert!((store.value(id)[(0, 0)] - 0.501).abs() < 1e-6);
    }
}
