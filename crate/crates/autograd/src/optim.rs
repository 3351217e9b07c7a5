//! Adam and gradient-norm clipping.

use crate::{ParamStore, Scalar, Tensor};

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g.sq_norm().as_f64()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / (norm + 1e-6));
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Adam without weight decay. One instance per parameter store.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Self { beta1, beta2, eps, steps: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.v
    }

    /// Restores state saved from [`Adam::steps`] and the moment accessors.
    pub fn restore(&mut self, steps: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) {
        assert_eq!(m.len(), self.m.len(), "moment count mismatch");
        assert_eq!(v.len(), self.v.len(), "moment count mismatch");
        for (a, b) in m.iter().zip(&self.m).chain(v.iter().zip(&self.v)) {
            assert_eq!(a.shape(), b.shape(), "moment shape mismatch");
        }
        self.steps = steps;
        self.m = m;
        self.v = v;
    }

    /// Applies one update. Parameters with `None` gradients keep their value
    /// and their moments.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        let one = T::one();
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let p = store.get_mut(id);
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch for parameter {i}");
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mj = b1 * *mj + (one - b1) * gj;
                *vj = b2 * *vj + (one - b2) * gj * gj;
                let mh = *mj / c1;
                let vh = *vj / c2;
                *pj -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]));
        let mut opt = Adam::new(&store, 0.9, 0.999, 1e-12);
        let g = Tensor::from_vec(vec![3], vec![0.3, -4.0, 0.0]);
        opt.step(&mut store, &[Some(g)], 0.1);
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-9);
        assert!((w[1] + 1.9).abs() < 1e-9);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut grads = vec![Some(Tensor::from_vec(vec![2], vec![3.0f64, 4.0])), None];
        let before = clip_grad_norm(&mut grads, 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        let after = grads[0].as_ref().unwrap().sq_norm().sqrt();
        assert!((after - 1.0).abs() < 1e-6);
    }
}
