//! Adam optimizer with per-parameter step counts.

use ndarray::Array2;

use super::params::{ParamId, ParamStore};
use super::tape::Grads;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// First/second moment estimates and step counts, indexed by ParamId.
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub t: Vec<u64>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let m = store.ids().map(|id| Array2::zeros(store.get(id).raw_dim())).collect();
        let v = store.ids().map(|id| Array2::zeros(store.get(id).raw_dim())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m,
            v,
            t: vec![0; store.len()],
        }
    }

    /// Apply one update. Parameters that are non-trainable or received no
    /// gradient are left untouched (their moments do not advance).
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        for id in store.ids().collect::<Vec<_>>() {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let i = id.0;
            self.t[i] += 1;
            let t = self.t[i] as i32;
            self.m[i] = &self.m[i] * self.beta1 + g * (1.0 - self.beta1);
            self.v[i] = &self.v[i] * self.beta2 + &g.mapv(|x| x * x) * (1.0 - self.beta2);
            let mhat = &self.m[i] / (1.0 - self.beta1.powi(t));
            let vhat = &self.v[i] / (1.0 - self.beta2.powi(t));
            let update = &mhat / &(vhat.mapv(f64::sqrt) + self.eps);
            let p = store.get_mut(id);
            *p -= &(update * self.lr);
        }
    }
}

/// One step of gradient descent on selected parameters; used by small
/// probe heads fitted at evaluation time.
pub fn sgd_step(store: &mut ParamStore, grads: &Grads, ids: &[ParamId], lr: f64) {
    for &id in ids {
        if let Some(g) = grads.get(id) {
            let p = store.get_mut(id);
            *p -= &(g * lr);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::Tape;
    use ndarray::array;

    /// Adam on f(x) = x^2 converges toward 0.
    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let x = store.add("x", array![[5.0]], true);
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let xv = tape.param(&store, x);
            let sq = tape.mul(xv, xv);
            let loss = tape.sum_all(sq);
            let grads = tape.backward(loss, store.len());
            opt.step(&mut store, &grads);
        }
        assert!(store.get(x)[[0, 0]].abs() < 1e-2);
    }

    /// First step moves by exactly lr in the gradient sign direction
    /// (bias-corrected moments cancel at t=1 up to eps).
    #[test]
    fn adam_first_step_magnitude() {
        let mut store = ParamStore::new();
        let x = store.add("x", array![[3.0]], true);
        let mut opt = Adam::new(&store, 0.01);
        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        let loss = tape.sum_all(xv);
        let grads = tape.backward(loss, store.len());
        opt.step(&mut store, &grads);
        assert!((store.get(x)[[0, 0]] - (3.0 - 0.01)).abs() < 1e-6);
    }

    #[test]
    fn non_trainable_param_untouched() {
        let mut store = ParamStore::new();
        let x = store.add("x", array![[1.0]], true);
        let buf = store.add("buf", array![[7.0]], false);
        let mut opt = Adam::new(&store, 0.1);
        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        let bv = tape.param(&store, buf);
        let s = tape.add(xv, bv);
        let loss = tape.sum_all(s);
        let grads = tape.backward(loss, store.len());
        assert!(grads.get(buf).is_some()); // gradient exists...
        opt.step(&mut store, &grads);
        assert_eq!(store.get(buf)[[0, 0]], 7.0); // ...but the buffer stays put
    }
}
