use std::collections::BTreeMap;

use crate::params::{Param, ParamSet};

/// Adam first/second moment estimates, exposed for checkpointing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: ParamSet,
    pub second: ParamSet,
}

/// Adaptive moment estimation.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState::default(),
        }
    }

    /// One update of every parameter that has an entry in `grads`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Vec<f64>>) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            assert_eq!(p.values.len(), g.len(), "gradient size mismatch for `{name}`");
            if self.state.first.get(name).is_none() {
                self.state.first.insert(name.clone(), Param::new(&p.shape, vec![0.0; g.len()]));
                self.state.second.insert(name.clone(), Param::new(&p.shape, vec![0.0; g.len()]));
            }
            let m = &mut self.state.first.get_mut(name).unwrap().values;
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = &mut self.state.second.get_mut(name).unwrap().values;
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let m = &self.state.first.get(name).unwrap().values;
            let v = &self.state.second.get(name).unwrap().values;
            for i in 0..g.len() {
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.values[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` in place so their joint Euclidean norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.values_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= s);
    }
    norm
}
