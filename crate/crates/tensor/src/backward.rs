use std::collections::{HashMap, HashSet};

use crate::tensor::Tensor;

/// Accumulates gradient contributions keyed by tensor id.
pub(crate) struct GradSink {
    grads: HashMap<u64, Vec<f64>>,
}

impl GradSink {
    /// Zero-initialised accumulation buffer for `t`, or `None` when no
    /// gradient flows into it.
    pub(crate) fn slot(&mut self, t: &Tensor) -> Option<&mut Vec<f64>> {
        if !t.requires_grad() {
            return None;
        }
        Some(self.grads.entry(t.id()).or_insert_with(|| vec![0.0; t.numel()]))
    }
}

/// Gradients of the leaf variables reached from a scalar.
#[derive(Default)]
pub struct Gradients {
    grads: HashMap<u64, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.grads.get(&t.id()).map(Vec::as_slice)
    }

    /// Gradient of `t`, zeros when the scalar does not depend on it.
    pub fn get_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        self.get(t).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
    }

    pub fn contains(&self, t: &Tensor) -> bool {
        self.grads.contains_key(&t.id())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Tensor {
    /// Reverse-mode sweep from this single-element tensor.
    pub fn backward(&self) -> Gradients {
        assert_eq!(self.numel(), 1, "backward() needs a single-element tensor, got {:?}", self.shape());
        if !self.requires_grad() {
            return Gradients::default();
        }
        let order = topo_order(self);
        let mut sink = GradSink { grads: HashMap::new() };
        sink.grads.insert(self.id(), vec![1.0]);
        let mut leaves = HashMap::new();
        for t in order.iter().rev() {
            let Some(g) = sink.grads.remove(&t.id()) else { continue };
            match &t.0.op {
                Some(op) => op.backward(t, &g, &mut sink),
                None => {
                    leaves.insert(t.id(), g);
                }
            }
        }
        Gradients { grads: leaves }
    }
}

/// Post-order over the differentiable subgraph (inputs before consumers).
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(op) = &t.0.op {
            for p in op.parents() {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}
