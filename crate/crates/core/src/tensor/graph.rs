use std::collections::{HashMap, HashSet};

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// One primitive application as seen from the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeRecord {
    pub kind: &'static str,
    pub inputs: Vec<u64>,
    pub output: u64,
    pub attrs: String,
}

/// Topologically ordered view of the nodes reachable from a tensor.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    pub records: Vec<NodeRecord>,
}

impl Graph {
    pub fn trace<T: Element>(root: &Tensor<T>) -> Self {
        let records = reachable(root)
            .into_iter()
            .filter_map(|t| {
                t.node().map(|node| NodeRecord {
                    kind: node.op.kind(),
                    inputs: node.inputs.iter().map(Tensor::id).collect(),
                    output: t.id(),
                    attrs: format!("{:?}", node.op.prim),
                })
            })
            .collect();
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Gradients produced by one backward pass, keyed by tensor id.
#[derive(Debug, Clone, Default)]
pub struct GradientMap<T> {
    grads: HashMap<u64, Vec<T>>,
}

impl<T: Element> GradientMap<T> {
    pub fn get(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.grads.get(&t.id()).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Tensors that require a gradient and are reachable from `root`, in
/// ascending id (= forward) order.
fn reachable<T: Element>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut seen = HashSet::new();
    let mut stack = vec![root.clone()];
    let mut out = Vec::new();
    while let Some(t) = stack.pop() {
        if !t.requires_grad() || !seen.insert(t.id()) {
            continue;
        }
        if let Some(node) = t.node() {
            stack.extend(node.inputs.iter().cloned());
        }
        out.push(t);
    }
    out.sort_by_key(Tensor::id);
    out
}

/// Back-propagates from a single-element `loss`, adding the result into the
/// gradient buffer of every reachable tensor that requires a gradient.
pub fn backward<T: Element>(loss: &Tensor<T>) -> Result<GradientMap<T>> {
    if loss.numel() != 1 {
        return Err(Error::Contract(format!(
            "backward needs a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    let order = reachable(loss);
    let mut grads: HashMap<u64, Vec<T>> = HashMap::with_capacity(order.len());
    if order.is_empty() {
        return Ok(GradientMap { grads });
    }
    grads.insert(loss.id(), vec![T::one()]);
    for t in order.iter().rev() {
        let Some(node) = t.node() else { continue };
        let Some(g) = grads.get(&t.id()) else { continue };
        let input_grads = node.op.backward(&node.inputs, t, g);
        for (input, ig) in node.inputs.iter().zip(input_grads) {
            let Some(ig) = ig else { continue };
            if !input.requires_grad() {
                continue;
            }
            match grads.get_mut(&input.id()) {
                Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a = *a + b),
                None => {
                    grads.insert(input.id(), ig);
                }
            }
        }
    }
    for t in &order {
        if let Some(g) = grads.get(&t.id()) {
            t.accumulate_grad(g);
        }
    }
    Ok(GradientMap { grads })
}
