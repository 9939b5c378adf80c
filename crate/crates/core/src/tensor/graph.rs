use std::collections::{BTreeMap, HashMap};

use super::primitive::{apply_primitive, vjp};
use super::{ParamStore, Primitive, Tensor};
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Origin {
    Input,
    Param,
    Op(Primitive),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    origin: Origin,
    inputs: Vec<NodeId>,
}

/// An append-only tape of evaluated operations. Nodes can only reference
/// earlier nodes, so the graph is acyclic by construction and insertion order
/// is a topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, origin: Origin, inputs: Vec<NodeId>) -> NodeId {
        self.nodes.push(Node {
            value,
            origin,
            inputs,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant or differentiable input that is not a trainable parameter.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Origin::Input, Vec::new())
    }

    /// Constant copy of `id`: same value, no gradient flows back through it.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id.0].value.clone();
        self.input(v)
    }

    /// Leaf for the named parameter. Repeated requests for the same name reuse
    /// one node so gradients from every use accumulate there.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let Some(t) = store.get(name) else {
            return invalid(format!("unknown parameter `{name}`"));
        };
        let id = self.push(t.clone(), Origin::Param, Vec::new());
        self.params.insert(name.to_owned(), id);
        Ok(id)
    }

    pub fn apply(&mut self, p: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|&i| &self.nodes[i.0].value).collect();
            apply_primitive(&p, &vals)?
        };
        Ok(self.push(value, Origin::Op(p), inputs.to_vec()))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let n = self.nodes[loss.0].value.numel();
        if n != 1 {
            return invalid(format!("backward needs a scalar loss, node has {n} elements"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.shape().to_vec()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Origin::Op(p) = &node.origin else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j.0].value).collect();
            let input_grads = vjp(p, &inputs, &node.value, &g)?;
            grads[i] = Some(g);
            for (&j, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                match &mut grads[j.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        let params = self
            .params
            .iter()
            .map(|(name, &id)| (name.clone(), id))
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, NodeId>,
}

impl Gradients {
    /// Gradient w.r.t. a node, or `None` when the node does not influence the loss.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient for every parameter in `store`; parameters the loss does not
    /// reach get zeros.
    pub fn for_params(&self, store: &ParamStore) -> BTreeMap<String, Tensor> {
        store
            .iter()
            .map(|(name, t)| {
                let g = self
                    .params
                    .get(name)
                    .and_then(|&id| self.wrt(id))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
                (name.clone(), g)
            })
            .collect()
    }
}
