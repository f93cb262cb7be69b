//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass. Each
//! recorded node keeps its value and, when any input requires a gradient, a
//! closure mapping the output gradient to input gradients. [`Graph::backward`]
//! walks the tape in reverse and returns a [`Gradients`] table.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};

use super::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Maps `(output gradient, input values, input needs-grad flags)` to one
/// optional gradient per input.
pub type BackwardFn<T> =
    Box<dyn Fn(&ArrayD<T>, &[&ArrayD<T>], &[bool]) -> Vec<Option<ArrayD<T>>>>;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

struct Node<T> {
    value: ArrayD<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    param_nodes: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            param_nodes: HashMap::new(),
        }
    }

    /// A graph that records values only; nothing requires a gradient.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(Node {
            value: value.as_standard_layout().into_owned(),
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
            param: None,
        })
    }

    /// A free input whose gradient is collected by [`Graph::backward`].
    pub fn input(&mut self, value: ArrayD<T>) -> Var {
        let requires_grad = self.grad_enabled;
        self.push(Node {
            value: value.as_standard_layout().into_owned(),
            parents: Vec::new(),
            backward: None,
            requires_grad,
            param: None,
        })
    }

    /// Leaf node for a stored parameter; reused if already on the tape.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(&id) {
            return *v;
        }
        let p = store.param(id);
        let requires_grad = self.grad_enabled && !p.frozen;
        let v = self.push(Node {
            value: p.value.clone(),
            parents: Vec::new(),
            backward: None,
            requires_grad,
            param: Some(id),
        });
        self.param_nodes.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        let x = self.value(v);
        assert_eq!(x.len(), 1, "scalar() on a tensor of {} elements", x.len());
        x.iter().copied().next().unwrap()
    }

    /// Records an operation. `backward` is dropped when no input needs a gradient.
    pub fn op(&mut self, value: ArrayD<T>, parents: &[Var], backward: BackwardFn<T>) -> Var {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        debug_assert!(value.is_standard_layout());
        self.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
            param: None,
        })
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<ArrayD<T>>> = (0..n).map(|_| None).collect();
        let root_node = &self.nodes[root.0];
        assert_eq!(root_node.value.len(), 1, "backward() requires a scalar root");
        if root_node.requires_grad {
            grads[root.0] = Some(ArrayD::from_elem(root_node.value.raw_dim(), T::one()));
        }
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let inputs: Vec<&ArrayD<T>> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &inputs, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(
                    pg.shape(),
                    self.nodes[p].value.shape(),
                    "gradient shape mismatch at node {p}"
                );
                match &mut grads[p] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, node)| node.param.map(|id| (id, i)))
            .collect();
        Gradients { grads, params }
    }
}

/// Gradients of a scalar with respect to every leaf on the tape.
pub struct Gradients<T> {
    grads: Vec<Option<ArrayD<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like it when nothing flowed there.
    pub fn wrt_or_zeros(&self, graph: &Graph<T>, v: Var) -> ArrayD<T> {
        self.wrt(v)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(IxDyn(graph.shape(v))))
    }

    pub fn param(&self, id: ParamId) -> Option<&ArrayD<T>> {
        self.params
            .iter()
            .find(|(pid, _)| *pid == id)
            .and_then(|(_, i)| self.grads[*i].as_ref())
    }

    /// Moves the parameter gradients out, keyed by parameter.
    pub fn into_param_grads(mut self) -> HashMap<ParamId, ArrayD<T>> {
        let mut out = HashMap::new();
        for (id, i) in std::mem::take(&mut self.params) {
            if let Some(g) = self.grads[i].take() {
                out.insert(id, g);
            }
        }
        out
    }
}
