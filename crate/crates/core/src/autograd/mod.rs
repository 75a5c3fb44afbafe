//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of that scalar with respect to every node that requires one.
//! Parameters are registered per owning store so gradients can be routed back
//! to the optimiser that owns them.

mod broadcast;
mod conv;
mod elementwise;
mod linalg;
mod norm;
mod reduce;
mod sample;

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use broadcast::broadcast_shape;
pub use sample::{SamplePlan, SamplePoint};

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Key identifying a parameter tensor: owning store uid and index in that store.
pub type ParamKey = (u64, usize);

pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamKey, usize>>,
    frozen: RefCell<HashMap<ParamKey, usize>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            frozen: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        })
    }

    /// A differentiable input (gradient retrievable through [`Grads::get`]).
    pub fn input(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        })
    }

    /// Registers a parameter leaf, reusing the node if it was already registered
    /// in this graph.
    pub fn param(&self, key: ParamKey, value: &Tensor<T>, trainable: bool) -> Var<'_, T> {
        let map = if trainable { &self.params } else { &self.frozen };
        if let Some(&id) = map.borrow().get(&key) {
            return Var { graph: self, id };
        }
        let var = self.push(Node {
            value: Rc::new(value.clone()),
            parents: Vec::new(),
            backward: None,
            requires_grad: trainable,
        });
        map.borrow_mut().insert(key, var.id);
        var
    }

    /// Records an operation result. `backward` receives the output gradient and a
    /// mask of which parents need gradients; it returns one entry per parent.
    pub(crate) fn record<'g>(
        &'g self,
        value: impl Into<Rc<Tensor<T>>>,
        parents: &[Var<'g, T>],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'g, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        self.push(Node {
            value: value.into(),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
        })
    }

    /// Reverse pass from a single-element root.
    pub fn backward(&self, root: Var<'_, T>) -> Grads<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.id].value.numel(),
            1,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[root.id].requires_grad {
            grads[root.id] = Some(Tensor::ones(nodes[root.id].value.shape()));
        }
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad_out) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&grad_out, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[p].value.shape(), "grad shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            // Keep leaf gradients only.
            if !node.parents.is_empty() {
                grads[id] = None;
            } else {
                grads[id] = Some(grad_out);
            }
        }
        Grads {
            grads,
            params: self.params.borrow().clone(),
        }
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Grads<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamKey, usize>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of a leaf created by [`Graph::input`] or [`Graph::param`].
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn param(&self, key: ParamKey) -> Option<&Tensor<T>> {
        self.params
            .get(&key)
            .and_then(|&id| self.grads[id].as_ref())
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Copies the current value into a gradient-free node.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.constant((*self.value()).clone())
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> T {
        self.value().item()
    }
}

#[cfg(test)]
mod tests;
