//! Tape recording and the reverse sweep.
//!
//! A [`Graph`] records every operation of one forward pass in creation
//! order, so node ids are already a topological order. Graphs are built per
//! step and dropped afterwards; parameters live in a [`ParamStore`] and are
//! copied onto the tape on first use.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

type BackwardFn = Box<dyn Fn(&Tensor, &mut GradSink<'_>)>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
    param: Option<ParamId>,
}

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph<'g>,
    id: usize,
}

/// Opaque node index usable inside backward closures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: RefCell<Vec<Node>>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
    buffer_updates: RefCell<Vec<(ParamId, Tensor)>>,
}

impl<'p> Graph<'p> {
    /// A graph with no parameter store; only inputs and leaves.
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params.expect("graph was created without a parameter store")
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Constant input; never receives a gradient.
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let id = self.push(Node {
            value: Rc::new(value),
            requires_grad,
            backward: None,
            param: None,
        });
        Var { graph: self.cast(), id }
    }

    /// Binds a stored parameter (or buffer) to this graph, once per graph.
    pub fn param(&self, pid: ParamId) -> Var<'_> {
        if let Some(&id) = self.param_nodes.borrow().get(&pid) {
            return Var { graph: self.cast(), id };
        }
        let p = self.params().get(pid);
        let id = self.push(Node {
            value: Rc::new(p.value.clone()),
            requires_grad: p.trainable,
            backward: None,
            param: Some(pid),
        });
        self.param_nodes.borrow_mut().insert(pid, id);
        Var { graph: self.cast(), id }
    }

    /// Records an operation result. `backward` receives the output gradient
    /// and pushes contributions to the parents through the [`GradSink`]; it
    /// is dropped when no parent requires a gradient.
    pub fn record<F>(&self, value: Tensor, parents: &[Var<'_>], backward: F) -> Var<'_>
    where
        F: Fn(&Tensor, &mut GradSink<'_>) + 'static,
    {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let id = self.push(Node {
            value: Rc::new(value),
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
            param: None,
        });
        Var { graph: self.cast(), id }
    }

    /// Queues a buffer write (e.g. running statistics) for the owner of the store.
    pub fn update_buffer(&self, pid: ParamId, value: Tensor) {
        self.buffer_updates.borrow_mut().push((pid, value));
    }

    pub fn take_buffer_updates(&self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut *self.buffer_updates.borrow_mut())
    }

    // Graph is covariant in 'p, so `&'g Graph<'p>` shortens to `&'g Graph<'g>`.
    fn cast(&self) -> &Graph<'_> {
        self
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        let requires: Vec<bool> = nodes.iter().map(|n| n.requires_grad).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let g = Tensor::from_parts(node.value.shape().to_vec(), g);
            {
                let mut sink = GradSink {
                    grads: &mut grads,
                    requires: &requires,
                    shapes: &nodes,
                };
                backward(&g, &mut sink);
            }
            grads[id] = Some(g.into_data());
        }
        let grads: Vec<Option<Tensor>> = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Accumulates gradient contributions during the reverse sweep.
pub struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    requires: &'a [bool],
    shapes: &'a [Node],
}

impl GradSink<'_> {
    pub fn wants(&self, node: NodeId) -> bool {
        self.requires[node.0]
    }

    /// Mutable gradient buffer of `node`, zero-initialized on first access.
    pub fn slot(&mut self, node: NodeId) -> &mut [f64] {
        let len = self.shapes[node.0].value.numel();
        self.grads[node.0].get_or_insert_with(|| vec![0.0; len])
    }

    pub fn add(&mut self, node: NodeId, contribution: &[f64]) {
        if !self.wants(node) {
            return;
        }
        let slot = self.slot(node);
        debug_assert_eq!(slot.len(), contribution.len());
        for (s, c) in slot.iter_mut().zip(contribution) {
            *s += c;
        }
    }
}

/// Result of one reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads[var.id].as_ref()
    }

    pub fn param(&self, pid: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == pid)
            .and_then(|&(_, i)| self.grads[i].as_ref())
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|&(p, i)| self.grads[i].as_ref().map(|g| (p, g)))
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph<'g> {
        self.graph
    }

    pub fn node(&self) -> NodeId {
        NodeId(self.id)
    }

    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.graph.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// Same value with the gradient path cut.
    pub fn detach(&self) -> Var<'g> {
        self.graph.input((*self.value()).clone())
    }
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}
