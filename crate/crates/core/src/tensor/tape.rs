use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{DemaError, Result};

/// Maps the output gradient to one optional gradient per parent, in order.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Records a computation so it can be differentiated in reverse.
///
/// A tape is single-threaded and meant to live for one forward/backward
/// pass. Parameters are bound once per tape, so a parameter used in several
/// places receives the sum of its gradient contributions.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<ParamId, usize>>,
    grad_enabled: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; `backward` on it yields no gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(
        &self,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
            requires_grad,
        });
        nodes.len() - 1
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        let id = self.push(value, Vec::new(), None, false);
        Var { tape: self, id }
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let id = self.push(value, Vec::new(), None, self.grad_enabled);
        Var { tape: self, id }
    }

    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.bound.borrow().get(&id) {
            return Var {
                tape: self,
                id: node,
            };
        }
        let node = self.push(store.get(id).clone(), Vec::new(), None, self.grad_enabled);
        self.bound.borrow_mut().insert(id, node);
        Var {
            tape: self,
            id: node,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn record<F>(&self, value: Tensor, parents: &[Var<'_>], backward: F) -> Var<'_>
    where
        F: Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = self.grad_enabled && {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&p| nodes[p].requires_grad)
        };
        let id = if requires_grad {
            self.push(value, ids, Some(Box::new(backward)), true)
        } else {
            self.push(value, Vec::new(), None, false)
        };
        Var { tape: self, id }
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.len() != 1 {
            return Err(DemaError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if loss_node.requires_grad {
            grads[loss.id] = Some(Tensor::full(loss_node.value.shape(), 1.0));
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[id].take() else { continue };
            let parent_grads = backward(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    pg.shape(),
                    nodes[p].value.shape(),
                    "gradient shape for node {p}"
                );
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Grads {
            grads,
            bound: self.bound.borrow().clone(),
        })
    }
}

/// Gradients of a scalar loss with respect to leaves and bound parameters.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    bound: HashMap<ParamId, usize>,
}

impl Grads {
    /// Gradient for a leaf, or `None` when the loss does not reach it.
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient for a parameter; zeros when the parameter was unused.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Tensor {
        self.bound
            .get(&id)
            .and_then(|&n| self.grads[n].clone())
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }
}
