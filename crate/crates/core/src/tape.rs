//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every differentiable op appends one node to the tape holding its value,
//! the ids of its parents, and a vector-Jacobian rule. Parents always have
//! smaller ids than their children, so a single reverse sweep over the node
//! list is a valid topological order.
//!
//! ```
//! use tim4rec::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let w = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
//! let loss = w.mul(w).unwrap().sum();
//! let grads = loss.backward().unwrap();
//! assert_eq!(grads.wrt(w).data(), &[2.0, 4.0]);
//! ```

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Vector-Jacobian rule: given the output cotangent and which parents need a
/// gradient, return one optional cotangent per parent.
pub(crate) type VjpFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    vjp: Option<VjpFn>,
}

/// Single-writer recording of one forward computation.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; `backward` on it yields zero gradients.
    pub fn no_grad() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Vec::new(), self.grad_enabled, None)
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Vec::new(), false, None)
    }

    fn push_node(
        &self,
        value: Tensor,
        parents: Vec<usize>,
        requires_grad: bool,
        vjp: Option<VjpFn>,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            requires_grad,
            vjp,
        });
        Var { tape: self, id }
    }

    /// Appends the result of an op. The rule is dropped when no parent needs
    /// a gradient.
    pub(crate) fn record<F>(&self, value: Tensor, parents: &[Var<'_>], vjp: F) -> Var<'_>
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        debug_assert!(parents.iter().all(|p| std::ptr::eq(p.tape, self)));
        let requires_grad = self.grad_enabled && parents.iter().any(|p| p.requires_grad());
        let (ids, rule): (Vec<usize>, Option<VjpFn>) = if requires_grad {
            (parents.iter().map(|p| p.id).collect(), Some(Box::new(vjp)))
        } else {
            (Vec::new(), None)
        };
        self.push_node(value, ids, requires_grad, rule)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Reverse sweep from a scalar. Every node reachable from `self` gets the
    /// sum of its vector-Jacobian contributions; unreachable nodes get none.
    pub fn backward(&self) -> Result<Gradients> {
        let nodes = self.tape.nodes.borrow();
        let root = &nodes[self.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if root.requires_grad {
            grads[self.id] = Some(Tensor::ones(root.value.shape()));
        }
        for id in (0..=self.id).rev() {
            let node = &nodes[id];
            let Some(rule) = node.vjp.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].as_ref() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let contributions = rule(g, &needs);
            debug_assert_eq!(contributions.len(), node.parents.len());
            for ((&parent, contribution), need) in
                node.parents.iter().zip(contributions).zip(needs)
            {
                let Some(c) = contribution else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(c.shape(), nodes[parent].value.shape(), "vjp shape");
                match &mut grads[parent] {
                    Some(acc) => acc.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Result of [`Var::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient with respect to `var`, zeros when it was not reachable.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let g = w.sum().backward().unwrap();
        assert_eq!(g.wrt(w).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(w.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::from_vec(vec![5.0]));
        let g = a.sum().backward().unwrap();
        assert!(g.get(b).is_none());
        assert_eq!(g.wrt(b).data(), &[0.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f = sum(w * w + w) -> df/dw = 2w + 1
        let tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let f = w.mul(w).unwrap().add(w).unwrap().sum();
        let g = f.backward().unwrap();
        assert_eq!(g.wrt(w).data(), &[3.0, 5.0]);
    }

    #[test]
    fn constants_do_not_record_rules() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::from_vec(vec![1.0]));
        let d = c.scale(2.0);
        assert!(!d.requires_grad());
    }

    #[test]
    fn no_grad_tape_records_values() {
        let tape = Tape::no_grad();
        let w = tape.leaf(Tensor::from_vec(vec![3.0]));
        let y = w.mul(w).unwrap();
        assert_eq!(y.value().data(), &[9.0]);
        assert!(!y.requires_grad());
    }
}
