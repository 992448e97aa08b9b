//! Reverse-mode autodiff tape.
//!
//! Operations append nodes to an arena; each node stores its value, its
//! parent indices and a backward closure mapping the upstream gradient to
//! per-parent gradient contributions. `backward` walks the arena in reverse
//! creation order, so every node is visited after all of its consumers, and
//! fan-out gradients accumulate by summation.

use std::cell::RefCell;

use crate::autodiff::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Cheap to copy; only meaningful with the
/// tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) type BackwardFn<F> = Box<dyn Fn(&Tensor<F>) -> Vec<Tensor<F>>>;

struct Node<F: Real> {
    value: Tensor<F>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<F>>,
    needs_grad: bool,
}

/// Gradient arena produced by [`Tape::backward`].
pub struct Gradients<F: Real> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of the loss w.r.t. `v`, if any reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Remove and return the gradient for `v`.
    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Recording arena for one forward/backward pass.
pub struct Tape<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record an input tensor. Gradients flow into it iff `requires_grad`.
    pub fn leaf(&self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, vec![], None, requires_grad)
    }

    /// Record an input that never receives gradients (data, labels, masks).
    pub fn constant(&self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Clone of the value held at `v`.
    pub fn value(&self, v: Var) -> Tensor<F> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Shape of the value held at `v`.
    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Append an op node. The backward closure is dropped when no parent
    /// tracks gradients, so untracked subgraphs cost nothing on the way back.
    pub(crate) fn push_op(
        &self,
        value: Tensor<F>,
        parents: Vec<Var>,
        backward: BackwardFn<F>,
    ) -> Var {
        let idx: Vec<usize> = parents.iter().map(|p| p.0).collect();
        let needs = {
            let nodes = self.nodes.borrow();
            idx.iter().any(|&p| nodes[p].needs_grad)
        };
        let back = if needs { Some(backward) } else { None };
        self.push(value, idx, back, needs)
    }

    fn push(
        &self,
        value: Tensor<F>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<F>>,
        needs_grad: bool,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents, backward, needs_grad });
        Var(nodes.len() - 1)
    }

    /// Reverse pass from a scalar loss. Returns gradients for every node the
    /// loss reaches; vars with no path to the loss simply have none.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let nodes = self.nodes.borrow();
        let root = nodes.get(loss.0).ok_or_else(|| {
            Error::Structure(format!("backward: var {} not on this tape", loss.0))
        })?;
        if root.value.len() != 1 {
            return Err(Error::Structure(format!(
                "backward requires a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }

        let mut grads: Vec<Option<Tensor<F>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::full(root.value.shape(), F::one()));

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            let node = &nodes[i];
            let Some(back) = &node.backward else { continue };
            let upstream = grads[i].as_ref().unwrap();
            let contributions = back(upstream);
            debug_assert_eq!(contributions.len(), node.parents.len());
            for (&p, gp) in node.parents.iter().zip(contributions) {
                if !nodes[p].needs_grad {
                    continue;
                }
                if gp.shape() != nodes[p].value.shape() {
                    return Err(Error::Structure(format!(
                        "backward produced gradient shape {:?} for parent shape {:?}",
                        gp.shape(),
                        nodes[p].value.shape()
                    )));
                }
                match grads[p].as_mut() {
                    Some(acc) => acc.add_assign(&gp)?,
                    None => grads[p] = Some(gp),
                }
            }
            // An op node's own gradient is no longer needed once propagated;
            // free it so long tapes don't hold every intermediate alive.
            if !node.parents.is_empty() {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }
}
