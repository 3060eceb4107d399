//! Tape-style reverse-mode automatic differentiation.
//!
//! A [`Graph`] owns every intermediate value of one forward pass. Ops append
//! nodes whose parents always precede them, so the tape order is a valid
//! topological order and the graph is acyclic by construction. Calling
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! additively into every node that requires them.

mod conv;
mod norm;
mod ops;

pub use norm::{BnMode, RunningStats};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a backward rule sees.
pub struct BackwardArgs<'a> {
    /// Gradient of the loss w.r.t. this node's output.
    pub grad: &'a Tensor,
    pub inputs: &'a [&'a Tensor],
    pub output: &'a Tensor,
    /// Which inputs actually need a gradient; rules may skip the others.
    pub needs: &'a [bool],
}

pub type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    op: &'static str,
    value: Tensor,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
    grad: Option<Tensor>,
}

pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never records backward rules; `param` behaves like
    /// `constant`.
    pub fn no_grad() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
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

    /// Inputs of the op that produced `v`.
    pub fn parents(&self, v: Var) -> impl Iterator<Item = Var> + '_ {
        self.nodes[v.0].parents.iter().map(|&p| Var(p))
    }

    /// Every node, in creation order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf("constant", value, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.leaf("param", value, rg)
    }

    fn leaf(&mut self, op: &'static str, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            parents: Vec::new(),
            requires_grad,
            backward: None,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, if backward reached this node.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// First node (in creation order) holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        self.nodes
            .iter()
            .position(|n| !n.value.is_finite())
            .map(|i| (Var(i), self.nodes[i].op))
    }

    /// Append a node with a caller-supplied backward rule. `backward` must
    /// return one entry per input, in order.
    pub fn custom(
        &mut self,
        op: &'static str,
        inputs: &[Var],
        value: Tensor,
        backward: impl Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>> + 'static,
    ) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite {
                op,
                node: self.nodes.len(),
            });
        }
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            parents: inputs.iter().map(|p| p.0).collect(),
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &mut self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let seed = Tensor::full(root.value.shape(), 1.0);
        accumulate(&mut root.grad, seed);

        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let (Some(rule), Some(grad)) = (&node.backward, &node.grad) else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &before[p].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| before[p].requires_grad)
                .collect();
            let grads = rule(&BackwardArgs {
                grad,
                inputs: &inputs,
                output: &node.value,
                needs: &needs,
            });
            debug_assert_eq!(grads.len(), node.parents.len(), "op {}", node.op);
            let parents = node.parents.clone();
            for (p, g) in parents.into_iter().zip(grads) {
                if let Some(g) = g {
                    if before[p].requires_grad {
                        debug_assert_eq!(g.shape(), before[p].value.shape());
                        accumulate(&mut before[p].grad, g);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}
