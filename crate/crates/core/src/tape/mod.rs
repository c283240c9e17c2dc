//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied during a forward pass
//! together with a closure computing the vector-Jacobian product of
//! that operation. [`Graph::backward`] walks the tape in reverse.
//!
//! Nodes whose inputs are all constants are recorded without a backward
//! closure, so frozen sub-networks cost nothing during backpropagation.
//!
//! ```
//! use matchreg::tape::Graph;
//! use matchreg::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.mul(x, x);
//! let grads = g.backward(y);
//! assert_eq!(g.value(y).item(), 9.0);
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

mod conv;
mod ops;

pub use conv::{box_sum_grid, window_counts};

use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs available to a backward closure.
pub struct Ctx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad: &'a Tensor,
    /// Whether each input requires a gradient; closures may skip work for
    /// inputs that do not.
    pub needs: Vec<bool>,
}

pub type BackwardFn = Box<dyn Fn(&Ctx) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that requires one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
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

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, inputs: Vec::new(), requires_grad, backward: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an operation. The backward closure is dropped when no input
    /// requires a gradient.
    pub fn push(&mut self, value: Tensor, inputs: Vec<Var>, backward: BackwardFn) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let backward = if requires_grad { Some(backward) } else { None };
        self.nodes.push(Node { value, inputs, requires_grad, backward });
        Var(self.nodes.len() - 1)
    }

    /// Backpropagates from `root`, which must hold a single element.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward() needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Gradients { grads };
        }
        let root_shape = self.nodes[root.0].value.shape().to_vec();
        grads[root.0] = Some(Tensor::full(root_shape, 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            // Leaves have no closure and keep their gradient; intermediates
            // are released once propagated.
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let ctx = Ctx {
                inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                output: &node.value,
                grad: &grad,
                needs: node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect(),
            };
            let input_grads = backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    g.shape(),
                    self.nodes[input.0].value.shape(),
                    "gradient shape mismatch for node {}",
                    input.0
                );
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_do_not_record_backward() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.constant(Tensor::scalar(5.0));
        let c = g.mul(a, b);
        assert!(!g.requires_grad(c));
        let grads = g.backward(c);
        assert!(grads.get(a).is_none());
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.5));
        let y = g.mul(x, x);
        let z = g.add(y, x);
        let grads = g.backward(z);
        assert!((grads.get(x).unwrap().item() - 4.0).abs() < 1e-15);
    }
}
