//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Nodes whose
//! inputs are all constants are recorded without a backward closure, so
//! inference through a graph of constants costs no extra memory.

mod conv;
mod elementwise;
mod matmul;
mod norm;
mod reduce;
mod shape;

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::tensor::Tensor;

/// Maps the output gradient of a node to one optional gradient per parent.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(Node {
            value: Rc::new(value),
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        })
    }

    /// A leaf whose gradient is collected by [`Graph::backward`].
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.push_node(Node {
            value: Rc::new(value),
            requires_grad: true,
            parents: Vec::new(),
            backward: None,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Records an op. `backward` is dropped when no parent needs a gradient.
    pub(crate) fn record<'g>(
        &'g self,
        value: Tensor,
        parents: &[Var<'g>],
        backward: BackwardFn,
    ) -> Var<'g> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        self.push_node(Node {
            value: Rc::new(value),
            requires_grad,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then_some(backward),
        })
    }

    /// Reverse sweep from `root`, seeded with ones of `root`'s shape.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut pending: Vec<Option<Tensor>> = (0..=root.id).map(|_| None).collect();
        pending[root.id] = Some(Tensor::ones(nodes[root.id].value.shape().to_vec()));
        let mut leaves = HashMap::new();
        for id in (0..=root.id).rev() {
            let Some(grad) = pending[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = &node.backward else {
                leaves.insert(id, grad);
                continue;
            };
            let parent_grads = backward(&grad);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[pid].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[pid].value.shape(), "grad shape of node {pid}");
                match &mut pending[pid] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { leaves }
    }
}

/// Gradients of the variables reached by a backward sweep.
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.leaves.get(&var.id)
    }

    /// Gradient of `var`, or zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub(crate) fn same_graph(&self, other: &Var<'g>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars from different graphs"
        );
    }
}

#[cfg(test)]
pub(crate) mod testing {
    //! Central-difference gradient checking for single ops.

    use super::*;

    /// Checks d(sum(weights * f(inputs)))/d(inputs) against central differences.
    /// Returns the worst relative error.
    pub fn check<F>(inputs: &[Tensor], f: F) -> f64
    where
        F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
    {
        let eval = |ins: &[Tensor]| -> (f64, Vec<Tensor>) {
            let g = Graph::new();
            let vars: Vec<_> = ins.iter().map(|t| g.variable(t.clone())).collect();
            let out = f(&g, &vars);
            let val = out.value();
            // Fixed pseudo-random projection so every output element matters.
            let w = Tensor::from_fn(val.shape().to_vec(), |i| ((i as f64 + 1.0) * 0.618).sin() + 0.1);
            let loss: f64 = val.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
            let proj = out.mul(g.constant(w));
            let total = proj.sum();
            let grads = g.backward(total);
            (loss, vars.iter().map(|v| grads.get_or_zeros(*v)).collect())
        };
        let (_, analytic) = eval(inputs);
        let h = 1e-6;
        let mut worst = 0.0f64;
        for (i, t) in inputs.iter().enumerate() {
            for j in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= h;
                let num = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let ana = analytic[i].data()[j];
                let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-2);
                worst = worst.max(err);
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_record_no_backward() {
        let g = Graph::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = a.mul(a);
        assert!(!b.requires_grad());
        let v = g.variable(Tensor::scalar(3.0));
        let c = b.mul(v);
        assert!(c.requires_grad());
        let grads = g.backward(c);
        assert_eq!(grads.get(v).unwrap().item(), 4.0);
        assert!(grads.get(a).is_none());
    }

    #[test]
    fn fan_out_accumulates() {
        let g = Graph::new();
        let x = g.variable(Tensor::scalar(3.0));
        let y = x.mul(x).add(x);
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap().item(), 7.0);
    }
}
