use std::sync::atomic::{AtomicU64, Ordering};

use super::{Real, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of one particular [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Vector-Jacobian product of one recorded op.
pub trait Backward<T: Real> {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the gradient of the output. Entries
    /// for inputs with `needs[i] == false` may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

struct Node<T: Real> {
    value: Tensor<T>,
    inputs: Vec<usize>,
    op: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
    is_leaf: bool,
}

/// Append-only tape. Every node's inputs precede it, so a reverse scan is a
/// valid topological order.
pub struct Graph<T: Real> {
    id: u64,
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        self.leaf_grads.push(None);
        Var { graph: self.id, index: self.nodes.len() - 1 }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Node { value, inputs: Vec::new(), op: None, requires_grad, is_leaf: true })
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub(crate) fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::DetachedGraph(format!("variable #{} belongs to another graph", v.index)));
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let i = self.check(v).expect("variable from this graph");
        &self.nodes[i].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.check(v).map(|i| self.nodes[i].requires_grad).unwrap_or(false)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        let i = self.check(v).ok()?;
        self.leaf_grads[i].as_ref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    /// Records `output = op(inputs)`. Rejects non-finite results.
    pub fn apply(&mut self, op: Box<dyn Backward<T>>, inputs: &[Var], output: Tensor<T>) -> Result<Var> {
        let mut idx = Vec::with_capacity(inputs.len());
        for &v in inputs {
            idx.push(self.check(v)?);
        }
        if !output.all_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let requires_grad = idx.iter().any(|&i| self.nodes[i].requires_grad);
        let (inputs, op) = if requires_grad { (idx, Some(op)) } else { (Vec::new(), None) };
        Ok(self.push(Node { value: output, inputs, op, requires_grad, is_leaf: false }))
    }

    /// Back-propagates from a scalar `loss`, adding into every reachable
    /// leaf gradient. Calling it twice doubles the gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.check(loss)?;
        let value = &self.nodes[root].value;
        if value.numel() != 1 {
            return Err(Error::NotScalar(value.shape().to_vec()));
        }
        if !self.nodes[root].requires_grad {
            return Err(Error::DetachedGraph("loss does not depend on any differentiable leaf".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root + 1];
        grads[root] = Some(Tensor::full(value.shape(), T::one()));

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.is_leaf {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            let Some(op) = &node.op else { continue };
            let needs: Vec<bool> = node.inputs.iter().map(|&j| self.nodes[j].requires_grad).collect();
            let values: Vec<&Tensor<T>> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let input_grads = op.backward(&values, &node.value, &g, &needs)?;
            for ((&j, gi), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let (Some(gi), true) = (gi, need) else { continue };
                debug_assert_eq!(gi.shape(), self.nodes[j].value.shape(), "{} grad shape", op.name());
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(())
    }
}
