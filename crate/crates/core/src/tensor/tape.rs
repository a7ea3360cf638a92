use std::collections::HashMap;

use super::Tensor;
use crate::error::{contract_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a backward rule gets to look at.
pub struct BackwardCtx<'a> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a [f32],
    /// Forward values of the parents, in the order they were recorded.
    pub inputs: &'a [&'a Tensor],
    /// Forward value of this node.
    pub output: &'a Tensor,
    /// Which parents actually need a gradient.
    pub needs: &'a [bool],
}

/// Returns one optional gradient per parent, each the parent's length.
pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f32>>> + Send>;

struct Node {
    op: &'static str,
    value: Option<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Reverse-mode differentiation record.
///
/// Nodes are appended as operations execute, so every parent precedes its
/// consumers. [`Tape::backward`] consumes the tape and walks it once in
/// reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: "leaf",
            value: Some(t),
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    /// A differentiable input; its gradient is reported by `backward`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0]
            .value
            .as_ref()
            .expect("tape values are only released by backward")
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records the result of an operation.
    ///
    /// The backward rule is kept only if some parent requires a gradient.
    /// Non-finite outputs are rejected with [`Error::Numeric`].
    pub fn record<F>(&mut self, op: &'static str, value: Tensor, parents: &[Var], backward: F) -> Result<Var>
    where
        F: Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f32>>> + Send + 'static,
    {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("{op} produced a non-finite value")));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value: Some(value),
            parents: parents.iter().map(|p| p.0).collect(),
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Propagates gradients from a scalar `loss` back to every leaf that
    /// requires one. Intermediate values are released as the walk proceeds.
    pub fn backward(mut self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        let loss_value = root.value.as_ref().expect("live value");
        if loss_value.numel() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = HashMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                self.nodes[i].value = None;
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if node.backward.is_none() {
                let value = node.value.as_ref().expect("live value");
                leaf_grads.insert(i, Tensor::from_parts(value.shape().to_vec(), g));
                continue;
            }
            let parent_grads = {
                let inputs: Vec<&Tensor> = node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].value.as_ref().expect("parent value is live"))
                    .collect();
                let needs: Vec<bool> = node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].requires_grad)
                    .collect();
                let ctx = BackwardCtx {
                    grad: &g,
                    inputs: &inputs,
                    output: node.value.as_ref().expect("live value"),
                    needs: &needs,
                };
                (node.backward.as_ref().expect("checked above"))(&ctx)
            };
            let op = node.op;
            let parents = node.parents.clone();
            for (p, pg) in parents.into_iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                if pg.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "backward of {op} produced a non-finite gradient"
                    )));
                }
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&pg) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
            self.nodes[i].value = None;
            self.nodes[i].backward = None;
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

/// Gradients of the loss with respect to the tape's differentiable leaves.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    /// `None` when the leaf does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v.0)
    }

    /// Gradient, or zeros shaped like `like` when the leaf was unreachable.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }

    pub fn remove(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v.0)
    }
}
