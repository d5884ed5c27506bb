//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every differentiable operation pushes one node holding its output value,
//! the ids of its inputs and a backward closure. [`Tape::backward`] walks the
//! nodes in exact reverse push order, so a node's gradient is complete before
//! its backward closure runs.

use std::sync::atomic::{AtomicU64, Ordering};

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    pub(crate) id: usize,
    tape: u64,
}

/// What a backward closure gets to see.
pub struct BackCtx<'a> {
    pub grad: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    /// Whether each input needs a gradient; closures may skip the others.
    pub wants: Vec<bool>,
}

pub trait Backward: Send + Sync {
    fn backward(&self, ctx: &BackCtx<'_>) -> Result<Vec<Option<Tensor>>>;
}

impl<F> Backward for F
where
    F: Fn(&BackCtx<'_>) -> Result<Vec<Option<Tensor>>> + Send + Sync,
{
    fn backward(&self, ctx: &BackCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        self(ctx)
    }
}

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    op: Option<Box<dyn Backward>>,
    name: &'static str,
    param: Option<String>,
    needs_grad: bool,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradients of every parameter leaf, in registration order.
    pub fn params(&self) -> impl Iterator<Item = (&str, Option<&Tensor>)> {
        self.params
            .iter()
            .map(|(name, id)| (name.as_str(), self.grads[*id].as_ref()))
    }

    /// Adds parameter gradients into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (name, grad) in self.params() {
            if let Some(g) = grad {
                store.accumulate(name, g)?;
            }
        }
        Ok(())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_node(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(Node {
            value,
            inputs: vec![],
            op: None,
            name: "leaf",
            param: None,
            needs_grad: true,
        })
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(Node {
            value,
            inputs: vec![],
            op: None,
            name: "constant",
            param: None,
            needs_grad: false,
        })
    }

    /// Records a named parameter from `store` as a gradient-carrying leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store
            .value(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))?
            .clone();
        Ok(self.push_node(Node {
            value,
            inputs: vec![],
            op: None,
            name: "param",
            param: Some(name.to_string()),
            needs_grad: true,
        }))
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.id].value
    }

    /// Records the result of a differentiable operation.
    pub fn push(
        &mut self,
        name: &'static str,
        value: Tensor,
        inputs: &[Var],
        op: impl Backward + 'static,
    ) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.id].needs_grad);
        Ok(self.push_node(Node {
            value,
            inputs: inputs.iter().map(|v| v.id).collect(),
            op: needs_grad.then(|| Box::new(op) as Box<dyn Backward>),
            name,
            param: None,
            needs_grad,
        }))
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let loss_value = &self.nodes[loss.id].value;
        if loss_value.len() != 1 {
            return Err(Error::NotScalar(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(loss_value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &self.nodes[id];
            let Some(op) = &node.op else { continue };
            let Some(grad) = grads[id].take() else { continue };
            let ctx = BackCtx {
                grad: &grad,
                inputs: node.inputs.iter().map(|&i| &self.nodes[i].value).collect(),
                output: &node.value,
                wants: node
                    .inputs
                    .iter()
                    .map(|&i| self.nodes[i].needs_grad)
                    .collect(),
            };
            let input_grads = op.backward(&ctx)?;
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input].needs_grad {
                    continue;
                }
                if !g.all_finite() {
                    return Err(Error::NonFinite(node.name));
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
            // Keep leaf gradients; interior ones are dropped as we go.
            if node.op.is_none() {
                grads[id] = Some(grad);
            }
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.clone().map(|p| (p, i)))
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            params,
        })
    }

    /// Back-propagates and accumulates parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.backward(loss)?.accumulate_into(store)
    }
}
