use std::sync::Arc;

use super::ops::{self, Primitive, Saved, ScalarFunction};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Entry {
    value: Tensor,
    /// `None` for leaves.
    prim: Option<Primitive>,
    inputs: Vec<NodeId>,
    saved: Saved,
    requires_grad: bool,
}

/// Linear record of primitive applications, replayed in reverse by
/// [`Tape::backward`]. Entries are appended in evaluation order, so the tape is
/// topologically sorted by construction.
#[derive(Default)]
pub struct Tape {
    entries: Vec<Entry>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Registers a trainable leaf; gradients are reported for it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, true)
    }

    /// Registers a constant leaf; no gradient is propagated into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.entries.push(Entry {
            value,
            prim: None,
            inputs: Vec::new(),
            saved: Saved::None,
            requires_grad,
        });
        NodeId(self.entries.len() - 1)
    }

    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.entries[node.0].value
    }

    /// Evaluates `prim` on recorded inputs and appends the application.
    pub fn apply(&mut self, prim: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Tensor> = inputs.iter().map(|n| &self.entries[n.0].value).collect();
        let (value, saved) = ops::forward(&prim, &values)?;
        let requires_grad = inputs.iter().any(|n| self.entries[n.0].requires_grad);
        self.entries.push(Entry {
            value,
            prim: Some(prim),
            inputs: inputs.to_vec(),
            saved,
            requires_grad,
        });
        Ok(NodeId(self.entries.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.apply(Primitive::Scale(factor), &[a])
    }

    pub fn concat_last_dim(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(Primitive::ConcatLastDim, parts)
    }

    /// Splits the last axis into consecutive pieces of the given widths.
    pub fn split_last_dim(&mut self, x: NodeId, widths: &[usize]) -> Result<Vec<NodeId>> {
        let total: usize = widths.iter().sum();
        if total != self.value(x).last_dim() {
            return Err(Error::shape(
                "split_last_dim",
                format!("widths {widths:?} do not cover {:?}", self.value(x).shape()),
            ));
        }
        let mut offset = 0;
        let mut out = Vec::with_capacity(widths.len());
        for &width in widths {
            out.push(self.apply(Primitive::SplitLastDim { offset, width }, &[x])?);
            offset += width;
        }
        Ok(out)
    }

    pub fn softmax_last_dim(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::SoftmaxLastDim, &[x])
    }

    pub fn log_softmax_last_dim(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::LogSoftmaxLastDim, &[x])
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        self.apply(Primitive::LayerNorm { eps }, &[x, gain, bias])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn transpose_last_two(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::TransposeLastTwo, &[x])
    }

    pub fn embedding_lookup(&mut self, table: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        self.apply(Primitive::EmbeddingLookup { indices }, &[table])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sum, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Mean, &[x])
    }

    pub fn fused(&mut self, f: Arc<dyn ScalarFunction>, inputs: &[NodeId]) -> Result<NodeId> {
        self.apply(Primitive::Fused(f), inputs)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = &self.entries[loss.0].value;
        if loss_value.rank() != 0 {
            return Err(Error::NotScalar(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.entries.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let entry = &self.entries[idx];
            let Some(prim) = &entry.prim else { continue };
            if !entry.requires_grad {
                continue;
            }
            let Some(dout) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor> = entry.inputs.iter().map(|n| &self.entries[n.0].value).collect();
            let wanted: Vec<bool> = entry
                .inputs
                .iter()
                .map(|n| self.entries[n.0].requires_grad)
                .collect();
            let local = ops::backward(prim, &inputs, &entry.value, &entry.saved, &dout, &wanted);
            for (input, g) in entry.inputs.iter().zip(local) {
                let Some(g) = g else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let shapes = self
            .entries
            .iter()
            .map(|e| e.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    /// Re-evaluates every recorded application from the leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.entries.len());
        for entry in &self.entries {
            let value = match &entry.prim {
                None => entry.value.clone(),
                Some(prim) => {
                    let inputs: Vec<&Tensor> = entry.inputs.iter().map(|n| &values[n.0]).collect();
                    ops::forward(prim, &inputs)?.0
                }
            };
            values.push(value);
        }
        Ok(values)
    }

    pub fn recorded_values(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|e| &e.value)
    }
}

/// Result of [`Tape::backward`]: gradient of the loss with respect to leaves.
/// Intermediate gradients are released during the sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `node`; zeros when the node does not influence the loss.
    pub fn get(&self, node: NodeId) -> Tensor {
        match self.grads.get(node.0).and_then(Option::as_ref) {
            Some(g) => Tensor::from_parts(self.shapes[node.0].clone(), g.clone()),
            None => Tensor::zeros(&self.shapes[node.0]),
        }
    }

    pub fn take(&mut self, node: NodeId) -> Option<Vec<f64>> {
        self.grads.get_mut(node.0).and_then(Option::take)
    }
}
