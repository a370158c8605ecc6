//! Reverse-mode gradient tape over the network primitives. A forward pass
//! records each primitive application together with its input values;
//! replaying the records in reverse yields gradients for every parameter slot
//! touched and for every input tensor.

use crate::adam::adam_step;
use crate::adam::AdamState;
use crate::conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvLayer};
use crate::error::{Error, Result};
use crate::tensor::{
    concat_channels, concat_channels_backward, maxpool2x2, maxpool2x2_backward, relu,
    relu_backward, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Conv { input: NodeId, slot: usize },
    Relu { input: NodeId },
    MaxPool { input: NodeId },
    Concat { inputs: Vec<NodeId>, splits: Vec<usize> },
}

/// Ordered record of primitive applications from one forward pass.
pub struct GradTape<'p> {
    params: &'p [ConvLayer],
    ops: Vec<Op>,
    values: Vec<Tensor>,
}

/// Gradients produced by a backward sweep: one `ConvGrads` per parameter
/// slot (zero where the slot was never used) and one gradient tensor per
/// recorded node.
#[derive(Debug)]
pub struct TapeGrads {
    pub param_grads: Vec<ConvGrads>,
    node_grads: Vec<Option<Tensor>>,
}

impl TapeGrads {
    pub fn node_grad(&self, id: NodeId) -> Option<&Tensor> {
        self.node_grads[id.0].as_ref()
    }

    /// Flatten the per-layer gradients in slot order, weights then bias,
    /// congruent to [`flatten_params`].
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for g in &self.param_grads {
            out.extend_from_slice(&g.weights);
            out.extend_from_slice(&g.bias);
        }
        out
    }
}

impl<'p> GradTape<'p> {
    pub fn new(params: &'p [ConvLayer]) -> Self {
        GradTape {
            params,
            ops: Vec::new(),
            values: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.ops.len());
        self.ops.push(op);
        self.values.push(value);
        id
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn conv(&mut self, input: NodeId, slot: usize) -> Result<NodeId> {
        let layer = self
            .params
            .get(slot)
            .ok_or_else(|| Error::invalid_argument(format!("no parameter slot {}", slot)))?;
        let out = conv2d_forward(&self.values[input.0], layer)?;
        Ok(self.push(Op::Conv { input, slot }, out))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = relu(&self.values[input.0]);
        self.push(Op::Relu { input }, out)
    }

    pub fn maxpool(&mut self, input: NodeId) -> Result<NodeId> {
        let out = maxpool2x2(&self.values[input.0])?;
        Ok(self.push(Op::MaxPool { input }, out))
    }

    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = inputs.iter().map(|id| &self.values[id.0]).collect();
        let out = concat_channels(&tensors)?;
        let splits = tensors.iter().map(|t| t.channels()).collect();
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                splits,
            },
            out,
        ))
    }

    /// Run the tape backward from `output`, seeding it with `grad_out`.
    pub fn backward(&self, output: NodeId, grad_out: Tensor) -> Result<TapeGrads> {
        if self.ops.is_empty() {
            return Err(Error::InvalidState(
                "backward called with no recorded forward pass".into(),
            ));
        }
        if grad_out.shape() != self.values[output.0].shape() {
            return Err(Error::invalid_argument(format!(
                "backward seed shape {:?} does not match node value shape {:?}",
                grad_out.shape(),
                self.values[output.0].shape()
            )));
        }
        let mut node_grads: Vec<Option<Tensor>> = vec![None; self.ops.len()];
        node_grads[output.0] = Some(grad_out);
        let mut param_grads: Vec<ConvGrads> =
            self.params.iter().map(ConvGrads::zeros_like).collect();

        // node ids are topologically ordered by construction
        for idx in (0..=output.0).rev() {
            let Some(g) = node_grads[idx].take() else {
                continue;
            };
            match &self.ops[idx] {
                Op::Input => {
                    node_grads[idx] = Some(g);
                }
                Op::Conv { input, slot } => {
                    let (grads, grad_in) =
                        conv2d_backward(&self.values[input.0], &self.params[*slot], &g)?;
                    accumulate_conv(&mut param_grads[*slot], &grads);
                    accumulate(&mut node_grads[input.0], grad_in);
                }
                Op::Relu { input } => {
                    let grad_in = relu_backward(&self.values[input.0], &g);
                    accumulate(&mut node_grads[input.0], grad_in);
                }
                Op::MaxPool { input } => {
                    let grad_in = maxpool2x2_backward(&self.values[input.0], &g);
                    accumulate(&mut node_grads[input.0], grad_in);
                }
                Op::Concat { inputs, splits } => {
                    for (inp, grad_in) in inputs.iter().zip(concat_channels_backward(&g, splits)) {
                        accumulate(&mut node_grads[inp.0], grad_in);
                    }
                }
            }
        }
        Ok(TapeGrads {
            param_grads,
            node_grads,
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        None => *slot = Some(delta),
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
    }
}

fn accumulate_conv(acc: &mut ConvGrads, delta: &ConvGrads) {
    for (a, b) in acc.weights.iter_mut().zip(&delta.weights) {
        *a += b;
    }
    for (a, b) in acc.bias.iter_mut().zip(&delta.bias) {
        *a += b;
    }
}

/// Flatten layer parameters in slot order, weights then bias per layer.
pub fn flatten_params(layers: &[ConvLayer]) -> Vec<f32> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(&l.weights);
        out.extend_from_slice(&l.bias);
    }
    out
}

/// Write a flat vector back into the layers; inverse of [`flatten_params`].
pub fn unflatten_params(layers: &mut [ConvLayer], flat: &[f32]) -> Result<()> {
    let expected: usize = layers.iter().map(|l| l.weights.len() + l.bias.len()).sum();
    if flat.len() != expected {
        return Err(Error::invalid_argument(format!(
            "flat parameter vector has length {}, layers need {}",
            flat.len(),
            expected
        )));
    }
    let mut off = 0;
    for l in layers.iter_mut() {
        let wn = l.weights.len();
        l.weights.copy_from_slice(&flat[off..off + wn]);
        off += wn;
        let bn = l.bias.len();
        l.bias.copy_from_slice(&flat[off..off + bn]);
        off += bn;
    }
    Ok(())
}

/// One optimizer step applied to a list of layers through the flat-vector
/// view the Adam state tracks.
pub fn adam_step_layers(
    layers: &mut [ConvLayer],
    grads: &TapeGrads,
    state: &mut AdamState,
) -> Result<()> {
    let mut flat = flatten_params(layers);
    let flat_grads = grads.flatten();
    adam_step(&mut flat, &flat_grads, state)?;
    unflatten_params(layers, &flat)
}
