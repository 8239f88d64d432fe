//! Reverse-mode automatic differentiation over an append-only computation
//! record.
//!
//! A [`Tape`] owns the record for one forward pass; every op appends a node
//! holding its output value plus whatever the backward rule needs. Handles
//! reference earlier entries only, so a single reverse sweep in push order is
//! a valid topological traversal. A tape is single-threaded; distinct tapes
//! may run on distinct threads.

use std::cell::RefCell;

use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op {
    Leaf { param: bool },
    Matmul,
    Add { rhs_shape: Vec<usize> },
    Sub { rhs_shape: Vec<usize> },
    Mul { rhs_shape: Vec<usize> },
    Scale(f64),
    Concat { axis: usize },
    Slice { axis: usize, start: usize, in_shape: Vec<usize> },
    Transpose { ax0: usize, ax1: usize },
    Reshape { in_shape: Vec<usize> },
    SumAxis { axis: usize, in_shape: Vec<usize> },
    MeanAxis { axis: usize, in_shape: Vec<usize> },
    SumAll { in_shape: Vec<usize> },
    MeanAll { in_shape: Vec<usize> },
    Softmax { axis: usize },
    LeakyRelu { slope: f64 },
    Gelu { tanh_term: Tensor },
    LayerNorm { axis: usize, xhat: Tensor, inv_std: Tensor },
    Embedding { indices: Vec<usize>, table_shape: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
}

/// Append-only record of one differentiable computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a recorded tensor on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, op: Op, inputs: Vec<usize>, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, inputs, value });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Record a constant input (no gradient requested).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf { param: false }, vec![], value)
    }

    /// Record a leaf parameter; `backward` reports a gradient for it.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf { param: true }, vec![], value)
    }

    /// Gradients of a scalar loss with respect to every recorded node,
    /// by reverse traversal of the record.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Data("backward: variable belongs to a different record".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got shape {:?}", nodes[loss.id].value.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf { .. } => {
                    grads[id] = Some(grad);
                    continue;
                }
                Op::Matmul => {
                    let a = &nodes[node.inputs[0]].value;
                    let b = &nodes[node.inputs[1]].value;
                    accumulate(&mut grads, node.inputs[0], tensor::matmul_grad_a(&grad, a, b));
                    accumulate(&mut grads, node.inputs[1], tensor::matmul_grad_b(&grad, a, b));
                }
                Op::Add { rhs_shape } => {
                    accumulate(&mut grads, node.inputs[1], tensor::reduce_to_suffix(&grad, rhs_shape));
                    accumulate(&mut grads, node.inputs[0], grad);
                }
                Op::Sub { rhs_shape } => {
                    let mut rg = tensor::reduce_to_suffix(&grad, rhs_shape);
                    rg.scale_assign(-1.0);
                    accumulate(&mut grads, node.inputs[1], rg);
                    accumulate(&mut grads, node.inputs[0], grad);
                }
                Op::Mul { rhs_shape } => {
                    let a = &nodes[node.inputs[0]].value;
                    let b = &nodes[node.inputs[1]].value;
                    let da = tensor::mul(&grad, b).expect("shape checked at forward");
                    let ga = tensor::mul(&grad, a).expect("shape checked at forward");
                    accumulate(&mut grads, node.inputs[1], tensor::reduce_to_suffix(&ga, rhs_shape));
                    accumulate(&mut grads, node.inputs[0], da);
                }
                Op::Scale(c) => {
                    accumulate(&mut grads, node.inputs[0], tensor::scale(&grad, *c));
                }
                Op::Concat { axis } => {
                    let mut start = 0;
                    for &inp in &node.inputs {
                        let len = nodes[inp].value.shape()[*axis];
                        let piece = tensor::slice(&grad, *axis, start, len).expect("concat bounds");
                        accumulate(&mut grads, inp, piece);
                        start += len;
                    }
                }
                Op::Slice { axis, start, in_shape } => {
                    accumulate(&mut grads, node.inputs[0], tensor::slice_grad(&grad, in_shape, *axis, *start));
                }
                Op::Transpose { ax0, ax1 } => {
                    accumulate(&mut grads, node.inputs[0], tensor::transpose(&grad, *ax0, *ax1).unwrap());
                }
                Op::Reshape { in_shape } => {
                    accumulate(&mut grads, node.inputs[0], grad.reshaped(in_shape.clone()).unwrap());
                }
                Op::SumAxis { axis, in_shape } => {
                    accumulate(&mut grads, node.inputs[0], tensor::unreduce_axis(&grad, in_shape, *axis, 1.0));
                }
                Op::MeanAxis { axis, in_shape } => {
                    let scale = 1.0 / in_shape[*axis] as f64;
                    accumulate(&mut grads, node.inputs[0], tensor::unreduce_axis(&grad, in_shape, *axis, scale));
                }
                Op::SumAll { in_shape } => {
                    accumulate(&mut grads, node.inputs[0], Tensor::full(in_shape, grad.item()));
                }
                Op::MeanAll { in_shape } => {
                    let scale = grad.item() / tensor::numel(in_shape) as f64;
                    accumulate(&mut grads, node.inputs[0], Tensor::full(in_shape, scale));
                }
                Op::Softmax { axis } => {
                    accumulate(&mut grads, node.inputs[0], tensor::softmax_grad(&grad, &node.value, *axis));
                }
                Op::LeakyRelu { slope } => {
                    let x = &nodes[node.inputs[0]].value;
                    accumulate(&mut grads, node.inputs[0], tensor::leaky_relu_grad(&grad, x, *slope));
                }
                Op::Gelu { tanh_term } => {
                    let x = &nodes[node.inputs[0]].value;
                    accumulate(&mut grads, node.inputs[0], tensor::gelu_grad(&grad, x, tanh_term));
                }
                Op::LayerNorm { axis, xhat, inv_std } => {
                    let gain = &nodes[node.inputs[1]].value;
                    let (dx, dgain, dbias) = tensor::layer_norm_grad(&grad, xhat, inv_std, gain, *axis);
                    accumulate(&mut grads, node.inputs[0], dx);
                    accumulate(&mut grads, node.inputs[1], dgain);
                    accumulate(&mut grads, node.inputs[2], dbias);
                }
                Op::Embedding { indices, table_shape } => {
                    accumulate(&mut grads, node.inputs[0], tensor::embedding_grad(&grad, table_shape, indices));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of a backward pass: per-node gradient tensors.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or a zero tensor if the loss does not
    /// depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(v.tape.nodes.borrow()[v.id].value.shape()),
        }
    }

    pub fn take(&mut self, v: Var<'_>) -> Tensor {
        self.grads[v.id]
            .take()
            .unwrap_or_else(|| Tensor::zeros(v.tape.nodes.borrow()[v.id].value.shape()))
    }
}

/// Model-wiring code validates shapes up front; a shape error surfacing here
/// is a bug, so the recorded-op layer panics with the kernel's message.
fn forward_ok<T>(r: Result<T>) -> T {
    r.unwrap_or_else(|err| panic!("{err}"))
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn with_values<R>(&self, ids: &[usize], f: impl FnOnce(&[&Tensor]) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        let vals: Vec<&Tensor> = ids.iter().map(|&i| &nodes[i].value).collect();
        f(&vals)
    }

    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        let v = self.with_values(&[self.id, other.id], |t| tensor::matmul(t[0], t[1]));
        self.tape.push(Op::Matmul, vec![self.id, other.id], forward_ok(v))
    }

    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        let (v, rhs) = self.with_values(&[self.id, other.id], |t| {
            (tensor::add(t[0], t[1]), t[1].shape().to_vec())
        });
        self.tape.push(Op::Add { rhs_shape: rhs }, vec![self.id, other.id], forward_ok(v))
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        let (v, rhs) = self.with_values(&[self.id, other.id], |t| {
            (tensor::sub(t[0], t[1]), t[1].shape().to_vec())
        });
        self.tape.push(Op::Sub { rhs_shape: rhs }, vec![self.id, other.id], forward_ok(v))
    }

    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        let (v, rhs) = self.with_values(&[self.id, other.id], |t| {
            (tensor::mul(t[0], t[1]), t[1].shape().to_vec())
        });
        self.tape.push(Op::Mul { rhs_shape: rhs }, vec![self.id, other.id], forward_ok(v))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = self.with_values(&[self.id], |t| tensor::scale(t[0], c));
        self.tape.push(Op::Scale(c), vec![self.id], v)
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of zero vars");
        let tape = parts[0].tape;
        let nodes = tape.nodes.borrow();
        let tensors: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.id].value).collect();
        let v = tensor::concat(&tensors, axis);
        drop(nodes);
        tape.push(Op::Concat { axis }, parts.iter().map(|p| p.id).collect(), forward_ok(v))
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let (v, in_shape) = self.with_values(&[self.id], |t| {
            (tensor::slice(t[0], axis, start, len), t[0].shape().to_vec())
        });
        self.tape.push(Op::Slice { axis, start, in_shape }, vec![self.id], forward_ok(v))
    }

    pub fn transpose(&self, ax0: usize, ax1: usize) -> Var<'t> {
        let v = self.with_values(&[self.id], |t| tensor::transpose(t[0], ax0, ax1));
        self.tape.push(Op::Transpose { ax0, ax1 }, vec![self.id], forward_ok(v))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Var<'t> {
        let (v, in_shape) = self.with_values(&[self.id], |t| {
            (t[0].reshaped(shape.clone()), t[0].shape().to_vec())
        });
        self.tape.push(Op::Reshape { in_shape }, vec![self.id], forward_ok(v))
    }

    pub fn sum_axis(&self, axis: usize) -> Var<'t> {
        let (v, in_shape) = self.with_values(&[self.id], |t| {
            (tensor::sum_axis(t[0], axis), t[0].shape().to_vec())
        });
        self.tape.push(Op::SumAxis { axis, in_shape }, vec![self.id], forward_ok(v))
    }

    pub fn mean_axis(&self, axis: usize) -> Var<'t> {
        let (v, in_shape) = self.with_values(&[self.id], |t| {
            (tensor::mean_axis(t[0], axis), t[0].shape().to_vec())
        });
        self.tape.push(Op::MeanAxis { axis, in_shape }, vec![self.id], forward_ok(v))
    }

    pub fn sum_all(&self) -> Var<'t> {
        let (v, in_shape) = self.with_values(&[self.id], |t| (tensor::sum_all(t[0]), t[0].shape().to_vec()));
        self.tape.push(Op::SumAll { in_shape }, vec![self.id], v)
    }

    pub fn mean_all(&self) -> Var<'t> {
        let (v, in_shape) = self.with_values(&[self.id], |t| (tensor::mean_all(t[0]), t[0].shape().to_vec()));
        self.tape.push(Op::MeanAll { in_shape }, vec![self.id], v)
    }

    pub fn softmax(&self, axis: usize) -> Var<'t> {
        let v = self.with_values(&[self.id], |t| tensor::softmax(t[0], axis));
        self.tape.push(Op::Softmax { axis }, vec![self.id], forward_ok(v))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t> {
        let v = self.with_values(&[self.id], |t| tensor::leaky_relu(t[0], slope));
        self.tape.push(Op::LeakyRelu { slope }, vec![self.id], v)
    }

    pub fn gelu(&self) -> Var<'t> {
        let (v, aux) = self.with_values(&[self.id], |t| tensor::gelu_with_aux(t[0]));
        self.tape.push(Op::Gelu { tanh_term: aux }, vec![self.id], v)
    }

    pub fn layer_norm(&self, axis: usize, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Var<'t> {
        let r = self.with_values(&[self.id, gain.id, bias.id], |t| {
            tensor::layer_norm_with_aux(t[0], axis, t[1], t[2], eps)
        });
        let (v, xhat, inv_std) = forward_ok(r);
        self.tape.push(
            Op::LayerNorm { axis, xhat, inv_std },
            vec![self.id, gain.id, bias.id],
            v,
        )
    }

    pub fn embedding_lookup(&self, indices: &[usize]) -> Var<'t> {
        let (v, table_shape) = self.with_values(&[self.id], |t| {
            (tensor::embedding_lookup(t[0], indices), t[0].shape().to_vec())
        });
        self.tape.push(
            Op::Embedding { indices: indices.to_vec(), table_shape },
            vec![self.id],
            forward_ok(v),
        )
    }
}
