//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends a node holding its forward value and the ids of
//! its inputs. Because nodes are only ever appended, the tape is always in
//! topological order and [`Tape::backward`] is a single reverse sweep.

mod conv;
mod kernels;
mod norm;
mod ops;

use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{reduce_to_shape, Element, Tensor};

pub use conv::{conv_out_extent, ConvGeom, Padding};
pub use norm::BatchStats;
pub use ops::softmax_rows;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T: Element> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Softmax { x: Var, axis: usize },
    SumAll(Var),
    SumAxis(Var),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, geom: ConvGeom },
    BatchNorm(norm::BatchNormNode<T>),
    MulConst { x: Var, factor: Tensor<T> },
    SpectralWeight { w: Var, u: Vec<T>, v: Vec<T>, sigma: T },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor<T> },
    Mse(Var, Var),
    GatherRows { x: Var, rows: Vec<usize> },
}

impl<T: Element> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) | Mse(a, b) => {
                vec![*a, *b]
            }
            Scale(x, _)
            | AddScalar(x)
            | Relu(x)
            | Sigmoid(x)
            | Exp(x)
            | Ln(x)
            | Sqrt(x)
            | Square(x)
            | SumAll(x)
            | SumAxis(x)
            | Reshape(x) => vec![*x],
            Softmax { x, .. } | Permute { x, .. } | MulConst { x, .. } | GatherRows { x, .. } => vec![*x],
            SpectralWeight { w, .. } => vec![*w],
            SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Concat { xs, .. } => xs.clone(),
            Conv2d { x, w, .. } | ConvTranspose2d { x, w, .. } => vec![*x, *w],
            BatchNorm(n) => vec![n.x, n.gamma, n.beta],
        }
    }
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records primitive applications for one forward pass.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient (inputs, targets, masks).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Appends a node whose gradient requirement is inherited from its inputs.
    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let rg = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    /// Forward identity that blocks every gradient into `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push_raw(value, Op::Leaf, false)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(shape));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            for (input, contrib) in self.local_grads(id, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                let expected = self.nodes[input.0].value.shape();
                let contrib = if contrib.shape() == expected { contrib } else { reduce_to_shape(&contrib, expected) };
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += *c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
            // keep intermediate gradients available for inspection
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, id: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[id];
        let y = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        use Op::*;
        Ok(match &node.op {
            Leaf => vec![],
            Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Mul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if rg(a) {
                    out.push((*a, kernels::mul_broadcast(g, val(b))?));
                }
                if rg(b) {
                    out.push((*b, kernels::mul_broadcast(g, val(a))?));
                }
                out
            }
            Div(a, b) => {
                let mut out = Vec::with_capacity(2);
                if rg(a) {
                    out.push((*a, kernels::div_broadcast(g, val(b))?));
                }
                if rg(b) {
                    // d(a/b)/db = -y / b
                    let gy = kernels::mul_broadcast(g, y)?;
                    let q = kernels::div_broadcast(&gy, val(b))?;
                    out.push((*b, q.map(|v| -v)));
                }
                out
            }
            Scale(x, s) => vec![(*x, g.map(|v| v * *s))],
            AddScalar(x) | Reshape(x) => {
                vec![(*x, Tensor::from_parts(val(x).shape().to_vec(), g.data().to_vec()))]
            }
            Relu(x) => vec![(*x, ops::relu_backward(val(x), g))],
            Sigmoid(x) => vec![(*x, kernels::zip_map(g, y, |g, y| g * y * (T::one() - y)))],
            Exp(x) => vec![(*x, kernels::zip_map(g, y, |g, y| g * y))],
            Ln(x) => vec![(*x, kernels::zip_map(g, val(x), |g, x| g / x))],
            Sqrt(x) => {
                let two = T::one() + T::one();
                vec![(*x, kernels::zip_map(g, y, |g, y| g / (two * y)))]
            }
            Square(x) => {
                let two = T::one() + T::one();
                vec![(*x, kernels::zip_map(g, val(x), |g, x| two * g * x))]
            }
            Softmax { x, axis } => vec![(*x, ops::softmax_backward(y, g, *axis))],
            SumAll(x) => vec![(*x, Tensor::full(val(x).shape(), g.item()))],
            SumAxis(x) => {
                // g has the kept-dim shape; broadcasting restores the axis
                let xs = val(x).shape();
                let mut full = Tensor::zeros(xs);
                kernels::add_broadcast_into(&mut full, g)?;
                vec![(*x, full)]
            }
            Permute { x, perm } => vec![(*x, ops::permute(g, &ops::invert_perm(perm)))],
            Concat { xs, axis } => {
                let shapes: Vec<&[usize]> = xs.iter().map(|v| val(v).shape()).collect();
                ops::split_concat_grad(g, &shapes, *axis).into_iter().zip(xs).map(|(t, v)| (*v, t)).collect()
            }
            MatMul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if rg(a) {
                    out.push((*a, kernels::matmul_nt(g, val(b))));
                }
                if rg(b) {
                    out.push((*b, kernels::matmul_tn(val(a), g)));
                }
                out
            }
            Conv2d { x, w, geom } => {
                let mut out = Vec::with_capacity(2);
                if rg(x) {
                    out.push((*x, conv::conv2d_backward_data(g, val(w), geom)));
                }
                if rg(w) {
                    out.push((*w, conv::conv2d_backward_weight(val(x), g, geom)));
                }
                out
            }
            ConvTranspose2d { x, w, geom } => {
                // forward was the data-adjoint of conv2d, so the roles swap
                let mut out = Vec::with_capacity(2);
                if rg(x) {
                    out.push((*x, conv::conv2d_forward(g, val(w), geom)));
                }
                if rg(w) {
                    out.push((*w, conv::conv2d_backward_weight(g, val(x), geom)));
                }
                out
            }
            BatchNorm(n) => n.backward(g, val(&n.gamma)),
            MulConst { x, factor } => vec![(*x, kernels::mul_broadcast(g, factor)?)],
            SpectralWeight { w, u, v, sigma } => {
                vec![(*w, ops::spectral_weight_backward(val(w), g, u, v, *sigma))]
            }
            SoftmaxCrossEntropy { logits, labels, probs } => {
                vec![(*logits, ops::softmax_xent_backward(probs, labels, g.item()))]
            }
            Mse(a, b) => {
                let n = T::from_usize(val(a).len()).unwrap();
                let two = T::one() + T::one();
                let scale = two * g.item() / n;
                let diff = kernels::zip_map(val(a), val(b), |a, b| (a - b) * scale);
                let mut out = Vec::with_capacity(2);
                if rg(b) {
                    out.push((*b, diff.map(|v| -v)));
                }
                out.push((*a, diff));
                out
            }
            GatherRows { x, rows } => vec![(*x, ops::gather_rows_backward(val(x), g, rows))],
        })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`; all-zero when `v` is not on a path to the loss.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
    }
}

static CORRUPT_RELU_BACKWARD: AtomicBool = AtomicBool::new(false);

/// Fault injection for the gradient-check tooling: when set, the relu
/// backward rule passes gradients through unmasked.
#[doc(hidden)]
pub fn set_relu_backward_fault(enabled: bool) {
    CORRUPT_RELU_BACKWARD.store(enabled, Ordering::SeqCst);
}

pub(crate) fn relu_fault_enabled() -> bool {
    CORRUPT_RELU_BACKWARD.load(Ordering::Relaxed)
}
