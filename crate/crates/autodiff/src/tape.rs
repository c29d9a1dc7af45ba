use crate::error::{Error, Result};
use crate::kernels::ConvGeom;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// What produced a node, plus anything its backward rule needs.
#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Shift(Var),
    MatMul(Var, Var),
    Conv2d { input: Var, weight: Var, geom: ConvGeom, cols: Vec<f32> },
    GlobalAvgPool(Var),
    Relu(Var),
    LeakyRelu(Var, f32),
    Tanh(Var),
    Sigmoid(Var),
    BatchNorm { input: Var, inv_std: Vec<f32>, train: bool },
    ChannelAffine { input: Var, gamma: Var, beta: Var },
    SumAll(Var),
    MeanAll(Var),
    SumAxis { input: Var, axis: usize },
    Reshape(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f32> },
    BceWithLogits { logits: Var, targets: Vec<f32> },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub value: Tensor,
    pub requires_grad: bool,
    pub op: Op,
}

/// Record of executed ops, in execution (hence topological) order.
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    bindings: Vec<(ParamId, Var)>,
    consumed: bool,
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
    bindings: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(var.0).and_then(Option::as_ref)
    }

    /// Accumulate the gradient of every bound parameter into the store.
    pub fn apply(&self, store: &mut ParamStore) -> Result<()> {
        for &(id, var) in &self.bindings {
            if let Some(g) = self.get(var) {
                store.get_mut(id).accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drop every recorded node so the tape can record a new forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.bindings.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Record a parameter as a leaf; its gradient flows back to the store
    /// through [`Gradients::apply`]. Frozen parameters are recorded without
    /// a gradient.
    pub fn bind(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let var = self.leaf(p.value.clone(), p.trainable);
        if p.trainable {
            self.bindings.push((id, var));
        }
        var
    }

    pub(crate) fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { leaves, bindings: self.bindings.clone() })
    }

    fn propagate(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        use crate::ops::{conv, elementwise as ew, linalg, loss, norm};
        let node = &self.nodes[i];
        let mut sink = GradSink { nodes: &self.nodes, grads };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => ew::add_backward(&mut sink, *a, *b, &node.value, g, 1.0),
            Op::Sub(a, b) => ew::add_backward(&mut sink, *a, *b, &node.value, g, -1.0),
            Op::Mul(a, b) => ew::mul_backward(&mut sink, *a, *b, &node.value, g),
            Op::Scale(x, f) => sink.add(*x, g.iter().map(|v| v * f).collect()),
            Op::Shift(x) => sink.add(*x, g.to_vec()),
            Op::MatMul(a, b) => linalg::matmul_backward(&mut sink, *a, *b, g),
            Op::Conv2d { input, weight, geom, cols } => {
                conv::conv2d_backward(&mut sink, *input, *weight, geom, cols, g)
            }
            Op::GlobalAvgPool(x) => conv::gap_backward(&mut sink, *x, g),
            Op::Relu(x) => ew::relu_backward(&mut sink, *x, g),
            Op::LeakyRelu(x, slope) => ew::leaky_relu_backward(&mut sink, *x, *slope, g),
            Op::Tanh(x) => ew::tanh_backward(&mut sink, *x, &node.value, g),
            Op::Sigmoid(x) => ew::sigmoid_backward(&mut sink, *x, &node.value, g),
            Op::BatchNorm { input, inv_std, train } => {
                norm::batch_norm_backward(&mut sink, *input, &node.value, inv_std, *train, g)
            }
            Op::ChannelAffine { input, gamma, beta } => {
                norm::channel_affine_backward(&mut sink, *input, *gamma, *beta, g)
            }
            Op::SumAll(x) => sink.add(*x, vec![g[0]; sink.numel(*x)]),
            Op::MeanAll(x) => {
                let n = sink.numel(*x);
                sink.add(*x, vec![g[0] / n as f32; n])
            }
            Op::SumAxis { input, axis } => linalg::sum_axis_backward(&mut sink, *input, *axis, g),
            Op::Reshape(x) => sink.add(*x, g.to_vec()),
            Op::CrossEntropy { logits, labels, probs } => {
                loss::cross_entropy_backward(&mut sink, *logits, labels, probs, g[0])
            }
            Op::BceWithLogits { logits, targets } => {
                loss::bce_backward(&mut sink, *logits, targets, g[0])
            }
        }
    }
}

/// Accumulates upstream contributions into input gradient slots.
pub(crate) struct GradSink<'a> {
    pub nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f32>>],
}

impl GradSink<'_> {
    pub fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.numel()
    }

    pub fn add(&mut self, v: Var, contrib: Vec<f32>) {
        if !self.wants(v) {
            return;
        }
        debug_assert_eq!(contrib.len(), self.numel(v));
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
            slot @ None => *slot = Some(contrib),
        }
    }
}
