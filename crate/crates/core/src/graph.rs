//! Eager reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only tape: every primitive evaluates its forward
//! value immediately and records what its backward pass needs. Node ids are
//! assigned in creation order, so reverse id order is a valid reverse
//! topological order.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// Tag of a primitive. Each kind has a fixed arity and shape rule:
///
/// | kind | inputs | output shape |
/// |---|---|---|
/// | `Input` | 0 | given |
/// | `Conv2d` | x `N×C×H×W`, w `O×C×k×k`, b `O` | `N×O×⌊(H+2p−k)/s⌋+1×…` |
/// | `Conv2dTranspose` | x `N×I×h×w`, w `I×O×k×k`, b `O` | `N×O×((h−1)s−2p+k)×…` |
/// | `BatchNorm` | x `N×C(×H×W)`, γ `C`, β `C` | same as x |
/// | `GlobalAvgPool` | `N×C×H×W` | `N×C` |
/// | `Dense` | x `N×I`, w `O×I`, b `O` | `N×O` |
/// | `Concat` | a, b equal except on `axis` | summed along `axis` |
/// | `Add`, `Sub`, `Mul` | two equal shapes | same |
/// | `Sum`, `Mean` | any | scalar |
/// | `SumAxis` | any | `axis` removed |
/// | `L2Normalize` | any | same (unit fibres along `axis`) |
/// | `Softmax`, `LogSoftmax` | `N×C` | `N×C` |
/// | `MinReduce` | `N×C×H×W` | `N×1×H×W` (channel min, then window min) |
/// | `Select` | any | `len(indices)` (flat gather) |
/// | `PairwiseDistance` | `N×D` | `N×N` Euclidean |
/// | `SpatialDiff` | `N×C×H×W` | forward difference shrinks `axis` by one |
/// | unary kinds | any | same |
///
/// `ClampStopGrad` clamps its value and blocks all gradient flow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PrimitiveKind {
    Input,
    Conv2d,
    Conv2dTranspose,
    BatchNorm,
    Relu,
    GlobalAvgPool,
    Dense,
    Concat,
    Add,
    Sub,
    Mul,
    MulScalar,
    AddScalar,
    Abs,
    Sum,
    Mean,
    SumAxis,
    L2Normalize,
    Exp,
    Log,
    Softmax,
    LogSoftmax,
    Sigmoid,
    MinReduce,
    Clamp,
    ClampStopGrad,
    Select,
    PairwiseDistance,
    SpatialDiff,
}

impl PrimitiveKind {
    pub fn name(self) -> &'static str {
        use PrimitiveKind::*;
        match self {
            Input => "input",
            Conv2d => "conv2d",
            Conv2dTranspose => "conv2d_transpose",
            BatchNorm => "batch_norm",
            Relu => "relu",
            GlobalAvgPool => "global_avg_pool",
            Dense => "dense",
            Concat => "concat",
            Add => "add",
            Sub => "sub",
            Mul => "mul",
            MulScalar => "mul_scalar",
            AddScalar => "add_scalar",
            Abs => "abs",
            Sum => "sum",
            Mean => "mean",
            SumAxis => "sum_axis",
            L2Normalize => "l2_normalize",
            Exp => "exp",
            Log => "log",
            Softmax => "softmax",
            LogSoftmax => "log_softmax",
            Sigmoid => "sigmoid",
            MinReduce => "min_reduce",
            Clamp => "clamp",
            ClampStopGrad => "clamp_stopgrad",
            Select => "select",
            PairwiseDistance => "pairwise_distance",
            SpatialDiff => "spatial_diff",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Attribute bag for [`Graph::build_node`]. Unused fields are ignored.
#[derive(Clone, Debug)]
pub struct Attrs {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub epsilon: f64,
    pub mode: BnMode,
    pub running_mean: Option<Tensor>,
    pub running_var: Option<Tensor>,
    pub axis: usize,
    pub scalar: f64,
    pub lo: f64,
    pub hi: f64,
    pub patch: usize,
    pub indices: Vec<usize>,
    pub value: Option<Tensor>,
    pub requires_grad: bool,
}

impl Default for Attrs {
    fn default() -> Self {
        Attrs {
            kernel: 0,
            stride: 1,
            padding: 0,
            epsilon: 1e-5,
            mode: BnMode::Train,
            running_mean: None,
            running_var: None,
            axis: 0,
            scalar: 0.0,
            lo: f64::NEG_INFINITY,
            hi: f64::INFINITY,
            patch: 1,
            indices: Vec::new(),
            value: None,
            requires_grad: false,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Conv2d { stride: usize, pad: usize },
    Conv2dTranspose { stride: usize, pad: usize },
    BatchNorm { eps: f64, mode: BnMode, running: Option<(Tensor, Tensor)> },
    Relu,
    GlobalAvgPool,
    Dense,
    Concat { axis: usize },
    Add,
    Sub,
    Mul,
    MulScalar(f64),
    AddScalar(f64),
    Abs,
    Sum,
    Mean,
    SumAxis { axis: usize },
    L2Normalize { axis: usize },
    Exp,
    Log,
    Softmax,
    LogSoftmax,
    Sigmoid,
    MinReduce { patch: usize },
    Clamp { lo: f64, hi: f64 },
    ClampStopGrad { lo: f64, hi: f64 },
    Select { indices: Vec<usize> },
    PairwiseDistance,
    SpatialDiff { axis: usize },
}

impl Op {
    fn kind(&self) -> PrimitiveKind {
        use PrimitiveKind as K;
        match self {
            Op::Input => K::Input,
            Op::Conv2d { .. } => K::Conv2d,
            Op::Conv2dTranspose { .. } => K::Conv2dTranspose,
            Op::BatchNorm { .. } => K::BatchNorm,
            Op::Relu => K::Relu,
            Op::GlobalAvgPool => K::GlobalAvgPool,
            Op::Dense => K::Dense,
            Op::Concat { .. } => K::Concat,
            Op::Add => K::Add,
            Op::Sub => K::Sub,
            Op::Mul => K::Mul,
            Op::MulScalar(_) => K::MulScalar,
            Op::AddScalar(_) => K::AddScalar,
            Op::Abs => K::Abs,
            Op::Sum => K::Sum,
            Op::Mean => K::Mean,
            Op::SumAxis { .. } => K::SumAxis,
            Op::L2Normalize { .. } => K::L2Normalize,
            Op::Exp => K::Exp,
            Op::Log => K::Log,
            Op::Softmax => K::Softmax,
            Op::LogSoftmax => K::LogSoftmax,
            Op::Sigmoid => K::Sigmoid,
            Op::MinReduce { .. } => K::MinReduce,
            Op::Clamp { .. } => K::Clamp,
            Op::ClampStopGrad { .. } => K::ClampStopGrad,
            Op::Select { .. } => K::Select,
            Op::PairwiseDistance => K::PairwiseDistance,
            Op::SpatialDiff { .. } => K::SpatialDiff,
        }
    }
}

/// Forward-pass data kept for the backward pass.
#[derive(Clone, Debug, Default)]
enum Saved {
    #[default]
    None,
    BatchNorm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    Argmin(Vec<usize>),
    Norms(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct GraphNode {
    pub id: NodeId,
    pub kind: PrimitiveKind,
    pub inputs: Vec<NodeId>,
    pub value: Tensor,
    pub requires_grad: bool,
    op: Op,
    saved: Saved,
}

/// Gradient map produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `id`, or zeros of `shape` when no gradient reached it.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<GraphNode>,
    trace: Vec<String>,
}

fn geom_nchw(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(op, format!("expected N×C×H×W, got {shape:?}"))),
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    pub fn node(&self, id: NodeId) -> &GraphNode {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Free-form instrumentation log (e.g. which encoder saw which input).
    pub fn annotate(&mut self, tag: impl Into<String>) {
        self.trace.push(tag.into());
    }

    pub fn trace(&self) -> &[String] {
        &self.trace
    }

    /// Batch statistics (mean, biased variance) computed by a train-mode
    /// batch-norm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id.0].saved {
            Saved::BatchNorm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    /// Leaf holding a trainable value.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, vec![], value, Saved::None, true)
    }

    /// Leaf holding a constant.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, vec![], value, Saved::None, false)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, saved: Saved, leaf_grad: bool) -> NodeId {
        let requires_grad = match op {
            Op::Input => leaf_grad,
            Op::ClampStopGrad { .. } => false,
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        let id = NodeId(self.nodes.len());
        self.nodes.push(GraphNode {
            id,
            kind: op.kind(),
            inputs,
            value,
            requires_grad,
            op,
            saved,
        });
        id
    }

    /// Generic constructor: builds a node of `kind` from `inputs` and `attrs`.
    pub fn build_node(&mut self, kind: PrimitiveKind, inputs: &[NodeId], attrs: &Attrs) -> Result<NodeId> {
        use PrimitiveKind as K;
        let op = match kind {
            K::Input => {
                let v = attrs
                    .value
                    .clone()
                    .ok_or_else(|| Error::invalid("input node needs a value"))?;
                return Ok(if attrs.requires_grad { self.param(v) } else { self.constant(v) });
            }
            K::Conv2d | K::Conv2dTranspose => {
                if attrs.stride == 0 {
                    return Err(Error::invalid("stride must be positive"));
                }
                if kind == K::Conv2d {
                    Op::Conv2d { stride: attrs.stride, pad: attrs.padding }
                } else {
                    Op::Conv2dTranspose { stride: attrs.stride, pad: attrs.padding }
                }
            }
            K::BatchNorm => {
                let running = match (&attrs.running_mean, &attrs.running_var) {
                    (Some(m), Some(v)) => Some((m.clone(), v.clone())),
                    _ => None,
                };
                Op::BatchNorm { eps: attrs.epsilon, mode: attrs.mode, running }
            }
            K::Relu => Op::Relu,
            K::GlobalAvgPool => Op::GlobalAvgPool,
            K::Dense => Op::Dense,
            K::Concat => Op::Concat { axis: attrs.axis },
            K::Add => Op::Add,
            K::Sub => Op::Sub,
            K::Mul => Op::Mul,
            K::MulScalar => Op::MulScalar(attrs.scalar),
            K::AddScalar => Op::AddScalar(attrs.scalar),
            K::Abs => Op::Abs,
            K::Sum => Op::Sum,
            K::Mean => Op::Mean,
            K::SumAxis => Op::SumAxis { axis: attrs.axis },
            K::L2Normalize => Op::L2Normalize { axis: attrs.axis },
            K::Exp => Op::Exp,
            K::Log => Op::Log,
            K::Softmax => Op::Softmax,
            K::LogSoftmax => Op::LogSoftmax,
            K::Sigmoid => Op::Sigmoid,
            K::MinReduce => Op::MinReduce { patch: attrs.patch },
            K::Clamp => Op::Clamp { lo: attrs.lo, hi: attrs.hi },
            K::ClampStopGrad => Op::ClampStopGrad { lo: attrs.lo, hi: attrs.hi },
            K::Select => Op::Select { indices: attrs.indices.clone() },
            K::PairwiseDistance => Op::PairwiseDistance,
            K::SpatialDiff => Op::SpatialDiff { axis: attrs.axis },
        };
        self.apply(op, inputs)
    }

    fn arity(op: &Op) -> usize {
        match op {
            Op::Input => 0,
            Op::Conv2d { .. } | Op::Conv2dTranspose { .. } | Op::BatchNorm { .. } | Op::Dense => 3,
            Op::Concat { .. } | Op::Add | Op::Sub | Op::Mul => 2,
            _ => 1,
        }
    }

    fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        let kind = op.kind();
        if inputs.len() != Self::arity(&op) {
            return Err(Error::shape(
                kind.name(),
                format!("expected {} inputs, got {}", Self::arity(&op), inputs.len()),
            ));
        }
        let vals: Vec<&Tensor> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
        let (value, saved) = forward(&op, &vals)?;
        Ok(self.push(op, inputs.to_vec(), value, saved, false))
    }

    // Typed helpers -------------------------------------------------------

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        if stride == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        self.apply(Op::Conv2d { stride, pad }, &[x, w, b])
    }

    pub fn conv2d_transpose(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        if stride == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        self.apply(Op::Conv2dTranspose { stride, pad }, &[x, w, b])
    }

    pub fn batch_norm_train(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        self.apply(Op::BatchNorm { eps, mode: BnMode::Train, running: None }, &[x, gamma, beta])
    }

    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: Tensor,
        running_var: Tensor,
        eps: f64,
    ) -> Result<NodeId> {
        self.apply(
            Op::BatchNorm { eps, mode: BnMode::Eval, running: Some((running_mean, running_var)) },
            &[x, gamma, beta],
        )
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[x])
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::GlobalAvgPool, &[x])
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Dense, &[x, w, b])
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> Result<NodeId> {
        self.apply(Op::Concat { axis }, &[a, b])
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.concat(a, b, 1)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn mul_scalar(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        self.apply(Op::MulScalar(s), &[x])
    }

    pub fn add_scalar(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        self.apply(Op::AddScalar(s), &[x])
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Abs, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Mean, &[x])
    }

    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.apply(Op::SumAxis { axis }, &[x])
    }

    pub fn l2_normalize(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.apply(Op::L2Normalize { axis }, &[x])
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Exp, &[x])
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Log, &[x])
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Softmax, &[x])
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::LogSoftmax, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sigmoid, &[x])
    }

    /// Per-pixel channel minimum followed by a `patch × patch` window minimum
    /// over the valid sub-window.
    pub fn min_reduce(&mut self, x: NodeId, patch: usize) -> Result<NodeId> {
        self.apply(Op::MinReduce { patch }, &[x])
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.apply(Op::Clamp { lo, hi }, &[x])
    }

    pub fn clamp_stopgrad(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.apply(Op::ClampStopGrad { lo, hi }, &[x])
    }

    /// Gradient-free copy of `x`.
    pub fn stop_gradient(&mut self, x: NodeId) -> Result<NodeId> {
        self.clamp_stopgrad(x, f64::NEG_INFINITY, f64::INFINITY)
    }

    pub fn select(&mut self, x: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        self.apply(Op::Select { indices }, &[x])
    }

    pub fn pairwise_distance(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::PairwiseDistance, &[x])
    }

    pub fn spatial_diff(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.apply(Op::SpatialDiff { axis }, &[x])
    }

    // Diagnostics ----------------------------------------------------------

    pub fn first_non_finite(&self) -> Option<(NodeId, PrimitiveKind)> {
        self.nodes
            .iter()
            .find(|n| !n.value.all_finite())
            .map(|n| (n.id, n.kind))
    }

    /// Hash of every discrete branch taken in the forward pass (relu/abs
    /// signs, clamp regions, min/argmax picks, gather indices). Two forward
    /// passes with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for n in &self.nodes {
            match (&n.op, &n.saved) {
                (Op::Relu | Op::Abs, _) => {
                    let x = &self.nodes[n.inputs[0].0].value;
                    for &v in x.data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                (Op::Clamp { lo, hi } | Op::ClampStopGrad { lo, hi }, _) => {
                    let x = &self.nodes[n.inputs[0].0].value;
                    for &v in x.data() {
                        ((v < *lo) as u8 + 2 * (v > *hi) as u8).hash(&mut h);
                    }
                }
                (Op::Select { indices }, _) => indices.hash(&mut h),
                (_, Saved::Argmin(idx)) => idx.hash(&mut h),
                (Op::L2Normalize { .. }, Saved::Norms(norms)) => {
                    for &v in norms {
                        (v < L2_EPS).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_val = &self.nodes[root.0].value;
        if root_val.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", root_val.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(root_val.shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            let ins: Vec<&Tensor> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            let input_grads = backward_op(node, &ins, &dy)?;
            for (inp, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[inp.0].requires_grad {
                    continue;
                }
                match &mut grads[inp.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }
}

const L2_EPS: f64 = 1e-6;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn conv_geom(op: &'static str, x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize, transpose: bool) -> Result<(ConvGeom, usize, usize)> {
    let (n, c, h, wd) = geom_nchw(x.shape(), op)?;
    let [w0, w1, k, k2] = *w.shape() else {
        return Err(Error::shape(op, format!("weight must be rank 4, got {:?}", w.shape())));
    };
    if k == 0 || k != k2 {
        return Err(Error::shape(op, format!("kernel must be square and positive, got {k}×{k2}")));
    }
    if w0 != c {
        if !transpose {
            // conv weight is O×C×k×k
            if w1 != c {
                return Err(Error::shape(op, format!("input has {c} channels, weight expects {w1}")));
            }
        } else {
            return Err(Error::shape(op, format!("input has {c} channels, weight expects {w0}")));
        }
    }
    if transpose {
        if b.shape() != [w1] {
            return Err(Error::shape(op, format!("bias {:?} vs {w1} outputs", b.shape())));
        }
        let oh = (h - 1) * stride + k;
        let ow = (wd - 1) * stride + k;
        if oh < 2 * pad + 1 || ow < 2 * pad + 1 {
            return Err(Error::shape(op, "padding exceeds output size".to_string()));
        }
        let g = ConvGeom { channels: w1, height: oh - 2 * pad, width: ow - 2 * pad, kernel: k, stride, pad };
        debug_assert_eq!(g.out_height(), h);
        Ok((g, n, c))
    } else {
        if w1 != c {
            return Err(Error::shape(op, format!("input has {c} channels, weight expects {w1}")));
        }
        if b.shape() != [w0] {
            return Err(Error::shape(op, format!("bias {:?} vs {w0} outputs", b.shape())));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape(op, format!("kernel {k} larger than padded input {h}×{wd}")));
        }
        Ok((ConvGeom { channels: c, height: h, width: wd, kernel: k, stride, pad }, n, w0))
    }
}

fn bn_channels(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::shape("batch_norm", format!("expected N×C or N×C×H×W, got {:?}", x.shape()))),
    }
}

fn forward(op: &Op, v: &[&Tensor]) -> Result<(Tensor, Saved)> {
    let none = Saved::None;
    Ok(match op {
        Op::Input => unreachable!("inputs are created directly"),
        Op::Conv2d { stride, pad } => {
            let (g, n, out) = conv_geom("conv2d", v[0], v[1], v[2], *stride, *pad, false)?;
            let y = kernels::conv2d_forward(v[0].data(), n, &g, v[1].data(), v[2].data(), out);
            (Tensor::new(vec![n, out, g.out_height(), g.out_width()], y)?, none)
        }
        Op::Conv2dTranspose { stride, pad } => {
            let (g, n, cin) = conv_geom("conv2d_transpose", v[0], v[1], v[2], *stride, *pad, true)?;
            let y = kernels::conv_transpose_forward(v[0].data(), n, cin, &g, v[1].data(), v[2].data());
            (Tensor::new(vec![n, g.channels, g.height, g.width], y)?, none)
        }
        Op::BatchNorm { eps, mode, running } => {
            let (n, c, hw) = bn_channels(v[0])?;
            if v[1].shape() != [c] || v[2].shape() != [c] {
                return Err(Error::shape("batch_norm", format!("affine params must have {c} entries")));
            }
            let x = v[0].data();
            let m = (n * hw) as f64;
            let (mean, var) = match mode {
                BnMode::Train => {
                    let mut mean = vec![0.0; c];
                    let mut var = vec![0.0; c];
                    for i in 0..n {
                        for ch in 0..c {
                            let s = &x[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                            mean[ch] += s.iter().sum::<f64>();
                        }
                    }
                    mean.iter_mut().for_each(|a| *a /= m);
                    for i in 0..n {
                        for ch in 0..c {
                            let s = &x[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                            var[ch] += s.iter().map(|a| (a - mean[ch]).powi(2)).sum::<f64>();
                        }
                    }
                    var.iter_mut().for_each(|a| *a /= m);
                    (mean, var)
                }
                BnMode::Eval => {
                    let (rm, rv) = running
                        .as_ref()
                        .ok_or_else(|| Error::invalid("eval-mode batch_norm needs running stats"))?;
                    if rm.shape() != [c] || rv.shape() != [c] {
                        return Err(Error::shape("batch_norm", "running stats size".to_string()));
                    }
                    (rm.data().to_vec(), rv.data().to_vec())
                }
            };
            let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
            let (gamma, beta) = (v[1].data(), v[2].data());
            let mut xhat = vec![0.0; x.len()];
            let mut y = vec![0.0; x.len()];
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * hw;
                    for j in base..base + hw {
                        xhat[j] = (x[j] - mean[ch]) * inv_std[ch];
                        y[j] = gamma[ch] * xhat[j] + beta[ch];
                    }
                }
            }
            (
                Tensor::new(v[0].shape().to_vec(), y)?,
                Saved::BatchNorm { xhat, inv_std, mean, var },
            )
        }
        Op::Relu => (v[0].map(|x| x.max(0.0)), none),
        Op::GlobalAvgPool => {
            let (n, c, h, w) = geom_nchw(v[0].shape(), "global_avg_pool")?;
            let hw = h * w;
            let y = v[0].data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
            (Tensor::new(vec![n, c], y)?, none)
        }
        Op::Dense => {
            let [n, i] = *v[0].shape() else {
                return Err(Error::shape("dense", format!("input must be N×I, got {:?}", v[0].shape())));
            };
            let [o, wi] = *v[1].shape() else {
                return Err(Error::shape("dense", format!("weight must be O×I, got {:?}", v[1].shape())));
            };
            if wi != i || v[2].shape() != [o] {
                return Err(Error::shape("dense", format!("input {i} features, weight {:?}, bias {:?}", v[1].shape(), v[2].shape())));
            }
            let mut y = vec![0.0; n * o];
            for row in y.chunks_mut(o) {
                row.copy_from_slice(v[2].data());
            }
            kernels::gemm(n, i, o, v[0].data(), false, v[1].data(), true, 1.0, &mut y);
            (Tensor::new(vec![n, o], y)?, none)
        }
        Op::Concat { axis } => {
            let (a, b) = (v[0], v[1]);
            if a.rank() != b.rank() || *axis >= a.rank() {
                return Err(Error::shape("concat", format!("{:?} vs {:?} on axis {axis}", a.shape(), b.shape())));
            }
            for d in 0..a.rank() {
                if d != *axis && a.shape()[d] != b.shape()[d] {
                    return Err(Error::shape("concat", format!("{:?} vs {:?} on axis {axis}", a.shape(), b.shape())));
                }
            }
            let (outer, na, inner) = outer_inner(a.shape(), *axis);
            let nb = b.shape()[*axis];
            let mut y = Vec::with_capacity(a.numel() + b.numel());
            for o in 0..outer {
                y.extend_from_slice(&a.data()[o * na * inner..(o + 1) * na * inner]);
                y.extend_from_slice(&b.data()[o * nb * inner..(o + 1) * nb * inner]);
            }
            let mut shape = a.shape().to_vec();
            shape[*axis] = na + nb;
            (Tensor::new(shape, y)?, none)
        }
        Op::Add => {
            same_shape("add", v[0], v[1])?;
            (v[0].zip_map(v[1], |a, b| a + b)?, none)
        }
        Op::Sub => {
            same_shape("sub", v[0], v[1])?;
            (v[0].zip_map(v[1], |a, b| a - b)?, none)
        }
        Op::Mul => {
            same_shape("mul", v[0], v[1])?;
            (v[0].zip_map(v[1], |a, b| a * b)?, none)
        }
        Op::MulScalar(s) => (v[0].map(|x| x * s), none),
        Op::AddScalar(s) => (v[0].map(|x| x + s), none),
        Op::Abs => (v[0].map(f64::abs), none),
        Op::Sum => (Tensor::scalar(v[0].sum()), none),
        Op::Mean => (Tensor::scalar(v[0].mean()), none),
        Op::SumAxis { axis } => {
            if *axis >= v[0].rank() {
                return Err(Error::shape("sum_axis", format!("axis {axis} out of range for {:?}", v[0].shape())));
            }
            let (outer, len, inner) = outer_inner(v[0].shape(), *axis);
            let x = v[0].data();
            let mut y = vec![0.0; outer * inner];
            for o in 0..outer {
                for k in 0..len {
                    for i in 0..inner {
                        y[o * inner + i] += x[(o * len + k) * inner + i];
                    }
                }
            }
            let mut shape = v[0].shape().to_vec();
            shape.remove(*axis);
            (Tensor::new(shape, y)?, none)
        }
        Op::L2Normalize { axis } => {
            if *axis >= v[0].rank() {
                return Err(Error::shape("l2_normalize", format!("axis {axis} out of range for {:?}", v[0].shape())));
            }
            let (outer, len, inner) = outer_inner(v[0].shape(), *axis);
            let x = v[0].data();
            let mut norms = vec![0.0; outer * inner];
            let mut y = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let nrm = (0..len).map(|k| x[(o * len + k) * inner + i].powi(2)).sum::<f64>().sqrt();
                    norms[o * inner + i] = nrm;
                    if nrm >= L2_EPS {
                        for k in 0..len {
                            let j = (o * len + k) * inner + i;
                            y[j] = x[j] / nrm;
                        }
                    }
                }
            }
            (Tensor::new(v[0].shape().to_vec(), y)?, Saved::Norms(norms))
        }
        Op::Exp => (v[0].map(f64::exp), none),
        Op::Log => (v[0].map(f64::ln), none),
        Op::Softmax | Op::LogSoftmax => {
            let [n, c] = *v[0].shape() else {
                return Err(Error::shape("softmax", format!("expected N×C, got {:?}", v[0].shape())));
            };
            let mut y = vec![0.0; n * c];
            for (row, out) in v[0].data().chunks(c).zip(y.chunks_mut(c)) {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
                for (o, z) in out.iter_mut().zip(row) {
                    *o = if matches!(op, Op::LogSoftmax) { z - mx - lse } else { (z - mx - lse).exp() };
                }
            }
            (Tensor::new(vec![n, c], y)?, none)
        }
        Op::Sigmoid => (
            v[0].map(|x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }),
            none,
        ),
        Op::MinReduce { patch } => {
            if *patch == 0 || patch % 2 == 0 {
                return Err(Error::invalid(format!("min_reduce patch must be odd and positive, got {patch}")));
            }
            let (n, c, h, w) = geom_nchw(v[0].shape(), "min_reduce")?;
            let (y, idx) = min_reduce_forward(v[0].data(), n, c, h, w, *patch);
            (Tensor::new(vec![n, 1, h, w], y)?, Saved::Argmin(idx))
        }
        Op::Clamp { lo, hi } | Op::ClampStopGrad { lo, hi } => (v[0].map(|x| x.clamp(*lo, *hi)), none),
        Op::Select { indices } => {
            if indices.is_empty() {
                return Err(Error::invalid("select needs at least one index"));
            }
            if let Some(&bad) = indices.iter().find(|&&i| i >= v[0].numel()) {
                return Err(Error::shape("select", format!("index {bad} out of range for {} elements", v[0].numel())));
            }
            let x = v[0].data();
            (Tensor::new(vec![indices.len()], indices.iter().map(|&i| x[i]).collect())?, none)
        }
        Op::PairwiseDistance => {
            let [n, d] = *v[0].shape() else {
                return Err(Error::shape("pairwise_distance", format!("expected N×D, got {:?}", v[0].shape())));
            };
            let x = v[0].data();
            let mut y = vec![0.0; n * n];
            for i in 0..n {
                for j in (i + 1)..n {
                    let s: f64 = (0..d).map(|k| (x[i * d + k] - x[j * d + k]).powi(2)).sum();
                    y[i * n + j] = s.sqrt();
                    y[j * n + i] = y[i * n + j];
                }
            }
            (Tensor::new(vec![n, n], y)?, none)
        }
        Op::SpatialDiff { axis } => {
            let (n, c, h, w) = geom_nchw(v[0].shape(), "spatial_diff")?;
            let x = v[0].data();
            match axis {
                2 if h >= 2 => {
                    let mut y = Vec::with_capacity(n * c * (h - 1) * w);
                    for p in x.chunks(h * w) {
                        for r in 0..h - 1 {
                            for col in 0..w {
                                y.push(p[(r + 1) * w + col] - p[r * w + col]);
                            }
                        }
                    }
                    (Tensor::new(vec![n, c, h - 1, w], y)?, none)
                }
                3 if w >= 2 => {
                    let mut y = Vec::with_capacity(n * c * h * (w - 1));
                    for row in x.chunks(w) {
                        for col in 0..w - 1 {
                            y.push(row[col + 1] - row[col]);
                        }
                    }
                    (Tensor::new(vec![n, c, h, w - 1], y)?, none)
                }
                _ => return Err(Error::shape("spatial_diff", format!("axis {axis} on {:?}", v[0].shape()))),
            }
        }
    })
}

/// Returns window minima and the flat input index each minimum came from.
/// Ties resolve to the lowest channel, then the first window position in
/// row-major order.
fn min_reduce_forward(x: &[f64], n: usize, c: usize, h: usize, w: usize, patch: usize) -> (Vec<f64>, Vec<usize>) {
    let r = patch / 2;
    let hw = h * w;
    let mut y = vec![0.0; n * hw];
    let mut idx = vec![0usize; n * hw];
    let mut cmin = vec![0.0; hw];
    let mut carg = vec![0usize; hw];
    for img in 0..n {
        let base = img * c * hw;
        for p in 0..hw {
            let mut best = x[base + p];
            let mut arg = base + p;
            for ch in 1..c {
                let val = x[base + ch * hw + p];
                if val < best {
                    best = val;
                    arg = base + ch * hw + p;
                }
            }
            cmin[p] = best;
            carg[p] = arg;
        }
        for py in 0..h {
            let (y0, y1) = (py.saturating_sub(r), (py + r).min(h - 1));
            for px in 0..w {
                let (x0, x1) = (px.saturating_sub(r), (px + r).min(w - 1));
                let mut best = f64::INFINITY;
                let mut arg = 0;
                for qy in y0..=y1 {
                    for qx in x0..=x1 {
                        let q = qy * w + qx;
                        if cmin[q] < best {
                            best = cmin[q];
                            arg = carg[q];
                        }
                    }
                }
                y[img * hw + py * w + px] = best;
                idx[img * hw + py * w + px] = arg;
            }
        }
    }
    (y, idx)
}

fn backward_op(node: &GraphNode, v: &[&Tensor], dy: &Tensor) -> Result<Vec<Option<Tensor>>> {
    let y = &node.value;
    let g = dy.data();
    let like = |t: &Tensor, data: Vec<f64>| Tensor::new(t.shape().to_vec(), data);
    Ok(match &node.op {
        Op::Input | Op::ClampStopGrad { .. } => vec![],
        Op::Conv2d { stride, pad } => {
            let (geo, n, out) = conv_geom("conv2d", v[0], v[1], v[2], *stride, *pad, false)?;
            let (dx, dw, db) = kernels::conv2d_backward(v[0].data(), n, &geo, v[1].data(), out, g);
            vec![Some(like(v[0], dx)?), Some(like(v[1], dw)?), Some(like(v[2], db)?)]
        }
        Op::Conv2dTranspose { stride, pad } => {
            let (geo, n, cin) = conv_geom("conv2d_transpose", v[0], v[1], v[2], *stride, *pad, true)?;
            let (dx, dw, db) = kernels::conv_transpose_backward(v[0].data(), n, cin, &geo, v[1].data(), g);
            vec![Some(like(v[0], dx)?), Some(like(v[1], dw)?), Some(like(v[2], db)?)]
        }
        Op::BatchNorm { mode, .. } => {
            let Saved::BatchNorm { xhat, inv_std, .. } = &node.saved else { unreachable!() };
            let (n, c, hw) = bn_channels(v[0])?;
            let gamma = v[1].data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * hw;
                    for j in base..base + hw {
                        dbeta[ch] += g[j];
                        dgamma[ch] += g[j] * xhat[j];
                    }
                }
            }
            let mut dx = vec![0.0; g.len()];
            let m = (n * hw) as f64;
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * hw;
                    for j in base..base + hw {
                        dx[j] = match mode {
                            BnMode::Train => {
                                gamma[ch] * inv_std[ch] / m * (m * g[j] - dbeta[ch] - xhat[j] * dgamma[ch])
                            }
                            BnMode::Eval => g[j] * gamma[ch] * inv_std[ch],
                        };
                    }
                }
            }
            vec![Some(like(v[0], dx)?), Some(like(v[1], dgamma)?), Some(like(v[2], dbeta)?)]
        }
        Op::Relu => {
            let dx = v[0].data().iter().zip(g).map(|(&x, &d)| if x > 0.0 { d } else { 0.0 }).collect();
            vec![Some(like(v[0], dx)?)]
        }
        Op::GlobalAvgPool => {
            let (_, _, h, w) = geom_nchw(v[0].shape(), "global_avg_pool")?;
            let hw = h * w;
            let mut dx = vec![0.0; v[0].numel()];
            for (p, &d) in dx.chunks_mut(hw).zip(g) {
                p.fill(d / hw as f64);
            }
            vec![Some(like(v[0], dx)?)]
        }
        Op::Dense => {
            let (n, i) = (v[0].shape()[0], v[0].shape()[1]);
            let o = v[1].shape()[0];
            let mut dx = vec![0.0; n * i];
            kernels::gemm(n, o, i, g, false, v[1].data(), false, 0.0, &mut dx);
            let mut dw = vec![0.0; o * i];
            kernels::gemm(o, n, i, g, true, v[0].data(), false, 0.0, &mut dw);
            let mut db = vec![0.0; o];
            for row in g.chunks(o) {
                for (b, d) in db.iter_mut().zip(row) {
                    *b += d;
                }
            }
            vec![Some(like(v[0], dx)?), Some(like(v[1], dw)?), Some(like(v[2], db)?)]
        }
        Op::Concat { axis } => {
            let (outer, na, inner) = outer_inner(v[0].shape(), *axis);
            let nb = v[1].shape()[*axis];
            let mut da = Vec::with_capacity(v[0].numel());
            let mut db = Vec::with_capacity(v[1].numel());
            let stride = (na + nb) * inner;
            for o in 0..outer {
                da.extend_from_slice(&g[o * stride..o * stride + na * inner]);
                db.extend_from_slice(&g[o * stride + na * inner..(o + 1) * stride]);
            }
            vec![Some(like(v[0], da)?), Some(like(v[1], db)?)]
        }
        Op::Add => vec![Some(dy.clone()), Some(dy.clone())],
        Op::Sub => vec![Some(dy.clone()), Some(dy.map(|d| -d))],
        Op::Mul => vec![Some(dy.zip_map(v[1], |d, b| d * b)?), Some(dy.zip_map(v[0], |d, a| d * a)?)],
        Op::MulScalar(s) => vec![Some(dy.map(|d| d * s))],
        Op::AddScalar(_) => vec![Some(dy.clone())],
        Op::Abs => {
            let dx = v[0]
                .data()
                .iter()
                .zip(g)
                .map(|(&x, &d)| if x > 0.0 { d } else if x < 0.0 { -d } else { 0.0 })
                .collect();
            vec![Some(like(v[0], dx)?)]
        }
        Op::Sum => vec![Some(Tensor::full(v[0].shape(), g[0]))],
        Op::Mean => vec![Some(Tensor::full(v[0].shape(), g[0] / v[0].numel() as f64))],
        Op::SumAxis { axis } => {
            let (outer, len, inner) = outer_inner(v[0].shape(), *axis);
            let mut dx = vec![0.0; v[0].numel()];
            for o in 0..outer {
                for k in 0..len {
                    for i in 0..inner {
                        dx[(o * len + k) * inner + i] = g[o * inner + i];
                    }
                }
            }
            vec![Some(like(v[0], dx)?)]
        }
        Op::L2Normalize { axis } => {
            let Saved::Norms(norms) = &node.saved else { unreachable!() };
            let (outer, len, inner) = outer_inner(v[0].shape(), *axis);
            let yv = y.data();
            let mut dx = vec![0.0; v[0].numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let nrm = norms[o * inner + i];
                    if nrm < L2_EPS {
                        continue;
                    }
                    let dot: f64 = (0..len).map(|k| {
                        let j = (o * len + k) * inner + i;
                        yv[j] * g[j]
                    }).sum();
                    for k in 0..len {
                        let j = (o * len + k) * inner + i;
                        dx[j] = (g[j] - yv[j] * dot) / nrm;
                    }
                }
            }
            vec![Some(like(v[0], dx)?)]
        }
        Op::Exp => vec![Some(dy.zip_map(y, |d, e| d * e)?)],
        Op::Log => vec![Some(dy.zip_map(v[0], |d, x| d / x)?)],
        Op::Softmax => {
            let c = y.shape()[1];
            let mut dx = vec![0.0; y.numel()];
            for ((s, d), out) in y.data().chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                let dot: f64 = s.iter().zip(d).map(|(a, b)| a * b).sum();
                for k in 0..c {
                    out[k] = s[k] * (d[k] - dot);
                }
            }
            vec![Some(like(v[0], dx)?)]
        }
        Op::LogSoftmax => {
            let c = y.shape()[1];
            let mut dx = vec![0.0; y.numel()];
            for ((ls, d), out) in y.data().chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                let total: f64 = d.iter().sum();
                for k in 0..c {
                    out[k] = d[k] - ls[k].exp() * total;
                }
            }
            vec![Some(like(v[0], dx)?)]
        }
        Op::Sigmoid => vec![Some(dy.zip_map(y, |d, s| d * s * (1.0 - s))?)],
        Op::MinReduce { .. } => {
            let Saved::Argmin(idx) = &node.saved else { unreachable!() };
            let mut dx = vec![0.0; v[0].numel()];
            for (&i, &d) in idx.iter().zip(g) {
                dx[i] += d;
            }
            vec![Some(like(v[0], dx)?)]
        }
        Op::Clamp { lo, hi } => {
            let dx = v[0]
                .data()
                .iter()
                .zip(g)
                .map(|(&x, &d)| if x >= *lo && x <= *hi { d } else { 0.0 })
                .collect();
            vec![Some(like(v[0], dx)?)]
        }
        Op::Select { indices } => {
            let mut dx = vec![0.0; v[0].numel()];
            for (&i, &d) in indices.iter().zip(g) {
                dx[i] += d;
            }
            vec![Some(like(v[0], dx)?)]
        }
        Op::PairwiseDistance => {
            let (n, d) = (v[0].shape()[0], v[0].shape()[1]);
            let x = v[0].data();
            let dist = y.data();
            let mut dx = vec![0.0; n * d];
            for i in 0..n {
                for j in 0..n {
                    let dij = dist[i * n + j];
                    if i == j || dij <= 0.0 {
                        continue;
                    }
                    let coef = (g[i * n + j] + g[j * n + i]) / dij;
                    for k in 0..d {
                        dx[i * d + k] += coef * (x[i * d + k] - x[j * d + k]);
                    }
                }
            }
            vec![Some(like(v[0], dx)?)]
        }
        Op::SpatialDiff { axis } => {
            let (_, _, h, w) = geom_nchw(v[0].shape(), "spatial_diff")?;
            let mut dx = vec![0.0; v[0].numel()];
            if *axis == 2 {
                for (p, gp) in dx.chunks_mut(h * w).zip(g.chunks((h - 1) * w)) {
                    for r in 0..h - 1 {
                        for col in 0..w {
                            let d = gp[r * w + col];
                            p[(r + 1) * w + col] += d;
                            p[r * w + col] -= d;
                        }
                    }
                }
            } else {
                for (row, gr) in dx.chunks_mut(w).zip(g.chunks(w - 1)) {
                    for col in 0..w - 1 {
                        row[col + 1] += gr[col];
                        row[col] -= gr[col];
                    }
                }
            }
            vec![Some(like(v[0], dx)?)]
        }
    })
}
