//! Reverse-mode differentiation over the tensor kernels.
//!
//! A [`Tape`] records every operation as a node in evaluation order, so the
//! node list is already topologically sorted. [`Tape::backward`] walks it once
//! in reverse, summing gradients at nodes with several consumers.
//!
//! Decompositions (SVD, QR) and checkpointed segments have several outputs:
//! they are stored as a tuple node followed by one projection node per output.

mod rules;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

pub use rules::{qr_backward, svd_backward, QrGrad};

use crate::error::{Error, Result};
use crate::tensor::{self, DenseTensor, SvdResult};

/// Default regularization for degenerate singular values in the SVD backward pass.
pub const DEFAULT_SVD_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the fused cross-entropy interprets its input vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossDomain {
    /// Input entries are softmax logits `z`.
    Logits,
    /// Input entries are positive scores `f`; the softmax runs on `ln f`,
    /// so `p = f / sum(f)` and any common positive factor cancels.
    LogDomain,
}

/// Single-output differentiable primitives accepted by [`Tape::record`].
#[derive(Clone, Debug)]
pub enum Primitive {
    Contract(Vec<(usize, usize)>),
    Permute(Vec<usize>),
    Reshape(Vec<usize>),
    Add,
    Scale(f64),
    Mul,
    Relu,
    Abs,
    /// 2x2 spatial max pooling of an (H, W, C) tensor.
    MaxPool2,
    CrossEntropy {
        label: usize,
        domain: LossDomain,
    },
}

/// A pure sub-computation that can be re-run during the backward pass.
pub type Segment = dyn Fn(&mut Tape, &[NodeId]) -> Result<Vec<NodeId>> + Send + Sync;

#[derive(Clone)]
enum Op {
    Leaf {
        param: bool,
    },
    Contract {
        a: NodeId,
        b: NodeId,
        pairs: Vec<(usize, usize)>,
    },
    Permute {
        x: NodeId,
        order: Vec<usize>,
    },
    Reshape {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Relu {
        x: NodeId,
    },
    Abs {
        x: NodeId,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Arc<[usize]>,
    },
    CrossEntropy {
        x: NodeId,
        label: usize,
        domain: LossDomain,
        probs: Arc<[f64]>,
    },
    Svd {
        x: NodeId,
        full: Option<Box<SvdResult>>,
        eps: f64,
    },
    Qr {
        x: NodeId,
    },
    Checkpoint {
        inputs: Vec<NodeId>,
        segment: Arc<Segment>,
    },
    Output {
        parent: NodeId,
        index: usize,
    },
}

struct Node {
    op: Op,
    /// Whether any parameter leaf feeds this node.
    needs_grad: bool,
    /// Empty for tuple nodes; their outputs live in `outputs`.
    value: Option<DenseTensor>,
    outputs: Vec<DenseTensor>,
}

/// Gradients of a scalar loss with respect to every parameter leaf.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap {
    grads: BTreeMap<NodeId, DenseTensor>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&DenseTensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &DenseTensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn into_inner(self) -> BTreeMap<NodeId, DenseTensor> {
        self.grads
    }
}

/// Handles for the three outputs of a recorded truncated SVD.
#[derive(Clone, Copy, Debug)]
pub struct SvdNodes {
    pub u: NodeId,
    pub s: NodeId,
    pub v: NodeId,
    pub discarded_weight: f64,
}

pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
    qr_warnings: std::cell::Cell<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("recording", &self.recording)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            qr_warnings: std::cell::Cell::new(0),
        }
    }

    /// A tape that evaluates but keeps no backward state; `backward` fails on it.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of QR backward steps that met a rank-deficient factor.
    pub fn qr_warnings(&self) -> usize {
        self.qr_warnings.get()
    }

    /// Tensors currently held by the tape (node values, tuple outputs and
    /// saved decompositions).
    pub fn retained_tensors(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| {
                let saved = match &n.op {
                    Op::Svd { full: Some(_), .. } => 3,
                    _ => 0,
                };
                usize::from(n.value.is_some()) + n.outputs.len() + saved
            })
            .sum()
    }

    fn push(&mut self, op: Op, value: Option<DenseTensor>, outputs: Vec<DenseTensor>) -> NodeId {
        let needs_grad = match &op {
            Op::Leaf { param } => *param,
            other => op_inputs(other).iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            needs_grad,
            value,
            outputs,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() || self.nodes[id.0].value.is_none() {
            return Err(Error::arg(format!("unknown input node {}", id.0)));
        }
        Ok(())
    }

    pub fn value(&self, id: NodeId) -> &DenseTensor {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("value() on a tuple node")
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.value(id).shape()
    }

    /// Registers a trainable tensor; `backward` reports its gradient.
    pub fn leaf(&mut self, t: DenseTensor) -> NodeId {
        self.push(Op::Leaf { param: true }, Some(t), Vec::new())
    }

    /// Registers a tensor that receives no gradient.
    pub fn constant(&mut self, t: DenseTensor) -> NodeId {
        self.push(Op::Leaf { param: false }, Some(t), Vec::new())
    }

    /// Evaluates `prim` on `inputs` and appends the node.
    pub fn record(&mut self, prim: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        for &i in inputs {
            self.check(i)?;
        }
        let arity = match prim {
            Primitive::Contract(_) | Primitive::Add | Primitive::Mul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::arg(format!(
                "{prim:?} takes {arity} inputs, got {}",
                inputs.len()
            )));
        }
        match prim {
            Primitive::Contract(pairs) => self.contract(inputs[0], inputs[1], &pairs),
            Primitive::Permute(order) => self.permute(inputs[0], &order),
            Primitive::Reshape(shape) => self.reshape(inputs[0], &shape),
            Primitive::Add => self.add(inputs[0], inputs[1]),
            Primitive::Scale(c) => self.scale(inputs[0], c),
            Primitive::Mul => self.mul(inputs[0], inputs[1]),
            Primitive::Relu => self.relu(inputs[0]),
            Primitive::Abs => self.abs(inputs[0]),
            Primitive::MaxPool2 => self.max_pool2(inputs[0]),
            Primitive::CrossEntropy { label, domain } => {
                self.cross_entropy(inputs[0], label, domain)
            }
        }
    }

    pub fn contract(&mut self, a: NodeId, b: NodeId, pairs: &[(usize, usize)]) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let out = tensor::contract(self.value(a), self.value(b), pairs)?;
        Ok(self.push(
            Op::Contract {
                a,
                b,
                pairs: pairs.to_vec(),
            },
            Some(out),
            Vec::new(),
        ))
    }

    pub fn permute(&mut self, x: NodeId, order: &[usize]) -> Result<NodeId> {
        self.check(x)?;
        let out = tensor::permute_axes(self.value(x), order)?;
        Ok(self.push(
            Op::Permute {
                x,
                order: order.to_vec(),
            },
            Some(out),
            Vec::new(),
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(x)?;
        let out = tensor::reshape(self.value(x), shape)?;
        Ok(self.push(Op::Reshape { x }, Some(out), Vec::new()))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add { a, b }, Some(out), Vec::new()))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.check(x)?;
        let out = self.value(x).scale(c);
        Ok(self.push(Op::Scale { x, c }, Some(out), Vec::new()))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul { a, b }, Some(out), Vec::new()))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let out = self.value(x).map(|v| v.max(0.0));
        Ok(self.push(Op::Relu { x }, Some(out), Vec::new()))
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let out = self.value(x).map(f64::abs);
        Ok(self.push(Op::Abs { x }, Some(out), Vec::new()))
    }

    /// Sum of all entries, as a rank-0 node.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let shape = self.shape(x).to_vec();
        let ones = self.constant(DenseTensor::ones(&shape));
        let pairs: Vec<(usize, usize)> = (0..shape.len()).map(|i| (i, i)).collect();
        self.contract(x, ones, &pairs)
    }

    /// 2x2 max pooling over the two leading (spatial) axes of an (H, W, C)
    /// tensor. Ties go to the first position in row-major block order.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let t = self.value(x);
        let &[h, w, c] = t.shape() else {
            return Err(Error::arg(format!(
                "max_pool2 needs (H, W, C), got {:?}",
                t.shape()
            )));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(format!(
                "max_pool2 needs even H and W, got {h}x{w}"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let d = t.data();
        let mut out = Vec::with_capacity(ho * wo * c);
        let mut argmax = Vec::with_capacity(ho * wo * c);
        for i in 0..ho {
            for j in 0..wo {
                for ch in 0..c {
                    let mut best = usize::MAX;
                    let mut best_v = f64::NEG_INFINITY;
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = ((2 * i + di) * w + (2 * j + dj)) * c + ch;
                        if d[idx] > best_v || best == usize::MAX {
                            best_v = d[idx];
                            best = idx;
                        }
                    }
                    out.push(best_v);
                    argmax.push(best);
                }
            }
        }
        let out = DenseTensor::from_parts(vec![ho, wo, c], out);
        Ok(self.push(
            Op::MaxPool2 {
                x,
                argmax: argmax.into(),
            },
            Some(out),
            Vec::new(),
        ))
    }

    /// Fused softmax cross-entropy `-log softmax(z)[label]` of a vector node.
    pub fn cross_entropy(&mut self, x: NodeId, label: usize, domain: LossDomain) -> Result<NodeId> {
        self.check(x)?;
        let t = self.value(x);
        if t.rank() != 1 {
            return Err(Error::arg(format!(
                "cross_entropy needs a vector, got {:?}",
                t.shape()
            )));
        }
        if label >= t.len() {
            return Err(Error::arg(format!(
                "label {label} out of range for {} classes",
                t.len()
            )));
        }
        let z: Vec<f64> = match domain {
            LossDomain::Logits => t.to_vec(),
            LossDomain::LogDomain => {
                if let Some(bad) = t.data().iter().find(|v| !(**v > 0.0)) {
                    return Err(Error::Numerical(format!(
                        "log-domain loss needs positive scores, found {bad}"
                    )));
                }
                t.data().iter().map(|v| v.ln()).collect()
            }
        };
        let (loss, probs) = crate::training::softmax_cross_entropy(&z, label);
        Ok(self.push(
            Op::CrossEntropy {
                x,
                label,
                domain,
                probs: probs.into(),
            },
            Some(DenseTensor::scalar(loss)),
            Vec::new(),
        ))
    }

    fn push_tuple(&mut self, op: Op, outputs: Vec<DenseTensor>) -> Vec<NodeId> {
        let parent = self.push(op, None, outputs.clone());
        outputs
            .into_iter()
            .enumerate()
            .map(|(index, v)| self.push(Op::Output { parent, index }, Some(v), Vec::new()))
            .collect()
    }

    /// Truncated SVD of a matrix node; `s` is returned as a vector node.
    pub fn svd_truncated(&mut self, x: NodeId, chi: usize, eps: f64) -> Result<SvdNodes> {
        self.check(x)?;
        if !(eps > 0.0) {
            return Err(Error::arg("svd backward epsilon must be positive"));
        }
        let full = tensor::svd_full(self.value(x))?;
        let t = full.truncate(chi)?;
        let s = DenseTensor::vector(t.s.clone());
        let saved = self.recording.then(|| Box::new(full));
        let ids = self.push_tuple(
            Op::Svd {
                x,
                full: saved,
                eps,
            },
            vec![t.u, s, t.v],
        );
        Ok(SvdNodes {
            u: ids[0],
            s: ids[1],
            v: ids[2],
            discarded_weight: t.discarded_weight,
        })
    }

    /// Reduced QR of a matrix node, returning `(q, r)`.
    pub fn qr(&mut self, x: NodeId) -> Result<(NodeId, NodeId)> {
        self.check(x)?;
        let (q, r) = tensor::qr_reduced(self.value(x))?;
        let ids = self.push_tuple(Op::Qr { x }, vec![q, r]);
        Ok((ids[0], ids[1]))
    }

    /// Runs `segment` on `inputs` keeping only its outputs. During the
    /// backward pass the segment is evaluated again on a scratch tape and
    /// differentiated there. The segment must be deterministic.
    pub fn checkpoint<F>(&mut self, inputs: &[NodeId], segment: F) -> Result<Vec<NodeId>>
    where
        F: Fn(&mut Tape, &[NodeId]) -> Result<Vec<NodeId>> + Send + Sync + 'static,
    {
        for &i in inputs {
            self.check(i)?;
        }
        let mut scratch = Tape::inference();
        let leaves: Vec<NodeId> = inputs
            .iter()
            .map(|&i| scratch.leaf(self.value(i).clone()))
            .collect();
        let outs = segment(&mut scratch, &leaves)?;
        let values: Vec<DenseTensor> = outs.iter().map(|&o| scratch.value(o).clone()).collect();
        Ok(self.push_tuple(
            Op::Checkpoint {
                inputs: inputs.to_vec(),
                segment: Arc::new(segment),
            },
            values,
        ))
    }

    /// Gradients of the scalar node `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap> {
        self.check(loss)?;
        if self.value(loss).rank() != 0 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let grads = self.backward_seeded(&[(loss, DenseTensor::scalar(1.0))])?;
        Ok(self.collect_params(grads))
    }

    fn collect_params(&self, mut grads: Vec<Option<DenseTensor>>) -> GradientMap {
        let mut map = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: true } = node.op {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| DenseTensor::zeros(node.value.as_ref().unwrap().shape()));
                map.insert(NodeId(i), g);
            }
        }
        GradientMap { grads: map }
    }

    /// Backpropagates the given output gradients; returns the gradient of every node.
    pub fn backward_seeded(
        &self,
        seeds: &[(NodeId, DenseTensor)],
    ) -> Result<Vec<Option<DenseTensor>>> {
        if !self.recording {
            return Err(Error::arg("backward on an inference tape"));
        }
        let mut grads: Vec<Option<DenseTensor>> = vec![None; self.nodes.len()];
        let mut tuple_grads: BTreeMap<usize, Vec<Option<DenseTensor>>> = BTreeMap::new();
        let mut start = 0;
        for (id, g) in seeds {
            self.check(*id)?;
            if g.shape() != self.shape(*id) {
                return Err(Error::dim(format!(
                    "seed gradient shape {:?} for node of shape {:?}",
                    g.shape(),
                    self.shape(*id)
                )));
            }
            accumulate(&mut grads[id.0], g.clone());
            start = start.max(id.0 + 1);
        }

        for idx in (0..start).rev() {
            let node = &self.nodes[idx];
            if let Op::Output { parent, index } = node.op {
                if let Some(g) = grads[idx].take() {
                    let slot = tuple_grads
                        .entry(parent.0)
                        .or_insert_with(|| vec![None; self.nodes[parent.0].outputs.len()]);
                    accumulate(&mut slot[index], g.clone());
                    grads[idx] = Some(g);
                }
                continue;
            }
            if node.value.is_none() {
                if let Some(outs) = tuple_grads.remove(&idx).filter(|_| node.needs_grad) {
                    self.backward_tuple(node, &outs, &mut grads)?;
                }
                continue;
            }
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].clone() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads)?;
        }
        Ok(grads)
    }

    fn backward_node(
        &self,
        node: &Node,
        g: &DenseTensor,
        grads: &mut [Option<DenseTensor>],
    ) -> Result<()> {
        match &node.op {
            Op::Leaf { .. } | Op::Output { .. } => {}
            Op::Contract { a, b, pairs } => {
                let (na, nb) = (self.nodes[a.0].needs_grad, self.nodes[b.0].needs_grad);
                let (ga, gb) = contract_grads(self.value(*a), self.value(*b), pairs, g, na, nb)?;
                if let Some(ga) = ga {
                    accumulate(&mut grads[a.0], ga);
                }
                if let Some(gb) = gb {
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Permute { x, order } => {
                let gx = tensor::permute_axes(g, &tensor::inverse_permutation(order))?;
                accumulate(&mut grads[x.0], gx);
            }
            Op::Reshape { x } => {
                let gx = tensor::reshape(g, self.shape(*x))?;
                accumulate(&mut grads[x.0], gx);
            }
            Op::Add { a, b } => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g.clone());
            }
            Op::Scale { x, c } => accumulate(&mut grads[x.0], g.scale(*c)),
            Op::Mul { a, b } => {
                let ga = g.mul(self.value(*b))?;
                let gb = g.mul(self.value(*a))?;
                accumulate(&mut grads[a.0], ga);
                accumulate(&mut grads[b.0], gb);
            }
            Op::Relu { x } => {
                let gx = g.zip_map(self.value(*x), |g, v| if v > 0.0 { g } else { 0.0 })?;
                accumulate(&mut grads[x.0], gx);
            }
            Op::Abs { x } => {
                let gx = g.zip_map(self.value(*x), |g, v| {
                    if v > 0.0 {
                        g
                    } else if v < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                })?;
                accumulate(&mut grads[x.0], gx);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut gx = vec![0.0; self.value(*x).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += g.data()[o];
                }
                accumulate(
                    &mut grads[x.0],
                    DenseTensor::from_parts(self.shape(*x).to_vec(), gx),
                );
            }
            Op::CrossEntropy {
                x,
                label,
                domain,
                probs,
            } => {
                let scale = g.item();
                let xv = self.value(*x).data();
                let gx: Vec<f64> = probs
                    .iter()
                    .enumerate()
                    .map(|(l, p)| {
                        let dz = scale * (p - if l == *label { 1.0 } else { 0.0 });
                        match domain {
                            LossDomain::Logits => dz,
                            LossDomain::LogDomain => dz / xv[l],
                        }
                    })
                    .collect();
                accumulate(&mut grads[x.0], DenseTensor::vector(gx));
            }
            Op::Svd { .. } | Op::Qr { .. } | Op::Checkpoint { .. } => unreachable!("tuple node"),
        }
        Ok(())
    }

    fn backward_tuple(
        &self,
        node: &Node,
        outs: &[Option<DenseTensor>],
        grads: &mut [Option<DenseTensor>],
    ) -> Result<()> {
        match &node.op {
            Op::Svd { x, full, eps } => {
                let full = full.as_ref().expect("recording tape keeps the full SVD");
                let gs = outs[1].as_ref().map(|t| t.data().to_vec());
                let gx = rules::svd_backward(
                    full,
                    outs[0].as_ref(),
                    gs.as_deref(),
                    outs[2].as_ref(),
                    *eps,
                );
                accumulate(&mut grads[x.0], gx);
            }
            Op::Qr { x } => {
                let res = rules::qr_backward(
                    self.value(*x),
                    &node.outputs[0],
                    &node.outputs[1],
                    outs[0].as_ref(),
                    outs[1].as_ref(),
                );
                if res.ill_conditioned {
                    self.qr_warnings.set(self.qr_warnings.get() + 1);
                    log::warn!(
                        "QR backward on a rank-deficient factor; gradient may be inaccurate"
                    );
                }
                accumulate(&mut grads[x.0], res.grad);
            }
            Op::Checkpoint { inputs, segment } => {
                let mut scratch = Tape::new();
                let leaves: Vec<NodeId> = inputs
                    .iter()
                    .map(|&i| scratch.leaf(self.value(i).clone()))
                    .collect();
                let sub_outs = segment(&mut scratch, &leaves)?;
                let seeds: Vec<(NodeId, DenseTensor)> = sub_outs
                    .iter()
                    .zip(outs.iter())
                    .filter_map(|(&o, g)| g.as_ref().map(|g| (o, g.clone())))
                    .collect();
                let mut sub_grads = scratch.backward_seeded(&seeds)?;
                self.qr_warnings
                    .set(self.qr_warnings.get() + scratch.qr_warnings());
                for (&input, leaf) in inputs.iter().zip(leaves) {
                    if let Some(g) = sub_grads[leaf.0].take() {
                        accumulate(&mut grads[input.0], g);
                    }
                }
            }
            _ => unreachable!("single-output node"),
        }
        Ok(())
    }
}

fn op_inputs(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf { .. } => Vec::new(),
        Op::Contract { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
        Op::Permute { x, .. }
        | Op::Reshape { x }
        | Op::Scale { x, .. }
        | Op::Relu { x }
        | Op::Abs { x }
        | Op::MaxPool2 { x, .. }
        | Op::CrossEntropy { x, .. }
        | Op::Svd { x, .. }
        | Op::Qr { x } => vec![*x],
        Op::Checkpoint { inputs, .. } => inputs.clone(),
        Op::Output { parent, .. } => vec![*parent],
    }
}

fn accumulate(slot: &mut Option<DenseTensor>, g: DenseTensor) {
    *slot = Some(match slot.take() {
        None => g,
        Some(prev) => prev.add(&g).expect("gradient shapes agree"),
    });
}

/// Gradients of `contract(a, b, pairs)` given the output gradient `g`.
fn contract_grads(
    a: &DenseTensor,
    b: &DenseTensor,
    pairs: &[(usize, usize)],
    g: &DenseTensor,
    want_a: bool,
    want_b: bool,
) -> Result<(Option<DenseTensor>, Option<DenseTensor>)> {
    let fa: Vec<usize> = (0..a.rank())
        .filter(|i| !pairs.iter().any(|p| p.0 == *i))
        .collect();
    let fb: Vec<usize> = (0..b.rank())
        .filter(|j| !pairs.iter().any(|p| p.1 == *j))
        .collect();
    let nfa = fa.len();

    // ga[Fa, Ca] = sum_Fb g[Fa, Fb] b[.., Fb]; the result keeps b's remaining
    // (contracted) axes in b's order, which we map back to a's axes.
    let ga = if want_a {
        let ga_pairs: Vec<(usize, usize)> =
            fb.iter().enumerate().map(|(k, &j)| (nfa + k, j)).collect();
        let ga_raw = tensor::contract(g, b, &ga_pairs)?;
        let mut a_axes: Vec<usize> = fa.clone();
        for j in 0..b.rank() {
            if let Some(p) = pairs.iter().find(|p| p.1 == j) {
                a_axes.push(p.0);
            }
        }
        Some(tensor::permute_axes(
            &ga_raw,
            &tensor::inverse_permutation(&a_axes),
        )?)
    } else {
        None
    };

    let gb = if want_b {
        let gb_pairs: Vec<(usize, usize)> = fa.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        let gb_raw = tensor::contract(a, g, &gb_pairs)?;
        let mut b_axes: Vec<usize> = Vec::with_capacity(b.rank());
        for i in 0..a.rank() {
            if let Some(p) = pairs.iter().find(|p| p.0 == i) {
                b_axes.push(p.1);
            }
        }
        b_axes.extend(fb.iter());
        Some(tensor::permute_axes(
            &gb_raw,
            &tensor::inverse_permutation(&b_axes),
        )?)
    } else {
        None
    };
    Ok((ga, gb))
}

#[cfg(test)]
mod tests;
