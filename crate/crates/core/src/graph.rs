//! Directed acyclic layer graph with named parameters.
//!
//! Nodes are stored in insertion order, and a node may only consume nodes
//! added before it, so insertion order is a topological order. Forward passes
//! walk it front to back, backward passes back to front, summing gradients at
//! fan-out points.
//!
//! Parameters are addressed as `<node id>.<slot>`, e.g. `stem.conv.weight` or
//! `block_3.expand_bn.gamma`. Batch-norm running statistics are buffers: they
//! are saved in checkpoints but are never trained and never counted as
//! parameters.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{dim_err, invalid, Error, Result};
use crate::ops::{self, *};
use crate::tensor::{conv_out_dim, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum Op<T = f32> {
    /// Graph entry; accepts any NHWC batch; the declared `(h, w, c)` is the
    /// nominal input used for shape checking at build time.
    Input { h: usize, w: usize, c: usize },
    Conv(ConvParams<T>),
    Depthwise(DepthwiseParams<T>),
    BatchNorm(BatchNormParams<T>),
    Activation(ActivationKind),
    Pool(PoolParams),
    GlobalPool(GlobalPoolKind),
    Concat,
    Add,
    Dense(DenseParams<T>),
}

impl<T: Scalar> Op<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Conv(_) => "conv2d",
            Op::Depthwise(_) => "depthwise_conv2d",
            Op::BatchNorm(_) => "batchnorm",
            Op::Activation(ActivationKind::Relu) => "relu",
            Op::Activation(ActivationKind::Relu6) => "relu6",
            Op::Pool(p) if p.kind == PoolKind::Max => "max_pool",
            Op::Pool(_) => "avg_pool",
            Op::GlobalPool(GlobalPoolKind::Avg) => "global_avg_pool",
            Op::GlobalPool(GlobalPoolKind::Max) => "global_max_pool",
            Op::Concat => "concat",
            Op::Add => "add",
            Op::Dense(_) => "fully_connected",
        }
    }

    /// Trainable tensors, in a fixed slot order.
    pub fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            Op::Conv(p) => {
                let mut v = vec![("weight", &p.weight)];
                if let Some(b) = &p.bias {
                    v.push(("bias", b));
                }
                v
            }
            Op::Depthwise(p) => vec![("weight", &p.weight)],
            Op::BatchNorm(p) => vec![("gamma", &p.gamma), ("beta", &p.beta)],
            Op::Dense(p) => vec![("weight", &p.weight), ("bias", &p.bias)],
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        match self {
            Op::Conv(p) => {
                let mut v = vec![("weight", &mut p.weight)];
                if let Some(b) = &mut p.bias {
                    v.push(("bias", b));
                }
                v
            }
            Op::Depthwise(p) => vec![("weight", &mut p.weight)],
            Op::BatchNorm(p) => vec![("gamma", &mut p.gamma), ("beta", &mut p.beta)],
            Op::Dense(p) => vec![("weight", &mut p.weight), ("bias", &mut p.bias)],
            _ => Vec::new(),
        }
    }

    /// Non-trainable state saved alongside parameters.
    pub fn buffers(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            Op::BatchNorm(p) => vec![("running_mean", &p.running_mean), ("running_var", &p.running_var)],
            _ => Vec::new(),
        }
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(self, Op::Conv(_) | Op::Depthwise(_) | Op::BatchNorm(_) | Op::Dense(_))
    }

    /// Whether backward reads the forward input values (not just shapes).
    fn backward_reads_inputs(&self) -> bool {
        !matches!(self, Op::Input { .. } | Op::Concat | Op::Add)
    }

    fn cast<U: Scalar>(&self) -> Op<U> {
        match self {
            Op::Input { h, w, c } => Op::Input { h: *h, w: *w, c: *c },
            Op::Conv(p) => Op::Conv(ConvParams {
                weight: p.weight.cast(),
                bias: p.bias.as_ref().map(Tensor::cast),
                stride: p.stride,
                padding: p.padding,
            }),
            Op::Depthwise(p) => Op::Depthwise(DepthwiseParams {
                weight: p.weight.cast(),
                stride: p.stride,
                padding: p.padding,
            }),
            Op::BatchNorm(p) => Op::BatchNorm(BatchNormParams {
                gamma: p.gamma.cast(),
                beta: p.beta.cast(),
                running_mean: p.running_mean.cast(),
                running_var: p.running_var.cast(),
                momentum: p.momentum,
                epsilon: p.epsilon,
            }),
            Op::Activation(k) => Op::Activation(*k),
            Op::Pool(p) => Op::Pool(*p),
            Op::GlobalPool(k) => Op::GlobalPool(*k),
            Op::Concat => Op::Concat,
            Op::Add => Op::Add,
            Op::Dense(p) => Op::Dense(DenseParams {
                weight: p.weight.cast(),
                bias: p.bias.cast(),
            }),
        }
    }

    /// Output shape for a batch of one, from the input shapes.
    fn infer_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        let nhwc = |s: &[usize]| -> Result<(usize, usize, usize)> {
            match *s {
                [_, h, w, c] => Ok((h, w, c)),
                _ => Err(dim_err!("expected an NHWC input, got {s:?}")),
            }
        };
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(invalid!("{} takes {n} input(s), got {}", self.kind(), inputs.len()))
            }
        };
        match self {
            Op::Input { h, w, c } => {
                arity(0)?;
                Ok(vec![1, *h, *w, *c])
            }
            Op::Conv(p) => {
                arity(1)?;
                let (h, w, c) = nhwc(inputs[0])?;
                let (kh, kw, cin, cout) = p.kernel();
                if c != cin {
                    return Err(dim_err!("conv expects {cin} input channels, got {c}"));
                }
                let (oh, _) = conv_out_dim(h, kh, p.stride, p.padding)?;
                let (ow, _) = conv_out_dim(w, kw, p.stride, p.padding)?;
                Ok(vec![1, oh, ow, cout])
            }
            Op::Depthwise(p) => {
                arity(1)?;
                let (h, w, c) = nhwc(inputs[0])?;
                let (kh, kw, cin) = p.kernel();
                if c != cin {
                    return Err(dim_err!("depthwise filter has {cin} channels, input has {c}"));
                }
                let (oh, _) = conv_out_dim(h, kh, p.stride, p.padding)?;
                let (ow, _) = conv_out_dim(w, kw, p.stride, p.padding)?;
                Ok(vec![1, oh, ow, c])
            }
            Op::BatchNorm(p) => {
                arity(1)?;
                p.validate()?;
                let c = *inputs[0].last().expect("non-empty shape");
                if c != p.channels() {
                    return Err(dim_err!("batchnorm has {} channels, input has {c}", p.channels()));
                }
                Ok(inputs[0].to_vec())
            }
            Op::Activation(_) => {
                arity(1)?;
                Ok(inputs[0].to_vec())
            }
            Op::Pool(p) => {
                arity(1)?;
                let (h, w, c) = nhwc(inputs[0])?;
                let (oh, _) = conv_out_dim(h, p.window.0, p.stride, p.padding)?;
                let (ow, _) = conv_out_dim(w, p.window.1, p.stride, p.padding)?;
                Ok(vec![1, oh, ow, c])
            }
            Op::GlobalPool(_) => {
                arity(1)?;
                let (_, _, c) = nhwc(inputs[0])?;
                Ok(vec![1, 1, 1, c])
            }
            Op::Concat => {
                if inputs.is_empty() {
                    return Err(invalid!("concat needs at least one input"));
                }
                let (h, w, _) = nhwc(inputs[0])?;
                let mut total = 0;
                for s in inputs {
                    let (hi, wi, ci) = nhwc(s)?;
                    if (hi, wi) != (h, w) {
                        return Err(dim_err!("concat inputs disagree spatially: {h}×{w} vs {hi}×{wi}"));
                    }
                    total += ci;
                }
                Ok(vec![1, h, w, total])
            }
            Op::Add => {
                arity(2)?;
                if inputs[0] != inputs[1] {
                    return Err(dim_err!("cannot add {:?} and {:?}", inputs[0], inputs[1]));
                }
                Ok(inputs[0].to_vec())
            }
            Op::Dense(p) => {
                arity(1)?;
                let (din, dout) = p.dims();
                let features: usize = inputs[0][1..].iter().product();
                if features != din {
                    return Err(dim_err!(
                        "fully connected layer expects {din} features, input {:?} has {features}",
                        inputs[0]
                    ));
                }
                Ok(vec![1, dout])
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNode<T = f32> {
    pub id: String,
    pub op: Op<T>,
    /// Indices of producer nodes.
    pub inputs: Vec<usize>,
    /// One flag per entry of `op.params()`.
    pub trainable: Vec<bool>,
    /// Output shape for a batch of one at the nominal input size.
    pub shape: Vec<usize>,
}

impl<T: Scalar> LayerNode<T> {
    pub fn has_trainable(&self) -> bool {
        self.trainable.iter().any(|&t| t)
    }
}

/// Which trunk layers stay trainable during transfer learning.
///
/// Layers are counted as parameterized ops (conv, depthwise, batchnorm,
/// fully connected); activations and pools do not count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FreezePolicy {
    TrainAll,
    FreezeAllTrunk,
    /// Freeze the trunk except its last `k` parameterized layers.
    FreezeTrunkExceptLast(usize),
}

impl fmt::Display for FreezePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FreezePolicy::TrainAll => f.write_str("train-all"),
            FreezePolicy::FreezeAllTrunk => f.write_str("freeze-all-trunk"),
            FreezePolicy::FreezeTrunkExceptLast(k) => write!(f, "trunk-except-last-{k}"),
        }
    }
}

impl FromStr for FreezePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train-all" => Ok(FreezePolicy::TrainAll),
            "freeze-all-trunk" => Ok(FreezePolicy::FreezeAllTrunk),
            _ => s
                .strip_prefix("trunk-except-last-")
                .and_then(|k| k.parse().ok())
                .map(FreezePolicy::FreezeTrunkExceptLast)
                .ok_or_else(|| {
                    invalid!("unknown freeze policy `{s}` (expected train-all, freeze-all-trunk or trunk-except-last-<k>)")
                }),
        }
    }
}

/// Parameter gradients keyed by parameter name.
pub type Gradients<T = f32> = BTreeMap<String, Tensor<T>>;

/// Per-node outputs of a forward pass.
#[derive(Clone, Debug)]
pub struct Activations<T = f32> {
    outputs: Vec<Option<Tensor<T>>>,
    caches: Vec<Option<BatchNormCache<T>>>,
    ids: HashMap<String, usize>,
    output: usize,
    mode: Mode,
}

impl<T: Scalar> Activations<T> {
    /// The graph output (logits for a classifier).
    pub fn output(&self) -> &Tensor<T> {
        self.outputs[self.output].as_ref().expect("output is always retained")
    }

    /// Activation of node `id`, if it was retained.
    pub fn get(&self, id: &str) -> Option<&Tensor<T>> {
        self.ids.get(id).and_then(|&i| self.outputs[i].as_ref())
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn into_output(mut self) -> Tensor<T> {
        self.outputs[self.output].take().expect("output is always retained")
    }
}

/// A borrowed parameter with its fully qualified name.
pub struct ParamRef<'a, T = f32> {
    pub name: String,
    pub tensor: &'a Tensor<T>,
    pub trainable: bool,
}

pub struct ParamMut<'a, T = f32> {
    pub name: String,
    pub tensor: &'a mut Tensor<T>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Graph<T = f32> {
    nodes: Vec<LayerNode<T>>,
    index: HashMap<String, usize>,
    output: usize,
    trunk_boundary: Option<usize>,
}

enum Retain {
    All,
    Backward(Vec<bool>),
    Streaming(Vec<usize>),
}

impl<T: Scalar> Graph<T> {
    pub fn new(input_id: &str, h: usize, w: usize, c: usize) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(invalid!("input dimensions must be positive"));
        }
        let node = LayerNode {
            id: input_id.to_string(),
            op: Op::Input { h, w, c },
            inputs: Vec::new(),
            trainable: Vec::new(),
            shape: vec![1, h, w, c],
        };
        Ok(Graph {
            index: HashMap::from([(input_id.to_string(), 0)]),
            nodes: vec![node],
            output: 0,
            trunk_boundary: None,
        })
    }

    /// Appends a node fed by existing nodes and makes it the output.
    pub fn add(&mut self, id: &str, op: Op<T>, inputs: &[&str]) -> Result<()> {
        if self.index.contains_key(id) {
            return Err(invalid!("duplicate node id `{id}`"));
        }
        if matches!(op, Op::Input { .. }) {
            return Err(invalid!("a graph has exactly one input node"));
        }
        let idx: Vec<usize> = inputs
            .iter()
            .map(|name| {
                self.index
                    .get(*name)
                    .copied()
                    .ok_or_else(|| invalid!("node `{id}` consumes unknown node `{name}`"))
            })
            .collect::<Result<_>>()?;
        let shapes: Vec<&[usize]> = idx.iter().map(|&i| self.nodes[i].shape.as_slice()).collect();
        let shape = op.infer_shape(&shapes).map_err(|e| Error::at_node(id, e))?;
        let trainable = vec![true; op.params().len()];
        self.index.insert(id.to_string(), self.nodes.len());
        self.nodes.push(LayerNode {
            id: id.to_string(),
            op,
            inputs: idx,
            trainable,
            shape,
        });
        self.output = self.nodes.len() - 1;
        Ok(())
    }

    pub fn nodes(&self) -> &[LayerNode<T>] {
        &self.nodes
    }

    pub fn node(&self, id: &str) -> Option<&LayerNode<T>> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn output_id(&self) -> &str {
        &self.nodes[self.output].id
    }

    pub fn set_output(&mut self, id: &str) -> Result<()> {
        self.output = self.node_index(id).ok_or_else(|| invalid!("unknown node `{id}`"))?;
        Ok(())
    }

    /// Last node of the pre-trained trunk, used by freeze policies.
    pub fn trunk_boundary(&self) -> Option<&str> {
        self.trunk_boundary.map(|i| self.nodes[i].id.as_str())
    }

    pub fn set_trunk_boundary(&mut self, id: &str) -> Result<()> {
        self.trunk_boundary = Some(self.node_index(id).ok_or_else(|| invalid!("unknown trunk boundary `{id}`"))?);
        Ok(())
    }

    /// `(h, w, c)` of the input node.
    pub fn input_dims(&self) -> (usize, usize, usize) {
        match self.nodes[0].op {
            Op::Input { h, w, c } => (h, w, c),
            _ => unreachable!("node 0 is the input"),
        }
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.nodes[self.output].shape
    }

    pub fn cast<U: Scalar>(&self) -> Graph<U> {
        Graph {
            nodes: self
                .nodes
                .iter()
                .map(|n| LayerNode {
                    id: n.id.clone(),
                    op: n.op.cast(),
                    inputs: n.inputs.clone(),
                    trainable: n.trainable.clone(),
                    shape: n.shape.clone(),
                })
                .collect(),
            index: self.index.clone(),
            output: self.output,
            trunk_boundary: self.trunk_boundary,
        }
    }

    // ---- parameters -------------------------------------------------------

    pub fn params(&self) -> Vec<ParamRef<'_, T>> {
        let mut out = Vec::new();
        for node in &self.nodes {
            for ((slot, tensor), &trainable) in node.op.params().into_iter().zip(&node.trainable) {
                out.push(ParamRef {
                    name: format!("{}.{slot}", node.id),
                    tensor,
                    trainable,
                });
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::new();
        for node in &mut self.nodes {
            let flags = node.trainable.clone();
            for ((slot, tensor), trainable) in node.op.params_mut().into_iter().zip(flags) {
                out.push(ParamMut {
                    name: format!("{}.{slot}", node.id),
                    tensor,
                    trainable,
                });
            }
        }
        out
    }

    /// Parameters then buffers of each node, in node order. This is the
    /// checkpoint entry order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for node in &self.nodes {
            for (slot, t) in node.op.params().into_iter().chain(node.op.buffers()) {
                out.push((format!("{}.{slot}", node.id), t));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for node in &mut self.nodes {
            let id = node.id.clone();
            let (params, buffers) = split_slots(&mut node.op);
            for (slot, t) in params.into_iter().chain(buffers) {
                out.push((format!("{id}.{slot}"), t));
            }
        }
        out
    }

    /// Kind of the node owning each named tensor, aligned with
    /// [`Graph::named_tensors`].
    pub fn named_tensor_kinds(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .flat_map(|n| std::iter::repeat_n(n.op.kind(), n.op.params().len() + n.op.buffers().len()))
            .collect()
    }

    /// Exact count of parameter scalars (buffers excluded).
    pub fn parameter_count(&self, trainable_only: bool) -> usize {
        self.params()
            .iter()
            .filter(|p| p.trainable || !trainable_only)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Marks one parameter (`<node>.<slot>`) trainable or frozen.
    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let (node, slot) = name
            .rsplit_once('.')
            .ok_or_else(|| invalid!("parameter names look like `<node>.<slot>`, got `{name}`"))?;
        let i = self.node_index(node).ok_or_else(|| invalid!("unknown node `{node}`"))?;
        let n = &mut self.nodes[i];
        let pos = n
            .op
            .params()
            .iter()
            .position(|(s, _)| *s == slot)
            .ok_or_else(|| invalid!("node `{node}` has no parameter `{slot}`"))?;
        n.trainable[pos] = trainable;
        Ok(())
    }

    /// SHA-256 over the ordered `(name, op kind, shape)` triples of every
    /// saved tensor.
    pub fn topology_hash(&self) -> [u8; 32] {
        topology_digest(
            self.named_tensors()
                .iter()
                .zip(self.named_tensor_kinds())
                .map(|((name, t), kind)| (name.as_str(), kind, t.shape())),
        )
    }

    // ---- freezing ---------------------------------------------------------

    /// Indices of parameterized nodes at or before the trunk boundary.
    pub fn trunk_layers(&self) -> Result<Vec<usize>> {
        let boundary = self
            .trunk_boundary
            .ok_or_else(|| invalid!("graph has no trunk boundary"))?;
        Ok((0..=boundary).filter(|&i| self.nodes[i].op.is_parameterized()).collect())
    }

    pub fn apply_freeze(&mut self, policy: FreezePolicy) -> Result<()> {
        let trunk = self.trunk_layers()?;
        let keep = match policy {
            FreezePolicy::TrainAll => trunk.len(),
            FreezePolicy::FreezeAllTrunk => 0,
            FreezePolicy::FreezeTrunkExceptLast(k) => {
                if k > trunk.len() {
                    return Err(invalid!(
                        "cannot keep the last {k} trunk layers trainable: the trunk has {}",
                        trunk.len()
                    ));
                }
                k
            }
        };
        for node in &mut self.nodes {
            node.trainable.iter_mut().for_each(|t| *t = true);
        }
        for &i in &trunk[..trunk.len() - keep] {
            self.nodes[i].trainable.iter_mut().for_each(|t| *t = false);
        }
        Ok(())
    }

    /// Same as [`Graph::apply_freeze`] with an explicit boundary node.
    pub fn apply_freeze_at(&mut self, policy: FreezePolicy, boundary: &str) -> Result<()> {
        self.set_trunk_boundary(boundary)?;
        self.apply_freeze(policy)
    }

    // ---- execution --------------------------------------------------------

    /// Evaluates every node and keeps every activation.
    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Activations<T>> {
        self.run(input, mode, Retain::All)
    }

    /// Train-mode forward that keeps only what [`Graph::backward`] will read,
    /// given the current freeze state.
    pub fn forward_train(&mut self, input: &Tensor<T>) -> Result<Activations<T>> {
        let flow = self.grad_flow(false);
        let mut keep = vec![false; self.nodes.len()];
        keep[self.output] = true;
        for (i, node) in self.nodes.iter().enumerate() {
            if flow[i] && node.op.backward_reads_inputs() {
                for &j in &node.inputs {
                    keep[j] = true;
                }
            }
        }
        self.run(input, Mode::Train, Retain::Backward(keep))
    }

    /// Inference-mode output, freeing activations as soon as they are
    /// consumed.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut last_use: Vec<usize> = (0..self.nodes.len()).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            for &j in &node.inputs {
                last_use[j] = last_use[j].max(i);
            }
        }
        last_use[self.output] = usize::MAX;
        // Inference never mutates, so route through a shared-reference path.
        let mut acts = self.run_shared(input, Mode::Infer, Retain::Streaming(last_use))?;
        Ok(acts.outputs[self.output].take().expect("output retained"))
    }

    fn run(&mut self, input: &Tensor<T>, mode: Mode, retain: Retain) -> Result<Activations<T>> {
        let mut updates = Vec::new();
        let acts = self.execute(input, mode, retain, &mut updates)?;
        for (i, (mean, var)) in updates {
            if let Op::BatchNorm(p) = &mut self.nodes[i].op {
                p.running_mean = mean;
                p.running_var = var;
            }
        }
        Ok(acts)
    }

    fn run_shared(&self, input: &Tensor<T>, mode: Mode, retain: Retain) -> Result<Activations<T>> {
        debug_assert_eq!(mode, Mode::Infer);
        self.execute(input, mode, retain, &mut Vec::new())
    }

    #[allow(clippy::type_complexity)]
    fn execute(
        &self,
        input: &Tensor<T>,
        mode: Mode,
        retain: Retain,
        updates: &mut Vec<(usize, (Tensor<T>, Tensor<T>))>,
    ) -> Result<Activations<T>> {
        let n = self.nodes.len();
        let mut outputs: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut caches: Vec<Option<BatchNormCache<T>>> = vec![None; n];

        for i in 0..n {
            let node = &self.nodes[i];
            let args: Vec<&Tensor<T>> = node
                .inputs
                .iter()
                .map(|&j| outputs[j].as_ref().expect("producers run first and are retained until consumed"))
                .collect();
            let wrap = |e| Error::at_node(&node.id, e);
            let out = match &node.op {
                Op::Input { .. } => {
                    input.dims4().map_err(wrap)?;
                    input.clone()
                }
                Op::Conv(p) => conv2d(args[0], p).map_err(wrap)?,
                Op::Depthwise(p) => depthwise_conv2d(args[0], p).map_err(wrap)?,
                Op::BatchNorm(p) => {
                    let r = batchnorm(args[0], p, mode).map_err(wrap)?;
                    if let Some(run) = r.running {
                        updates.push((i, run));
                    }
                    caches[i] = Some(r.cache);
                    r.output
                }
                Op::Activation(k) => activation(args[0], *k),
                Op::Pool(p) => pool(args[0], p).map_err(wrap)?,
                Op::GlobalPool(k) => global_pool(args[0], *k).map_err(wrap)?,
                Op::Concat => concat_channels(&args).map_err(wrap)?,
                Op::Add => ops::add(args[0], args[1]).map_err(wrap)?,
                Op::Dense(p) => fully_connected(args[0], p).map_err(wrap)?,
            };
            outputs[i] = Some(out);

            match &retain {
                Retain::All => {}
                Retain::Backward(keep) => {
                    // Free producers whose last consumer just ran and which
                    // backward does not need.
                    for &j in &node.inputs {
                        if !keep[j] && self.last_consumer(j) == i {
                            outputs[j] = None;
                        }
                    }
                }
                Retain::Streaming(last_use) => {
                    for &j in &node.inputs {
                        if last_use[j] == i {
                            outputs[j] = None;
                        }
                    }
                }
            }
        }

        Ok(Activations {
            outputs,
            caches,
            ids: self.index.clone(),
            output: self.output,
            mode,
        })
    }

    fn last_consumer(&self, j: usize) -> usize {
        self.nodes
            .iter()
            .enumerate()
            .rev()
            .find(|(_, n)| n.inputs.contains(&j))
            .map_or(j, |(i, _)| i)
    }

    /// `flow[i]`: node `i`'s output gradient is needed, because it or some
    /// ancestor owns a trainable parameter (or is the input, when requested).
    fn grad_flow(&self, want_input: bool) -> Vec<bool> {
        let mut flow = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            flow[i] = node.has_trainable()
                || node.inputs.iter().any(|&j| flow[j])
                || (i == 0 && want_input);
        }
        flow
    }

    /// Reverse-mode pass from the gradient of a scalar loss w.r.t. the graph
    /// output. Frozen parameters get no entry.
    pub fn backward(&self, acts: &Activations<T>, output_grad: &Tensor<T>) -> Result<Gradients<T>> {
        Ok(self.backward_impl(acts, output_grad, false)?.0)
    }

    /// Like [`Graph::backward`], also returning the gradient w.r.t. the input.
    pub fn backward_with_input(
        &self,
        acts: &Activations<T>,
        output_grad: &Tensor<T>,
    ) -> Result<(Gradients<T>, Tensor<T>)> {
        let (grads, input) = self.backward_impl(acts, output_grad, true)?;
        Ok((grads, input.expect("input gradient requested")))
    }

    fn backward_impl(
        &self,
        acts: &Activations<T>,
        output_grad: &Tensor<T>,
        want_input: bool,
    ) -> Result<(Gradients<T>, Option<Tensor<T>>)> {
        let out = acts.output();
        if out.shape() != output_grad.shape() {
            return Err(dim_err!(
                "output gradient {:?} does not match output {:?}",
                output_grad.shape(),
                out.shape()
            ));
        }
        let flow = self.grad_flow(want_input);
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[self.output] = Some(output_grad.clone());
        let mut params = Gradients::new();
        let mut input_grad = None;

        for i in (0..self.nodes.len()).rev() {
            if !flow[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let wrap = |e| Error::at_node(&node.id, e);
            let fetch = |k: usize| -> Result<&Tensor<T>> {
                let j = node.inputs[k];
                acts.outputs[j]
                    .as_ref()
                    .ok_or_else(|| Error::MissingActivation(self.nodes[j].id.clone()))
            };
            let need = |k: usize| flow[node.inputs[k]];
            let mut emit = |slot: usize, t: Tensor<T>| {
                if node.trainable[slot] {
                    let (name, _) = node.op.params()[slot];
                    params.insert(format!("{}.{name}", node.id), t);
                }
            };

            let upstream: Vec<Option<Tensor<T>>> = match &node.op {
                Op::Input { .. } => {
                    input_grad = Some(g);
                    Vec::new()
                }
                Op::Conv(p) => {
                    let r = conv2d_backward(fetch(0)?, p, &g, need(0)).map_err(wrap)?;
                    emit(0, r.weight);
                    if let Some(b) = r.bias {
                        emit(1, b);
                    }
                    vec![r.input]
                }
                Op::Depthwise(p) => {
                    let r = depthwise_conv2d_backward(fetch(0)?, p, &g, need(0)).map_err(wrap)?;
                    emit(0, r.weight);
                    vec![r.input]
                }
                Op::BatchNorm(p) => {
                    let cache = acts.caches[i]
                        .as_ref()
                        .ok_or_else(|| Error::MissingActivation(node.id.clone()))?;
                    let r = batchnorm_backward(fetch(0)?, p, cache, &g, need(0)).map_err(wrap)?;
                    emit(0, r.gamma);
                    emit(1, r.beta);
                    vec![r.input]
                }
                Op::Activation(k) => vec![need(0)
                    .then(|| activation_backward(fetch(0)?, *k, &g).map_err(wrap))
                    .transpose()?],
                Op::Pool(p) => vec![need(0)
                    .then(|| pool_backward(fetch(0)?, p, &g).map_err(wrap))
                    .transpose()?],
                Op::GlobalPool(k) => vec![need(0)
                    .then(|| global_pool_backward(fetch(0)?, *k, &g).map_err(wrap))
                    .transpose()?],
                Op::Concat => {
                    let widths: Vec<usize> = node
                        .inputs
                        .iter()
                        .map(|&j| *self.nodes[j].shape.last().expect("shape"))
                        .collect();
                    split_channels(&g, &widths).map_err(wrap)?.into_iter().map(Some).collect()
                }
                Op::Add => vec![Some(g.clone()), Some(g)],
                Op::Dense(p) => {
                    let r = fully_connected_backward(fetch(0)?, p, &g, need(0)).map_err(wrap)?;
                    emit(0, r.weight);
                    emit(1, r.bias);
                    vec![r.input]
                }
            };

            for (k, up) in upstream.into_iter().enumerate() {
                let j = node.inputs[k];
                if !flow[j] {
                    continue;
                }
                let Some(up) = up else { continue };
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&up).map_err(wrap)?,
                    slot @ None => *slot = Some(up),
                }
            }
        }

        Ok((params, input_grad.filter(|_| want_input)))
    }
}

#[allow(clippy::type_complexity)]
fn split_slots<T: Scalar>(op: &mut Op<T>) -> (Vec<(&'static str, &mut Tensor<T>)>, Vec<(&'static str, &mut Tensor<T>)>) {
    match op {
        Op::BatchNorm(p) => (
            vec![("gamma", &mut p.gamma), ("beta", &mut p.beta)],
            vec![
                ("running_mean", &mut p.running_mean),
                ("running_var", &mut p.running_var),
            ],
        ),
        other => (other.params_mut(), Vec::new()),
    }
}

pub(crate) fn topology_digest<'a>(entries: impl Iterator<Item = (&'a str, &'a str, &'a [usize])>) -> [u8; 32] {
    let mut h = Sha256::new();
    for (name, kind, shape) in entries {
        h.update(name.as_bytes());
        h.update([0]);
        h.update(kind.as_bytes());
        h.update([0]);
        for d in shape {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(b"\n");
    }
    h.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Padding;

    fn conv(cin: usize, cout: usize, fill: f64) -> Op<f64> {
        Op::Conv(ConvParams::new(Tensor::full([3, 3, cin, cout], fill), Some(Tensor::zeros([cout])), 1, Padding::Same).unwrap())
    }

    #[test]
    fn single_identity_graph() {
        let mut g = Graph::<f32>::new("x", 2, 2, 1).unwrap();
        g.add("id", Op::Activation(ActivationKind::Relu), &["x"]).unwrap();
        let x = Tensor::new([1, 2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(g.forward(&x, Mode::Infer).unwrap().output(), &x);
        assert_eq!(g.predict(&x).unwrap(), x);
    }

    #[test]
    fn rejects_duplicates_and_unknown_inputs() {
        let mut g = Graph::<f32>::new("x", 2, 2, 1).unwrap();
        assert!(g.add("x", Op::Add, &["x", "x"]).is_err());
        assert!(g.add("y", Op::Activation(ActivationKind::Relu), &["nope"]).is_err());
    }

    #[test]
    fn build_time_shape_errors_name_the_node() {
        let mut g = Graph::<f64>::new("x", 4, 4, 3).unwrap();
        let err = g.add("bad", conv(2, 4, 0.1), &["x"]).unwrap_err();
        assert!(err.to_string().contains("`bad`"), "{err}");
    }

    #[test]
    fn frozen_graph_has_no_gradients() {
        let mut g = Graph::<f64>::new("x", 4, 4, 2).unwrap();
        g.add("c", conv(2, 3, 0.1), &["x"]).unwrap();
        g.set_trunk_boundary("c").unwrap();
        g.apply_freeze(FreezePolicy::FreezeAllTrunk).unwrap();
        let x = Tensor::full([1, 4, 4, 2], 1.0);
        let acts = g.forward_train(&x).unwrap();
        let grads = g.backward(&acts, &Tensor::full([1, 4, 4, 3], 1.0)).unwrap();
        assert!(grads.is_empty());
    }

    #[test]
    fn fan_out_sums_branch_gradients() {
        // y = relu(x) + relu(x): dy/dx = 2 where x > 0.
        let mut g = Graph::<f64>::new("x", 1, 2, 1).unwrap();
        g.add("r1", Op::Activation(ActivationKind::Relu), &["x"]).unwrap();
        g.add("r2", Op::Activation(ActivationKind::Relu), &["x"]).unwrap();
        g.add("sum", Op::Add, &["r1", "r2"]).unwrap();
        let x = Tensor::new([1, 1, 2, 1], vec![1.5, -1.0]).unwrap();
        let acts = g.forward(&x, Mode::Train).unwrap();
        let (_, dx) = g.backward_with_input(&acts, &Tensor::full([1, 1, 2, 1], 1.0)).unwrap();
        assert_eq!(dx.data(), &[2.0, 0.0]);
    }

    #[test]
    fn freeze_policy_strings_round_trip() {
        for p in [
            FreezePolicy::TrainAll,
            FreezePolicy::FreezeAllTrunk,
            FreezePolicy::FreezeTrunkExceptLast(6),
        ] {
            assert_eq!(p.to_string().parse::<FreezePolicy>().unwrap(), p);
        }
        assert!("trunk-except-last-x".parse::<FreezePolicy>().is_err());
    }

    #[test]
    fn freeze_depth_is_validated() {
        let mut g = Graph::<f64>::new("x", 4, 4, 2).unwrap();
        g.add("c", conv(2, 3, 0.1), &["x"]).unwrap();
        g.set_trunk_boundary("c").unwrap();
        assert!(g.apply_freeze(FreezePolicy::FreezeTrunkExceptLast(2)).is_err());
        g.apply_freeze(FreezePolicy::FreezeTrunkExceptLast(1)).unwrap();
        assert_eq!(g.parameter_count(true), g.parameter_count(false));
    }

    #[test]
    fn missing_activation_is_reported() {
        let mut g = Graph::<f64>::new("x", 4, 4, 2).unwrap();
        g.add("c", conv(2, 3, 0.1), &["x"]).unwrap();
        g.add("r", Op::Activation(ActivationKind::Relu), &["c"]).unwrap();
        let x = Tensor::full([1, 4, 4, 2], 1.0);
        let mut acts = g.forward(&x, Mode::Train).unwrap();
        acts.outputs[0] = None;
        let err = g.backward(&acts, &Tensor::full([1, 4, 4, 3], 1.0)).unwrap_err();
        assert!(matches!(err, Error::MissingActivation(ref id) if id == "x"), "{err}");
    }
}
