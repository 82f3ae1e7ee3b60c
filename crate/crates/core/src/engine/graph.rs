//! Declarative computation graphs with a recorded forward tape and reverse-mode
//! backward pass.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::engine::init::glorot_init;
use crate::engine::ops::{self, BnCache};
use crate::engine::{Real, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;
pub type ParamId = usize;

/// Running statistic momentum and variance epsilon for batch normalization.
pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Input,
    /// 3-per-axis same-padded convolution.
    Conv,
    /// 1-per-axis convolution.
    PointwiseConv,
    MaxPool,
    Upsample,
    BatchNorm { momentum: f64, eps: f64 },
    Relu,
    Dropout { rate: f64 },
    Concat,
    Add,
    Flatten,
    Dense,
    Softmax,
}

impl OpKind {
    pub fn label(&self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Conv => "conv",
            OpKind::PointwiseConv => "conv1",
            OpKind::MaxPool => "maxpool",
            OpKind::Upsample => "upsample",
            OpKind::BatchNorm { .. } => "batchnorm",
            OpKind::Relu => "relu",
            OpKind::Dropout { .. } => "dropout",
            OpKind::Concat => "concat",
            OpKind::Add => "add",
            OpKind::Flatten => "flatten",
            OpKind::Dense => "dense",
            OpKind::Softmax => "softmax",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    Scale,
    Shift,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub role: ParamRole,
    pub tensor: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct GraphNode {
    pub name: String,
    pub kind: OpKind,
    pub inputs: Vec<NodeId>,
    pub params: Vec<ParamId>,
    /// Output channels (features after flattening).
    pub channels: usize,
    /// Output spatial extent, empty once flattened.
    pub spatial: Vec<usize>,
}

/// Scalar loss together with its gradient with respect to the graph output.
#[derive(Clone, Debug)]
pub struct Loss<T> {
    pub value: f64,
    pub grad: Tensor<T>,
}

enum Cache<T> {
    None,
    Pool(Vec<usize>),
    Bn(BnCache<T>),
    Mask(Option<Vec<T>>),
}

struct Tape<T> {
    mode: Mode,
    values: Vec<Option<Tensor<T>>>,
    caches: Vec<Cache<T>>,
}

pub struct Graph<T> {
    nodes: Vec<GraphNode>,
    params: Vec<Param<T>>,
    order: Vec<NodeId>,
    input: NodeId,
    output: NodeId,
    marks: BTreeMap<String, NodeId>,
    tape: Option<Tape<T>>,
    frozen: bool,
    input_grad: bool,
}

impl<T> std::fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("params", &self.params.len())
            .field("frozen", &self.frozen)
            .finish()
    }
}

impl<T: Real> Clone for Graph<T> {
    /// Copies structure and parameters; the recorded tape is not carried over.
    fn clone(&self) -> Self {
        Graph {
            nodes: self.nodes.clone(),
            params: self.params.clone(),
            order: self.order.clone(),
            input: self.input,
            output: self.output,
            marks: self.marks.clone(),
            tape: None,
            frozen: self.frozen,
            input_grad: self.input_grad,
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn order(&self) -> &[NodeId] {
        &self.order
    }

    pub fn input_node(&self) -> NodeId {
        self.input
    }

    pub fn output_node(&self) -> NodeId {
        self.output
    }

    /// Node registered under `name` by the builder (e.g. `"features"`).
    pub fn marked(&self, name: &str) -> Option<NodeId> {
        self.marks.get(name).copied()
    }

    pub fn input_shape(&self) -> (usize, &[usize]) {
        let n = &self.nodes[self.input];
        (n.channels, &n.spatial)
    }

    /// Trainable parameter count: weights, biases, BN scale and shift.
    pub fn count_params(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.role.trainable())
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// A frozen graph computes no parameter gradients and is skipped by the optimizer.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        if frozen {
            self.zero_grads();
        }
    }

    /// Whether `backward` also returns the gradient with respect to the input.
    pub fn set_input_grad(&mut self, enabled: bool) {
        self.input_grad = enabled;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.grad = None;
        }
    }

    pub fn clear_tape(&mut self) {
        self.tape = None;
    }

    /// Hash of every piecewise-linear branch taken in the last forward pass
    /// (ReLU input signs and max-pool winners). Two passes with equal
    /// signatures ran through the same linear region.
    pub(crate) fn branch_signature(&self) -> Option<u64> {
        let tape = self.tape.as_ref()?;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for (id, node) in self.nodes.iter().enumerate() {
            match (&node.kind, &tape.caches[id]) {
                (OpKind::Relu, _) => {
                    let Some(x) = tape.values[node.inputs[0]].as_ref() else { continue };
                    for chunk in x.data().chunks(64) {
                        let bits = chunk.iter().enumerate().fold(0u64, |acc, (i, v)| acc | (u64::from(*v > T::zero()) << i));
                        mix(bits);
                    }
                }
                (_, Cache::Pool(arg)) => arg.iter().for_each(|&a| mix(a as u64)),
                _ => {}
            }
        }
        Some(h)
    }

    pub fn forward<R: Rng + ?Sized>(&mut self, input: &Tensor<T>, mode: Mode, rng: &mut R) -> Result<Tensor<T>> {
        self.forward_to(input, self.output, mode, rng)
    }

    /// Run the graph up to (and including) `target`, recording the tape.
    pub fn forward_to<R: Rng + ?Sized>(
        &mut self,
        input: &Tensor<T>,
        target: NodeId,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        let (c, spatial) = self.input_shape();
        if input.shape().len() < 2 || input.channels() != c || input.spatial() != spatial {
            return Err(Error::shape(
                "forward",
                format!(
                    "input {:?} does not match graph input [batch, {c}, {spatial:?}]",
                    input.shape()
                ),
            ));
        }
        let n = self.nodes.len();
        let mut values: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let mut caches: Vec<Cache<T>> = (0..n).map(|_| Cache::None).collect();
        let order = self.order.clone();
        for &id in &order {
            let (value, cache) = self.eval_node(id, input, &values, mode, rng)?;
            values[id] = Some(value);
            caches[id] = cache;
            if id == target {
                break;
            }
        }
        let out = values[target]
            .as_ref()
            .ok_or_else(|| Error::State(format!("node {target} not reached")))?
            .clone_values();
        self.tape = Some(Tape { mode, values, caches });
        Ok(out)
    }

    fn eval_node<R: Rng + ?Sized>(
        &mut self,
        id: NodeId,
        input: &Tensor<T>,
        values: &[Option<Tensor<T>>],
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor<T>, Cache<T>)> {
        let node = &self.nodes[id];
        let arg = |i: usize| -> &Tensor<T> { values[node.inputs[i]].as_ref().expect("topological order") };
        let p = |i: usize| -> &Tensor<T> { &self.params[node.params[i]].tensor };
        let out = match &node.kind {
            OpKind::Input => (input.clone_values(), Cache::None),
            OpKind::Conv => (ops::conv_nd(arg(0), p(0), p(1))?, Cache::None),
            OpKind::PointwiseConv => (ops::conv_1x(arg(0), p(0), p(1))?, Cache::None),
            OpKind::MaxPool => {
                let (y, arg) = ops::maxpool_nd(arg(0))?;
                (y, Cache::Pool(arg))
            }
            OpKind::Upsample => (ops::upsample_nd(arg(0))?, Cache::None),
            OpKind::BatchNorm { momentum, eps } => {
                let (momentum, eps) = (*momentum, *eps);
                match mode {
                    Mode::Train => {
                        let (y, cache, stats) = ops::batchnorm_train(arg(0), p(0), p(1), eps)?;
                        let (rm, rv) = (node.params[2], node.params[3]);
                        let blend = |old: &mut [T], new: &[f64]| {
                            for (o, &n) in old.iter_mut().zip(new) {
                                *o = T::from_f64c(momentum * o.to_f64c() + (1.0 - momentum) * n);
                            }
                        };
                        blend(self.params[rm].tensor.data_mut(), &stats.mean);
                        blend(self.params[rv].tensor.data_mut(), &stats.var_unbiased);
                        (y, Cache::Bn(cache))
                    }
                    Mode::Eval => (ops::batchnorm_eval(arg(0), p(0), p(1), p(2), p(3), eps)?, Cache::None),
                }
            }
            OpKind::Relu => (ops::relu(arg(0)), Cache::None),
            OpKind::Dropout { rate } => {
                let (y, mask) = ops::dropout(arg(0), *rate, mode == Mode::Train, rng)?;
                (y, Cache::Mask(mask))
            }
            OpKind::Concat => {
                let parts: Vec<&Tensor<T>> = (0..node.inputs.len()).map(arg).collect();
                (ops::concat(&parts)?, Cache::None)
            }
            OpKind::Add => (ops::residual_add(arg(0), arg(1))?, Cache::None),
            OpKind::Flatten => {
                let x = arg(0);
                let shape = vec![x.batch(), x.item_size()];
                (x.clone_values().reshape(shape)?, Cache::None)
            }
            OpKind::Dense => (ops::dense(arg(0), p(0), p(1))?, Cache::None),
            OpKind::Softmax => (ops::softmax(arg(0)), Cache::None),
        };
        Ok(out)
    }

    /// Reverse pass from the graph output. Parameter gradients accumulate into
    /// each parameter's gradient slot. Returns the input gradient when enabled
    /// with [`Graph::set_input_grad`].
    pub fn backward(&mut self, loss: &Loss<T>) -> Result<Option<Tensor<T>>> {
        let tape = self
            .tape
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        let out_val = tape.values[self.output]
            .as_ref()
            .ok_or_else(|| Error::State("forward pass did not reach the output node".into()))?;
        if out_val.shape() != loss.grad.shape() {
            return Err(Error::shape(
                "backward",
                format!(
                    "loss gradient {:?} vs output {:?}",
                    loss.grad.shape(),
                    out_val.shape()
                ),
            ));
        }
        let n = self.nodes.len();
        let needs = self.requires_grad();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[self.output] = Some(loss.grad.data().to_vec());
        let mut param_grads: Vec<(ParamId, Vec<T>)> = Vec::new();
        let train_params = !self.frozen;

        for &id in self.order.iter().rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.kind == OpKind::Input {
                grads[id] = Some(dy);
                continue;
            }
            let val = |i: NodeId| tape.values[i].as_ref().expect("recorded");
            let p = |i: usize| &self.params[node.params[i]].tensor;
            let need_in = |k: usize| needs[node.inputs[k]];
            let mut input_grads: Vec<Option<Vec<T>>> = Vec::new();
            match &node.kind {
                OpKind::Input => unreachable!(),
                OpKind::Conv | OpKind::PointwiseConv => {
                    let x = val(node.inputs[0]);
                    let g = if node.kind == OpKind::Conv {
                        ops::conv_nd_backward(x, p(0), p(1), &dy, need_in(0))?
                    } else {
                        ops::conv_1x_backward(x, p(0), p(1), &dy, need_in(0))?
                    };
                    if train_params {
                        param_grads.push((node.params[0], g.weight));
                        param_grads.push((node.params[1], g.bias));
                    }
                    input_grads.push(g.input);
                }
                OpKind::MaxPool => {
                    let Cache::Pool(arg) = &tape.caches[id] else { unreachable!() };
                    let len = val(node.inputs[0]).len();
                    input_grads.push(Some(ops::maxpool_nd_backward(len, arg, &dy)));
                }
                OpKind::Upsample => {
                    let x = val(node.inputs[0]);
                    input_grads.push(Some(ops::upsample_nd_backward(x.shape(), &dy)?));
                }
                OpKind::BatchNorm { eps, .. } => {
                    let x = val(node.inputs[0]);
                    let (dx, dg, db) = match &tape.caches[id] {
                        Cache::Bn(cache) => ops::batchnorm_train_backward(&dy, p(0), cache, x.shape()),
                        _ => ops::batchnorm_eval_backward(&dy, x, p(0), p(2), p(3), *eps),
                    };
                    if train_params {
                        param_grads.push((node.params[0], dg));
                        param_grads.push((node.params[1], db));
                    }
                    input_grads.push(Some(dx));
                }
                OpKind::Relu => {
                    input_grads.push(Some(ops::relu_backward(val(node.inputs[0]), &dy)));
                }
                OpKind::Dropout { .. } => {
                    let dx = match &tape.caches[id] {
                        Cache::Mask(Some(mask)) => dy.iter().zip(mask).map(|(&g, &m)| g * m).collect(),
                        _ => dy,
                    };
                    input_grads.push(Some(dx));
                }
                OpKind::Concat => {
                    let first = val(node.inputs[0]);
                    let chans: Vec<usize> = node.inputs.iter().map(|&i| val(i).channels()).collect();
                    for g in ops::concat_backward(&dy, first.batch(), &chans, first.spatial_size()) {
                        input_grads.push(Some(g));
                    }
                }
                OpKind::Add => {
                    input_grads.push(Some(dy.clone()));
                    input_grads.push(Some(dy));
                }
                OpKind::Flatten => input_grads.push(Some(dy)),
                OpKind::Dense => {
                    let (dx, dw, db) = ops::dense_backward(val(node.inputs[0]), p(0), &dy, need_in(0));
                    if train_params {
                        param_grads.push((node.params[0], dw));
                        param_grads.push((node.params[1], db));
                    }
                    input_grads.push(dx);
                }
                OpKind::Softmax => {
                    input_grads.push(Some(ops::softmax_backward(val(id), &dy)));
                }
            }
            for (k, g) in input_grads.into_iter().enumerate() {
                let src = node.inputs[k];
                let Some(g) = g else { continue };
                if !needs[src] {
                    continue;
                }
                match grads[src].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => grads[src] = Some(g),
                }
            }
        }

        for (pid, g) in param_grads {
            let t = &mut self.params[pid].tensor;
            match t.grad.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                None => t.grad = Some(g),
            }
        }

        let input_grad = if self.input_grad {
            let x = self.tape.as_ref().and_then(|t| t.values[self.input].as_ref()).expect("recorded");
            let g = grads[self.input].take().unwrap_or_else(|| vec![T::zero(); x.len()]);
            Some(Tensor::new(x.shape().to_vec(), g)?)
        } else {
            None
        };
        Ok(input_grad)
    }

    /// Mode of the last recorded forward pass.
    pub fn tape_mode(&self) -> Option<Mode> {
        self.tape.as_ref().map(|t| t.mode)
    }

    fn requires_grad(&self) -> Vec<bool> {
        let mut needs = vec![false; self.nodes.len()];
        for &id in &self.order {
            let node = &self.nodes[id];
            needs[id] = match node.kind {
                OpKind::Input => self.input_grad,
                _ => {
                    node.inputs.iter().any(|&i| needs[i])
                        || (!self.frozen && node.params.iter().any(|&p| self.params[p].role.trainable()))
                }
            };
        }
        needs
    }
}

/// Incremental builder with shape inference. Nodes may only reference
/// earlier nodes, so every built graph is acyclic.
pub struct GraphBuilder<T> {
    nodes: Vec<GraphNode>,
    params: Vec<Param<T>>,
    marks: BTreeMap<String, NodeId>,
    rng: ChaCha8Rng,
    input: Option<NodeId>,
}

impl<T: Real> GraphBuilder<T> {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        GraphBuilder {
            nodes: Vec::new(),
            params: Vec::new(),
            marks: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            input: None,
        }
    }

    pub fn node(&self, id: NodeId) -> &GraphNode {
        &self.nodes[id]
    }

    fn push(&mut self, name: &str, kind: OpKind, inputs: Vec<NodeId>, params: Vec<ParamId>, channels: usize, spatial: Vec<usize>) -> NodeId {
        self.nodes.push(GraphNode {
            name: name.to_string(),
            kind,
            inputs,
            params,
            channels,
            spatial,
        });
        self.nodes.len() - 1
    }

    fn add_param(&mut self, name: String, role: ParamRole, tensor: Tensor<T>) -> ParamId {
        self.params.push(Param { name, role, tensor });
        self.params.len() - 1
    }

    fn check(&self, id: NodeId) -> Result<&GraphNode> {
        self.nodes
            .get(id)
            .ok_or_else(|| Error::State(format!("unknown node {id}")))
    }

    pub fn input(&mut self, channels: usize, spatial: &[usize]) -> Result<NodeId> {
        if self.input.is_some() {
            return Err(Error::State("graph already has an input".into()));
        }
        if !(spatial.is_empty() || spatial.len() == 2 || spatial.len() == 3) || channels == 0 {
            return Err(Error::shape("input", format!("channels {channels}, spatial {spatial:?}")));
        }
        let id = self.push("input", OpKind::Input, vec![], vec![], channels, spatial.to_vec());
        self.input = Some(id);
        Ok(id)
    }

    fn conv_like(&mut self, x: NodeId, out: usize, name: &str, kernel: usize) -> Result<NodeId> {
        let src = self.check(x)?.clone();
        if src.spatial.is_empty() {
            return Err(Error::shape("conv", format!("{name}: input is flattened")));
        }
        let taps = kernel.pow(src.spatial.len() as u32);
        let mut wshape = vec![out, src.channels];
        wshape.extend(std::iter::repeat_n(kernel, src.spatial.len()));
        let w = glorot_init(wshape, src.channels * taps, out * taps, &mut self.rng);
        let wid = self.add_param(format!("{name}.weight"), ParamRole::Weight, w);
        let bid = self.add_param(format!("{name}.bias"), ParamRole::Bias, Tensor::zeros(vec![out]));
        let kind = if kernel == 3 { OpKind::Conv } else { OpKind::PointwiseConv };
        Ok(self.push(name, kind, vec![x], vec![wid, bid], out, src.spatial))
    }

    pub fn conv(&mut self, x: NodeId, out: usize, name: &str) -> Result<NodeId> {
        self.conv_like(x, out, name, 3)
    }

    pub fn pointwise_conv(&mut self, x: NodeId, out: usize, name: &str) -> Result<NodeId> {
        self.conv_like(x, out, name, 1)
    }

    pub fn batchnorm(&mut self, x: NodeId, name: &str) -> Result<NodeId> {
        let src = self.check(x)?.clone();
        let c = src.channels;
        let ids = vec![
            self.add_param(format!("{name}.scale"), ParamRole::Scale, Tensor::full(vec![c], T::one())),
            self.add_param(format!("{name}.shift"), ParamRole::Shift, Tensor::zeros(vec![c])),
            self.add_param(format!("{name}.running_mean"), ParamRole::RunningMean, Tensor::zeros(vec![c])),
            self.add_param(format!("{name}.running_var"), ParamRole::RunningVar, Tensor::full(vec![c], T::one())),
        ];
        let kind = OpKind::BatchNorm {
            momentum: BN_MOMENTUM,
            eps: BN_EPSILON,
        };
        Ok(self.push(name, kind, vec![x], ids, c, src.spatial))
    }

    pub fn relu(&mut self, x: NodeId, name: &str) -> Result<NodeId> {
        let src = self.check(x)?.clone();
        Ok(self.push(name, OpKind::Relu, vec![x], vec![], src.channels, src.spatial))
    }

    pub fn maxpool(&mut self, x: NodeId, name: &str) -> Result<NodeId> {
        let src = self.check(x)?.clone();
        if src.spatial.is_empty() || src.spatial.iter().any(|d| d % 2 != 0) {
            return Err(Error::shape(
                "maxpool_nd",
                format!("{name}: spatial dims {:?} are not all even", src.spatial),
            ));
        }
        let spatial = src.spatial.iter().map(|d| d / 2).collect();
        Ok(self.push(name, OpKind::MaxPool, vec![x], vec![], src.channels, spatial))
    }

    pub fn upsample(&mut self, x: NodeId, name: &str) -> Result<NodeId> {
        let src = self.check(x)?.clone();
        if src.spatial.is_empty() {
            return Err(Error::shape("upsample_nd", format!("{name}: input is flattened")));
        }
        let spatial = src.spatial.iter().map(|d| d * 2).collect();
        Ok(self.push(name, OpKind::Upsample, vec![x], vec![], src.channels, spatial))
    }

    pub fn dropout(&mut self, x: NodeId, rate: f64, name: &str) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Param(format!("dropout rate {rate} outside [0, 1)")));
        }
        let src = self.check(x)?.clone();
        Ok(self.push(name, OpKind::Dropout { rate }, vec![x], vec![], src.channels, src.spatial))
    }

    pub fn concat(&mut self, xs: &[NodeId], name: &str) -> Result<NodeId> {
        let first = self.check(*xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)?.clone();
        let mut channels = 0;
        for &x in xs {
            let n = self.check(x)?;
            if n.spatial != first.spatial || n.spatial.is_empty() {
                return Err(Error::shape(
                    "concat",
                    format!("{name}: spatial {:?} vs {:?}", n.spatial, first.spatial),
                ));
            }
            channels += n.channels;
        }
        Ok(self.push(name, OpKind::Concat, xs.to_vec(), vec![], channels, first.spatial))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId, name: &str) -> Result<NodeId> {
        let (na, nb) = (self.check(a)?.clone(), self.check(b)?.clone());
        if na.channels != nb.channels || na.spatial != nb.spatial {
            return Err(Error::shape(
                "residual_add",
                format!("{name}: {}x{:?} vs {}x{:?}", na.channels, na.spatial, nb.channels, nb.spatial),
            ));
        }
        Ok(self.push(name, OpKind::Add, vec![a, b], vec![], na.channels, na.spatial))
    }

    pub fn flatten(&mut self, x: NodeId, name: &str) -> Result<NodeId> {
        let src = self.check(x)?.clone();
        let features = src.channels * src.spatial.iter().product::<usize>();
        Ok(self.push(name, OpKind::Flatten, vec![x], vec![], features, vec![]))
    }

    pub fn dense(&mut self, x: NodeId, out: usize, name: &str) -> Result<NodeId> {
        let src = self.check(x)?.clone();
        if !src.spatial.is_empty() {
            return Err(Error::shape("dense", format!("{name}: input must be flattened")));
        }
        let w = glorot_init(vec![out, src.channels], src.channels, out, &mut self.rng);
        let wid = self.add_param(format!("{name}.weight"), ParamRole::Weight, w);
        let bid = self.add_param(format!("{name}.bias"), ParamRole::Bias, Tensor::zeros(vec![out]));
        Ok(self.push(name, OpKind::Dense, vec![x], vec![wid, bid], out, vec![]))
    }

    pub fn softmax(&mut self, x: NodeId, name: &str) -> Result<NodeId> {
        let src = self.check(x)?.clone();
        Ok(self.push(name, OpKind::Softmax, vec![x], vec![], src.channels, src.spatial))
    }

    /// Register a node under a public name, e.g. the classifier feature tap.
    pub fn mark(&mut self, name: &str, id: NodeId) -> Result<()> {
        self.check(id)?;
        self.marks.insert(name.to_string(), id);
        Ok(())
    }

    pub fn finish(self, output: NodeId) -> Result<Graph<T>> {
        let input = self.input.ok_or_else(|| Error::State("graph has no input".into()))?;
        if output >= self.nodes.len() {
            return Err(Error::State(format!("unknown output node {output}")));
        }
        let order = topological_order(&self.nodes)?;
        Ok(Graph {
            nodes: self.nodes,
            params: self.params,
            order,
            input,
            output,
            marks: self.marks,
            tape: None,
            frozen: false,
            input_grad: false,
        })
    }
}

/// Kahn's algorithm; ties broken by node id so the order is deterministic.
fn topological_order(nodes: &[GraphNode]) -> Result<Vec<NodeId>> {
    let n = nodes.len();
    let mut indegree = vec![0usize; n];
    let mut users: Vec<Vec<NodeId>> = vec![Vec::new(); n];
    for (id, node) in nodes.iter().enumerate() {
        for &i in &node.inputs {
            if i >= n {
                return Err(Error::State(format!("node {id} references unknown node {i}")));
            }
            indegree[id] += 1;
            users[i].push(id);
        }
    }
    let mut ready: std::collections::BTreeSet<NodeId> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(id) = ready.pop_first() {
        order.push(id);
        for &u in &users[id] {
            indegree[u] -= 1;
            if indegree[u] == 0 {
                ready.insert(u);
            }
        }
    }
    if order.len() != n {
        return Err(Error::State("graph contains a cycle".into()));
    }
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn backward_before_forward_is_a_state_error() {
        let mut b = GraphBuilder::<f64>::new(0);
        let x = b.input(1, &[2, 2]).unwrap();
        let mut g = b.finish(x).unwrap();
        let loss = Loss {
            value: 0.0,
            grad: Tensor::zeros(vec![1, 1, 2, 2]),
        };
        assert!(matches!(g.backward(&loss), Err(Error::State(_))));
    }

    #[test]
    fn sum_loss_gives_unit_input_gradient() {
        let mut b = GraphBuilder::<f64>::new(0);
        let x = b.input(2, &[2, 2]).unwrap();
        let mut g = b.finish(x).unwrap();
        g.set_input_grad(true);
        let input = Tensor::from_f64(vec![1, 2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let y = g.forward(&input, Mode::Train, &mut rng()).unwrap();
        let loss = Loss {
            value: y.data().iter().sum(),
            grad: Tensor::full(y.shape().to_vec(), 1.0),
        };
        let dx = g.backward(&loss).unwrap().unwrap();
        assert!(dx.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn squared_sum_gradient_via_fan_out() {
        // y = x + x, loss = sum(x^2) expressed as 0.25 * sum(y^2): dL/dx = 2x.
        let mut b = GraphBuilder::<f64>::new(0);
        let x = b.input(1, &[1, 2]).unwrap();
        let y = b.add(x, x, "double").unwrap();
        let mut g = b.finish(y).unwrap();
        g.set_input_grad(true);
        let input = Tensor::from_f64(vec![1, 1, 1, 2], &[1.0, 2.0]).unwrap();
        let out = g.forward(&input, Mode::Train, &mut rng()).unwrap();
        let grad: Vec<f64> = out.data().iter().map(|v| 0.5 * v).collect();
        let loss = Loss {
            value: out.data().iter().map(|v| 0.25 * v * v).sum(),
            grad: Tensor::new(out.shape().to_vec(), grad).unwrap(),
        };
        let dx = g.backward(&loss).unwrap().unwrap();
        assert_eq!(dx.data(), &[2.0, 4.0]);
    }

    #[test]
    fn builder_rejects_bad_shapes() {
        let mut b = GraphBuilder::<f32>::new(0);
        let x = b.input(1, &[6, 6]).unwrap();
        let p = b.maxpool(x, "p").unwrap();
        assert!(b.maxpool(p, "p2").is_err());
        let c = b.conv(x, 2, "c").unwrap();
        assert!(b.add(x, c, "bad").is_err());
        assert!(b.concat(&[x, p], "bad").is_err());
        assert!(b.dense(x, 3, "bad").is_err());
    }

    #[test]
    fn topological_order_detects_cycles() {
        let node = |inputs: Vec<NodeId>| GraphNode {
            name: String::new(),
            kind: OpKind::Relu,
            inputs,
            params: vec![],
            channels: 1,
            spatial: vec![],
        };
        assert!(topological_order(&[node(vec![1]), node(vec![0])]).is_err());
        assert_eq!(topological_order(&[node(vec![]), node(vec![0])]).unwrap(), vec![0, 1]);
    }

    #[test]
    fn count_params_examples() {
        let mut b = GraphBuilder::<f32>::new(0);
        let x = b.input(2, &[]).unwrap();
        let d = b.dense(x, 3, "fc").unwrap();
        assert_eq!(b.finish(d).unwrap().count_params(), 9);

        let mut b = GraphBuilder::<f32>::new(0);
        let x = b.input(1, &[4, 4]).unwrap();
        let c = b.conv(x, 1, "c").unwrap();
        assert_eq!(b.finish(c).unwrap().count_params(), 10);

        let mut b = GraphBuilder::<f32>::new(0);
        let x = b.input(3, &[4, 4]).unwrap();
        let n = b.batchnorm(x, "bn").unwrap();
        // scale + shift only; running stats excluded.
        assert_eq!(b.finish(n).unwrap().count_params(), 6);
    }
}
