//! Layer graphs: declaration, shape inference, forward execution with a
//! recorded tape, and reverse-mode gradients.

use std::collections::{HashMap, HashSet};

use indexmap::IndexMap;
use serde::Serialize;

use super::ops::{self, BnCache, BnMode, BnParams};
use super::params::{EntryKind, ParamStore};
use crate::data::Rng;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor, Window};

/// Index of a value in a graph: `0` is the graph input, `k + 1` is the
/// output of node `k`.
pub type ValueId = usize;

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        filters: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    DepthwiseConv {
        channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    LeakyRelu {
        slope: f64,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool,
    AdaptiveAvgPool {
        height: usize,
        width: usize,
    },
    FullyConnected {
        in_features: usize,
        units: usize,
        bias: bool,
    },
    Dropout {
        rate: f64,
    },
    Softmax,
    #[serde(rename = "add_junction")]
    Add,
}

/// One owned entry of a layer: name suffix, shape and role.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamSlot {
    pub suffix: &'static str,
    pub shape: Shape,
    pub kind: EntryKind,
}

impl ParamSlot {
    const fn param(suffix: &'static str, shape: Shape) -> Self {
        ParamSlot { suffix, shape, kind: EntryKind::Parameter }
    }

    const fn buffer(suffix: &'static str, shape: Shape) -> Self {
        ParamSlot { suffix, shape, kind: EntryKind::Buffer }
    }
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::DepthwiseConv { .. } => "depthwise_conv",
            LayerKind::BatchNorm { .. } => "batch_norm",
            LayerKind::Relu => "relu",
            LayerKind::LeakyRelu { .. } => "leaky_relu",
            LayerKind::MaxPool { .. } => "max_pool",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::AdaptiveAvgPool { .. } => "adaptive_avg_pool",
            LayerKind::FullyConnected { .. } => "fully_connected",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::Softmax => "softmax",
            LayerKind::Add => "add_junction",
        }
    }

    /// Entries this layer owns, in storage order.
    pub fn param_slots(&self) -> Vec<ParamSlot> {
        match *self {
            LayerKind::Conv { in_channels, filters, kernel, bias, .. } => {
                let mut v = vec![ParamSlot::param("weight", Shape::new(filters, in_channels, kernel, kernel))];
                if bias {
                    v.push(ParamSlot::param("bias", Shape::new(filters, 1, 1, 1)));
                }
                v
            }
            LayerKind::DepthwiseConv { channels, kernel, .. } => {
                vec![ParamSlot::param("weight", Shape::new(channels, 1, kernel, kernel))]
            }
            LayerKind::BatchNorm { channels } => {
                let s = Shape::new(channels, 1, 1, 1);
                vec![
                    ParamSlot::param("gamma", s),
                    ParamSlot::param("beta", s),
                    ParamSlot::buffer("running_mean", s),
                    ParamSlot::buffer("running_var", s),
                ]
            }
            LayerKind::FullyConnected { in_features, units, bias } => {
                let mut v = vec![ParamSlot::param("weight", Shape::new(units, in_features, 1, 1))];
                if bias {
                    v.push(ParamSlot::param("bias", Shape::new(units, 1, 1, 1)));
                }
                v
            }
            _ => Vec::new(),
        }
    }

    fn arity(&self) -> usize {
        if matches!(self, LayerKind::Add) {
            2
        } else {
            1
        }
    }

    /// Static output shape for the given input shapes.
    pub fn output_shape(&self, layer: &str, inputs: &[Shape]) -> Result<Shape> {
        if inputs.len() != self.arity() {
            return Err(Error::shape(layer, format!("expects {} inputs, got {}", self.arity(), inputs.len())));
        }
        let x = inputs[0];
        if x.is_empty() {
            return Err(Error::shape(layer, format!("zero-extent input {x}")));
        }
        let expect_channels = |c: usize| -> Result<()> {
            if x.c != c {
                return Err(Error::shape(layer, format!("expected {c} input channels, got {}", x.c)));
            }
            Ok(())
        };
        match *self {
            LayerKind::Conv { in_channels, filters, kernel, stride, pad, .. } => {
                expect_channels(in_channels)?;
                let (oh, ow) = Window::square(kernel, stride, pad)
                    .output_extent(x.h, x.w)
                    .map_err(|e| Error::shape(layer, e.to_string()))?;
                Ok(Shape::new(x.n, filters, oh, ow))
            }
            LayerKind::DepthwiseConv { channels, kernel, stride, pad } => {
                expect_channels(channels)?;
                let (oh, ow) = Window::square(kernel, stride, pad)
                    .output_extent(x.h, x.w)
                    .map_err(|e| Error::shape(layer, e.to_string()))?;
                Ok(Shape::new(x.n, channels, oh, ow))
            }
            LayerKind::BatchNorm { channels } => {
                expect_channels(channels)?;
                Ok(x)
            }
            LayerKind::Relu | LayerKind::LeakyRelu { .. } | LayerKind::Dropout { .. } => Ok(x),
            LayerKind::MaxPool { kernel, stride, pad } => {
                let (oh, ow) = Window::square(kernel, stride, pad)
                    .output_extent(x.h, x.w)
                    .map_err(|e| Error::shape(layer, e.to_string()))?;
                Ok(Shape::new(x.n, x.c, oh, ow))
            }
            LayerKind::GlobalAvgPool => Ok(Shape::new(x.n, x.c, 1, 1)),
            LayerKind::AdaptiveAvgPool { height, width } => {
                if height > x.h || width > x.w {
                    return Err(Error::shape(layer, format!("target {height}x{width} exceeds input {}x{}", x.h, x.w)));
                }
                Ok(Shape::new(x.n, x.c, height, width))
            }
            LayerKind::FullyConnected { in_features, units, .. } => {
                if x.h != 1 || x.w != 1 {
                    return Err(Error::shape(layer, format!("needs a pooled input, got {x}")));
                }
                expect_channels(in_features)?;
                Ok(Shape::new(x.n, units, 1, 1))
            }
            LayerKind::Softmax => {
                if x.h != 1 || x.w != 1 {
                    return Err(Error::shape(layer, format!("softmax on spatial input {x}")));
                }
                Ok(x)
            }
            LayerKind::Add => {
                if inputs[0] != inputs[1] {
                    return Err(Error::shape(
                        layer,
                        format!("add junction inputs differ: {} vs {}", inputs[0], inputs[1]),
                    ));
                }
                Ok(x)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerNode {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub inputs: Vec<ValueId>,
    /// Full entry names, aligned with [`LayerKind::param_slots`].
    pub params: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputSpec {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        InputSpec { channels, height, width }
    }

    pub fn batch_shape(&self, n: usize) -> Shape {
        Shape::new(n, self.channels, self.height, self.width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OutputSpec {
    /// Class logits; the graph ends with a softmax node.
    Classes { classes: usize },
    /// `classes` logits followed by four box coordinates.
    Detection { classes: usize },
    /// A bare feature map or vector (sub-graphs, backbones).
    Features { channels: usize },
}

impl OutputSpec {
    pub fn channels(&self) -> usize {
        match *self {
            OutputSpec::Classes { classes } => classes,
            OutputSpec::Detection { classes } => classes + 4,
            OutputSpec::Features { channels } => channels,
        }
    }

    pub fn classes(&self) -> Option<usize> {
        match *self {
            OutputSpec::Classes { classes } | OutputSpec::Detection { classes } => Some(classes),
            OutputSpec::Features { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BnConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        BnConfig { eps: 1e-5, momentum: 0.9 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug)]
enum NodeCache<T> {
    None,
    MaxPool(Vec<usize>),
    BatchNorm(BnCache<T>),
    Dropout(Vec<T>),
}

#[derive(Clone, Debug)]
struct Tape<T> {
    values: Vec<Tensor<T>>,
    caches: Vec<NodeCache<T>>,
}

/// Result of [`ArchGraph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    /// One entry per trainable parameter, in store order.
    pub params: IndexMap<String, Tensor<T>>,
    pub input: Option<Tensor<T>>,
}

/// A directed acyclic graph of layers together with its parameters.
#[derive(Clone, Debug)]
pub struct ArchGraph<T: Scalar = f32> {
    name: String,
    nodes: Vec<LayerNode>,
    input: InputSpec,
    output: OutputSpec,
    params: ParamStore<T>,
    bn: BnConfig,
    tape: Option<Tape<T>>,
}

impl<T: Scalar> ArchGraph<T> {
    pub fn new(
        name: impl Into<String>,
        nodes: Vec<LayerNode>,
        input: InputSpec,
        output: OutputSpec,
        params: ParamStore<T>,
    ) -> Result<Self> {
        let g = ArchGraph { name: name.into(), nodes, input, output, params, bn: BnConfig::default(), tape: None };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (k, node) in self.nodes.iter().enumerate() {
            if !seen.insert(node.name.as_str()) {
                return Err(Error::config(format!("duplicate layer name `{}`", node.name)));
            }
            if node.inputs.iter().any(|&v| v > k) {
                return Err(Error::config(format!("layer `{}` consumes a value that is not yet defined", node.name)));
            }
            let slots = node.kind.param_slots();
            if slots.len() != node.params.len() {
                return Err(Error::config(format!(
                    "layer `{}` names {} entries, expected {}",
                    node.name,
                    node.params.len(),
                    slots.len()
                )));
            }
            for (slot, pname) in slots.iter().zip(&node.params) {
                let entry = self.params.entry(pname).ok_or_else(|| {
                    Error::config(format!("layer `{}` references missing entry `{pname}`", node.name))
                })?;
                if entry.tensor.shape() != slot.shape || entry.kind() != slot.kind {
                    return Err(Error::config(format!(
                        "entry `{pname}` has shape {}, expected {}",
                        entry.tensor.shape(),
                        slot.shape
                    )));
                }
            }
        }
        let shapes = self.infer_shapes(1)?;
        let out = shapes.last().copied().unwrap_or(self.input.batch_shape(1));
        if !self.nodes.is_empty() && out.c != self.output.channels() {
            return Err(Error::config(format!(
                "graph `{}` produces {} channels, output spec needs {}",
                self.name,
                out.c,
                self.output.channels()
            )));
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn input_spec(&self) -> InputSpec {
        self.input
    }

    pub fn output_spec(&self) -> OutputSpec {
        self.output
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn bn_config(&self) -> BnConfig {
        self.bn
    }

    pub fn set_bn_config(&mut self, bn: BnConfig) -> Result<()> {
        if bn.eps.is_nan() || bn.eps <= 0.0 {
            return Err(Error::config(format!("batch norm eps must be positive, got {}", bn.eps)));
        }
        self.bn = bn;
        Ok(())
    }

    /// Freezes or unfreezes every parameter under `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, flag: bool) -> Result<usize> {
        self.params.set_trainable(prefix, flag)
    }

    pub fn cast<U: Scalar>(&self) -> ArchGraph<U> {
        ArchGraph {
            name: self.name.clone(),
            nodes: self.nodes.clone(),
            input: self.input,
            output: self.output,
            params: self.params.cast(),
            bn: self.bn,
            tape: None,
        }
    }

    /// Output shape of every value (input first) for a batch of `n`.
    pub fn infer_shapes(&self, n: usize) -> Result<Vec<Shape>> {
        self.infer_shapes_for(self.input.batch_shape(n))
    }

    pub fn infer_shapes_for(&self, input: Shape) -> Result<Vec<Shape>> {
        let mut shapes = Vec::with_capacity(self.nodes.len() + 1);
        shapes.push(input);
        for node in &self.nodes {
            let ins: Vec<Shape> = node.inputs.iter().map(|&v| shapes[v]).collect();
            shapes.push(node.kind.output_shape(&node.name, &ins)?);
        }
        Ok(shapes)
    }

    /// Number of leading nodes that produce the logits (a trailing softmax is
    /// excluded so losses can work from logits).
    pub(crate) fn logits_end(&self) -> usize {
        match self.nodes.last() {
            Some(n) if n.kind == LayerKind::Softmax => self.nodes.len() - 1,
            _ => self.nodes.len(),
        }
    }

    pub(crate) fn param_owner(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.params.iter().any(|p| p == name))
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.n == 0 || s.c != self.input.channels || s.h == 0 || s.w == 0 {
            return Err(Error::data(format!(
                "graph `{}` expects input (n, {}, h, w), got {s}",
                self.name, self.input.channels
            )));
        }
        Ok(())
    }

    /// Runs the graph up to its logits. In train mode the activations are
    /// recorded for [`ArchGraph::backward`]; dropout is active only when a
    /// generator is supplied.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode, mut rng: Option<&mut Rng>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        self.tape = None;
        let end = self.logits_end();
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(end + 1);
        values.push(x.clone());
        let mut caches = Vec::with_capacity(end);
        let last_use = self.last_use(end);
        for k in 0..end {
            let inputs: Vec<&Tensor<T>> = self.nodes[k].inputs.iter().map(|&v| &values[v]).collect();
            let (y, cache) = self.exec(k, &inputs, mode, rng.as_deref_mut())?;
            values.push(y);
            if mode == Mode::Train {
                caches.push(cache);
            } else {
                for &v in &self.nodes[k].inputs {
                    if last_use[v] == k && v != 0 {
                        values[v] = Tensor::zeros([0, 0, 0, 0]);
                    }
                }
            }
        }
        let out = values[end].clone();
        if mode == Mode::Train {
            self.tape = Some(Tape { values, caches });
        }
        Ok(out)
    }

    /// Inference-mode forward including the final softmax for classifiers.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let logits = self.forward(x, Mode::Infer, None)?;
        if self.logits_end() < self.nodes.len() {
            ops::softmax(&logits)
        } else {
            Ok(logits)
        }
    }

    fn last_use(&self, end: usize) -> Vec<usize> {
        let mut last = vec![usize::MAX; end + 1];
        for (k, node) in self.nodes[..end].iter().enumerate() {
            for &v in &node.inputs {
                last[v] = k;
            }
        }
        last
    }

    /// Train-mode forward without dropout that keeps every value; used by
    /// the gradient checker.
    pub(crate) fn forward_values(&mut self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.check_input(x)?;
        let end = self.logits_end();
        let mut values: Vec<Tensor<T>> = vec![x.clone()];
        for k in 0..end {
            let inputs: Vec<&Tensor<T>> = self.nodes[k].inputs.iter().map(|&v| &values[v]).collect();
            let (y, _) = self.exec(k, &inputs, Mode::Train, None)?;
            values.push(y);
        }
        Ok(values)
    }

    /// Recomputes the logits from node `start` onwards reusing `base` for
    /// every earlier value.
    pub(crate) fn logits_from(&mut self, base: &[Tensor<T>], start: usize) -> Result<Tensor<T>> {
        let end = self.logits_end();
        let mut fresh: Vec<Tensor<T>> = Vec::with_capacity(end.saturating_sub(start));
        for k in start..end {
            let inputs: Vec<&Tensor<T>> = self.nodes[k]
                .inputs
                .iter()
                .map(|&v| if v <= start { &base[v] } else { &fresh[v - start - 1] })
                .collect();
            let (y, _) = self.exec(k, &inputs, Mode::Train, None)?;
            fresh.push(y);
        }
        Ok(fresh.pop().unwrap_or_else(|| base[end].clone()))
    }

    fn bn_mode(&self, gamma: &str, mode: Mode) -> BnMode {
        // frozen batch-norm layers behave as in inference
        if mode == Mode::Train && self.params.is_trainable(gamma) {
            BnMode::Train
        } else {
            BnMode::Infer
        }
    }

    fn exec(
        &mut self,
        k: usize,
        inputs: &[&Tensor<T>],
        mode: Mode,
        rng: Option<&mut Rng>,
    ) -> Result<(Tensor<T>, NodeCache<T>)> {
        let node = &self.nodes[k];
        let x = inputs[0];
        let wrap = |e: Error| match e {
            Error::Shape { detail, .. } => Error::shape(node.name.clone(), detail),
            other => other,
        };
        let out = match node.kind {
            LayerKind::Conv { stride, pad, bias, .. } => {
                let w = self.params.require(&node.params[0])?;
                let b = if bias { Some(self.params.require(&node.params[1])?) } else { None };
                (ops::conv2d(x, w, b, stride, pad).map_err(wrap)?, NodeCache::None)
            }
            LayerKind::DepthwiseConv { stride, pad, .. } => {
                let w = self.params.require(&node.params[0])?;
                (ops::depthwise_conv2d(x, w, stride, pad).map_err(wrap)?, NodeCache::None)
            }
            LayerKind::BatchNorm { .. } => {
                let bn_mode = self.bn_mode(&node.params[0], mode);
                let gamma = self.params.require(&node.params[0])?;
                let beta = self.params.require(&node.params[1])?;
                let mut rm = self.params.require(&node.params[2])?.clone();
                let mut rv = self.params.require(&node.params[3])?.clone();
                let p = BnParams { gamma, beta, running_mean: &mut rm, running_var: &mut rv };
                let (y, cache) = ops::batch_norm(x, p, bn_mode, self.bn.eps, self.bn.momentum).map_err(wrap)?;
                if bn_mode == BnMode::Train {
                    let (rm_name, rv_name) = (node.params[2].clone(), node.params[3].clone());
                    *self.params.get_mut(&rm_name).expect("running mean") = rm;
                    *self.params.get_mut(&rv_name).expect("running var") = rv;
                }
                (y, NodeCache::BatchNorm(cache))
            }
            LayerKind::Relu => (ops::relu(x), NodeCache::None),
            LayerKind::LeakyRelu { slope } => (ops::leaky_relu(x, slope), NodeCache::None),
            LayerKind::MaxPool { kernel, stride, pad } => {
                let (y, idx) = ops::max_pool(x, Window::square(kernel, stride, pad)).map_err(wrap)?;
                (y, NodeCache::MaxPool(idx))
            }
            LayerKind::GlobalAvgPool => (ops::global_avg_pool(x), NodeCache::None),
            LayerKind::AdaptiveAvgPool { height, width } => {
                (ops::adaptive_avg_pool(x, height, width).map_err(wrap)?, NodeCache::None)
            }
            LayerKind::FullyConnected { bias, .. } => {
                let w = self.params.require(&node.params[0])?;
                let b = if bias { Some(self.params.require(&node.params[1])?) } else { None };
                (ops::fully_connected(x, w, b).map_err(wrap)?, NodeCache::None)
            }
            LayerKind::Dropout { rate } => {
                let (y, mask) = ops::dropout(x, rate, mode == Mode::Train, rng)?;
                (y, NodeCache::Dropout(mask))
            }
            LayerKind::Softmax => (ops::softmax(x).map_err(wrap)?, NodeCache::None),
            LayerKind::Add => {
                let b = inputs[1];
                if x.shape() != b.shape() {
                    return Err(Error::shape(
                        node.name.clone(),
                        format!("add junction inputs differ: {} vs {}", x.shape(), b.shape()),
                    ));
                }
                let mut y = x.clone();
                y.add_assign(b);
                (y, NodeCache::None)
            }
        };
        Ok(out)
    }

    /// Reverse pass from the gradient of the loss with respect to the logits.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<Gradients<T>> {
        self.backward_with(grad_logits, true)
    }

    /// As [`ArchGraph::backward`]; when `input_grad` is false, branches that
    /// lead only to frozen parameters and the input are skipped.
    pub fn backward_with(&mut self, grad_logits: &Tensor<T>, input_grad: bool) -> Result<Gradients<T>> {
        let tape =
            self.tape.take().ok_or_else(|| Error::State("backward called before a train-mode forward".into()))?;
        let end = tape.caches.len();
        if grad_logits.shape() != tape.values[end].shape() {
            return Err(Error::shape(
                self.name.clone(),
                format!("loss gradient has shape {}, logits are {}", grad_logits.shape(), tape.values[end].shape()),
            ));
        }
        let mut needs = vec![false; end + 1];
        needs[0] = input_grad;
        for k in 0..end {
            let node = &self.nodes[k];
            needs[k + 1] =
                node.inputs.iter().any(|&v| needs[v]) || node.params.iter().any(|p| self.params.is_trainable(p));
        }

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; end + 1];
        grads[end] = Some(grad_logits.clone());
        let mut pgrads: HashMap<String, Tensor<T>> = HashMap::new();

        for k in (0..end).rev() {
            let Some(dy) = grads[k + 1].take() else { continue };
            let node = &self.nodes[k];
            let x = &tape.values[node.inputs[0]];
            let need_dx = needs[node.inputs[0]];
            let trainable = |i: usize| self.params.is_trainable(&node.params[i]);
            let mut input_grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(2);
            match (&node.kind, &tape.caches[k]) {
                (LayerKind::Conv { stride, pad, bias, .. }, _) => {
                    let w = self.params.require(&node.params[0])?;
                    let g = ops::conv2d_backward(x, w, *bias, *stride, *pad, &dy, need_dx)?;
                    if trainable(0) {
                        pgrads.insert(node.params[0].clone(), g.dweight);
                    }
                    if let Some(db) = g.dbias {
                        if trainable(1) {
                            pgrads.insert(node.params[1].clone(), db);
                        }
                    }
                    input_grads.push(g.dx);
                }
                (LayerKind::DepthwiseConv { stride, pad, .. }, _) => {
                    let w = self.params.require(&node.params[0])?;
                    let (dx, dw) = ops::depthwise_conv2d_backward(x, w, *stride, *pad, &dy, need_dx)?;
                    if trainable(0) {
                        pgrads.insert(node.params[0].clone(), dw);
                    }
                    input_grads.push(dx);
                }
                (LayerKind::BatchNorm { .. }, NodeCache::BatchNorm(cache)) => {
                    let gamma = self.params.require(&node.params[0])?;
                    let (dx, dgamma, dbeta) = ops::batch_norm_backward(cache, gamma, &dy);
                    if trainable(0) {
                        pgrads.insert(node.params[0].clone(), dgamma);
                    }
                    if trainable(1) {
                        pgrads.insert(node.params[1].clone(), dbeta);
                    }
                    input_grads.push(need_dx.then_some(dx));
                }
                (LayerKind::Relu, _) => input_grads.push(need_dx.then(|| ops::relu_backward(x, &dy))),
                (LayerKind::LeakyRelu { slope }, _) => {
                    input_grads.push(need_dx.then(|| ops::leaky_relu_backward(x, *slope, &dy)))
                }
                (LayerKind::MaxPool { .. }, NodeCache::MaxPool(idx)) => {
                    input_grads.push(need_dx.then(|| ops::max_pool_backward(x.shape(), idx, &dy)))
                }
                (LayerKind::GlobalAvgPool, _) => {
                    input_grads.push(need_dx.then(|| ops::global_avg_pool_backward(x.shape(), &dy)))
                }
                (LayerKind::AdaptiveAvgPool { .. }, _) => {
                    input_grads.push(need_dx.then(|| ops::adaptive_avg_pool_backward(x.shape(), &dy)))
                }
                (LayerKind::FullyConnected { bias, .. }, _) => {
                    let w = self.params.require(&node.params[0])?;
                    let (dx, dw, db) = ops::fully_connected_backward(x, w, *bias, &dy, need_dx);
                    if trainable(0) {
                        pgrads.insert(node.params[0].clone(), dw);
                    }
                    if let Some(db) = db {
                        if trainable(1) {
                            pgrads.insert(node.params[1].clone(), db);
                        }
                    }
                    input_grads.push(dx);
                }
                (LayerKind::Dropout { .. }, NodeCache::Dropout(mask)) => {
                    input_grads.push(need_dx.then(|| ops::dropout_backward(mask, &dy)))
                }
                (LayerKind::Softmax, _) => {
                    let y = &tape.values[k + 1];
                    input_grads.push(need_dx.then(|| ops::softmax_backward(y, &dy)))
                }
                (LayerKind::Add, _) => {
                    input_grads.push(need_dx.then(|| dy.clone()));
                    input_grads.push(needs[node.inputs[1]].then_some(dy));
                }
                (kind, _) => {
                    return Err(Error::Internal(format!(
                        "missing forward cache for {} layer `{}`",
                        kind.tag(),
                        node.name
                    )))
                }
            }
            for (&v, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                match grads[v].as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => grads[v] = Some(g),
                }
            }
        }

        let params = self.params.names().filter_map(|n| pgrads.remove(n).map(|g| (n.to_string(), g))).collect();
        let input = if input_grad {
            Some(grads[0].take().unwrap_or_else(|| Tensor::zeros(tape.values[0].shape())))
        } else {
            None
        };
        Ok(Gradients { params, input })
    }
}

/// Incrementally declares layers, allocating and initializing their
/// parameters.
///
/// Convolution and fully connected weights use He-normal initialization
/// (`std = sqrt(2 / fan_in)`), biases and batch-norm shifts start at zero,
/// batch-norm scales and running variances at one.
pub struct GraphBuilder {
    name: String,
    input: InputSpec,
    nodes: Vec<LayerNode>,
    params: ParamStore<f32>,
    shapes: Vec<Shape>,
    rng: Rng,
}

impl GraphBuilder {
    pub fn new(name: impl Into<String>, input: InputSpec, seed: u64) -> Self {
        GraphBuilder {
            name: name.into(),
            input,
            nodes: Vec::new(),
            params: ParamStore::new(),
            shapes: vec![input.batch_shape(1)],
            rng: Rng::with_stream(seed, 0),
        }
    }

    pub fn input(&self) -> ValueId {
        0
    }

    pub fn channels(&self, v: ValueId) -> usize {
        self.shapes[v].c
    }

    /// Shape of a value for a batch of one at the declared input size.
    pub fn shape(&self, v: ValueId) -> Shape {
        self.shapes[v]
    }

    pub fn push(&mut self, name: &str, kind: LayerKind, inputs: &[ValueId]) -> Result<ValueId> {
        if let Some(&bad) = inputs.iter().find(|&&v| v >= self.shapes.len()) {
            return Err(Error::config(format!("layer `{name}` consumes undefined value {bad}")));
        }
        if self.nodes.iter().any(|n| n.name == name) {
            return Err(Error::config(format!("duplicate layer name `{name}`")));
        }
        let ins: Vec<Shape> = inputs.iter().map(|&v| self.shapes[v]).collect();
        let out = kind.output_shape(name, &ins)?;
        let fan_in = match kind {
            LayerKind::Conv { in_channels, kernel, .. } => in_channels * kernel * kernel,
            LayerKind::DepthwiseConv { kernel, .. } => kernel * kernel,
            LayerKind::FullyConnected { in_features, .. } => in_features,
            _ => 1,
        };
        let mut names = Vec::new();
        for slot in kind.param_slots() {
            let full = format!("{name}.{}", slot.suffix);
            let tensor = match slot.suffix {
                "weight" => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    let data = (0..slot.shape.len()).map(|_| (self.rng.normal() * std) as f32).collect();
                    Tensor::from_vec(slot.shape, data)?
                }
                "gamma" | "running_var" => Tensor::full(slot.shape, 1.0),
                _ => Tensor::zeros(slot.shape),
            };
            self.params.insert(full.clone(), tensor, slot.kind, slot.kind == EntryKind::Parameter)?;
            names.push(full);
        }
        self.nodes.push(LayerNode { name: name.to_string(), kind, inputs: inputs.to_vec(), params: names });
        self.shapes.push(out);
        Ok(self.shapes.len() - 1)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        x: ValueId,
        filters: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<ValueId> {
        let in_channels = self.channels(x);
        self.push(name, LayerKind::Conv { in_channels, filters, kernel, stride, pad, bias }, &[x])
    }

    pub fn depthwise(&mut self, name: &str, x: ValueId, kernel: usize, stride: usize, pad: usize) -> Result<ValueId> {
        let channels = self.channels(x);
        self.push(name, LayerKind::DepthwiseConv { channels, kernel, stride, pad }, &[x])
    }

    pub fn batch_norm(&mut self, name: &str, x: ValueId) -> Result<ValueId> {
        let channels = self.channels(x);
        self.push(name, LayerKind::BatchNorm { channels }, &[x])
    }

    pub fn relu(&mut self, name: &str, x: ValueId) -> Result<ValueId> {
        self.push(name, LayerKind::Relu, &[x])
    }

    pub fn leaky_relu(&mut self, name: &str, x: ValueId, slope: f64) -> Result<ValueId> {
        self.push(name, LayerKind::LeakyRelu { slope }, &[x])
    }

    pub fn max_pool(&mut self, name: &str, x: ValueId, kernel: usize, stride: usize, pad: usize) -> Result<ValueId> {
        self.push(name, LayerKind::MaxPool { kernel, stride, pad }, &[x])
    }

    pub fn global_avg_pool(&mut self, name: &str, x: ValueId) -> Result<ValueId> {
        self.push(name, LayerKind::GlobalAvgPool, &[x])
    }

    pub fn adaptive_avg_pool(&mut self, name: &str, x: ValueId, height: usize, width: usize) -> Result<ValueId> {
        self.push(name, LayerKind::AdaptiveAvgPool { height, width }, &[x])
    }

    pub fn fully_connected(&mut self, name: &str, x: ValueId, units: usize, bias: bool) -> Result<ValueId> {
        let in_features = self.channels(x);
        self.push(name, LayerKind::FullyConnected { in_features, units, bias }, &[x])
    }

    pub fn dropout(&mut self, name: &str, x: ValueId, rate: f64) -> Result<ValueId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        self.push(name, LayerKind::Dropout { rate }, &[x])
    }

    pub fn softmax(&mut self, name: &str, x: ValueId) -> Result<ValueId> {
        self.push(name, LayerKind::Softmax, &[x])
    }

    pub fn add(&mut self, name: &str, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.push(name, LayerKind::Add, &[a, b])
    }

    pub fn finish(self, output: OutputSpec) -> Result<ArchGraph<f32>> {
        ArchGraph::new(self.name, self.nodes, self.input, output, self.params)
    }
}
