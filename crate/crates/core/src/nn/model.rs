//! Static layer graphs with shape inference, parameter storage, forward
//! passes and reverse-mode gradients.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::*;
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Input,
    Conv3x3,
    /// Pointwise convolution, used for the segmentation head.
    Conv1x1,
    MaxPool2x2,
    Upsample2x,
    /// Learned 2x upsampling (2x2 kernel, stride 2).
    UpConv2x2,
    ConcatSkip,
    Dropout,
    Dense,
    Relu,
    Sigmoid,
    Softmax,
    Flatten,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub channels_out: Option<usize>,
    pub dropout_rate: Option<f64>,
}

/// Per-sample activation shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.c * self.h * self.w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub name: String,
    pub spec: LayerSpec,
    pub inputs: Vec<usize>,
    pub shape: Shape,
    /// Indices of (weight, bias) in the parameter list.
    pub params: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

impl ParamInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Validated computation graph. Node 0 is the input; the last node is the
/// output.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    pub nodes: Vec<Node>,
    pub params: Vec<ParamInfo>,
}

impl Graph {
    pub fn input_shape(&self) -> Shape {
        self.nodes[0].shape
    }

    pub fn output(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn output_shape(&self) -> Shape {
        self.nodes[self.output()].shape
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(ParamInfo::numel).sum()
    }

    /// Output channels of every `Conv3x3` node, in graph order.
    pub fn conv_channels(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| n.spec.kind == LayerKind::Conv3x3)
            .map(|n| n.shape.c)
            .collect()
    }
}

/// Builds a [`Graph`] while checking shapes at every step.
pub struct GraphBuilder {
    nodes: Vec<Node>,
    params: Vec<ParamInfo>,
}

impl GraphBuilder {
    pub fn new(input: Shape) -> Self {
        GraphBuilder {
            nodes: vec![Node {
                name: "input".into(),
                spec: LayerSpec {
                    kind: LayerKind::Input,
                    channels_out: Some(input.c),
                    dropout_rate: None,
                },
                inputs: vec![],
                shape: input,
                params: None,
            }],
            params: Vec::new(),
        }
    }

    pub fn input(&self) -> usize {
        0
    }

    pub fn shape(&self, id: usize) -> Shape {
        self.nodes[id].shape
    }

    fn push(&mut self, name: String, spec: LayerSpec, inputs: Vec<usize>, shape: Shape, params: Option<(usize, usize)>) -> usize {
        self.nodes.push(Node {
            name,
            spec,
            inputs,
            shape,
            params,
        });
        self.nodes.len() - 1
    }

    fn add_params(&mut self, name: &str, weight_shape: Vec<usize>, fan_in: usize) -> (usize, usize) {
        let bias_len = weight_shape[0];
        self.params.push(ParamInfo {
            name: format!("{name}.weight"),
            shape: weight_shape,
            fan_in,
        });
        self.params.push(ParamInfo {
            name: format!("{name}.bias"),
            shape: vec![bias_len],
            fan_in,
        });
        (self.params.len() - 2, self.params.len() - 1)
    }

    fn spec(kind: LayerKind, channels_out: Option<usize>) -> LayerSpec {
        LayerSpec {
            kind,
            channels_out,
            dropout_rate: None,
        }
    }

    fn conv(&mut self, name: &str, from: usize, cout: usize, k: usize) -> usize {
        let s = self.shape(from);
        let p = self.add_params(name, vec![cout, s.c, k, k], s.c * k * k);
        let kind = if k == 3 { LayerKind::Conv3x3 } else { LayerKind::Conv1x1 };
        self.push(name.into(), Self::spec(kind, Some(cout)), vec![from], Shape::new(cout, s.h, s.w), Some(p))
    }

    pub fn conv3x3(&mut self, name: &str, from: usize, cout: usize) -> usize {
        self.conv(name, from, cout, 3)
    }

    pub fn conv1x1(&mut self, name: &str, from: usize, cout: usize) -> usize {
        self.conv(name, from, cout, 1)
    }

    pub fn maxpool(&mut self, name: &str, from: usize) -> Result<usize> {
        let s = self.shape(from);
        if s.h % 2 != 0 || s.w % 2 != 0 {
            return Err(Error::shape(format!("even spatial dims before {name}"), s));
        }
        Ok(self.push(name.into(), Self::spec(LayerKind::MaxPool2x2, None), vec![from], Shape::new(s.c, s.h / 2, s.w / 2), None))
    }

    pub fn upsample(&mut self, name: &str, from: usize) -> usize {
        let s = self.shape(from);
        self.push(name.into(), Self::spec(LayerKind::Upsample2x, None), vec![from], Shape::new(s.c, s.h * 2, s.w * 2), None)
    }

    pub fn upconv(&mut self, name: &str, from: usize, cout: usize) -> usize {
        let s = self.shape(from);
        let p = self.add_params(name, vec![cout, s.c, 2, 2], s.c * 4);
        self.push(name.into(), Self::spec(LayerKind::UpConv2x2, Some(cout)), vec![from], Shape::new(cout, s.h * 2, s.w * 2), Some(p))
    }

    pub fn concat(&mut self, name: &str, a: usize, b: usize) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if (sa.h, sa.w) != (sb.h, sb.w) {
            return Err(Error::shape(format!("{name}: matching spatial dims {sa}"), sb));
        }
        Ok(self.push(name.into(), Self::spec(LayerKind::ConcatSkip, Some(sa.c + sb.c)), vec![a, b], Shape::new(sa.c + sb.c, sa.h, sa.w), None))
    }

    pub fn dropout(&mut self, name: &str, from: usize, rate: f64) -> usize {
        let s = self.shape(from);
        let spec = LayerSpec {
            kind: LayerKind::Dropout,
            channels_out: None,
            dropout_rate: Some(rate),
        };
        self.push(name.into(), spec, vec![from], s, None)
    }

    pub fn dense(&mut self, name: &str, from: usize, fout: usize) -> Result<usize> {
        let s = self.shape(from);
        if (s.h, s.w) != (1, 1) {
            return Err(Error::shape(format!("{name}: flattened input"), s));
        }
        let p = self.add_params(name, vec![fout, s.c], s.c);
        Ok(self.push(name.into(), Self::spec(LayerKind::Dense, Some(fout)), vec![from], Shape::new(fout, 1, 1), Some(p)))
    }

    fn unary(&mut self, name: &str, kind: LayerKind, from: usize) -> usize {
        let s = self.shape(from);
        self.push(name.into(), Self::spec(kind, None), vec![from], s, None)
    }

    pub fn relu(&mut self, name: &str, from: usize) -> usize {
        self.unary(name, LayerKind::Relu, from)
    }

    pub fn sigmoid(&mut self, name: &str, from: usize) -> usize {
        self.unary(name, LayerKind::Sigmoid, from)
    }

    pub fn softmax(&mut self, name: &str, from: usize) -> Result<usize> {
        let s = self.shape(from);
        if (s.h, s.w) != (1, 1) {
            return Err(Error::shape(format!("{name}: flattened input"), s));
        }
        Ok(self.unary(name, LayerKind::Softmax, from))
    }

    pub fn flatten(&mut self, name: &str, from: usize) -> usize {
        let s = self.shape(from);
        self.push(name.into(), Self::spec(LayerKind::Flatten, None), vec![from], Shape::new(s.numel(), 1, 1), None)
    }

    pub fn finish(self) -> Graph {
        Graph {
            nodes: self.nodes,
            params: self.params,
        }
    }
}

/// Whether dropout is active.
pub enum Mode<'a> {
    Inference,
    Train(&'a mut Stream),
}

/// Saved per-node state from a forward pass.
enum Aux<T> {
    None,
    PoolArg(Vec<u8>),
    DropMask(Vec<T>),
}

/// Activations of every node, kept for the backward pass.
pub struct Trace<T> {
    acts: Vec<Option<Tensor<T>>>,
    aux: Vec<Aux<T>>,
}

impl<T: Scalar> Trace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.acts.last().and_then(Option::as_ref).expect("output is kept")
    }

    pub fn node(&self, id: usize) -> Option<&Tensor<T>> {
        self.acts.get(id).and_then(Option::as_ref)
    }
}

/// A graph plus its parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub graph: Graph,
    pub params: Vec<Vec<T>>,
}

impl<T: Scalar> Network<T> {
    /// Fan-in scaled uniform initialization, `U(-sqrt(6/fan_in), +sqrt(6/fan_in))`
    /// for weights and zero biases. Values are drawn as `f32`, so `f32` and
    /// `f64` networks from the same seed hold identical numbers.
    pub fn init(graph: Graph, seed: u64) -> Self {
        let params = graph
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if p.name.ends_with(".bias") {
                    return vec![T::zero(); p.numel()];
                }
                let mut rng = substream(seed, "init", i as u64);
                let bound = (6.0 / p.fan_in as f64).sqrt() as f32;
                (0..p.numel())
                    .map(|_| T::from_f64(f64::from(rng.gen_range(-bound..=bound))))
                    .collect()
            })
            .collect();
        Network { graph, params }
    }

    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            graph: self.graph.clone(),
            params: self
                .params
                .iter()
                .map(|p| p.iter().map(|&v| U::from_f64(v.as_f64())).collect())
                .collect(),
        }
    }

    pub fn zero_grads(&self) -> Vec<Vec<T>> {
        self.params.iter().map(|p| vec![T::zero(); p.len()]).collect()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = self.graph.input_shape();
        if (x.c, x.h, x.w) != (s.c, s.h, s.w) || x.b == 0 || x.len() != x.b * s.numel() {
            return Err(Error::shape(format!("[C={}, B>=1, H={}, W={}]", s.c, s.h, s.w), x.shape_string()));
        }
        Ok(())
    }

    /// Run the graph. With `keep_all` every activation is retained for
    /// [`Network::backward`]; otherwise intermediate activations are freed as
    /// soon as no later node reads them.
    pub fn forward_trace(&self, x: &Tensor<T>, mut mode: Mode<'_>, keep_all: bool) -> Result<Trace<T>> {
        self.check_input(x)?;
        let nodes = &self.graph.nodes;
        let mut last_use = vec![0usize; nodes.len()];
        for (i, n) in nodes.iter().enumerate() {
            for &j in &n.inputs {
                last_use[j] = i;
            }
        }
        let out_id = nodes.len() - 1;
        let mut acts: Vec<Option<Tensor<T>>> = Vec::with_capacity(nodes.len());
        let mut aux = Vec::with_capacity(nodes.len());
        acts.push(Some(x.clone()));
        aux.push(Aux::None);

        for (i, node) in nodes.iter().enumerate().skip(1) {
            let arg = |k: usize| acts[node.inputs[k]].as_ref().expect("input activation is live");
            let (y, a) = match node.spec.kind {
                LayerKind::Input => unreachable!("only node 0 is an input"),
                LayerKind::Conv3x3 | LayerKind::Conv1x1 => {
                    let (w, b) = node.params.expect("conv has params");
                    let k = if node.spec.kind == LayerKind::Conv3x3 { 3 } else { 1 };
                    (conv_forward(arg(0), &self.params[w], &self.params[b], node.shape.c, k), Aux::None)
                }
                LayerKind::UpConv2x2 => {
                    let (w, b) = node.params.expect("upconv has params");
                    (upconv_forward(arg(0), &self.params[w], &self.params[b], node.shape.c), Aux::None)
                }
                LayerKind::Dense => {
                    let (w, b) = node.params.expect("dense has params");
                    (dense_forward(arg(0), &self.params[w], &self.params[b], node.shape.c), Aux::None)
                }
                LayerKind::MaxPool2x2 => {
                    let (y, arg_max) = maxpool_forward(arg(0));
                    (y, Aux::PoolArg(arg_max))
                }
                LayerKind::Upsample2x => (upsample_forward(arg(0)), Aux::None),
                LayerKind::ConcatSkip => (concat_forward(arg(0), arg(1)), Aux::None),
                LayerKind::Dropout => match &mut mode {
                    Mode::Train(rng) => {
                        let rate = node.spec.dropout_rate.unwrap_or(0.0);
                        let (y, m) = dropout_forward(arg(0), rate, rng);
                        (y, Aux::DropMask(m))
                    }
                    Mode::Inference => (arg(0).clone(), Aux::None),
                },
                LayerKind::Relu => (relu_forward(arg(0)), Aux::None),
                LayerKind::Sigmoid => (sigmoid_forward(arg(0)), Aux::None),
                LayerKind::Softmax => (softmax_forward(arg(0)), Aux::None),
                LayerKind::Flatten => (flatten_forward(arg(0)), Aux::None),
            };
            acts.push(Some(y));
            aux.push(a);
            if !keep_all {
                for &j in &node.inputs {
                    if last_use[j] == i && j != out_id {
                        acts[j] = None;
                    }
                }
            }
        }
        Ok(Trace { acts, aux })
    }

    /// Inference-mode output.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut trace = self.forward_trace(x, Mode::Inference, false)?;
        Ok(trace.acts.pop().flatten().expect("output kept"))
    }

    /// Backpropagate `seed_grad` (the gradient w.r.t. node `seed`'s output)
    /// and accumulate parameter gradients into `grads`.
    pub fn backward(&self, trace: &Trace<T>, seed: usize, seed_grad: Tensor<T>, grads: &mut [Vec<T>]) {
        let nodes = &self.graph.nodes;
        let mut g: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        g[seed] = Some(seed_grad);
        let act = |id: usize| trace.acts[id].as_ref().expect("backward needs a full trace");
        let accumulate = |g: &mut Vec<Option<Tensor<T>>>, id: usize, t: Tensor<T>| match &mut g[id] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };

        for i in (1..=seed).rev() {
            let Some(dy) = g[i].take() else { continue };
            let node = &nodes[i];
            let src = node.inputs[0];
            let need_dx = src != 0;
            match node.spec.kind {
                LayerKind::Input => {}
                LayerKind::Conv3x3 | LayerKind::Conv1x1 | LayerKind::UpConv2x2 | LayerKind::Dense => {
                    let (wi, bi) = node.params.expect("layer has params");
                    let (gw, gb) = if wi < bi {
                        let (lo, hi) = grads.split_at_mut(bi);
                        (&mut lo[wi], &mut hi[0])
                    } else {
                        let (lo, hi) = grads.split_at_mut(wi);
                        (&mut hi[0], &mut lo[bi])
                    };
                    let w = &self.params[wi];
                    let dx = match node.spec.kind {
                        LayerKind::Conv3x3 => conv_backward(act(src), w, node.shape.c, 3, &dy, gw, gb, need_dx),
                        LayerKind::Conv1x1 => conv_backward(act(src), w, node.shape.c, 1, &dy, gw, gb, need_dx),
                        LayerKind::UpConv2x2 => upconv_backward(act(src), w, node.shape.c, &dy, gw, gb, need_dx),
                        _ => dense_backward(act(src), w, node.shape.c, &dy, gw, gb, need_dx),
                    };
                    if let Some(dx) = dx {
                        accumulate(&mut g, src, dx);
                    }
                }
                _ if !need_dx && node.spec.kind != LayerKind::ConcatSkip => {}
                LayerKind::MaxPool2x2 => {
                    let Aux::PoolArg(arg) = &trace.aux[i] else { unreachable!("pool saves argmax") };
                    accumulate(&mut g, src, maxpool_backward(act(src), arg, &dy));
                }
                LayerKind::Upsample2x => accumulate(&mut g, src, upsample_backward(&dy)),
                LayerKind::ConcatSkip => {
                    let (da, db) = concat_backward(&dy, nodes[src].shape.c);
                    if src != 0 {
                        accumulate(&mut g, src, da);
                    }
                    if node.inputs[1] != 0 {
                        accumulate(&mut g, node.inputs[1], db);
                    }
                }
                LayerKind::Dropout => {
                    let dx = match &trace.aux[i] {
                        Aux::DropMask(m) => dropout_backward(&dy, m),
                        _ => dy,
                    };
                    accumulate(&mut g, src, dx);
                }
                LayerKind::Relu => accumulate(&mut g, src, relu_backward(act(i), &dy)),
                LayerKind::Sigmoid => accumulate(&mut g, src, sigmoid_backward(act(i), &dy)),
                LayerKind::Softmax => accumulate(&mut g, src, softmax_backward(act(i), &dy)),
                LayerKind::Flatten => accumulate(&mut g, src, flatten_backward(act(src), &dy)),
            }
        }
    }
}
