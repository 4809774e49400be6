use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::layer::{argmax, sigmoid, Init, LayerKind};
use super::{NnError, Tensor};

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// Where a node reads one of its inputs from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Input,
    Node(usize),
}

/// Role of an in-edge at a two-input node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchTag {
    /// Gated signal at a `Multiply`.
    Signal,
    /// Gate (excitation) at a `Multiply`.
    Gate,
    /// Transforming branch at a `ResidualAdd`.
    Main,
    /// Identity shortcut at a `ResidualAdd`.
    Skip,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    pub from: Source,
    pub tag: Option<BranchTag>,
}

impl Edge {
    pub fn plain(from: Source) -> Self {
        Self { from, tag: None }
    }

    pub fn tagged(from: Source, tag: BranchTag) -> Self {
        Self {
            from,
            tag: Some(tag),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub id: String,
    pub kind: LayerKind,
    pub inputs: Vec<Edge>,
    pub init: Init,
}

/// Incremental constructor for a [`LayerGraph`]; validation happens in
/// [`GraphBuilder::finish`].
#[derive(Debug)]
pub struct GraphBuilder {
    input_shape: Vec<usize>,
    nodes: Vec<Node>,
}

impl GraphBuilder {
    pub fn new(input_shape: Vec<usize>) -> Self {
        Self {
            input_shape,
            nodes: Vec::new(),
        }
    }

    /// Most recently added node, or the graph input.
    pub fn last(&self) -> Source {
        if self.nodes.is_empty() {
            Source::Input
        } else {
            Source::Node(self.nodes.len() - 1)
        }
    }

    pub fn add(&mut self, id: impl Into<String>, kind: LayerKind, inputs: Vec<Edge>) -> Source {
        self.add_init(id, kind, inputs, Init::Zeros)
    }

    pub fn add_init(
        &mut self,
        id: impl Into<String>,
        kind: LayerKind,
        inputs: Vec<Edge>,
        init: Init,
    ) -> Source {
        self.nodes.push(Node {
            id: id.into(),
            kind,
            inputs,
            init,
        });
        self.last()
    }

    /// Append a single-input node fed by the previous one.
    pub fn chain(&mut self, id: impl Into<String>, kind: LayerKind) -> Source {
        let from = self.last();
        self.add(id, kind, vec![Edge::plain(from)])
    }

    pub fn chain_init(&mut self, id: impl Into<String>, kind: LayerKind, init: Init) -> Source {
        let from = self.last();
        self.add_init(id, kind, vec![Edge::plain(from)], init)
    }

    pub fn finish(self, arch_tag: impl Into<String>) -> Result<LayerGraph, NnError> {
        LayerGraph::new(self.input_shape, self.nodes, arch_tag.into())
    }
}

/// A network as a topologically ordered DAG of layers.
///
/// Rank-2 inputs are given as `(samples, channels)` and transposed to the
/// channel-major layout used by every sequence layer. The last node is the
/// output and must be rank-1.
#[derive(Clone, Debug)]
pub struct LayerGraph {
    input_shape: Vec<usize>,
    nodes: Vec<Node>,
    shapes: Vec<Vec<usize>>,
    arch_tag: String,
    generation: u64,
}

impl LayerGraph {
    fn new(input_shape: Vec<usize>, nodes: Vec<Node>, arch_tag: String) -> Result<Self, NnError> {
        if input_shape.is_empty() || input_shape.len() > 2 || input_shape.contains(&0) {
            return Err(NnError::Shape(format!(
                "unsupported input shape {input_shape:?}"
            )));
        }
        let internal_input = internal_shape(&input_shape);
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(nodes.len());
        let mut ids = HashSet::new();
        let mut consumed = vec![false; nodes.len()];
        for (idx, node) in nodes.iter().enumerate() {
            if !ids.insert(node.id.as_str()) {
                return Err(NnError::Graph(format!("duplicate layer id `{}`", node.id)));
            }
            if node.inputs.len() != node.kind.arity() {
                return Err(NnError::Graph(format!(
                    "`{}` ({}) needs {} inputs, has {}",
                    node.id,
                    node.kind.name(),
                    node.kind.arity(),
                    node.inputs.len()
                )));
            }
            let mut in_shapes: Vec<&[usize]> = Vec::with_capacity(node.inputs.len());
            for edge in &node.inputs {
                match edge.from {
                    Source::Input => in_shapes.push(&internal_input),
                    Source::Node(j) if j < idx => {
                        consumed[j] = true;
                        in_shapes.push(&shapes[j]);
                    }
                    Source::Node(j) => {
                        return Err(NnError::Graph(format!(
                            "`{}` reads node {j}, which is not earlier in topological order",
                            node.id
                        )))
                    }
                }
            }
            check_tags(node)?;
            // Order signal/gate so shape checks see (signal, gate).
            if matches!(node.kind, LayerKind::Multiply)
                && node.inputs[0].tag == Some(BranchTag::Gate)
            {
                in_shapes.swap(0, 1);
            }
            let out = node
                .kind
                .output_shape(&in_shapes)
                .map_err(|e| NnError::Shape(format!("layer `{}`: {e}", node.id)))?;
            shapes.push(out);
        }
        if let Some(last) = shapes.last() {
            if last.len() != 1 {
                return Err(NnError::Shape(format!(
                    "output must be rank-1, got {last:?}"
                )));
            }
            if let Some(pos) = consumed[..nodes.len() - 1].iter().position(|c| !c) {
                return Err(NnError::Graph(format!(
                    "layer `{}` is a second output; graphs have a single output node",
                    nodes[pos].id
                )));
            }
        }
        Ok(Self {
            input_shape,
            nodes,
            shapes,
            arch_tag,
            generation: next_generation(),
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// Static output shape of node `idx`.
    pub fn shape(&self, idx: usize) -> &[usize] {
        &self.shapes[idx]
    }

    pub fn output_dim(&self) -> usize {
        self.shapes
            .last()
            .map(|s| s[0])
            .unwrap_or_else(|| self.input_shape.iter().product())
    }

    pub fn arch_tag(&self) -> &str {
        &self.arch_tag
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn count(&self, name: &str) -> usize {
        self.nodes.iter().filter(|n| n.kind.name() == name).count()
    }

    /// Hash of the architecture (layer kinds, hyperparameters, wiring, config tag).
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(format!(
            "input={:?};tag={};",
            self.input_shape, self.arch_tag
        ));
        for n in &self.nodes {
            h.update(format!("{}:{}:{:?};", n.id, n.kind.signature(), n.inputs));
        }
        h.finalize().into()
    }

    /// Initialize every parameterized layer from its declared scheme.
    pub fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for node in &mut self.nodes {
            match &mut node.kind {
                LayerKind::Conv1d(c) => c.init(node.init, &mut rng),
                LayerKind::Dense(d) => d.init(node.init, &mut rng),
                _ => {}
            }
        }
        self.generation = next_generation();
    }

    /// Parameter slices in canonical order (weight then bias, per layer).
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.kind {
                LayerKind::Conv1d(c) => {
                    out.push(c.weight.as_slice());
                    out.push(c.bias.as_slice());
                }
                LayerKind::Dense(d) => {
                    out.push(d.weight.as_slice());
                    out.push(d.bias.as_slice());
                }
                _ => {}
            }
        }
        out
    }

    /// Mutable parameters in the same order as [`LayerGraph::params`].
    /// Invalidates outstanding traces.
    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.generation = next_generation();
        let mut out = Vec::new();
        for node in &mut self.nodes {
            match &mut node.kind {
                LayerKind::Conv1d(c) => {
                    out.push(&mut c.weight);
                    out.push(&mut c.bias);
                }
                LayerKind::Dense(d) => {
                    out.push(&mut d.weight);
                    out.push(&mut d.bias);
                }
                _ => {}
            }
        }
        out
    }

    /// Names matching [`LayerGraph::params`], e.g. `conv1.weight`.
    pub fn param_names(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|n| n.kind.has_params())
            .flat_map(|n| [format!("{}.weight", n.id), format!("{}.bias", n.id)])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Weight and bias of one layer. Invalidates outstanding traces.
    pub fn layer_params_mut(&mut self, id: &str) -> Option<(&mut Vec<f64>, &mut Vec<f64>)> {
        let idx = self.node_index(id)?;
        self.generation = next_generation();
        match &mut self.nodes[idx].kind {
            LayerKind::Conv1d(c) => Some((&mut c.weight, &mut c.bias)),
            LayerKind::Dense(d) => Some((&mut d.weight, &mut d.bias)),
            _ => None,
        }
    }

    /// Runs the network on `x`, recording every activation.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, ForwardTrace), NnError> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(NnError::Shape(format!(
                "input shape {:?} does not match graph input {:?}",
                x.shape(),
                self.input_shape
            )));
        }
        let input = if x.shape().len() == 2 {
            x.transpose()
        } else {
            x.clone()
        };
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut masks: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut rng = match mode {
            Mode::Training { dropout_seed } => Some(ChaCha8Rng::seed_from_u64(dropout_seed)),
            Mode::Inference => None,
        };
        for (idx, node) in self.nodes.iter().enumerate() {
            let fetch = |e: &Edge| -> &Tensor {
                match e.from {
                    Source::Input => &input,
                    Source::Node(j) => &outputs[j],
                }
            };
            let a = fetch(&node.inputs[0]);
            let shape = self.shapes[idx].clone();
            let data = match &node.kind {
                LayerKind::Conv1d(c) => c.forward(a.data(), a.shape()[1]),
                LayerKind::MaxPool1d { size } => {
                    let (ch, len) = (a.shape()[0], a.shape()[1]);
                    let out_len = shape[1];
                    let mut out = Vec::with_capacity(ch * out_len);
                    for c in 0..ch {
                        let row = &a.data()[c * len..(c + 1) * len];
                        for t in 0..out_len {
                            let w = &row[t * size..(t + 1) * size];
                            out.push(w[argmax(w)]);
                        }
                    }
                    out
                }
                LayerKind::Dense(d) => d.forward(a.data()),
                LayerKind::Relu => a.data().iter().map(|v| v.max(0.0)).collect(),
                LayerKind::Sigmoid => a.data().iter().map(|&v| sigmoid(v)).collect(),
                LayerKind::Dropout { rate } => match rng.as_mut() {
                    Some(rng) if *rate > 0.0 => {
                        let keep = 1.0 - rate;
                        let mask: Vec<f64> = (0..a.len())
                            .map(|_| {
                                if rng.random::<f64>() < keep {
                                    1.0 / keep
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        let out = a.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
                        masks[idx] = Some(mask);
                        out
                    }
                    _ => a.data().to_vec(),
                },
                LayerKind::GlobalAvgPool1d => {
                    let len = a.shape()[1];
                    a.data()
                        .chunks(len)
                        .map(|r| r.iter().sum::<f64>() / len as f64)
                        .collect()
                }
                LayerKind::Multiply => {
                    let (signal, gate) = self.signal_gate(node, fetch);
                    multiply(signal, gate)
                }
                LayerKind::ResidualAdd => {
                    let b = fetch(&node.inputs[1]);
                    a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()
                }
            };
            if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
                return Err(NnError::NonFinite {
                    layer: node.id.clone(),
                    detail: format!("activation {bad} is {}", data[bad]),
                });
            }
            outputs.push(Tensor::new(shape, data)?);
        }
        let output = match outputs.last() {
            Some(t) => t.clone(),
            None => x.clone(),
        };
        Ok((
            output,
            ForwardTrace {
                generation: self.generation,
                training: matches!(mode, Mode::Training { .. }),
                input,
                outputs,
                masks,
            },
        ))
    }

    /// Inference-mode forward pass returning only the output.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>, NnError> {
        Ok(self.forward(x, Mode::Inference)?.0.into_data())
    }

    pub(crate) fn signal_gate<'a, F>(&self, node: &Node, fetch: F) -> (&'a Tensor, &'a Tensor)
    where
        F: Fn(&Edge) -> &'a Tensor,
    {
        if node.inputs[0].tag == Some(BranchTag::Gate) {
            (fetch(&node.inputs[1]), fetch(&node.inputs[0]))
        } else {
            (fetch(&node.inputs[0]), fetch(&node.inputs[1]))
        }
    }

    /// Reverse-mode gradients of a scalar loss given `dL/d(output)`.
    pub fn backward(&self, trace: &ForwardTrace, loss_grad: &Tensor) -> Result<Gradients, NnError> {
        let mut params: Vec<Vec<f64>> = self.params().iter().map(|p| vec![0.0; p.len()]).collect();
        let input = self.backward_into(trace, loss_grad, &mut params)?;
        Ok(Gradients { params, input })
    }

    /// Like [`LayerGraph::backward`] but adds parameter gradients into `params`
    /// (aligned with [`LayerGraph::params`]); returns the input gradient.
    pub fn backward_into(
        &self,
        trace: &ForwardTrace,
        loss_grad: &Tensor,
        params: &mut [Vec<f64>],
    ) -> Result<Tensor, NnError> {
        if trace.generation != self.generation || trace.outputs.len() != self.nodes.len() {
            return Err(NnError::StaleTrace);
        }
        let out_len = trace
            .outputs
            .last()
            .map(|t| t.len())
            .unwrap_or(trace.input.len());
        if loss_grad.len() != out_len {
            return Err(NnError::Shape(format!(
                "loss gradient has {} values, output has {out_len}",
                loss_grad.len()
            )));
        }
        if self.nodes.is_empty() {
            return Ok(loss_grad.clone());
        }
        // Parameter slot of each node in `params`.
        let mut slot = vec![usize::MAX; self.nodes.len()];
        let mut next = 0;
        for (i, n) in self.nodes.iter().enumerate() {
            if n.kind.has_params() {
                slot[i] = next;
                next += 2;
            }
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut input_grad = vec![0.0; trace.input.len()];
        grads[self.nodes.len() - 1] = Some(loss_grad.data().to_vec());

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let a = trace.source(&node.inputs[0].from);
            let contributions: Vec<(Source, Vec<f64>)> = match &node.kind {
                LayerKind::Conv1d(c) => {
                    let (gw, gb) = split_pair(params, slot[idx]);
                    let gx = c.backward(a.data(), a.shape()[1], &g, gw, gb);
                    vec![(node.inputs[0].from, gx)]
                }
                LayerKind::Dense(d) => {
                    let (gw, gb) = split_pair(params, slot[idx]);
                    let gx = d.backward(a.data(), &g, gw, gb);
                    vec![(node.inputs[0].from, gx)]
                }
                LayerKind::MaxPool1d { size } => {
                    let (ch, len) = (a.shape()[0], a.shape()[1]);
                    let out_len = self.shapes[idx][1];
                    let mut gx = vec![0.0; a.len()];
                    for c in 0..ch {
                        let row = &a.data()[c * len..(c + 1) * len];
                        for t in 0..out_len {
                            let w = &row[t * size..(t + 1) * size];
                            gx[c * len + t * size + argmax(w)] += g[c * out_len + t];
                        }
                    }
                    vec![(node.inputs[0].from, gx)]
                }
                LayerKind::Relu => {
                    let gx = g
                        .iter()
                        .zip(a.data())
                        .map(|(gv, v)| if *v > 0.0 { *gv } else { 0.0 })
                        .collect();
                    vec![(node.inputs[0].from, gx)]
                }
                LayerKind::Sigmoid => {
                    let y = &trace.outputs[idx];
                    let gx = g
                        .iter()
                        .zip(y.data())
                        .map(|(gv, s)| gv * s * (1.0 - s))
                        .collect();
                    vec![(node.inputs[0].from, gx)]
                }
                LayerKind::Dropout { .. } => {
                    let gx = match &trace.masks[idx] {
                        Some(mask) => g.iter().zip(mask).map(|(gv, m)| gv * m).collect(),
                        None => g,
                    };
                    vec![(node.inputs[0].from, gx)]
                }
                LayerKind::GlobalAvgPool1d => {
                    let len = a.shape()[1];
                    let gx = g
                        .iter()
                        .flat_map(|gv| std::iter::repeat_n(gv / len as f64, len))
                        .collect();
                    vec![(node.inputs[0].from, gx)]
                }
                LayerKind::Multiply => {
                    let (si, gi) = if node.inputs[0].tag == Some(BranchTag::Gate) {
                        (1, 0)
                    } else {
                        (0, 1)
                    };
                    let signal = trace.source(&node.inputs[si].from);
                    let gate = trace.source(&node.inputs[gi].from);
                    let (gs, gg) = multiply_backward(signal, gate, &g);
                    vec![(node.inputs[si].from, gs), (node.inputs[gi].from, gg)]
                }
                LayerKind::ResidualAdd => {
                    vec![(node.inputs[0].from, g.clone()), (node.inputs[1].from, g)]
                }
            };
            for (src, gx) in contributions {
                let target = match src {
                    Source::Input => &mut input_grad,
                    Source::Node(j) => grads[j].get_or_insert_with(|| vec![0.0; gx.len()]),
                };
                for (t, v) in target.iter_mut().zip(&gx) {
                    *t += v;
                }
            }
        }
        let input = Tensor::new(trace.input.shape().to_vec(), input_grad)?;
        Ok(if self.input_shape.len() == 2 {
            input.transpose()
        } else {
            input
        })
    }
}

fn internal_shape(input_shape: &[usize]) -> Vec<usize> {
    match input_shape {
        [n, m] => vec![*m, *n],
        other => other.to_vec(),
    }
}

fn split_pair(params: &mut [Vec<f64>], slot: usize) -> (&mut [f64], &mut [f64]) {
    let (head, tail) = params.split_at_mut(slot + 1);
    (&mut head[slot], &mut tail[0])
}

fn check_tags(node: &Node) -> Result<(), NnError> {
    let tags: Vec<Option<BranchTag>> = node.inputs.iter().map(|e| e.tag).collect();
    let ok = match node.kind {
        LayerKind::Multiply => {
            tags.contains(&Some(BranchTag::Signal)) && tags.contains(&Some(BranchTag::Gate))
        }
        LayerKind::ResidualAdd => {
            tags.contains(&Some(BranchTag::Main)) && tags.contains(&Some(BranchTag::Skip))
        }
        _ => tags.iter().all(Option::is_none),
    };
    if ok {
        Ok(())
    } else {
        Err(NnError::Graph(format!(
            "`{}` ({}) has missing or invalid branch tags {tags:?}",
            node.id,
            node.kind.name()
        )))
    }
}

fn multiply(signal: &Tensor, gate: &Tensor) -> Vec<f64> {
    if signal.shape() == gate.shape() {
        signal
            .data()
            .iter()
            .zip(gate.data())
            .map(|(s, g)| s * g)
            .collect()
    } else {
        let len = signal.shape()[1];
        signal
            .data()
            .chunks(len)
            .zip(gate.data())
            .flat_map(|(row, &g)| row.iter().map(move |s| s * g))
            .collect()
    }
}

fn multiply_backward(signal: &Tensor, gate: &Tensor, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    if signal.shape() == gate.shape() {
        let gs = g.iter().zip(gate.data()).map(|(a, b)| a * b).collect();
        let gg = g.iter().zip(signal.data()).map(|(a, b)| a * b).collect();
        (gs, gg)
    } else {
        let len = signal.shape()[1];
        let mut gs = Vec::with_capacity(g.len());
        let mut gg = Vec::with_capacity(gate.len());
        for ((grow, srow), &gv) in g
            .chunks(len)
            .zip(signal.data().chunks(len))
            .zip(gate.data())
        {
            gs.extend(grow.iter().map(|x| x * gv));
            gg.push(grow.iter().zip(srow).map(|(a, b)| a * b).sum());
        }
        (gs, gg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Inference,
    /// Dropout masks are drawn from `dropout_seed`.
    Training {
        dropout_seed: u64,
    },
}

/// Activations recorded during one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    generation: u64,
    training: bool,
    /// Graph input in the internal (channel-major) layout.
    input: Tensor,
    outputs: Vec<Tensor>,
    masks: Vec<Option<Vec<f64>>>,
}

impl ForwardTrace {
    pub fn input(&self) -> &Tensor {
        &self.input
    }

    pub fn output(&self, node: usize) -> &Tensor {
        &self.outputs[node]
    }

    pub fn outputs(&self) -> &[Tensor] {
        &self.outputs
    }

    pub fn source(&self, src: &Source) -> &Tensor {
        match src {
            Source::Input => &self.input,
            Source::Node(j) => &self.outputs[*j],
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

/// Gradients of a scalar loss.
#[derive(Clone, Debug)]
pub struct Gradients {
    /// Aligned with [`LayerGraph::params`].
    pub params: Vec<Vec<f64>>,
    /// Gradient with respect to the graph input, in the caller's layout.
    pub input: Tensor,
}
