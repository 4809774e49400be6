//! Layer-wise relevance propagation over recorded forward passes.
//!
//! Every rule redistributes `R_k` over the inputs of neuron `k` in
//! proportion to a contribution `z_jk`, `R_j = sum_k z_jk / sum_j' z_j'k * R_k`.
//! Biases are not part of the denominator.

mod export;

pub use export::{read_relevance, relevance_signal, write_relevance, write_relevance_wav};

use std::collections::BTreeMap;

use log::debug;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{
    BranchTag, Conv1d, Dense, ForwardTrace, LayerGraph, LayerKind, Node, Source, Tensor,
};

pub const DEFAULT_GAMMA: f64 = 0.25;
pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_STABILIZER: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum LrpError {
    #[error("layer `{0}` has no rule assigned")]
    Unassigned(String),
    #[error("rule {rule:?} cannot be applied to layer `{layer}` ({kind})")]
    Incompatible {
        layer: String,
        kind: &'static str,
        rule: Rule,
    },
    #[error("invalid rule parameter: {0}")]
    InvalidRule(String),
    #[error("relevance became non-finite in layer `{0}`")]
    NonFinite(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("relevance must be computed on an inference-mode trace of the current graph")]
    BadTrace,
    #[error("window mismatch: {0}")]
    Windows(String),
    #[error("corrupt relevance file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wav(#[from] hound::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Rule {
    /// `z_jk = w_jk^2`; ignores activations.
    WSquare,
    /// `z_jk = a_j (w_jk + gamma max(w_jk, 0))`.
    Gamma { gamma: f64 },
    /// `z_jk = a_j w_jk`, denominator widened by `epsilon`.
    Epsilon { epsilon: f64 },
    /// Element-wise layers hand relevance through unchanged; max pooling
    /// routes it to the winning sample, average pooling splits it by
    /// contribution.
    PassThrough,
    /// Gated product: the signal branch receives everything.
    SignalTakesAll,
    /// Residual sum: each branch receives its share of the pre-sum value.
    ResidualSplit,
}

impl Rule {
    fn fits(&self, kind: &LayerKind) -> bool {
        match self {
            Rule::WSquare | Rule::Gamma { .. } | Rule::Epsilon { .. } => {
                matches!(kind, LayerKind::Conv1d(_) | LayerKind::Dense(_))
            }
            Rule::PassThrough => matches!(
                kind,
                LayerKind::Relu
                    | LayerKind::Sigmoid
                    | LayerKind::Dropout { .. }
                    | LayerKind::MaxPool1d { .. }
                    | LayerKind::GlobalAvgPool1d
            ),
            Rule::SignalTakesAll => matches!(kind, LayerKind::Multiply),
            Rule::ResidualSplit => matches!(kind, LayerKind::ResidualAdd),
        }
    }

    fn validate(&self) -> Result<(), LrpError> {
        match *self {
            Rule::Gamma { gamma } if !(gamma >= 0.0 && gamma.is_finite()) => Err(
                LrpError::InvalidRule(format!("gamma {gamma} must be finite and >= 0")),
            ),
            Rule::Epsilon { epsilon } if !(epsilon >= 0.0 && epsilon.is_finite()) => Err(
                LrpError::InvalidRule(format!("epsilon {epsilon} must be finite and >= 0")),
            ),
            _ => Ok(()),
        }
    }
}

/// Which output neurons seed the backward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selector {
    #[default]
    Sum,
    X,
    Y,
    Z,
}

impl Selector {
    pub fn seed(self, output: &[f64]) -> Result<Vec<f64>, LrpError> {
        let keep = match self {
            Selector::Sum => return Ok(output.to_vec()),
            Selector::X => 0,
            Selector::Y => 1,
            Selector::Z => 2,
        };
        if keep >= output.len() {
            return Err(LrpError::Shape(format!(
                "selector {self:?} needs {} outputs",
                keep + 1
            )));
        }
        Ok(output
            .iter()
            .enumerate()
            .map(|(i, v)| if i == keep { *v } else { 0.0 })
            .collect())
    }
}

impl std::str::FromStr for Selector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sum" => Ok(Selector::Sum),
            "x" => Ok(Selector::X),
            "y" => Ok(Selector::Y),
            "z" => Ok(Selector::Z),
            other => Err(format!(
                "unknown target `{other}` (expected sum, x, y or z)"
            )),
        }
    }
}

/// Rule per layer id plus the denominator stabilizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleAssignment {
    pub rules: BTreeMap<String, Rule>,
    pub stabilizer: f64,
}

impl RuleAssignment {
    /// The input convolution gets `w^2`, other convolutions `gamma`, dense
    /// layers `epsilon`.
    pub fn default_for(graph: &LayerGraph, gamma: f64, epsilon: f64) -> Self {
        let mut rules = BTreeMap::new();
        for node in graph.nodes() {
            let reads_input = node.inputs.iter().any(|e| e.from == Source::Input);
            let rule = match &node.kind {
                LayerKind::Conv1d(_) if reads_input => Rule::WSquare,
                LayerKind::Conv1d(_) => Rule::Gamma { gamma },
                LayerKind::Dense(_) => Rule::Epsilon { epsilon },
                LayerKind::Multiply => Rule::SignalTakesAll,
                LayerKind::ResidualAdd => Rule::ResidualSplit,
                _ => Rule::PassThrough,
            };
            rules.insert(node.id.clone(), rule);
        }
        Self {
            rules,
            stabilizer: DEFAULT_STABILIZER,
        }
    }

    pub fn set(&mut self, layer: &str, rule: Rule) {
        self.rules.insert(layer.to_string(), rule);
    }

    /// Checks that every layer has exactly one applicable rule.
    pub fn check(&self, graph: &LayerGraph) -> Result<(), LrpError> {
        if !(self.stabilizer > 0.0) {
            return Err(LrpError::InvalidRule(format!(
                "stabilizer {} must be > 0",
                self.stabilizer
            )));
        }
        for node in graph.nodes() {
            let rule = self
                .rules
                .get(&node.id)
                .ok_or_else(|| LrpError::Unassigned(node.id.clone()))?;
            rule.validate()?;
            if !rule.fits(&node.kind) {
                return Err(LrpError::Incompatible {
                    layer: node.id.clone(),
                    kind: node.kind.name(),
                    rule: *rule,
                });
            }
        }
        Ok(())
    }
}

/// Relevance at every layer output and at the input.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceMap {
    /// Relevance of each node's output, aligned with the graph nodes.
    pub layers: Vec<Tensor>,
    /// Input relevance in the caller's layout, `(samples, channels)` for
    /// sequence inputs.
    pub input: Tensor,
    pub output_seed: Vec<f64>,
    /// Per layer: total relevance received minus total handed down.
    pub absorbed: Vec<f64>,
}

/// Sign used for stabilizers; zero counts as positive.
fn sign(v: f64) -> f64 {
    if v < 0.0 {
        -1.0
    } else {
        1.0
    }
}

fn conv_with(c: &Conv1d, weight: Vec<f64>) -> Conv1d {
    Conv1d {
        weight,
        bias: vec![0.0; c.out_channels],
        ..c.clone()
    }
}

/// Transposed convolution of `s` with the layer weights, i.e. the input
/// gradient of `sum(s * conv(x))`.
fn conv_transpose(c: &Conv1d, len: usize, s: &[f64]) -> Vec<f64> {
    let x = vec![0.0; c.in_channels * len];
    let mut gw = vec![0.0; c.weight.len()];
    let mut gb = vec![0.0; c.out_channels];
    c.backward(&x, len, s, &mut gw, &mut gb)
}

fn dense_with(d: &Dense, weight: Vec<f64>) -> Dense {
    Dense {
        weight,
        bias: vec![0.0; d.out_dim],
        ..d.clone()
    }
}

fn dense_transpose(d: &Dense, s: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; d.in_dim];
    for (o, &sv) in s.iter().enumerate() {
        if sv == 0.0 {
            continue;
        }
        for (r, w) in out
            .iter_mut()
            .zip(&d.weight[o * d.in_dim..(o + 1) * d.in_dim])
        {
            *r += w * sv;
        }
    }
    out
}

fn modified_weights(w: &[f64], rule: Rule) -> Vec<f64> {
    match rule {
        Rule::WSquare => w.iter().map(|v| v * v).collect(),
        Rule::Gamma { gamma } => w.iter().map(|v| v + gamma * v.max(0.0)).collect(),
        _ => w.to_vec(),
    }
}

/// Scaled relevance `r / (z + sign(z) eps)` for the z-based rules.
///
/// Neurons with `|z|` at or below the stabilizer are active through their
/// bias alone (or cancel exactly), so the z-rule has nowhere to send their
/// relevance; it is returned separately for the `w^2` rule to spread over
/// the receptive field. Everywhere else the stabilizer is left out of the
/// denominator: activations here can be small enough for it to absorb a
/// measurable share of the relevance.
fn split_degenerate(
    r: &[f64],
    z: &[f64],
    eps: f64,
    stab: f64,
    id: &str,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let mut rest: Option<Vec<f64>> = None;
    let s = r
        .iter()
        .zip(z)
        .enumerate()
        .map(|(j, (rv, zv))| {
            if zv.abs() <= stab {
                if *rv != 0.0 {
                    rest.get_or_insert_with(|| vec![0.0; r.len()])[j] = *rv;
                }
                0.0
            } else {
                rv / (zv + sign(*zv) * eps)
            }
        })
        .collect();
    if let Some(rest) = &rest {
        debug!(
            "layer `{id}`: {} bias-only neurons redistributed by w^2",
            rest.iter().filter(|v| **v != 0.0).count()
        );
    }
    (s, rest)
}

/// Relevance through a convolution under `rule`.
fn propagate_conv(c: &Conv1d, a: &Tensor, r: &[f64], rule: Rule, stab: f64, id: &str) -> Vec<f64> {
    let len = a.shape()[1];
    let m = conv_with(c, modified_weights(&c.weight, rule));
    match rule {
        Rule::WSquare => {
            let ones = vec![1.0; a.len()];
            let den = m.forward(&ones, len);
            let mut fallback = false;
            let s: Vec<f64> = r
                .iter()
                .zip(&den)
                .map(|(rv, d)| {
                    if *d == 0.0 {
                        fallback |= *rv != 0.0;
                        0.0
                    } else {
                        rv / d
                    }
                })
                .collect();
            let mut out = conv_transpose(&m, len, &s);
            if fallback {
                debug!("layer `{id}`: all-zero weights under w^2, splitting uniformly");
                let u = conv_with(c, vec![1.0; c.weight.len()]);
                let count = u.forward(&ones, len);
                let su: Vec<f64> = r
                    .iter()
                    .zip(den.iter().zip(&count))
                    .map(|(rv, (d, n))| if *d == 0.0 && *n > 0.0 { rv / n } else { 0.0 })
                    .collect();
                for (o, v) in out.iter_mut().zip(conv_transpose(&u, len, &su)) {
                    *o += v;
                }
            }
            out
        }
        _ => {
            let eps = match rule {
                Rule::Epsilon { epsilon } => epsilon,
                _ => 0.0,
            };
            let z = m.forward(a.data(), len);
            let (s, rest) = split_degenerate(r, &z, eps, stab, id);
            let back = conv_transpose(&m, len, &s);
            let mut out: Vec<f64> = a.data().iter().zip(back).map(|(x, b)| x * b).collect();
            if let Some(rest) = rest {
                for (o, v) in
                    out.iter_mut()
                        .zip(propagate_conv(c, a, &rest, Rule::WSquare, stab, id))
                {
                    *o += v;
                }
            }
            out
        }
    }
}

fn propagate_dense(d: &Dense, a: &Tensor, r: &[f64], rule: Rule, stab: f64, id: &str) -> Vec<f64> {
    let m = dense_with(d, modified_weights(&d.weight, rule));
    match rule {
        Rule::WSquare => {
            let den = m.forward(&vec![1.0; d.in_dim]);
            let mut out = vec![0.0; d.in_dim];
            for (o, (&rv, &dv)) in r.iter().zip(&den).enumerate() {
                let row = &m.weight[o * d.in_dim..(o + 1) * d.in_dim];
                if dv == 0.0 {
                    if rv != 0.0 {
                        debug!("layer `{id}`: all-zero weights under w^2, splitting uniformly");
                    }
                    out.iter_mut().for_each(|x| *x += rv / d.in_dim as f64);
                } else {
                    for (x, w) in out.iter_mut().zip(row) {
                        *x += w / dv * rv;
                    }
                }
            }
            out
        }
        _ => {
            let eps = match rule {
                Rule::Epsilon { epsilon } => epsilon,
                _ => 0.0,
            };
            let z = m.forward(a.data());
            let (s, rest) = split_degenerate(r, &z, eps, stab, id);
            let back = dense_transpose(&m, &s);
            let mut out: Vec<f64> = a.data().iter().zip(back).map(|(x, b)| x * b).collect();
            if let Some(rest) = rest {
                for (o, v) in
                    out.iter_mut()
                        .zip(propagate_dense(d, a, &rest, Rule::WSquare, stab, id))
                {
                    *o += v;
                }
            }
            out
        }
    }
}

/// `w^2` rule for a single output neuron: `R_j = w_j^2 / sum w^2 * r`.
pub fn propagate_wsquare(weights: &[f64], r: f64) -> Vec<f64> {
    let total: f64 = weights.iter().map(|w| w * w).sum();
    if total == 0.0 {
        return vec![r / weights.len() as f64; weights.len()];
    }
    weights.iter().map(|w| w * w / total * r).collect()
}

/// Signal-takes-all split of a gated product: `(R_signal, R_gate)`.
pub fn propagate_signal_takes_all(r_out: &[f64], gate_len: usize) -> (Vec<f64>, Vec<f64>) {
    (r_out.to_vec(), vec![0.0; gate_len])
}

/// Residual split `R_b = a_b / (a_main + a_skip) * R` element-wise. Where
/// the branch sum is within the stabilizer of zero the relevance is halved.
pub fn canonize_residual(
    a_main: &[f64],
    a_skip: &[f64],
    r_out: &[f64],
    stabilizer: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut main = Vec::with_capacity(r_out.len());
    let mut skip = Vec::with_capacity(r_out.len());
    let mut triggered = 0usize;
    for ((m, s), r) in a_main.iter().zip(a_skip).zip(r_out) {
        let sum = m + s;
        if sum.abs() <= stabilizer {
            triggered += 1;
            main.push(0.5 * r);
            skip.push(0.5 * r);
            continue;
        }
        main.push(m / sum * r);
        skip.push(s / sum * r);
    }
    if triggered > 0 {
        debug!("residual split: {triggered} near-zero positions halved");
    }
    (main, skip)
}

fn propagate_node(
    graph: &LayerGraph,
    node: &Node,
    idx: usize,
    trace: &ForwardTrace,
    r: &[f64],
    rule: Rule,
    stab: f64,
) -> Vec<(Source, Vec<f64>)> {
    let a = trace.source(&node.inputs[0].from);
    let first = node.inputs[0].from;
    match &node.kind {
        LayerKind::Conv1d(c) => vec![(first, propagate_conv(c, a, r, rule, stab, &node.id))],
        LayerKind::Dense(d) => vec![(first, propagate_dense(d, a, r, rule, stab, &node.id))],
        LayerKind::Relu | LayerKind::Sigmoid | LayerKind::Dropout { .. } => {
            vec![(first, r.to_vec())]
        }
        LayerKind::MaxPool1d { size } => {
            let (ch, len) = (a.shape()[0], a.shape()[1]);
            let out_len = graph.shape(idx)[1];
            let mut out = vec![0.0; a.len()];
            for c in 0..ch {
                let row = &a.data()[c * len..(c + 1) * len];
                for t in 0..out_len {
                    let w = &row[t * size..(t + 1) * size];
                    out[c * len + t * size + crate::nn::argmax(w)] += r[c * out_len + t];
                }
            }
            vec![(first, out)]
        }
        LayerKind::GlobalAvgPool1d => {
            let len = a.shape()[1];
            let mut out = Vec::with_capacity(a.len());
            for (row, rv) in a.data().chunks(len).zip(r) {
                let sum: f64 = row.iter().sum();
                if sum == 0.0 {
                    out.extend(std::iter::repeat_n(rv / len as f64, len));
                } else {
                    let den = sum + sign(sum) * stab;
                    out.extend(row.iter().map(|v| v / den * rv));
                }
            }
            vec![(first, out)]
        }
        LayerKind::Multiply => {
            let (si, gi) = if node.inputs[0].tag == Some(BranchTag::Gate) {
                (1, 0)
            } else {
                (0, 1)
            };
            let gate_len = trace.source(&node.inputs[gi].from).len();
            let (rs, rg) = propagate_signal_takes_all(r, gate_len);
            vec![(node.inputs[si].from, rs), (node.inputs[gi].from, rg)]
        }
        LayerKind::ResidualAdd => {
            let (mi, si) = if node.inputs[0].tag == Some(BranchTag::Skip) {
                (1, 0)
            } else {
                (0, 1)
            };
            let am = trace.source(&node.inputs[mi].from);
            let as_ = trace.source(&node.inputs[si].from);
            let (rm, rs) = canonize_residual(am.data(), as_.data(), r, stab);
            vec![(node.inputs[mi].from, rm), (node.inputs[si].from, rs)]
        }
    }
}

/// Propagates relevance from the selected outputs back to the input.
pub fn attribute(
    graph: &LayerGraph,
    trace: &ForwardTrace,
    rules: &RuleAssignment,
    selector: Selector,
) -> Result<RelevanceMap, LrpError> {
    let n = graph.nodes().len();
    let seed = if n == 0 {
        // An empty graph returns its input unchanged, in the caller's layout.
        let x = trace.input();
        let x = if graph.input_shape().len() == 2 {
            x.transpose()
        } else {
            x.clone()
        };
        selector.seed(x.data())?
    } else {
        selector.seed(trace.output(n - 1).data())?
    };
    attribute_with_seed(graph, trace, rules, &seed)
}

/// Like [`attribute`] with an explicit output relevance.
pub fn attribute_with_seed(
    graph: &LayerGraph,
    trace: &ForwardTrace,
    rules: &RuleAssignment,
    seed: &[f64],
) -> Result<RelevanceMap, LrpError> {
    rules.check(graph)?;
    if trace.is_training()
        || trace.generation() != graph.generation()
        || trace.len() != graph.nodes().len()
    {
        return Err(LrpError::BadTrace);
    }
    let n = graph.nodes().len();
    let out_len = if n == 0 {
        trace.input().len()
    } else {
        trace.output(n - 1).len()
    };
    if seed.len() != out_len {
        return Err(LrpError::Shape(format!(
            "seed has {} values, output has {out_len}",
            seed.len()
        )));
    }
    let seed = seed.to_vec();
    if n == 0 {
        let input = Tensor::new(graph.input_shape().to_vec(), seed.clone())
            .map_err(|e| LrpError::Shape(e.to_string()))?;
        return Ok(RelevanceMap {
            layers: Vec::new(),
            input,
            output_seed: seed,
            absorbed: Vec::new(),
        });
    }
    let mut pending: Vec<Option<Vec<f64>>> = vec![None; n];
    pending[n - 1] = Some(seed.clone());
    let mut layers: Vec<Option<Tensor>> = vec![None; n];
    let mut absorbed = vec![0.0; n];
    let mut input_rel = vec![0.0; trace.input().len()];

    for idx in (0..n).rev() {
        let node = &graph.nodes()[idx];
        let r = pending[idx]
            .take()
            .unwrap_or_else(|| vec![0.0; graph.shape(idx).iter().product()]);
        let rule = rules.rules[&node.id];
        let parts = propagate_node(graph, node, idx, trace, &r, rule, rules.stabilizer);
        let mut handed = 0.0;
        for (src, rel) in parts {
            if let Some(bad) = rel.iter().position(|v| !v.is_finite()) {
                debug!("layer `{}`: relevance {bad} is {}", node.id, rel[bad]);
                return Err(LrpError::NonFinite(node.id.clone()));
            }
            handed += rel.iter().sum::<f64>();
            let target = match src {
                Source::Input => &mut input_rel,
                Source::Node(j) => pending[j].get_or_insert_with(|| vec![0.0; rel.len()]),
            };
            for (t, v) in target.iter_mut().zip(&rel) {
                *t += v;
            }
        }
        absorbed[idx] = r.iter().sum::<f64>() - handed;
        if absorbed[idx].abs()
            > 1e-6
                * r.iter()
                    .map(|v| v.abs())
                    .sum::<f64>()
                    .max(f64::MIN_POSITIVE)
        {
            debug!(
                "layer `{}` absorbed {:.3e} relevance",
                node.id, absorbed[idx]
            );
        }
        let shape = graph.shape(idx).to_vec();
        layers[idx] = Some(Tensor::new(shape, r).map_err(|e| LrpError::Shape(e.to_string()))?);
    }
    let internal = Tensor::new(trace.input().shape().to_vec(), input_rel)
        .map_err(|e| LrpError::Shape(e.to_string()))?;
    let input = if graph.input_shape().len() == 2 {
        internal.transpose()
    } else {
        internal
    };
    Ok(RelevanceMap {
        layers: layers
            .into_iter()
            .map(|t| t.expect("every node visited"))
            .collect(),
        input,
        output_seed: seed,
        absorbed,
    })
}
