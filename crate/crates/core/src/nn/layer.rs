use rand::Rng;
use serde::{Deserialize, Serialize};

/// Parameter initialization scheme, chosen per layer from the activation
/// that follows it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`; for layers feeding a ReLU.
    HeUniform,
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`; for sigmoid and linear outputs.
    GlorotUniform,
    Zeros,
}

impl Init {
    fn limit(self, fan_in: usize, fan_out: usize) -> f64 {
        match self {
            Init::HeUniform => (6.0 / fan_in as f64).sqrt(),
            Init::GlorotUniform => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            Init::Zeros => 0.0,
        }
    }

    fn fill<R: Rng + ?Sized>(self, w: &mut [f64], fan_in: usize, fan_out: usize, rng: &mut R) {
        let limit = self.limit(fan_in, fan_out);
        for v in w.iter_mut() {
            *v = if limit > 0.0 {
                rng.random_range(-limit..limit)
            } else {
                0.0
            };
        }
    }
}

/// 1-D convolution over channel-major `[channels, length]` input.
///
/// Weights are stored `[out][in][tap]`. Padding is symmetric zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv1d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: vec![0.0; out_channels * in_channels * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    /// Convolution preserving the input length (odd kernels, stride 1).
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self::new(in_channels, out_channels, kernel, 1, kernel / 2)
    }

    pub fn out_len(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        if self.stride == 0 || padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    #[inline]
    pub fn w(&self, o: usize, i: usize, k: usize) -> f64 {
        self.weight[(o * self.in_channels + i) * self.kernel + k]
    }

    /// Output positions `[lo, hi)` for which tap `k` reads a real (unpadded) sample.
    pub(crate) fn tap_range(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        if len + p < k + 1 {
            return (0, 0);
        }
        let hi = ((len - 1 + p - k) / s + 1).min(out_len);
        (lo.min(hi), hi)
    }

    pub(crate) fn forward(&self, x: &[f64], len: usize) -> Vec<f64> {
        let out_len = self.out_len(len).expect("shape validated at build");
        let mut out = vec![0.0; self.out_channels * out_len];
        for o in 0..self.out_channels {
            let row = &mut out[o * out_len..(o + 1) * out_len];
            row.fill(self.bias[o]);
            for i in 0..self.in_channels {
                let xi = &x[i * len..(i + 1) * len];
                for k in 0..self.kernel {
                    let w = self.w(o, i, k);
                    if w == 0.0 {
                        continue;
                    }
                    let (lo, hi) = self.tap_range(k, len, out_len);
                    if lo >= hi {
                        continue;
                    }
                    if self.stride == 1 {
                        let start = lo + k - self.padding;
                        let src = &xi[start..start + (hi - lo)];
                        for (r, &v) in row[lo..hi].iter_mut().zip(src) {
                            *r += w * v;
                        }
                    } else {
                        for t in lo..hi {
                            row[t] += w * xi[t * self.stride + k - self.padding];
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub(crate) fn backward(
        &self,
        x: &[f64],
        len: usize,
        grad_out: &[f64],
        grad_w: &mut [f64],
        grad_b: &mut [f64],
    ) -> Vec<f64> {
        let out_len = grad_out.len() / self.out_channels;
        let mut grad_x = vec![0.0; x.len()];
        for o in 0..self.out_channels {
            let g = &grad_out[o * out_len..(o + 1) * out_len];
            grad_b[o] += g.iter().sum::<f64>();
            for i in 0..self.in_channels {
                let xi = &x[i * len..(i + 1) * len];
                let gxi = &mut grad_x[i * len..(i + 1) * len];
                for k in 0..self.kernel {
                    let widx = (o * self.in_channels + i) * self.kernel + k;
                    let w = self.weight[widx];
                    let (lo, hi) = self.tap_range(k, len, out_len);
                    if lo >= hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    if self.stride == 1 {
                        let start = lo + k - self.padding;
                        let src = &xi[start..start + (hi - lo)];
                        acc = dot(&g[lo..hi], src);
                        for (gx, &gv) in gxi[start..start + (hi - lo)].iter_mut().zip(&g[lo..hi]) {
                            *gx += w * gv;
                        }
                    } else {
                        for (t, &gv) in g.iter().enumerate().take(hi).skip(lo) {
                            let pos = t * self.stride + k - self.padding;
                            acc += gv * xi[pos];
                            gxi[pos] += w * gv;
                        }
                    }
                    grad_w[widx] += acc;
                }
            }
        }
        grad_x
    }

    pub fn init<R: Rng + ?Sized>(&mut self, init: Init, rng: &mut R) {
        let fan_in = self.in_channels * self.kernel;
        let fan_out = self.out_channels * self.kernel;
        init.fill(&mut self.weight, fan_in, fan_out, rng);
        self.bias.fill(0.0);
    }
}

/// Dot product with independent partial sums so the loop vectorizes.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Fully connected layer over the flattened input. Weights are `[out][in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    #[inline]
    pub fn w(&self, o: usize, i: usize) -> f64 {
        self.weight[o * self.in_dim + i]
    }

    pub(crate) fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|o| {
                let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                self.bias[o] + dot(row, x)
            })
            .collect()
    }

    pub(crate) fn backward(
        &self,
        x: &[f64],
        grad_out: &[f64],
        grad_w: &mut [f64],
        grad_b: &mut [f64],
    ) -> Vec<f64> {
        let mut grad_x = vec![0.0; self.in_dim];
        for (o, &g) in grad_out.iter().enumerate() {
            grad_b[o] += g;
            if g == 0.0 {
                continue;
            }
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grad_w[o * self.in_dim..(o + 1) * self.in_dim];
            for ((gw, gx), (&w, &v)) in grow
                .iter_mut()
                .zip(grad_x.iter_mut())
                .zip(row.iter().zip(x))
            {
                *gw += g * v;
                *gx += g * w;
            }
        }
        grad_x
    }

    pub fn init<R: Rng + ?Sized>(&mut self, init: Init, rng: &mut R) {
        init.fill(&mut self.weight, self.in_dim, self.out_dim, rng);
        self.bias.fill(0.0);
    }
}

/// The layer kinds the engine knows how to run, differentiate, and explain.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv1d(Conv1d),
    /// Non-overlapping max pooling; a trailing partial window is dropped.
    MaxPool1d {
        size: usize,
    },
    Dense(Dense),
    Relu,
    Sigmoid,
    /// Identity outside training.
    Dropout {
        rate: f64,
    },
    /// `[C, L] -> [C]`.
    GlobalAvgPool1d,
    /// `signal * gate`; a rank-1 gate of length C broadcasts over `[C, L]`.
    Multiply,
    ResidualAdd,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv1d(_) => "conv1d",
            LayerKind::MaxPool1d { .. } => "maxpool1d",
            LayerKind::Dense(_) => "dense",
            LayerKind::Relu => "relu",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::GlobalAvgPool1d => "global_avg_pool1d",
            LayerKind::Multiply => "multiply",
            LayerKind::ResidualAdd => "residual_add",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            LayerKind::Multiply | LayerKind::ResidualAdd => 2,
            _ => 1,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv1d(_) | LayerKind::Dense(_))
    }

    /// Hyperparameter description used for architecture fingerprints.
    pub fn signature(&self) -> String {
        match self {
            LayerKind::Conv1d(c) => format!(
                "conv1d(in={},out={},k={},s={},p={})",
                c.in_channels, c.out_channels, c.kernel, c.stride, c.padding
            ),
            LayerKind::MaxPool1d { size } => format!("maxpool1d({size})"),
            LayerKind::Dense(d) => format!("dense(in={},out={})", d.in_dim, d.out_dim),
            LayerKind::Dropout { rate } => format!("dropout({rate})"),
            other => other.name().to_string(),
        }
    }

    /// Static output shape for the given input shapes (already arity-checked).
    pub fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        let first = inputs[0];
        match self {
            LayerKind::Conv1d(c) => {
                let [ch, len] = two_d(first)?;
                if ch != c.in_channels {
                    return Err(format!("conv expects {} channels, got {ch}", c.in_channels));
                }
                if c.weight.len() != c.out_channels * c.in_channels * c.kernel
                    || c.bias.len() != c.out_channels
                {
                    return Err("conv weight shape inconsistent with channel counts".into());
                }
                match c.out_len(len) {
                    Some(l) if l > 0 => Ok(vec![c.out_channels, l]),
                    _ => Err(format!(
                        "conv kernel {} does not fit length {len}",
                        c.kernel
                    )),
                }
            }
            LayerKind::MaxPool1d { size } => {
                let [ch, len] = two_d(first)?;
                if *size == 0 || len / size == 0 {
                    return Err(format!("pool size {size} reduces length {len} to zero"));
                }
                Ok(vec![ch, len / size])
            }
            LayerKind::Dense(d) => {
                let n: usize = first.iter().product();
                if n != d.in_dim {
                    return Err(format!("dense expects {} inputs, got {n}", d.in_dim));
                }
                if d.weight.len() != d.in_dim * d.out_dim || d.bias.len() != d.out_dim {
                    return Err("dense weight shape inconsistent with dimensions".into());
                }
                Ok(vec![d.out_dim])
            }
            LayerKind::Relu | LayerKind::Sigmoid => Ok(first.to_vec()),
            LayerKind::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(format!("dropout rate {rate} outside [0, 1)"));
                }
                Ok(first.to_vec())
            }
            LayerKind::GlobalAvgPool1d => {
                let [ch, _] = two_d(first)?;
                Ok(vec![ch])
            }
            LayerKind::Multiply => {
                let (signal, gate) = (inputs[0], inputs[1]);
                let broadcast = signal.len() == 2 && gate.len() == 1 && gate[0] == signal[0];
                if signal == gate || broadcast {
                    Ok(signal.to_vec())
                } else {
                    Err(format!("cannot gate {signal:?} with {gate:?}"))
                }
            }
            LayerKind::ResidualAdd => {
                if inputs[0] != inputs[1] {
                    return Err(format!(
                        "residual branches differ: {:?} vs {:?}",
                        inputs[0], inputs[1]
                    ));
                }
                Ok(first.to_vec())
            }
        }
    }
}

fn two_d(shape: &[usize]) -> Result<[usize; 2], String> {
    match shape {
        [c, l] => Ok([*c, *l]),
        other => Err(format!("expected [channels, length], got {other:?}")),
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Index of the maximum in `window`, lowest index on ties.
#[inline]
pub(crate) fn argmax(window: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in window.iter().enumerate().skip(1) {
        if v > window[best] {
            best = i;
        }
    }
    best
}
