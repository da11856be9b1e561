//! Configurable encoder-decoder that predicts `C + 1` class logits per grid
//! cell at five scales.
//!
//! The graph follows the DarkNet-53 style layout: a stem convolution, five
//! stride-2 stages each followed by residual blocks, then a decoder that
//! alternates 1x1/3x3 convolution sets with nearest-neighbour upsampling and
//! channel concatenation of the matching encoder stage. Every decoder level
//! ends in a 1x1 classification head. All channel widths are divided by a
//! preset divisor so the same graph runs at desk scale.

pub mod checkpoint;
mod layers;
pub mod sgd;
pub mod tensor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use layers::{
    add_forward, concat_backward, concat_forward, conv_backward, conv_forward, upsample_backward,
    upsample_forward, ConvSpec, LEAKY_SLOPE,
};
pub use sgd::Sgd;
pub use tensor::Tensor;

/// Number of prediction scales.
pub const SCALES: usize = 5;

// Full-width channel counts.
const STEM: usize = 32;
const STAGES: [usize; SCALES] = [64, 128, 256, 512, 1024];
const LATERAL: [usize; 4] = [256, 128, 128, 128];
const DECODER: [usize; 4] = [256, 128, 128, 128];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_size: usize,
    pub channel_divisor: usize,
    /// Residual blocks after each of the five downsampling convolutions.
    pub residual_repeats: [usize; SCALES],
    /// (1x1, 3x3) pairs in each decoder convolution set.
    pub convset_repeats: usize,
    pub classes: usize,
    /// Input image channels.
    pub in_channels: usize,
}

impl NetworkConfig {
    /// Full-width layout at 512 px.
    pub fn full(classes: usize) -> Self {
        Self {
            input_size: 512,
            channel_divisor: 1,
            residual_repeats: [1, 2, 8, 8, 4],
            convset_repeats: 3,
            classes,
            in_channels: 3,
        }
    }

    /// 64 px input, channels / 8.
    pub fn micro(classes: usize) -> Self {
        Self {
            input_size: 64,
            channel_divisor: 8,
            residual_repeats: [1, 1, 2, 2, 1],
            convset_repeats: 1,
            classes,
            in_channels: 3,
        }
    }

    /// Smallest layout used for exhaustive gradient checks: 32 px, channels / 16.
    pub fn tiny(classes: usize) -> Self {
        Self {
            input_size: 32,
            channel_divisor: 16,
            residual_repeats: [1, 1, 1, 1, 1],
            convset_repeats: 1,
            classes,
            in_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::InvalidConfig("class count must be >= 1".into()));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return Err(Error::InvalidConfig(format!(
                "input size {} is not a positive multiple of 32",
                self.input_size
            )));
        }
        if self.channel_divisor == 0 {
            return Err(Error::InvalidConfig("channel divisor must be >= 1".into()));
        }
        if self.residual_repeats.contains(&0) || self.convset_repeats == 0 {
            return Err(Error::InvalidConfig("repeat counts must be >= 1".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::InvalidConfig("input needs at least one channel".into()));
        }
        Ok(())
    }

    fn ch(&self, full: usize) -> usize {
        (full / self.channel_divisor).max(1)
    }

    /// Head spatial sizes, coarsest first.
    pub fn head_sizes(&self) -> [usize; SCALES] {
        let s = self.input_size;
        [s / 32, s / 16, s / 8, s / 4, s / 2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Input,
    Conv { src: usize, layer: usize },
    Add { a: usize, b: usize },
    Upsample { src: usize },
    Concat { a: usize, b: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Node {
    op: Op,
    shape: (usize, usize, usize),
}

/// Forward activations of every node, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace {
    acts: Vec<Tensor>,
    heads: Vec<usize>,
}

impl Trace {
    /// Head logits, coarsest first.
    pub fn heads(&self) -> Vec<&Tensor> {
        self.heads.iter().map(|&h| &self.acts[h]).collect()
    }

    pub fn into_heads(self) -> Vec<Tensor> {
        let Trace { mut acts, heads } = self;
        heads
            .iter()
            .map(|&h| std::mem::replace(&mut acts[h], Tensor::zeros(0, 0, 0)))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    nodes: Vec<Node>,
    layers: Vec<ConvSpec>,
    heads: Vec<usize>,
    pub params: Vec<f64>,
    pub grads: Vec<f64>,
    last_trace: Option<Trace>,
}

struct Builder<'a> {
    cfg: &'a NetworkConfig,
    nodes: Vec<Node>,
    layers: Vec<ConvSpec>,
    n_params: usize,
}

impl Builder<'_> {
    fn push(&mut self, op: Op, shape: (usize, usize, usize)) -> usize {
        self.nodes.push(Node { op, shape });
        self.nodes.len() - 1
    }

    fn conv(&mut self, src: usize, cout: usize, k: usize, stride: usize, leaky: bool) -> usize {
        let (cin, h, w) = self.nodes[src].shape;
        let w_off = self.n_params;
        let b_off = w_off + cout * cin * k * k;
        let spec = ConvSpec {
            cin,
            cout,
            k,
            stride,
            leaky,
            w_off,
            b_off,
        };
        self.n_params = b_off + cout;
        let (ho, wo) = spec.out_size(h, w);
        self.layers.push(spec);
        let layer = self.layers.len() - 1;
        self.push(Op::Conv { src, layer }, (cout, ho, wo))
    }

    fn residual(&mut self, src: usize) -> usize {
        let c = self.nodes[src].shape.0;
        let a = self.conv(src, (c / 2).max(1), 1, 1, true);
        let b = self.conv(a, c, 3, 1, true);
        let shape = self.nodes[src].shape;
        self.push(Op::Add { a: src, b }, shape)
    }

    fn convset(&mut self, mut src: usize, narrow: usize, wide: usize) -> usize {
        for _ in 0..self.cfg.convset_repeats {
            let a = self.conv(src, narrow, 1, 1, true);
            src = self.conv(a, wide, 3, 1, true);
        }
        src
    }

    fn upsample(&mut self, src: usize) -> usize {
        let (c, h, w) = self.nodes[src].shape;
        self.push(Op::Upsample { src }, (c, 2 * h, 2 * w))
    }

    fn concat(&mut self, a: usize, b: usize) -> usize {
        let (ca, h, w) = self.nodes[a].shape;
        let (cb, hb, wb) = self.nodes[b].shape;
        assert_eq!((h, w), (hb, wb), "concat spatial mismatch");
        self.push(Op::Concat { a, b }, (ca + cb, h, w))
    }
}

impl Network {
    /// Builds the graph and initializes weights from `seed`: uniform with a
    /// fan-in bound (`sqrt(6 / fan_in)` before leaky units, `sqrt(3 / fan_in)`
    /// for linear heads), biases zero.
    pub fn build(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder {
            cfg,
            nodes: Vec::new(),
            layers: Vec::new(),
            n_params: 0,
        };
        let s = cfg.input_size;
        let input = b.push(Op::Input, (cfg.in_channels, s, s));

        // Encoder.
        let mut x = b.conv(input, cfg.ch(STEM), 3, 1, true);
        let mut stage_out = [0usize; SCALES];
        for (k, &full) in STAGES.iter().enumerate() {
            x = b.conv(x, cfg.ch(full), 3, 2, true);
            for _ in 0..cfg.residual_repeats[k] {
                x = b.residual(x);
            }
            stage_out[k] = x;
        }

        // Decoder, coarsest level first.
        let head_channels = cfg.classes + 1;
        let mut heads = Vec::with_capacity(SCALES);
        let mut feat = b.convset(x, cfg.ch(STAGES[4] / 2), cfg.ch(STAGES[4]));
        heads.push(b.conv(feat, head_channels, 1, 1, false));
        for level in 0..4 {
            let lateral = b.conv(feat, cfg.ch(LATERAL[level]), 1, 1, true);
            let up = b.upsample(lateral);
            let cat = b.concat(up, stage_out[3 - level]);
            feat = b.convset(cat, cfg.ch(DECODER[level]), cfg.ch(2 * DECODER[level]));
            heads.push(b.conv(feat, head_channels, 1, 1, false));
        }

        let Builder {
            nodes,
            layers,
            n_params,
            ..
        } = b;
        let mut net = Network {
            config: cfg.clone(),
            nodes,
            layers,
            heads,
            params: vec![0.0; n_params],
            grads: vec![0.0; n_params],
            last_trace: None,
        };
        net.check_shapes()?;
        net.init(seed);
        Ok(net)
    }

    fn init(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for spec in &self.layers {
            let gain = if spec.leaky { 6.0 } else { 3.0 };
            let bound = (gain / spec.fan_in() as f64).sqrt();
            for p in &mut self.params[spec.w_off..spec.w_off + spec.weight_len()] {
                *p = rng.gen_range(-bound..bound);
            }
            self.params[spec.b_off..spec.b_off + spec.cout].fill(0.0);
        }
    }

    fn check_shapes(&self) -> Result<()> {
        let sizes = self.config.head_sizes();
        for (k, &h) in self.heads.iter().enumerate() {
            let shape = self.nodes[h].shape;
            let want = (self.config.classes + 1, sizes[k], sizes[k]);
            if shape != want {
                return Err(Error::InvalidConfig(format!(
                    "head {k} has shape {shape:?}, expected {want:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    /// Multiply-accumulate count of one forward pass.
    pub fn forward_macs(&self) -> usize {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Conv { layer, .. } => {
                    let s = &self.layers[layer];
                    Some(s.weight_len() * n.shape.1 * n.shape.2)
                }
                _ => None,
            })
            .sum()
    }

    /// Concatenation shapes from shallow to deep decoder level (coarsest first).
    pub fn concat_shapes(&self) -> Vec<(usize, usize, usize)> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Concat { .. }))
            .map(|n| n.shape)
            .collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let want = self.nodes[0].shape;
        if x.shape() != want {
            return Err(Error::InvalidArgument(format!(
                "input shape {:?} does not match network input {want:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Head logits, coarsest (input / 32) first.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.forward_traced(x)?.into_heads())
    }

    pub fn forward_traced(&self, x: &Tensor) -> Result<Trace> {
        self.check_input(x)?;
        let mut acts: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let out = match node.op {
                Op::Input => x.clone(),
                Op::Conv { src, layer } => conv_forward(&self.layers[layer], &self.params, &acts[src]),
                Op::Add { a, b } => add_forward(&acts[a], &acts[b]),
                Op::Upsample { src } => upsample_forward(&acts[src]),
                Op::Concat { a, b } => concat_forward(&acts[a], &acts[b]),
            };
            debug_assert_eq!(out.shape(), node.shape);
            acts.push(out);
        }
        Ok(Trace {
            acts,
            heads: self.heads.clone(),
        })
    }

    /// Forward pass that keeps its trace for a later [`Network::backward_last`].
    pub fn forward_train(&mut self, x: &Tensor) -> Result<Vec<Tensor>> {
        let trace = self.forward_traced(x)?;
        let heads = trace.heads().into_iter().cloned().collect();
        self.last_trace = Some(trace);
        Ok(heads)
    }

    /// Backpropagates through the trace stored by [`Network::forward_train`].
    pub fn backward_last(&mut self, head_grads: &[Tensor]) -> Result<()> {
        let trace = self
            .last_trace
            .take()
            .ok_or_else(|| Error::InvalidState("backward called without a forward pass".into()))?;
        self.backward(&trace, head_grads)
    }

    /// Accumulates parameter gradients for upstream gradients at each head
    /// (coarsest first).
    pub fn backward(&mut self, trace: &Trace, head_grads: &[Tensor]) -> Result<()> {
        if head_grads.len() != self.heads.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} head gradients, got {}",
                self.heads.len(),
                head_grads.len()
            )));
        }
        if trace.acts.len() != self.nodes.len() {
            return Err(Error::InvalidState("trace does not belong to this network".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (&h, g) in self.heads.iter().zip(head_grads) {
            if g.shape() != self.nodes[h].shape {
                return Err(Error::InvalidArgument(format!(
                    "head gradient shape {:?} != {:?}",
                    g.shape(),
                    self.nodes[h].shape
                )));
            }
            accumulate(&mut grads[h], g.clone());
        }

        for idx in (1..self.nodes.len()).rev() {
            let Some(dout) = grads[idx].take() else {
                continue;
            };
            match self.nodes[idx].op {
                Op::Input => {}
                Op::Conv { src, layer } => {
                    let need_dx = src != 0;
                    let dx = conv_backward(
                        &self.layers[layer],
                        &self.params,
                        &trace.acts[src],
                        &trace.acts[idx],
                        &dout,
                        &mut self.grads,
                        need_dx,
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut grads[src], dx);
                    }
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[a], dout.clone());
                    accumulate(&mut grads[b], dout);
                }
                Op::Upsample { src } => accumulate(&mut grads[src], upsample_backward(&dout)),
                Op::Concat { a, b } => {
                    let (ga, gb) = concat_backward(&dout, self.nodes[a].shape.0);
                    accumulate(&mut grads[a], ga);
                    accumulate(&mut grads[b], gb);
                }
            }
        }
        Ok(())
    }

    /// Sign of every leaky-unit output in `trace`. Two traces with equal
    /// signatures lie on the same linear piece of every activation, which
    /// finite-difference checks use to skip steps that cross a kink.
    pub fn activation_signs(&self, trace: &Trace) -> Vec<bool> {
        let mut out = Vec::new();
        for (node, act) in self.nodes.iter().zip(&trace.acts) {
            if let Op::Conv { layer, .. } = node.op {
                if self.layers[layer].leaky {
                    out.extend(act.data.iter().map(|&v| v > 0.0));
                }
            }
        }
        out
    }

    pub fn zero_grads(&mut self) {
        self.grads.fill(0.0);
    }

    pub fn scale_grads(&mut self, s: f64) {
        for g in &mut self.grads {
            *g *= s;
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}
