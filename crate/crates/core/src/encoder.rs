//! Pre-norm Transformer encoder with per-layer attention-map reuse.
//!
//! Layer layout: `h = x + Attn(LN(x))`, `out = h + W2 gelu(W1 LN(h))`. A layer
//! whose directive is `Compute` runs full multi-head self-attention and
//! publishes its per-head maps; a `Reuse` layer has value and output weights
//! only and mixes its values with the source layer's maps. The input frames
//! (`n × d_in`) are projected to the model width and a learned per-position
//! embedding is added before the first layer.
//!
//! Weight containers are generic over the leaf type so the same structure
//! holds concrete tensors, tape handles during a forward pass, or gradients.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::reuse::{validate, Directive, ReusePattern};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub model_width: usize,
    pub num_heads: usize,
    /// Per-head key/query width; `model_width / num_heads` when absent.
    #[serde(default)]
    pub key_width: Option<usize>,
    /// Per-head value width; `model_width / num_heads` when absent.
    #[serde(default)]
    pub value_width: Option<usize>,
    pub ffn_width: usize,
    /// Width of the teacher features the projection heads map onto.
    pub teacher_width: usize,
    /// Width of the input frame features.
    pub input_width: usize,
    /// Longest sequence the learned position table covers. Zero means the
    /// config is used for accounting only.
    #[serde(default)]
    pub max_positions: usize,
    #[serde(default = "default_true")]
    pub include_biases: bool,
    /// Fixed parameter count of the (not modelled) waveform frontend.
    #[serde(default)]
    pub frontend_params: u64,
    /// Fixed per-frame MAC count of the (not modelled) waveform frontend.
    #[serde(default)]
    pub frontend_macs_per_frame: u64,
}

fn default_true() -> bool {
    true
}

impl EncoderConfig {
    /// Twelve-layer, twelve-head student sized for a 768-wide teacher over
    /// 512-channel frontend features. Accounting only (no position table).
    pub fn speech_student(width: usize, ffn_width: usize) -> Self {
        Self {
            num_layers: 12,
            model_width: width,
            num_heads: 12,
            key_width: None,
            value_width: None,
            ffn_width,
            teacher_width: 768,
            input_width: 512,
            max_positions: 0,
            include_biases: true,
            frontend_params: 0,
            frontend_macs_per_frame: 0,
        }
    }

    /// Small runnable encoder.
    pub fn toy(num_layers: usize, width: usize, heads: usize, ffn_width: usize, input_width: usize) -> Self {
        Self {
            num_layers,
            model_width: width,
            num_heads: heads,
            key_width: None,
            value_width: None,
            ffn_width,
            teacher_width: width,
            input_width,
            max_positions: 64,
            include_biases: true,
            frontend_params: 0,
            frontend_macs_per_frame: 0,
        }
    }

    pub fn key_width(&self) -> usize {
        self.key_width.unwrap_or(self.model_width / self.num_heads.max(1))
    }

    pub fn value_width(&self) -> usize {
        self.value_width.unwrap_or(self.model_width / self.num_heads.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 {
            return fail("num_layers must be at least 1".into());
        }
        if self.model_width == 0 || self.num_heads == 0 || self.ffn_width == 0 {
            return fail("model_width, num_heads and ffn_width must be positive".into());
        }
        if self.teacher_width == 0 || self.input_width == 0 {
            return fail("teacher_width and input_width must be positive".into());
        }
        if (self.key_width.is_none() || self.value_width.is_none()) && !self.model_width.is_multiple_of(self.num_heads)
        {
            return fail(format!(
                "num_heads {} does not divide model_width {}",
                self.num_heads, self.model_width
            ));
        }
        if self.key_width() == 0 || self.value_width() == 0 {
            return fail("key and value widths must be at least 1".into());
        }
        Ok(())
    }

    pub fn validate_runnable(&self) -> Result<()> {
        self.validate()?;
        if self.max_positions == 0 {
            return Err(Error::Config(
                "max_positions must be positive for a runnable encoder".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear<T = Tensor> {
    pub weight: T,
    pub bias: Option<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Norm<T = Tensor> {
    pub gamma: T,
    pub beta: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights<T = Tensor> {
    /// Absent in reusing layers.
    pub query: Option<Linear<T>>,
    /// Absent in reusing layers.
    pub key: Option<Linear<T>>,
    pub value: Linear<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights<T = Tensor> {
    pub heads: Vec<HeadWeights<T>>,
    /// `H·d_v × d`.
    pub output: Linear<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights<T = Tensor> {
    pub attn_norm: Norm<T>,
    pub attention: AttentionWeights<T>,
    pub ffn_norm: Norm<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderWeights<T = Tensor> {
    pub input: Linear<T>,
    pub positions: T,
    pub mask_embedding: T,
    pub layers: Vec<LayerWeights<T>>,
}

/// Visits every leaf with its dotted name, in a fixed order.
pub trait Leaves<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T));
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T> Linear<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Linear<U> {
        Linear {
            weight: f(&self.weight),
            bias: self.bias.as_ref().map(&mut *f),
        }
    }
}

impl<T> Leaves<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

impl<T> Norm<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Norm<U> {
        Norm {
            gamma: f(&self.gamma),
            beta: f(&self.beta),
        }
    }
}

impl<T> Leaves<T> for Norm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

impl<T> AttentionWeights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AttentionWeights<U> {
        AttentionWeights {
            heads: self
                .heads
                .iter()
                .map(|h| HeadWeights {
                    query: h.query.as_ref().map(|l| l.map(f)),
                    key: h.key.as_ref().map(|l| l.map(f)),
                    value: h.value.map(f),
                })
                .collect(),
            output: self.output.map(f),
        }
    }

    pub fn has_key_query(&self) -> bool {
        self.heads.iter().all(|h| h.query.is_some() && h.key.is_some())
    }

    pub fn has_any_key_query(&self) -> bool {
        self.heads.iter().any(|h| h.query.is_some() || h.key.is_some())
    }
}

impl<T> Leaves<T> for AttentionWeights<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (i, h) in self.heads.iter().enumerate() {
            let p = join(prefix, &format!("heads.{i}"));
            if let Some(q) = &h.query {
                q.visit(&join(&p, "query"), f);
            }
            if let Some(k) = &h.key {
                k.visit(&join(&p, "key"), f);
            }
            h.value.visit(&join(&p, "value"), f);
        }
        self.output.visit(&join(prefix, "output"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        for (i, h) in self.heads.iter_mut().enumerate() {
            let p = join(prefix, &format!("heads.{i}"));
            if let Some(q) = &mut h.query {
                q.visit_mut(&join(&p, "query"), f);
            }
            if let Some(k) = &mut h.key {
                k.visit_mut(&join(&p, "key"), f);
            }
            h.value.visit_mut(&join(&p, "value"), f);
        }
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

impl<T> LayerWeights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LayerWeights<U> {
        LayerWeights {
            attn_norm: self.attn_norm.map(f),
            attention: self.attention.map(f),
            ffn_norm: self.ffn_norm.map(f),
            ffn_in: self.ffn_in.map(f),
            ffn_out: self.ffn_out.map(f),
        }
    }
}

impl<T> Leaves<T> for LayerWeights<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.attn_norm.visit(&join(prefix, "attn_norm"), f);
        self.attention.visit(&join(prefix, "attention"), f);
        self.ffn_norm.visit(&join(prefix, "ffn_norm"), f);
        self.ffn_in.visit(&join(prefix, "ffn_in"), f);
        self.ffn_out.visit(&join(prefix, "ffn_out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        self.attn_norm.visit_mut(&join(prefix, "attn_norm"), f);
        self.attention.visit_mut(&join(prefix, "attention"), f);
        self.ffn_norm.visit_mut(&join(prefix, "ffn_norm"), f);
        self.ffn_in.visit_mut(&join(prefix, "ffn_in"), f);
        self.ffn_out.visit_mut(&join(prefix, "ffn_out"), f);
    }
}

impl<T> EncoderWeights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> EncoderWeights<U> {
        EncoderWeights {
            input: self.input.map(f),
            positions: f(&self.positions),
            mask_embedding: f(&self.mask_embedding),
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
        }
    }
}

impl<T> Leaves<T> for EncoderWeights<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.input.visit(&join(prefix, "input"), f);
        f(join(prefix, "positions"), &self.positions);
        f(join(prefix, "mask_embedding"), &self.mask_embedding);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        self.input.visit_mut(&join(prefix, "input"), f);
        f(join(prefix, "positions"), &mut self.positions);
        f(join(prefix, "mask_embedding"), &mut self.mask_embedding);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
    }
}

/// Number of scalars across all leaves.
pub fn count_leaves(tree: &impl Leaves<Tensor>) -> usize {
    let mut total = 0;
    tree.visit("", &mut |_, t| total += t.len());
    total
}

/// Shape-only constructor. Every leaf is filled by `init(shape, kind)`.
fn build_weights(
    config: &EncoderConfig,
    pattern: &ReusePattern,
    init: &mut dyn FnMut(&[usize], LeafKind) -> Tensor,
) -> EncoderWeights {
    let d = config.model_width;
    let dk = config.key_width();
    let dv = config.value_width();
    let h = config.num_heads;
    let biases = config.include_biases;
    let linear = |rows: usize, cols: usize, init: &mut dyn FnMut(&[usize], LeafKind) -> Tensor| Linear {
        weight: init(&[rows, cols], LeafKind::Weight { fan_in: rows }),
        bias: biases.then(|| init(&[cols], LeafKind::Bias)),
    };
    let input = linear(config.input_width, d, init);
    let positions = init(&[config.max_positions.max(1), d], LeafKind::Position);
    let mask_embedding = init(&[config.input_width], LeafKind::MaskEmbedding);
    let layers = (0..config.num_layers)
        .map(|l| {
            let compute = pattern.is_compute(l);
            let heads = (0..h)
                .map(|_| HeadWeights {
                    query: compute.then(|| linear(d, dk, init)),
                    key: compute.then(|| linear(d, dk, init)),
                    value: linear(d, dv, init),
                })
                .collect();
            LayerWeights {
                attn_norm: Norm {
                    gamma: init(&[d], LeafKind::Gain),
                    beta: init(&[d], LeafKind::Bias),
                },
                attention: AttentionWeights {
                    heads,
                    output: linear(h * dv, d, init),
                },
                ffn_norm: Norm {
                    gamma: init(&[d], LeafKind::Gain),
                    beta: init(&[d], LeafKind::Bias),
                },
                ffn_in: linear(d, config.ffn_width, init),
                ffn_out: linear(config.ffn_width, d, init),
            }
        })
        .collect();
    EncoderWeights {
        input,
        positions,
        mask_embedding,
        layers,
    }
}

#[derive(Debug, Clone, Copy)]
enum LeafKind {
    Weight { fan_in: usize },
    Bias,
    Gain,
    Position,
    MaskEmbedding,
}

/// An encoder: architecture, reuse pattern and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub pattern: ReusePattern,
    pub weights: EncoderWeights,
}

impl Encoder {
    /// Weights `N(0, 1/fan_in)`, zero biases, unit gains, positions
    /// `N(0, 0.1²)`, mask embedding `N(0, 1)`.
    pub fn init(config: &EncoderConfig, pattern: &ReusePattern, rng: &mut Rng) -> Result<Self> {
        config.validate_runnable()?;
        validate(pattern, config.num_layers).map_err(Error::InvalidPattern)?;
        let weights = build_weights(config, pattern, &mut |shape, kind| match kind {
            LeafKind::Weight { fan_in } => Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), rng),
            LeafKind::Bias => Tensor::zeros(shape),
            LeafKind::Gain => Tensor::filled(shape, 1.0),
            LeafKind::Position => Tensor::randn(shape, 0.1, rng),
            LeafKind::MaskEmbedding => Tensor::randn(shape, 1.0, rng),
        });
        Ok(Self {
            config: config.clone(),
            pattern: pattern.clone(),
            weights,
        })
    }

    /// All-zero weights with the right shapes; used when loading checkpoints.
    pub fn zeros(config: &EncoderConfig, pattern: &ReusePattern) -> Result<Self> {
        config.validate_runnable()?;
        validate(pattern, config.num_layers).map_err(Error::InvalidPattern)?;
        let weights = build_weights(config, pattern, &mut |shape, _| Tensor::zeros(shape));
        Ok(Self {
            config: config.clone(),
            pattern: pattern.clone(),
            weights,
        })
    }

    pub fn num_params(&self) -> usize {
        count_leaves(&self.weights)
    }

    /// Places every weight on the tape, tracked or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> EncoderWeights<Var> {
        self.weights
            .map(&mut |t| if trainable { tape.param(t) } else { tape.constant(t) })
    }

    /// Untraced forward pass returning every layer's state.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<LayerState>> {
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, false);
        let xv = tape.constant(x);
        let traces = encoder_forward(&mut tape, xv, &self.config, &self.pattern, &w)?;
        tape.check_finite()?;
        Ok(layer_states(&tape, &traces))
    }
}

/// Per-layer output of a traced forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Post-FFN, post-residual hidden state (`n × d`).
    pub hidden: Var,
    /// One `n × n` map per head. Reusing layers hold the source layer's handles.
    pub maps: Vec<Var>,
    /// 1-based source layer for reusing layers.
    pub reused_from: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct LayerState {
    pub hidden: Tensor,
    /// Shared with the source layer when reused (`Arc::ptr_eq` holds).
    pub attention_maps: Vec<Arc<Tensor>>,
    pub reused_from: Option<usize>,
}

/// Materializes traces; maps of a reusing layer share the source's buffers.
pub fn layer_states(tape: &Tape, traces: &[LayerTrace]) -> Vec<LayerState> {
    let mut owned: Vec<Vec<Arc<Tensor>>> = Vec::with_capacity(traces.len());
    for t in traces {
        let maps = match t.reused_from {
            Some(src) => owned[src - 1].clone(),
            None => t.maps.iter().map(|&m| Arc::new(tape.value(m).clone())).collect(),
        };
        owned.push(maps);
    }
    traces
        .iter()
        .zip(owned)
        .map(|(t, maps)| LayerState {
            hidden: tape.value(t.hidden).clone(),
            attention_maps: maps,
            reused_from: t.reused_from,
        })
        .collect()
}

pub(crate) fn linear(tape: &mut Tape, x: Var, l: &Linear<Var>) -> Result<Var> {
    let y = tape.matmul(x, l.weight)?;
    match l.bias {
        Some(b) => tape.add_bias(y, b),
        None => Ok(y),
    }
}

fn values_and_mix(tape: &mut Tape, x: Var, w: &AttentionWeights<Var>, maps: &[Var]) -> Result<Var> {
    let mut heads = Vec::with_capacity(w.heads.len());
    for (h, &map) in w.heads.iter().zip(maps) {
        let v = linear(tape, x, &h.value)?;
        heads.push(tape.matmul(map, v)?);
    }
    let cat = tape.concat_cols(&heads)?;
    linear(tape, cat, &w.output)
}

/// Multi-head self-attention on `x` (`n × d`). Returns the projected output
/// and the per-head maps `softmax(Q Kᵀ / √d_k)`.
pub fn attention(tape: &mut Tape, x: Var, w: &AttentionWeights<Var>) -> Result<(Var, Vec<Var>)> {
    let mut maps = Vec::with_capacity(w.heads.len());
    for head in &w.heads {
        let (Some(query), Some(key)) = (&head.query, &head.key) else {
            return Err(Error::Config("attention layer has no key/query weights".into()));
        };
        let q = linear(tape, x, query)?;
        let k = linear(tape, x, key)?;
        let dk = tape.value(q).cols() as f64;
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let scaled = tape.scale(logits, 1.0 / dk.sqrt());
        maps.push(tape.softmax_rows(scaled)?);
    }
    let out = values_and_mix(tape, x, w, &maps)?;
    Ok((out, maps))
}

/// Attention with externally supplied maps. Key/query weights, if present,
/// are ignored.
pub fn reuse_attention(tape: &mut Tape, x: Var, w: &AttentionWeights<Var>, maps: &[Var]) -> Result<Var> {
    let n = tape.value(x).rows();
    if maps.len() != w.heads.len() {
        return Err(Error::shape("reuse_attention", &[w.heads.len()], &[maps.len()]));
    }
    for &m in maps {
        let s = tape.value(m).shape();
        if s != [n, n] {
            return Err(Error::shape("reuse_attention", &[n, n], s));
        }
    }
    values_and_mix(tape, x, w, maps)
}

/// Untraced [`attention`].
pub fn mhsa_forward(x: &Tensor, w: &AttentionWeights) -> Result<(Tensor, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let wv = w.map(&mut |t| tape.constant(t));
    let xv = tape.constant(x);
    let (out, maps) = attention(&mut tape, xv, &wv)?;
    Ok((
        tape.value(out).clone(),
        maps.iter().map(|&m| tape.value(m).clone()).collect(),
    ))
}

/// Untraced [`reuse_attention`].
pub fn reuse_mhsa_forward(x: &Tensor, w: &AttentionWeights, maps: &[Tensor]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let wv = w.map(&mut |t| tape.constant(t));
    let xv = tape.constant(x);
    let mv: Vec<Var> = maps.iter().map(|m| tape.constant(m)).collect();
    let out = reuse_attention(&mut tape, xv, &wv, &mv)?;
    Ok(tape.value(out).clone())
}

/// Traced forward pass over input frames `x` (`n × d_in`).
pub fn encoder_forward(
    tape: &mut Tape,
    x: Var,
    config: &EncoderConfig,
    pattern: &ReusePattern,
    w: &EncoderWeights<Var>,
) -> Result<Vec<LayerTrace>> {
    validate(pattern, config.num_layers).map_err(Error::InvalidPattern)?;
    if w.layers.len() != config.num_layers {
        return Err(Error::Config(format!(
            "weights have {} layers, config has {}",
            w.layers.len(),
            config.num_layers
        )));
    }
    let (n, din) = tape.value(x).matrix_dims("encoder_forward")?;
    if din != config.input_width {
        return Err(Error::shape("encoder_forward", &[n, config.input_width], &[n, din]));
    }
    if n > config.max_positions {
        return Err(Error::Config(format!(
            "sequence length {n} exceeds max_positions {}",
            config.max_positions
        )));
    }

    let projected = linear(tape, x, &w.input)?;
    let pos = tape.slice_rows(w.positions, 0, n)?;
    let mut h = tape.add(projected, pos)?;

    let mut traces: Vec<LayerTrace> = Vec::with_capacity(config.num_layers);
    for (l, lw) in w.layers.iter().enumerate() {
        let normed = tape.layernorm(h, lw.attn_norm.gamma, lw.attn_norm.beta)?;
        let (attn, maps, reused_from) = match pattern.directive(l) {
            Directive::Compute => {
                let (out, maps) = attention(tape, normed, &lw.attention)?;
                (out, maps, None)
            }
            Directive::Reuse { source } => {
                if lw.attention.has_any_key_query() {
                    return Err(Error::Config(format!(
                        "reusing layer {} carries key/query weights",
                        l + 1
                    )));
                }
                let maps = traces[source - 1].maps.clone();
                let out = reuse_attention(tape, normed, &lw.attention, &maps)?;
                (out, maps, Some(source))
            }
        };
        let h1 = tape.add(h, attn)?;
        let normed = tape.layernorm(h1, lw.ffn_norm.gamma, lw.ffn_norm.beta)?;
        let inner = linear(tape, normed, &lw.ffn_in)?;
        let act = tape.gelu(inner);
        let ffn = linear(tape, act, &lw.ffn_out)?;
        h = tape.add(h1, ffn)?;
        traces.push(LayerTrace {
            hidden: h,
            maps,
            reused_from,
        });
    }
    Ok(traces)
}
