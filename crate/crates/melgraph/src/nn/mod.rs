//! A small dense-tensor network core with exact analytic gradients and
//! named intermediate taps.
//!
//! The layer algebra is deliberately minimal: conv2d, relu, maxpool2d,
//! global average pooling, flatten, dense, and save/add pairs for skip
//! connections. Two dense layers must be named `FC1` and `FC2`; their
//! activations are captured on every forward pass so a loss can attach to
//! intermediate representations, and gradients may be injected at the same
//! points. Everything is generic over the scalar width: f32 for training,
//! f64 for gradient checks, one code path.

pub mod checkpoint;
pub mod gradcheck;
pub mod tensor;

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use tensor::{Scalar, Tensor};

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Error, Debug)]
pub enum NnError {
    #[error("bad model config: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("fusion error: {0}")]
    Fusion(String),
    #[error("io error for {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad checkpoint {path}: {msg}")]
    Format { path: String, msg: String },
    #[error("checkpoint was built for a different model config")]
    DigestMismatch,
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
}

/// One layer of the model, in execution order.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
    },
    GlobalAvgPool,
    Flatten,
    Dense {
        out_dim: usize,
        name: Option<String>,
    },
    Save {
        name: String,
    },
    Add {
        name: String,
    },
}

/// Activation shape between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dims {
    Chw(usize, usize, usize),
    Flat(usize),
}

impl Dims {
    pub fn volume(&self) -> usize {
        match *self {
            Dims::Chw(c, h, w) => c * h * w,
            Dims::Flat(n) => n,
        }
    }
}

/// Ordered layer list plus input geometry and class count.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_frames: usize,
    pub input_mels: usize,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModelConfig {
    /// Check the whole shape chain and the FC1/FC2 contract.
    pub fn validate(&self) -> Result<()> {
        self.layer_dims()?;
        Ok(())
    }

    /// Activation dims before layer 0, between every pair, and after the
    /// last layer (length `layers.len() + 1`). Fails on any chain break.
    pub fn layer_dims(&self) -> Result<Vec<Dims>> {
        if self.input_frames == 0 || self.input_mels == 0 {
            return Err(NnError::Config("input shape must be nonzero".into()));
        }
        if self.classes == 0 {
            return Err(NnError::Config("class count must be >= 1".into()));
        }
        if self.layers.is_empty() {
            return Err(NnError::Config("layer list is empty".into()));
        }
        let mut dims = vec![Dims::Chw(1, self.input_frames, self.input_mels)];
        let mut saved: HashMap<&str, Dims> = HashMap::new();
        let mut fc1 = 0usize;
        let mut fc2 = 0usize;
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = *dims.last().unwrap();
            let bad = |msg: String| NnError::Config(format!("layer {i}: {msg}"));
            let next = match layer {
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let Dims::Chw(_, h, w) = cur else {
                        return Err(bad("conv2d needs a c x h x w input".into()));
                    };
                    if *out_channels == 0 || *kernel == 0 || *stride == 0 {
                        return Err(bad("conv2d dims must be >= 1".into()));
                    }
                    if h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                        return Err(bad(format!(
                            "kernel {kernel} exceeds padded input {h}x{w}"
                        )));
                    }
                    let oh = (h + 2 * padding - kernel) / stride + 1;
                    let ow = (w + 2 * padding - kernel) / stride + 1;
                    Dims::Chw(*out_channels, oh, ow)
                }
                LayerSpec::Relu => cur,
                LayerSpec::MaxPool2d { kernel } => {
                    let Dims::Chw(c, h, w) = cur else {
                        return Err(bad("maxpool2d needs a c x h x w input".into()));
                    };
                    if *kernel == 0 || h / kernel == 0 || w / kernel == 0 {
                        return Err(bad(format!("pool {kernel} empties the {h}x{w} input")));
                    }
                    Dims::Chw(c, h / kernel, w / kernel)
                }
                LayerSpec::GlobalAvgPool => {
                    let Dims::Chw(c, _, _) = cur else {
                        return Err(bad("global_avg_pool needs a c x h x w input".into()));
                    };
                    Dims::Flat(c)
                }
                LayerSpec::Flatten => Dims::Flat(cur.volume()),
                LayerSpec::Dense { out_dim, name } => {
                    let Dims::Flat(_) = cur else {
                        return Err(bad("dense needs a flat input; add flatten first".into()));
                    };
                    if *out_dim == 0 {
                        return Err(bad("dense output dim must be >= 1".into()));
                    }
                    match name.as_deref() {
                        Some("FC1") => fc1 += 1,
                        Some("FC2") => fc2 += 1,
                        _ => {}
                    }
                    Dims::Flat(*out_dim)
                }
                LayerSpec::Save { name } => {
                    saved.insert(name, cur);
                    cur
                }
                LayerSpec::Add { name } => {
                    let Some(&s) = saved.get(name.as_str()) else {
                        return Err(bad(format!("add references unsaved name {name:?}")));
                    };
                    if s != cur {
                        return Err(bad(format!(
                            "add {name:?} merges mismatched shapes {s:?} and {cur:?}"
                        )));
                    }
                    cur
                }
            };
            dims.push(next);
        }
        if fc1 != 1 || fc2 != 1 {
            return Err(NnError::Config(format!(
                "need exactly one dense layer named \"FC1\" and one named \"FC2\", found {fc1} and {fc2}"
            )));
        }
        match self.layers.last() {
            Some(LayerSpec::Dense { out_dim, .. }) if *out_dim == self.classes => {}
            _ => {
                return Err(NnError::Config(format!(
                    "final layer must be a dense layer with {} outputs",
                    self.classes
                )))
            }
        }
        Ok(dims)
    }

    /// Total trainable parameter count (weights plus biases).
    pub fn param_count(&self) -> Result<usize> {
        let dims = self.layer_dims()?;
        let mut count = 0usize;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    ..
                } => {
                    let Dims::Chw(in_c, _, _) = dims[i] else {
                        unreachable!()
                    };
                    count += out_channels * (in_c * kernel * kernel) + out_channels;
                }
                LayerSpec::Dense { out_dim, .. } => {
                    let Dims::Flat(in_dim) = dims[i] else {
                        unreachable!()
                    };
                    count += out_dim * in_dim + out_dim;
                }
                _ => {}
            }
        }
        Ok(count)
    }

    fn layer_index_of(&self, name: &str) -> usize {
        self.layers
            .iter()
            .position(|l| matches!(l, LayerSpec::Dense { name: Some(n), .. } if n == name))
            .expect("validated config has FC1 and FC2")
    }

    pub fn fc1_dim(&self) -> usize {
        match &self.layers[self.layer_index_of("FC1")] {
            LayerSpec::Dense { out_dim, .. } => *out_dim,
            _ => unreachable!(),
        }
    }

    pub fn fc2_dim(&self) -> usize {
        match &self.layers[self.layer_index_of("FC2")] {
            LayerSpec::Dense { out_dim, .. } => *out_dim,
            _ => unreachable!(),
        }
    }

    /// Canonical one-line-per-layer form, the checkpoint digest input.
    pub fn canonical_string(&self) -> String {
        let mut out = format!(
            "input {} {}\nclasses {}\n",
            self.input_frames, self.input_mels, self.classes
        );
        for layer in &self.layers {
            let line = match layer {
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => format!("conv2d {out_channels} {kernel} {stride} {padding}"),
                LayerSpec::Relu => "relu".into(),
                LayerSpec::MaxPool2d { kernel } => format!("maxpool2d {kernel}"),
                LayerSpec::GlobalAvgPool => "global_avg_pool".into(),
                LayerSpec::Flatten => "flatten".into(),
                LayerSpec::Dense { out_dim, name } => {
                    format!("dense {out_dim} {}", name.as_deref().unwrap_or("-"))
                }
                LayerSpec::Save { name } => format!("save {name}"),
                LayerSpec::Add { name } => format!("add {name}"),
            };
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

/// Parse a model config from its structured text form: top-level
/// `input_frames`, `input_mels`, `classes`, then one `[[layer]]` table per
/// layer with a `type` key.
pub fn parse_model_config(text: &str) -> Result<ModelConfig> {
    let table: toml::Table = text
        .parse()
        .map_err(|e| NnError::Config(format!("not valid config syntax: {e}")))?;
    for key in table.keys() {
        if !matches!(key.as_str(), "input_frames" | "input_mels" | "classes" | "layer") {
            return Err(NnError::Config(format!("unknown top-level key {key:?}")));
        }
    }
    let int_field = |key: &str| -> Result<usize> {
        table
            .get(key)
            .and_then(|v| v.as_integer())
            .filter(|&v| v >= 0)
            .map(|v| v as usize)
            .ok_or_else(|| NnError::Config(format!("missing or bad integer {key:?}")))
    };
    let input_frames = int_field("input_frames")?;
    let input_mels = int_field("input_mels")?;
    let classes = int_field("classes")?;
    let layer_tables = table
        .get("layer")
        .and_then(|v| v.as_array())
        .ok_or_else(|| NnError::Config("missing [[layer]] list".into()))?;

    let mut layers = Vec::with_capacity(layer_tables.len());
    for (i, value) in layer_tables.iter().enumerate() {
        let t = value
            .as_table()
            .ok_or_else(|| NnError::Config(format!("layer {i} is not a table")))?;
        let bad = |msg: String| NnError::Config(format!("layer {i}: {msg}"));
        let get_int = |key: &str| -> Result<usize> {
            t.get(key)
                .and_then(|v| v.as_integer())
                .filter(|&v| v >= 0)
                .map(|v| v as usize)
                .ok_or_else(|| bad(format!("missing or bad integer {key:?}")))
        };
        let check_keys = |allowed: &[&str]| -> Result<()> {
            for key in t.keys() {
                if key != "type" && !allowed.contains(&key.as_str()) {
                    return Err(bad(format!("unknown key {key:?}")));
                }
            }
            Ok(())
        };
        let kind = t
            .get("type")
            .and_then(|v| v.as_str())
            .ok_or_else(|| bad("missing \"type\"".into()))?;
        let layer = match kind {
            "conv2d" => {
                check_keys(&["out_channels", "kernel", "stride", "padding"])?;
                let kernel = get_int("kernel")?;
                LayerSpec::Conv2d {
                    out_channels: get_int("out_channels")?,
                    kernel,
                    stride: if t.contains_key("stride") {
                        get_int("stride")?
                    } else {
                        1
                    },
                    padding: if t.contains_key("padding") {
                        get_int("padding")?
                    } else {
                        kernel / 2
                    },
                }
            }
            "relu" => {
                check_keys(&[])?;
                LayerSpec::Relu
            }
            "maxpool2d" => {
                check_keys(&["kernel"])?;
                LayerSpec::MaxPool2d {
                    kernel: get_int("kernel")?,
                }
            }
            "global_avg_pool" => {
                check_keys(&[])?;
                LayerSpec::GlobalAvgPool
            }
            "flatten" => {
                check_keys(&[])?;
                LayerSpec::Flatten
            }
            "dense" => {
                check_keys(&["out_dim", "name"])?;
                let name = match t.get("name") {
                    None => None,
                    Some(v) => Some(
                        v.as_str()
                            .ok_or_else(|| bad("\"name\" must be a string".into()))?
                            .to_string(),
                    ),
                };
                LayerSpec::Dense {
                    out_dim: get_int("out_dim")?,
                    name,
                }
            }
            "save" | "add" => {
                check_keys(&["name"])?;
                let name = t
                    .get("name")
                    .and_then(|v| v.as_str())
                    .ok_or_else(|| bad("missing \"name\"".into()))?
                    .to_string();
                if kind == "save" {
                    LayerSpec::Save { name }
                } else {
                    LayerSpec::Add { name }
                }
            }
            other => return Err(bad(format!("unknown layer type {other:?}"))),
        };
        layers.push(layer);
    }
    let cfg = ModelConfig {
        input_frames,
        input_mels,
        classes,
        layers,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_model_config(path: impl AsRef<Path>) -> Result<ModelConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| NnError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_model_config(&text)
}

/// Weight and bias of one parameterized layer (also reused as a gradient
/// or moment block of the same shapes).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> LayerParams<S> {
    fn zeros_like(other: &LayerParams<S>) -> LayerParams<S> {
        LayerParams {
            weight: Tensor::zeros(other.weight.shape().to_vec()),
            bias: Tensor::zeros(other.bias.shape().to_vec()),
        }
    }
}

/// Elementwise fusion of an upstream embedding with the FC1 activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FuseMode {
    Add,
    Max,
    Avg,
}

impl FromStr for FuseMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<FuseMode, String> {
        match s {
            "add" => Ok(FuseMode::Add),
            "max" => Ok(FuseMode::Max),
            "avg" => Ok(FuseMode::Avg),
            other => Err(format!("unknown fusion mode {other:?}")),
        }
    }
}

impl fmt::Display for FuseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FuseMode::Add => "add",
            FuseMode::Max => "max",
            FuseMode::Avg => "avg",
        })
    }
}

/// All trainable parameters plus Adam moments and the step counter.
///
/// `params[i]` is `Some` iff layer `i` carries parameters. The optional
/// adapter is a dense map from an upstream embedding dimension onto FC1's
/// dimension, used by the transfer-fusion baselines when dims differ.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<S> {
    pub(crate) params: Vec<Option<LayerParams<S>>>,
    pub(crate) adapter: Option<LayerParams<S>>,
    pub(crate) adam_m: Vec<Option<LayerParams<S>>>,
    pub(crate) adam_v: Vec<Option<LayerParams<S>>>,
    pub(crate) adapter_m: Option<LayerParams<S>>,
    pub(crate) adapter_v: Option<LayerParams<S>>,
    pub(crate) step: u64,
}

impl<S: Scalar> ModelState<S> {
    /// Glorot-uniform weights, zero biases, seeded. Draws are made in f64
    /// and narrowed, so f32 and f64 states share the same numbers.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<ModelState<S>> {
        ModelState::init_with_adapter(cfg, seed, None)
    }

    /// As [`ModelState::init`], plus a fusion adapter when the upstream
    /// embedding dimension differs from FC1's. The adapter draws come after
    /// every layer draw, so base and adapter-free inits match exactly.
    pub fn init_with_adapter(
        cfg: &ModelConfig,
        seed: u64,
        upstream_dim: Option<usize>,
    ) -> Result<ModelState<S>> {
        let dims = cfg.layer_dims()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: Vec<Option<LayerParams<S>>> = Vec::with_capacity(cfg.layers.len());
        for (i, layer) in cfg.layers.iter().enumerate() {
            let block = match layer {
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    ..
                } => {
                    let Dims::Chw(in_c, _, _) = dims[i] else {
                        unreachable!()
                    };
                    let fan_in = in_c * kernel * kernel;
                    let fan_out = out_channels * kernel * kernel;
                    Some(LayerParams {
                        weight: glorot(
                            &mut rng,
                            vec![*out_channels, in_c, *kernel, *kernel],
                            fan_in,
                            fan_out,
                        ),
                        bias: Tensor::zeros(vec![*out_channels]),
                    })
                }
                LayerSpec::Dense { out_dim, .. } => {
                    let Dims::Flat(in_dim) = dims[i] else {
                        unreachable!()
                    };
                    Some(LayerParams {
                        weight: glorot(&mut rng, vec![*out_dim, in_dim], in_dim, *out_dim),
                        bias: Tensor::zeros(vec![*out_dim]),
                    })
                }
                _ => None,
            };
            params.push(block);
        }
        let adapter = match upstream_dim {
            Some(d) if d != cfg.fc1_dim() => {
                let fc1 = cfg.fc1_dim();
                Some(LayerParams {
                    weight: glorot(&mut rng, vec![fc1, d], d, fc1),
                    bias: Tensor::zeros(vec![fc1]),
                })
            }
            _ => None,
        };
        let adam_m: Vec<_> = params
            .iter()
            .map(|p| p.as_ref().map(LayerParams::zeros_like))
            .collect();
        let adam_v = adam_m.clone();
        let adapter_m = adapter.as_ref().map(LayerParams::zeros_like);
        let adapter_v = adapter_m.clone();
        Ok(ModelState {
            params,
            adapter,
            adam_m,
            adam_v,
            adapter_m,
            adapter_v,
            step: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn has_adapter(&self) -> bool {
        self.adapter.is_some()
    }

    pub fn layer_params(&self, layer: usize) -> Option<&LayerParams<S>> {
        self.params[layer].as_ref()
    }

    /// Every parameter tensor in canonical order: per-layer weight then
    /// bias, then the adapter pair.
    pub fn param_tensors(&self) -> Vec<&Tensor<S>> {
        let mut out = Vec::new();
        for p in self.params.iter().flatten() {
            out.push(&p.weight);
            out.push(&p.bias);
        }
        if let Some(a) = &self.adapter {
            out.push(&a.weight);
            out.push(&a.bias);
        }
        out
    }

    pub(crate) fn param_tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        for p in self.params.iter_mut().flatten() {
            out.push(&mut p.weight);
            out.push(&mut p.bias);
        }
        if let Some(a) = &mut self.adapter {
            out.push(&mut a.weight);
            out.push(&mut a.bias);
        }
        out
    }

    pub fn total_params(&self) -> usize {
        self.param_tensors().iter().map(|t| t.len()).sum()
    }

    /// Cast every parameter and moment to another scalar width.
    pub fn cast<T: Scalar>(&self) -> ModelState<T> {
        let cast_block = |b: &Option<LayerParams<S>>| {
            b.as_ref().map(|p| LayerParams {
                weight: p.weight.cast(),
                bias: p.bias.cast(),
            })
        };
        ModelState {
            params: self.params.iter().map(cast_block).collect(),
            adapter: cast_block(&self.adapter),
            adam_m: self.adam_m.iter().map(cast_block).collect(),
            adam_v: self.adam_v.iter().map(cast_block).collect(),
            adapter_m: cast_block(&self.adapter_m),
            adapter_v: cast_block(&self.adapter_v),
            step: self.step,
        }
    }
}

fn glorot<S: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
) -> Tensor<S> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| S::from_f64(rng.random_range(-limit..limit)))
        .collect();
    Tensor::from_parts(shape, data)
}

/// Gradients of the total loss with respect to every parameter, in the
/// same layout as [`ModelState`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<S> {
    pub layers: Vec<Option<LayerParams<S>>>,
    pub adapter: Option<LayerParams<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros_like(state: &ModelState<S>) -> Gradients<S> {
        Gradients {
            layers: state
                .params
                .iter()
                .map(|p| p.as_ref().map(LayerParams::zeros_like))
                .collect(),
            adapter: state.adapter.as_ref().map(LayerParams::zeros_like),
        }
    }

    /// Flat view in the same canonical order as
    /// [`ModelState::param_tensors`].
    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        let mut out = Vec::new();
        for p in self.layers.iter().flatten() {
            out.push(&p.weight);
            out.push(&p.bias);
        }
        if let Some(a) = &self.adapter {
            out.push(&a.weight);
            out.push(&a.bias);
        }
        out
    }

    pub fn scale(&mut self, factor: S) {
        for block in self.layers.iter_mut().flatten() {
            for v in block.weight.data_mut() {
                *v *= factor;
            }
            for v in block.bias.data_mut() {
                *v *= factor;
            }
        }
        if let Some(a) = &mut self.adapter {
            for v in a.weight.data_mut() {
                *v *= factor;
            }
            for v in a.bias.data_mut() {
                *v *= factor;
            }
        }
    }
}

/// Captured activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TapActivations<S> {
    pub fc1: Vec<S>,
    pub fc2: Vec<S>,
    pub logits: Vec<S>,
}

/// Gradients to inject at the taps when backpropagating a composite loss.
/// Empty vectors mean no injection at that tap.
#[derive(Debug, Clone, PartialEq)]
pub struct TapGrads<S> {
    pub d_logits: Vec<S>,
    pub d_fc1: Vec<S>,
    pub d_fc2: Vec<S>,
}

impl<S: Scalar> TapGrads<S> {
    pub fn logits_only(d_logits: Vec<S>) -> TapGrads<S> {
        TapGrads {
            d_logits,
            d_fc1: Vec::new(),
            d_fc2: Vec::new(),
        }
    }
}

/// Everything backward needs from one forward pass: the input, every
/// activation, save-point snapshots, and fusion intermediates.
#[derive(Debug, Clone)]
pub struct ForwardTrace<S> {
    pub(crate) acts: Vec<Tensor<S>>,
    pub(crate) fusion: Option<FusionTrace<S>>,
    fc1_layer: usize,
    fc2_layer: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct FusionTrace<S> {
    pub(crate) mode: FuseMode,
    pub(crate) upstream: Vec<S>,
    pub(crate) adapter_out: Option<Vec<S>>,
    pub(crate) fc1_raw: Vec<S>,
}

impl<S: Scalar> ForwardTrace<S> {
    pub fn taps(&self) -> TapActivations<S> {
        TapActivations {
            fc1: self.acts[self.fc1_layer + 1].data().to_vec(),
            fc2: self.acts[self.fc2_layer + 1].data().to_vec(),
            logits: self.acts.last().unwrap().data().to_vec(),
        }
    }

    pub fn logits(&self) -> &[S] {
        self.acts.last().unwrap().data()
    }
}

/// Forward pass capturing the FC1/FC2 taps and the logits.
pub fn forward_with_taps<S: Scalar>(
    state: &ModelState<S>,
    cfg: &ModelConfig,
    x: &Tensor<S>,
) -> Result<TapActivations<S>> {
    Ok(forward_trace(state, cfg, x, None)?.taps())
}

/// Forward pass with an upstream embedding fused into the FC1 activation.
pub fn forward_with_taps_fused<S: Scalar>(
    state: &ModelState<S>,
    cfg: &ModelConfig,
    x: &Tensor<S>,
    fusion: Option<(FuseMode, &[S])>,
) -> Result<TapActivations<S>> {
    Ok(forward_trace(state, cfg, x, fusion)?.taps())
}

/// Full traced forward pass. The input must be a `frames x mels` tensor
/// matching the config.
pub fn forward_trace<S: Scalar>(
    state: &ModelState<S>,
    cfg: &ModelConfig,
    x: &Tensor<S>,
    fusion: Option<(FuseMode, &[S])>,
) -> Result<ForwardTrace<S>> {
    if x.shape() != [cfg.input_frames, cfg.input_mels] {
        return Err(NnError::Shape(format!(
            "input shape {:?} does not match config {}x{}",
            x.shape(),
            cfg.input_frames,
            cfg.input_mels
        )));
    }
    let fc1_layer = cfg.layer_index_of("FC1");
    let fc2_layer = cfg.layer_index_of("FC2");
    let mut acts: Vec<Tensor<S>> =
        vec![x.reshaped(vec![1, cfg.input_frames, cfg.input_mels])?];
    let mut fusion_trace: Option<FusionTrace<S>> = None;
    let mut saved: HashMap<&str, usize> = HashMap::new();

    for (i, layer) in cfg.layers.iter().enumerate() {
        let input = acts.last().unwrap();
        let out = match layer {
            LayerSpec::Conv2d {
                stride, padding, ..
            } => {
                let p = state.params[i].as_ref().unwrap();
                conv2d_forward(input, &p.weight, &p.bias, *stride, *padding)
            }
            LayerSpec::Relu => relu_forward(input),
            LayerSpec::MaxPool2d { kernel } => maxpool_forward(input, *kernel),
            LayerSpec::GlobalAvgPool => gap_forward(input),
            LayerSpec::Flatten => input.reshaped(vec![input.len()])?,
            LayerSpec::Dense { .. } => {
                let p = state.params[i].as_ref().unwrap();
                let raw = dense_forward(input, &p.weight, &p.bias);
                if i == fc1_layer {
                    if let Some((mode, upstream)) = fusion {
                        let (fused, trace) =
                            apply_fusion(state, cfg, mode, upstream, raw.data())?;
                        fusion_trace = Some(trace);
                        Tensor::from_parts(vec![fused.len()], fused)
                    } else {
                        raw
                    }
                } else {
                    raw
                }
            }
            LayerSpec::Save { name } => {
                saved.insert(name, acts.len() - 1);
                input.clone()
            }
            LayerSpec::Add { name } => {
                let mut out = input.clone();
                out.add_assign(&acts[saved[name.as_str()]]);
                out
            }
        };
        acts.push(out);
    }
    Ok(ForwardTrace {
        acts,
        fusion: fusion_trace,
        fc1_layer,
        fc2_layer,
    })
}

fn apply_fusion<S: Scalar>(
    state: &ModelState<S>,
    cfg: &ModelConfig,
    mode: FuseMode,
    upstream: &[S],
    fc1_raw: &[S],
) -> Result<(Vec<S>, FusionTrace<S>)> {
    let fc1_dim = cfg.fc1_dim();
    let (side, adapter_out) = if let Some(adapter) = &state.adapter {
        if upstream.len() != adapter.weight.shape()[1] {
            return Err(NnError::Fusion(format!(
                "upstream dim {} does not match adapter input {}",
                upstream.len(),
                adapter.weight.shape()[1]
            )));
        }
        let up = Tensor::from_parts(vec![upstream.len()], upstream.to_vec());
        let mapped = dense_forward(&up, &adapter.weight, &adapter.bias);
        (mapped.data().to_vec(), Some(mapped.data().to_vec()))
    } else {
        if upstream.len() != fc1_dim {
            return Err(NnError::Fusion(format!(
                "upstream dim {} does not match FC1 dim {fc1_dim} and no adapter is present",
                upstream.len()
            )));
        }
        (upstream.to_vec(), None)
    };
    let two = S::from_f64(2.0);
    let fused: Vec<S> = fc1_raw
        .iter()
        .zip(&side)
        .map(|(&a, &b)| match mode {
            FuseMode::Add => a + b,
            FuseMode::Max => if a >= b { a } else { b },
            FuseMode::Avg => (a + b) / two,
        })
        .collect();
    Ok((
        fused,
        FusionTrace {
            mode,
            upstream: upstream.to_vec(),
            adapter_out,
            fc1_raw: fc1_raw.to_vec(),
        },
    ))
}

/// Backward pass for one traced sample, accumulating parameter gradients
/// into `grads`. Tap gradient vectors must be empty or dimension-exact.
pub fn backward_into<S: Scalar>(
    state: &ModelState<S>,
    cfg: &ModelConfig,
    trace: &ForwardTrace<S>,
    tap_grads: &TapGrads<S>,
    grads: &mut Gradients<S>,
) -> Result<()> {
    let logits_len = trace.logits().len();
    let mut g = if tap_grads.d_logits.is_empty() {
        Tensor::zeros(vec![logits_len])
    } else {
        if tap_grads.d_logits.len() != logits_len {
            return Err(NnError::Shape("d_logits has the wrong length".into()));
        }
        Tensor::from_parts(vec![logits_len], tap_grads.d_logits.clone())
    };
    // Save-point gradient accumulators keyed by save-layer activation index.
    let mut saved_idx: HashMap<&str, usize> = HashMap::new();
    for (i, layer) in cfg.layers.iter().enumerate() {
        if let LayerSpec::Save { name } = layer {
            saved_idx.insert(name, i);
        }
    }
    let mut pending: HashMap<usize, Tensor<S>> = HashMap::new();

    for i in (0..cfg.layers.len()).rev() {
        let input = &trace.acts[i];
        // Inject tap gradients at the dense outputs they attach to.
        if i == trace.fc2_layer && !tap_grads.d_fc2.is_empty() {
            if tap_grads.d_fc2.len() != g.len() {
                return Err(NnError::Shape("d_fc2 has the wrong length".into()));
            }
            for (a, b) in g.data_mut().iter_mut().zip(&tap_grads.d_fc2) {
                *a += *b;
            }
        }
        if i == trace.fc1_layer && !tap_grads.d_fc1.is_empty() {
            if tap_grads.d_fc1.len() != g.len() {
                return Err(NnError::Shape("d_fc1 has the wrong length".into()));
            }
            for (a, b) in g.data_mut().iter_mut().zip(&tap_grads.d_fc1) {
                *a += *b;
            }
        }
        g = match &cfg.layers[i] {
            LayerSpec::Conv2d {
                stride, padding, ..
            } => {
                let p = state.params[i].as_ref().unwrap();
                let block = grads.layers[i].as_mut().unwrap();
                conv2d_backward(input, &p.weight, &g, *stride, *padding, block)
            }
            LayerSpec::Relu => relu_backward(input, &g),
            LayerSpec::MaxPool2d { kernel } => maxpool_backward(input, &g, *kernel),
            LayerSpec::GlobalAvgPool => gap_backward(input, &g),
            LayerSpec::Flatten => g.reshaped(input.shape().to_vec())?,
            LayerSpec::Dense { .. } => {
                let p = state.params[i].as_ref().unwrap();
                let d_out = if i == trace.fc1_layer {
                    match &trace.fusion {
                        Some(ft) => route_fusion_backward(state, ft, &g, grads),
                        None => g.clone(),
                    }
                } else {
                    g.clone()
                };
                let block = grads.layers[i].as_mut().unwrap();
                dense_backward(input, &p.weight, &d_out, block)
            }
            LayerSpec::Save { name } => {
                // The skip branch's gradient re-joins the trunk here.
                let mut out = g.clone();
                if let Some(extra) = pending.remove(&saved_idx[name.as_str()]) {
                    out.add_assign(&extra);
                }
                out
            }
            LayerSpec::Add { name } => {
                let idx = saved_idx[name.as_str()];
                pending
                    .entry(idx)
                    .and_modify(|t| t.add_assign(&g))
                    .or_insert_with(|| g.clone());
                g.clone()
            }
        };
    }
    Ok(())
}

/// Split the gradient at the fused FC1 output between the dense branch and
/// the upstream branch, accumulating adapter gradients when one exists.
/// Returns the gradient w.r.t. the raw dense output.
fn route_fusion_backward<S: Scalar>(
    state: &ModelState<S>,
    ft: &FusionTrace<S>,
    g: &Tensor<S>,
    grads: &mut Gradients<S>,
) -> Tensor<S> {
    let side: &[S] = match &ft.adapter_out {
        Some(a) => a,
        None => &ft.upstream,
    };
    let half = S::from_f64(0.5);
    let mut d_fc1 = vec![S::zero(); g.len()];
    let mut d_side = vec![S::zero(); g.len()];
    for (j, &gj) in g.data().iter().enumerate() {
        match ft.mode {
            FuseMode::Add => {
                d_fc1[j] = gj;
                d_side[j] = gj;
            }
            FuseMode::Avg => {
                d_fc1[j] = gj * half;
                d_side[j] = gj * half;
            }
            FuseMode::Max => {
                // Ties route to the trained FC1 branch.
                if ft.fc1_raw[j] >= side[j] {
                    d_fc1[j] = gj;
                } else {
                    d_side[j] = gj;
                }
            }
        }
    }
    if let (Some(adapter), Some(block)) = (&state.adapter, grads.adapter.as_mut()) {
        let up = Tensor::from_parts(vec![ft.upstream.len()], ft.upstream.clone());
        let d_out = Tensor::from_parts(vec![d_side.len()], d_side);
        // The upstream vector is input data; its gradient is dropped.
        dense_backward(&up, &adapter.weight, &d_out, block);
    }
    Tensor::from_parts(vec![d_fc1.len()], d_fc1)
}

fn dense_forward<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
    debug_assert_eq!(x.len(), in_dim);
    let xd = x.data();
    let wd = w.data();
    let mut out = Vec::with_capacity(out_dim);
    for o in 0..out_dim {
        let mut acc = b.data()[o];
        let row = &wd[o * in_dim..(o + 1) * in_dim];
        for (wv, xv) in row.iter().zip(xd) {
            acc += *wv * *xv;
        }
        out.push(acc);
    }
    Tensor::from_parts(vec![out_dim], out)
}

fn dense_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    d_out: &Tensor<S>,
    block: &mut LayerParams<S>,
) -> Tensor<S> {
    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
    let xd = x.data();
    let wd = w.data();
    let gd = d_out.data();
    let dw = block.weight.data_mut();
    for o in 0..out_dim {
        let go = gd[o];
        let row = &mut dw[o * in_dim..(o + 1) * in_dim];
        for (dwv, xv) in row.iter_mut().zip(xd) {
            *dwv += go * *xv;
        }
    }
    for (dbv, gv) in block.bias.data_mut().iter_mut().zip(gd) {
        *dbv += *gv;
    }
    let mut dx = vec![S::zero(); in_dim];
    for o in 0..out_dim {
        let go = gd[o];
        let row = &wd[o * in_dim..(o + 1) * in_dim];
        for (dxv, wv) in dx.iter_mut().zip(row) {
            *dxv += *wv * go;
        }
    }
    Tensor::from_parts(vec![in_dim], dx)
}

fn relu_forward<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let data = x
        .data()
        .iter()
        .map(|&v| if v > S::zero() { v } else { S::zero() })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

fn relu_backward<S: Scalar>(x: &Tensor<S>, g: &Tensor<S>) -> Tensor<S> {
    // relu'(0) is 0, so the kink never passes gradient.
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&xv, &gv)| if xv > S::zero() { gv } else { S::zero() })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

fn conv2d_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Tensor<S> {
    let (in_c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (out_c, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (wd + 2 * padding - k) / stride + 1;
    let xd = x.data();
    let wv = w.data();
    let mut out = vec![S::zero(); out_c * oh * ow];
    for oc in 0..out_c {
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = b.data()[oc];
                for ic in 0..in_c {
                    for kh in 0..k {
                        let iy = (y * stride + kh) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kw in 0..k {
                            let ix = (xo * stride + kw) as isize - padding as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let xi = (ic * h + iy as usize) * wd + ix as usize;
                            let wi = ((oc * in_c + ic) * k + kh) * k + kw;
                            acc += wv[wi] * xd[xi];
                        }
                    }
                }
                out[(oc * oh + y) * ow + xo] = acc;
            }
        }
    }
    Tensor::from_parts(vec![out_c, oh, ow], out)
}

fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    g: &Tensor<S>,
    stride: usize,
    padding: usize,
    block: &mut LayerParams<S>,
) -> Tensor<S> {
    let (in_c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (out_c, k) = (w.shape()[0], w.shape()[2]);
    let (oh, ow) = (g.shape()[1], g.shape()[2]);
    let xd = x.data();
    let wv = w.data();
    let gd = g.data();
    let dw = block.weight.data_mut();
    let db = block.bias.data_mut();
    let mut dx = vec![S::zero(); in_c * h * wd];
    for oc in 0..out_c {
        for y in 0..oh {
            for xo in 0..ow {
                let go = gd[(oc * oh + y) * ow + xo];
                db[oc] += go;
                for ic in 0..in_c {
                    for kh in 0..k {
                        let iy = (y * stride + kh) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kw in 0..k {
                            let ix = (xo * stride + kw) as isize - padding as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let xi = (ic * h + iy as usize) * wd + ix as usize;
                            let wi = ((oc * in_c + ic) * k + kh) * k + kw;
                            dw[wi] += go * xd[xi];
                            dx[xi] += go * wv[wi];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![in_c, h, wd], dx)
}

fn maxpool_forward<S: Scalar>(x: &Tensor<S>, k: usize) -> Tensor<S> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h / k, w / k);
    let xd = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = S::neg_infinity();
                for kh in 0..k {
                    for kw in 0..k {
                        let v = xd[(ch * h + y * k + kh) * w + xo * k + kw];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    Tensor::from_parts(vec![c, oh, ow], out)
}

fn maxpool_backward<S: Scalar>(x: &Tensor<S>, g: &Tensor<S>, k: usize) -> Tensor<S> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h / k, w / k);
    let xd = x.data();
    let gd = g.data();
    let mut dx = vec![S::zero(); xd.len()];
    for ch in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                // Ties resolve to the first cell in scan order, matching a
                // strict-greater update rule.
                let mut best = S::neg_infinity();
                let mut best_idx = 0usize;
                for kh in 0..k {
                    for kw in 0..k {
                        let idx = (ch * h + y * k + kh) * w + xo * k + kw;
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                }
                dx[best_idx] += gd[(ch * oh + y) * ow + xo];
            }
        }
    }
    Tensor::from_parts(vec![c, h, w], dx)
}

fn gap_forward<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let area = S::from_f64((h * w) as f64);
    let xd = x.data();
    let out = (0..c)
        .map(|ch| {
            let mut acc = S::zero();
            for v in &xd[ch * h * w..(ch + 1) * h * w] {
                acc += *v;
            }
            acc / area
        })
        .collect();
    Tensor::from_parts(vec![c], out)
}

fn gap_backward<S: Scalar>(x: &Tensor<S>, g: &Tensor<S>) -> Tensor<S> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let area = S::from_f64((h * w) as f64);
    let mut dx = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let per_cell = g.data()[ch] / area;
        dx.extend(std::iter::repeat(per_cell).take(h * w));
    }
    Tensor::from_parts(vec![c, h, w], dx)
}

/// Numerically stable softmax.
pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits
        .iter()
        .fold(S::neg_infinity(), |a, &b| if b > a { b } else { a });
    let exps: Vec<S> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_config() -> ModelConfig {
        parse_model_config(include_str!("../../configs/cnn6-toy.toml")).unwrap()
    }

    fn tiny_dense_config() -> ModelConfig {
        ModelConfig {
            input_frames: 1,
            input_mels: 2,
            classes: 2,
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    out_dim: 2,
                    name: Some("FC1".into()),
                },
                LayerSpec::Dense {
                    out_dim: 2,
                    name: Some("FC2".into()),
                },
            ],
        }
    }

    fn set_weights<S: Scalar>(state: &mut ModelState<S>, layer: usize, w: &[f64], b: &[f64]) {
        let p = state.params[layer].as_mut().unwrap();
        for (dst, src) in p.weight.data_mut().iter_mut().zip(w) {
            *dst = S::from_f64(*src);
        }
        for (dst, src) in p.bias.data_mut().iter_mut().zip(b) {
            *dst = S::from_f64(*src);
        }
    }

    #[test]
    fn toy_config_shape_contract() {
        let cfg = toy_config();
        let dims = cfg.layer_dims().unwrap();
        assert_eq!(dims[0], Dims::Chw(1, 40, 64));
        assert!(dims.contains(&Dims::Flat(320)));
        assert_eq!(*dims.last().unwrap(), Dims::Flat(7));
        assert_eq!(cfg.fc1_dim(), 64);
        assert_eq!(cfg.fc2_dim(), 32);
        assert_eq!(cfg.param_count().unwrap(), 23_191);

        let state: ModelState<f32> = ModelState::init(&cfg, 0).unwrap();
        let x = Tensor::zeros(vec![40, 64]);
        let taps = forward_with_taps(&state, &cfg, &x).unwrap();
        assert_eq!(taps.fc1.len(), 64);
        assert_eq!(taps.fc2.len(), 32);
        assert_eq!(taps.logits.len(), 7);
    }

    #[test]
    fn zero_network_gives_uniform_softmax() {
        let cfg = toy_config();
        let mut state: ModelState<f64> = ModelState::init(&cfg, 1).unwrap();
        for t in state.param_tensors_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let x = Tensor::new(vec![40, 64], (0..40 * 64).map(|i| (i % 13) as f64).collect())
            .unwrap();
        let taps = forward_with_taps(&state, &cfg, &x).unwrap();
        assert!(taps.logits.iter().all(|&l| l == 0.0));
        let probs = softmax(&taps.logits);
        for p in &probs {
            assert!((p - 1.0 / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_dense_forward() {
        let cfg = tiny_dense_config();
        let mut state: ModelState<f64> = ModelState::init(&cfg, 0).unwrap();
        set_weights(&mut state, 1, &[1.0, 2.0, 3.0, 4.0], &[0.0, 0.0]);
        set_weights(&mut state, 2, &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0]);
        let x = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let taps = forward_with_taps(&state, &cfg, &x).unwrap();
        assert_eq!(taps.fc1, vec![3.0, 7.0]);
        assert_eq!(taps.logits, vec![3.0, 7.0]);
    }

    #[test]
    fn hand_scalar_chain_gradient() {
        // y = w * x with w = 2, x = 3; loss (y - t)^2 with t = 0 gives
        // dL/dw = 2 * y * x = 36.
        let cfg = ModelConfig {
            input_frames: 1,
            input_mels: 1,
            classes: 1,
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    out_dim: 1,
                    name: Some("FC1".into()),
                },
                LayerSpec::Dense {
                    out_dim: 1,
                    name: Some("FC2".into()),
                },
            ],
        };
        let mut state: ModelState<f64> = ModelState::init(&cfg, 0).unwrap();
        set_weights(&mut state, 1, &[2.0], &[0.0]);
        set_weights(&mut state, 2, &[1.0], &[0.0]);
        let x = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        let trace = forward_trace(&state, &cfg, &x, None).unwrap();
        assert_eq!(trace.logits(), &[6.0]);
        let mut grads = Gradients::zeros_like(&state);
        // dL/dy at y = 6.
        backward_into(
            &state,
            &cfg,
            &trace,
            &TapGrads::logits_only(vec![12.0]),
            &mut grads,
        )
        .unwrap();
        assert_eq!(grads.layers[1].as_ref().unwrap().weight.data(), &[36.0]);
        assert_eq!(grads.layers[1].as_ref().unwrap().bias.data(), &[12.0]);
    }

    #[test]
    fn unused_downstream_layers_get_exactly_zero_gradient() {
        let cfg = toy_config();
        let state: ModelState<f64> = ModelState::init(&cfg, 3).unwrap();
        let x = Tensor::new(
            vec![40, 64],
            (0..40 * 64).map(|i| ((i * 7) % 11) as f64 / 11.0).collect(),
        )
        .unwrap();
        let trace = forward_trace(&state, &cfg, &x, None).unwrap();
        let mut grads = Gradients::zeros_like(&state);
        let tap_grads = TapGrads {
            d_logits: Vec::new(),
            d_fc1: vec![1.0; 64],
            d_fc2: Vec::new(),
        };
        backward_into(&state, &cfg, &trace, &tap_grads, &mut grads).unwrap();
        // Layers after FC1 cannot influence a loss that reads only FC1.
        let fc2_idx = cfg.layer_index_of("FC2");
        let fc2 = grads.layers[fc2_idx].as_ref().unwrap();
        assert!(fc2.weight.data().iter().all(|&v| v == 0.0));
        assert!(fc2.bias.data().iter().all(|&v| v == 0.0));
        let last = grads.layers.last().unwrap().as_ref().unwrap();
        assert!(last.weight.data().iter().all(|&v| v == 0.0));
        // Upstream conv layers do feel it.
        let conv = grads.layers[0].as_ref().unwrap();
        assert!(conv.weight.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = toy_config();
        let state: ModelState<f32> = ModelState::init(&cfg, 9).unwrap();
        let x = Tensor::new(
            vec![40, 64],
            (0..40 * 64).map(|i| (i % 29) as f32 / 29.0).collect(),
        )
        .unwrap();
        let a = forward_with_taps(&state, &cfg, &x).unwrap();
        let b = forward_with_taps(&state, &cfg, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_is_seeded_and_width_agnostic() {
        let cfg = toy_config();
        let a: ModelState<f32> = ModelState::init(&cfg, 7).unwrap();
        let b: ModelState<f32> = ModelState::init(&cfg, 7).unwrap();
        assert_eq!(a, b);
        let c: ModelState<f32> = ModelState::init(&cfg, 8).unwrap();
        assert_ne!(a, c);
        // f64 init narrowed to f32 equals the f32 init.
        let wide: ModelState<f64> = ModelState::init(&cfg, 7).unwrap();
        assert_eq!(wide.cast::<f32>(), a);
        // Biases start at zero; weights stay inside the Glorot limit.
        let p0 = a.params[0].as_ref().unwrap();
        assert!(p0.bias.data().iter().all(|&v| v == 0.0));
        let limit = (6.0f64 / (9.0 + 36.0)).sqrt() as f32;
        assert!(p0.weight.data().iter().all(|&v| v.abs() <= limit));
    }

    #[test]
    fn softmax_sums_to_one_in_both_widths() {
        let logits64: Vec<f64> = vec![-3.0, 0.5, 111.0, 2.0, -40.0];
        let sum: f64 = softmax(&logits64).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        let logits32: Vec<f32> = logits64.iter().map(|&v| v as f32).collect();
        let sum32: f32 = softmax(&logits32).iter().sum();
        assert!((sum32 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn conv_hand_case_with_and_without_padding() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![1], vec![0.5]).unwrap();
        let out = conv2d_forward(&x, &w, &b, 1, 0);
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[5.5]);
        let padded = conv2d_forward(&x, &w, &b, 1, 1);
        assert_eq!(padded.shape(), &[1, 3, 3]);
        // Top-left window sees only x[0][0] under the second kernel tap.
        assert_eq!(padded.data()[0], 1.0 + 0.5);
    }

    #[test]
    fn maxpool_tie_routes_to_first_cell() {
        let x = Tensor::new(vec![1, 2, 2], vec![2.0, 2.0, 2.0, 2.0]).unwrap();
        let out = maxpool_forward(&x, 2);
        assert_eq!(out.data(), &[2.0]);
        let g = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        let dx = maxpool_backward(&x, &g, 2);
        assert_eq!(dx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_drops_the_remainder() {
        let x = Tensor::new(vec![1, 3, 3], (1..=9).map(|v| v as f64).collect()).unwrap();
        let out = maxpool_forward(&x, 2);
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[5.0]);
    }

    #[test]
    fn skip_connection_doubles_and_routes_gradient_both_ways() {
        let cfg = ModelConfig {
            input_frames: 1,
            input_mels: 2,
            classes: 2,
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Save { name: "s".into() },
                LayerSpec::Dense {
                    out_dim: 2,
                    name: Some("FC1".into()),
                },
                LayerSpec::Add { name: "s".into() },
                LayerSpec::Dense {
                    out_dim: 2,
                    name: Some("FC2".into()),
                },
            ],
        };
        let mut state: ModelState<f64> = ModelState::init(&cfg, 0).unwrap();
        set_weights(&mut state, 2, &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0]); // identity FC1
        set_weights(&mut state, 4, &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0]); // identity FC2
        let x = Tensor::new(vec![1, 2], vec![1.5, -2.0]).unwrap();
        let trace = forward_trace(&state, &cfg, &x, None).unwrap();
        assert_eq!(trace.logits(), &[3.0, -4.0]);
        let mut grads = Gradients::zeros_like(&state);
        backward_into(
            &state,
            &cfg,
            &trace,
            &TapGrads::logits_only(vec![1.0, 1.0]),
            &mut grads,
        )
        .unwrap();
        // FC1 weight grad: d_out x input, both branches alive upstream of it.
        let fc1 = grads.layers[2].as_ref().unwrap();
        assert_eq!(fc1.weight.data(), &[1.5, -2.0, 1.5, -2.0]);
    }

    #[test]
    fn fusion_add_max_avg_forward() {
        let cfg = tiny_dense_config();
        let mut state: ModelState<f64> = ModelState::init(&cfg, 0).unwrap();
        set_weights(&mut state, 1, &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0]);
        set_weights(&mut state, 2, &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0]);
        let x = Tensor::new(vec![1, 2], vec![1.0, 5.0]).unwrap();
        let up = [3.0, 4.0];
        let add = forward_with_taps_fused(&state, &cfg, &x, Some((FuseMode::Add, &up)))
            .unwrap();
        assert_eq!(add.fc1, vec![4.0, 9.0]);
        let max = forward_with_taps_fused(&state, &cfg, &x, Some((FuseMode::Max, &up)))
            .unwrap();
        assert_eq!(max.fc1, vec![3.0, 5.0]);
        let avg = forward_with_taps_fused(&state, &cfg, &x, Some((FuseMode::Avg, &up)))
            .unwrap();
        assert_eq!(avg.fc1, vec![2.0, 4.5]);
        // The fused value is what flows on to FC2.
        assert_eq!(add.logits, vec![4.0, 9.0]);
    }

    #[test]
    fn fusion_dim_mismatch_without_adapter_is_an_error() {
        let cfg = tiny_dense_config();
        let state: ModelState<f64> = ModelState::init(&cfg, 0).unwrap();
        let x = Tensor::new(vec![1, 2], vec![1.0, 5.0]).unwrap();
        let up = [3.0, 4.0, 5.0];
        assert!(matches!(
            forward_with_taps_fused(&state, &cfg, &x, Some((FuseMode::Add, &up))),
            Err(NnError::Fusion(_))
        ));
    }

    #[test]
    fn adapter_maps_mismatched_upstream_dims() {
        let cfg = tiny_dense_config();
        let mut state: ModelState<f64> =
            ModelState::init_with_adapter(&cfg, 0, Some(3)).unwrap();
        assert!(state.has_adapter());
        set_weights(&mut state, 1, &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0]);
        set_weights(&mut state, 2, &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0]);
        let a = state.adapter.as_mut().unwrap();
        for (dst, src) in a
            .weight
            .data_mut()
            .iter_mut()
            .zip([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
        {
            *dst = src;
        }
        let x = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let taps = forward_with_taps_fused(
            &state,
            &cfg,
            &x,
            Some((FuseMode::Add, &[10.0, 20.0, 99.0][..])),
        )
        .unwrap();
        // Adapter projects (10, 20, 99) to (10, 20); add gives (11, 21).
        assert_eq!(taps.fc1, vec![11.0, 21.0]);
        // Equal dims mean no adapter even when requested.
        let plain: ModelState<f64> =
            ModelState::init_with_adapter(&cfg, 0, Some(2)).unwrap();
        assert!(!plain.has_adapter());
    }

    #[test]
    fn config_validation_catches_contract_breaks() {
        let mut cfg = tiny_dense_config();
        cfg.layers.pop();
        // FC2 missing.
        assert!(matches!(cfg.validate(), Err(NnError::Config(_))));
        let mut cfg = tiny_dense_config();
        cfg.classes = 3;
        // Final dense emits 2 logits, not 3.
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            input_frames: 4,
            input_mels: 4,
            classes: 2,
            layers: vec![LayerSpec::Dense {
                out_dim: 2,
                name: Some("FC1".into()),
            }],
        };
        // Dense on an unflattened input.
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_text_round_trip_and_digest_stability() {
        let cfg = toy_config();
        let digest1 = checkpoint::config_digest(&cfg);
        let digest2 = checkpoint::config_digest(&cfg);
        assert_eq!(digest1, digest2);
        let mut other = cfg.clone();
        other.classes = 8;
        assert_ne!(digest1, checkpoint::config_digest(&other));
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let text = "input_frames = 4\ninput_mels = 4\nclasses = 2\nbogus = 1\n[[layer]]\ntype = \"flatten\"\n";
        assert!(parse_model_config(text).is_err());
        let text2 = "input_frames = 4\ninput_mels = 4\nclasses = 2\n[[layer]]\ntype = \"conv2d\"\nout_channels = 2\nkernel = 3\nstride = 1\nwat = 5\n";
        assert!(parse_model_config(text2).is_err());
    }
}
