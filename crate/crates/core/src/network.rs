//! Occupancy MLP: positional encoding, batched forward/backward and checkpoints.
//!
//! Layout: `hidden_layers` affine+ReLU layers of width `hidden_width`, the
//! encoded input concatenated back in front of layer `skip_at`, and a final
//! affine layer to one logit followed by a sigmoid.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vec3;
use crate::phantom::AcousticProperties;
use crate::real::Real;

/// Raw (pre-encoding) input dimension for both input kinds.
pub const RAW_INPUT_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// Normalized `(alpha, beta, phi)` at the point.
    AcousticFeatures,
    /// Unit-cube coordinates; the plain coordinate-based occupancy network.
    Coordinates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodingConfig {
    pub num_frequencies: usize,
    pub include_input: bool,
}

impl EncodingConfig {
    pub fn output_dim(&self, input_dim: usize) -> usize {
        input_dim * (usize::from(self.include_input) + 2 * self.num_frequencies)
    }

    /// Appends the encoding of `v` to `out`.
    pub fn encode_into<T: Real>(&self, v: &[T], out: &mut Vec<T>) {
        if self.include_input {
            out.extend_from_slice(v);
        }
        let mut freq = T::PI();
        for _ in 0..self.num_frequencies {
            out.extend(v.iter().map(|&c| (freq * c).sin()));
            out.extend(v.iter().map(|&c| (freq * c).cos()));
            freq = freq + freq;
        }
    }
}

/// `[v, sin(2⁰πv), cos(2⁰πv), …, sin(2^{L-1}πv), cos(2^{L-1}πv)]`.
pub fn encode<T: Real>(v: &[T], cfg: &EncodingConfig) -> Vec<T> {
    let mut out = Vec::with_capacity(cfg.output_dim(v.len()));
    cfg.encode_into(v, &mut out);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_kind: InputKind,
    pub encoding: EncodingConfig,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    /// Index of the hidden layer that also receives the encoded input.
    pub skip_at: Option<usize>,
    /// Divisors applied to the raw input channels before encoding.
    pub input_scale: [f64; 3],
}

impl NetworkConfig {
    pub fn acoustic(alpha_max: f64) -> Self {
        Self {
            input_kind: InputKind::AcousticFeatures,
            encoding: EncodingConfig { num_frequencies: 6, include_input: true },
            hidden_layers: 8,
            hidden_width: 128,
            skip_at: Some(4),
            input_scale: [alpha_max, 1.0, 1.0],
        }
    }

    pub fn coordinates() -> Self {
        Self {
            input_kind: InputKind::Coordinates,
            encoding: EncodingConfig { num_frequencies: 10, include_input: true },
            hidden_layers: 8,
            hidden_width: 128,
            skip_at: Some(4),
            input_scale: [1.0; 3],
        }
    }

    pub fn encoded_dim(&self) -> usize {
        self.encoding.output_dim(RAW_INPUT_DIM)
    }

    /// Number of affine layers including the output layer.
    pub fn total_layers(&self) -> usize {
        self.hidden_layers + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 {
            return Err(Error::config("network.hidden_layers", "must be >= 1"));
        }
        if self.hidden_width == 0 {
            return Err(Error::config("network.hidden_width", "must be >= 1"));
        }
        if let Some(s) = self.skip_at {
            if s == 0 || s >= self.hidden_layers {
                return Err(Error::config("network.skip_at", "must lie in [1, hidden_layers)"));
            }
        }
        if self.encoded_dim() == 0 {
            return Err(Error::config("network.encoding", "encoding produces no features"));
        }
        if self.input_scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::config("network.input_scale", "entries must be > 0"));
        }
        Ok(())
    }

    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let enc = self.encoded_dim();
        let w = self.hidden_width;
        let mut shapes = Vec::with_capacity(self.total_layers());
        for i in 0..self.hidden_layers {
            let inputs = match i {
                0 => enc,
                i if Some(i) == self.skip_at => w + enc,
                _ => w,
            };
            shapes.push((inputs, w));
        }
        shapes.push((w, 1));
        shapes
    }
}

/// Affine layer; `weights` is `outputs x inputs`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Dense<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weights: vec![T::zero(); inputs * outputs], bias: vec![T::zero(); outputs] }
    }

    fn fill(&mut self, v: T) {
        self.weights.iter_mut().for_each(|w| *w = v);
        self.bias.iter_mut().for_each(|b| *b = v);
    }

    pub fn params(&self) -> impl Iterator<Item = &T> {
        self.weights.iter().chain(&self.bias)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }
}

/// Per-layer parameter gradients, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<Dense<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(model: &OccupancyModel<T>) -> Self {
        Self { layers: model.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect() }
    }

    pub fn clear(&mut self) {
        self.layers.iter_mut().for_each(|l| l.fill(T::zero()));
    }

    pub fn scale(&mut self, s: T) {
        self.layers.iter_mut().flat_map(Dense::params_mut).for_each(|g| *g *= s);
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().flat_map(Dense::params).all(|g| *g == T::zero())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct OccupancyModel<T> {
    pub config: NetworkConfig,
    pub layers: Vec<Dense<T>>,
    /// The last `frozen_suffix` layers receive no updates.
    #[serde(default)]
    pub frozen_suffix: usize,
}

/// Buffers reused across batched passes.
#[derive(Debug, Default)]
pub struct Workspace<T> {
    batch: usize,
    /// Input to each layer, `batch x inputs`.
    layer_inputs: Vec<Vec<T>>,
    /// Pre-activation of each layer, `batch x outputs`.
    pre: Vec<Vec<T>>,
    probs: Vec<T>,
    delta: Vec<T>,
    delta_in: Vec<T>,
}

impl<T: Real> OccupancyModel<T> {
    /// He-uniform weights (`±sqrt(6 / fan_in)`) and zero biases.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(inputs, outputs)| {
                let bound = (6.0 / inputs as f64).sqrt();
                let mut l = Dense::zeros(inputs, outputs);
                l.weights.iter_mut().for_each(|w| *w = T::lit(rng.gen_range(-bound..bound)));
                l
            })
            .collect();
        Ok(Self { config, layers, frozen_suffix: 0 })
    }

    pub fn zeroed(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let layers = config.layer_shapes().into_iter().map(|(i, o)| Dense::zeros(i, o)).collect();
        Ok(Self { config, layers, frozen_suffix: 0 })
    }

    pub fn encoded_dim(&self) -> usize {
        self.config.encoded_dim()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_layer_frozen(&self, layer: usize) -> bool {
        layer + self.frozen_suffix >= self.layers.len()
    }

    /// Same parameters with the last `n_layers` excluded from updates.
    pub fn freeze_suffix(mut self, n_layers: usize) -> Result<Self> {
        if n_layers > self.layers.len() {
            return Err(Error::invalid(format!(
                "cannot freeze {n_layers} layers of a {}-layer model",
                self.layers.len()
            )));
        }
        self.frozen_suffix = n_layers;
        Ok(self)
    }

    /// Raw network input for a sample: scaled features or coordinates.
    pub fn raw_input(&self, x: Vec3<T>, theta: &AcousticProperties<T>) -> [T; 3] {
        let raw = match self.config.input_kind {
            InputKind::AcousticFeatures => theta.as_array(),
            InputKind::Coordinates => x.as_array(),
        };
        let s = self.config.input_scale;
        [raw[0] / T::lit(s[0]), raw[1] / T::lit(s[1]), raw[2] / T::lit(s[2])]
    }

    pub fn encode_into(&self, x: Vec3<T>, theta: &AcousticProperties<T>, out: &mut Vec<T>) {
        self.config.encoding.encode_into(&self.raw_input(x, theta), out);
    }

    /// Occupancy probability for one encoded input.
    pub fn forward(&self, encoded: &[T]) -> Result<T> {
        let mut ws = Workspace::default();
        Ok(self.forward_batch(encoded, &mut ws)?[0])
    }

    /// Probabilities for `inputs.len() / encoded_dim` rows. Activations stay in
    /// `ws` for a following [`Self::backward_batch`].
    pub fn forward_batch<'w>(&self, inputs: &[T], ws: &'w mut Workspace<T>) -> Result<&'w [T]> {
        let dim = self.encoded_dim();
        if inputs.is_empty() || inputs.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "input length {} is not a positive multiple of the encoded dimension {dim}",
                inputs.len()
            )));
        }
        let batch = inputs.len() / dim;
        let n_layers = self.layers.len();
        ws.batch = batch;
        ws.layer_inputs.resize_with(n_layers, Vec::new);
        ws.pre.resize_with(n_layers, Vec::new);

        ws.layer_inputs[0].clear();
        ws.layer_inputs[0].extend_from_slice(inputs);
        for (li, layer) in self.layers.iter().enumerate() {
            let (inp, rest) = ws.layer_inputs.split_at_mut(li + 1);
            let h_in = &inp[li];
            let z = &mut ws.pre[li];
            z.clear();
            z.reserve(batch * layer.outputs);
            for _ in 0..batch {
                z.extend_from_slice(&layer.bias);
            }
            T::gemm(
                batch,
                layer.inputs,
                layer.outputs,
                T::one(),
                h_in,
                layer.inputs as isize,
                1,
                &layer.weights,
                1,
                layer.inputs as isize,
                T::one(),
                z,
                layer.outputs as isize,
                1,
            );
            if li + 1 < n_layers {
                let next = &mut rest[0];
                next.clear();
                let skip = Some(li + 1) == self.config.skip_at;
                let width = layer.outputs;
                next.reserve(batch * (width + if skip { dim } else { 0 }));
                for r in 0..batch {
                    next.extend(z[r * width..(r + 1) * width].iter().map(|&v| if v < T::zero() { T::zero() } else { v }));
                    if skip {
                        next.extend_from_slice(&inputs[r * dim..(r + 1) * dim]);
                    }
                }
            }
        }
        let logits = &ws.pre[n_layers - 1];
        ws.probs.clear();
        ws.probs.extend(logits.iter().map(|&z| sigmoid(z)));
        Ok(&ws.probs)
    }

    /// Gradients of `upstream · p` for one encoded input.
    pub fn backward(&self, encoded: &[T], upstream_gradient: T) -> Result<Gradients<T>> {
        let mut ws = Workspace::default();
        self.forward_batch(encoded, &mut ws)?;
        let mut grads = Gradients::zeros_like(self);
        self.backward_batch(&mut ws, &[upstream_gradient], &mut grads)?;
        Ok(grads)
    }

    /// Accumulates `Σ_b upstream[b] · ∂p_b/∂ω` into `grads`, using the
    /// activations left by the last [`Self::forward_batch`] on `ws`.
    pub fn backward_batch(&self, ws: &mut Workspace<T>, upstream: &[T], grads: &mut Gradients<T>) -> Result<()> {
        let batch = ws.batch;
        if upstream.len() != batch || ws.probs.len() != batch {
            return Err(Error::invalid("backward: upstream length does not match the forward batch"));
        }
        let n_layers = self.layers.len();
        // d p / d logit = p (1 - p)
        ws.delta.clear();
        ws.delta.extend(ws.probs.iter().zip(upstream).map(|(&p, &g)| g * p * (T::one() - p)));

        for li in (0..n_layers).rev() {
            let layer = &self.layers[li];
            let g = &mut grads.layers[li];
            let h_in = &ws.layer_inputs[li];
            // dW += deltaᵀ · h_in
            T::gemm(
                layer.outputs,
                batch,
                layer.inputs,
                T::one(),
                &ws.delta,
                1,
                layer.outputs as isize,
                h_in,
                layer.inputs as isize,
                1,
                T::one(),
                &mut g.weights,
                layer.inputs as isize,
                1,
            );
            for r in 0..batch {
                for (b, d) in g.bias.iter_mut().zip(&ws.delta[r * layer.outputs..(r + 1) * layer.outputs]) {
                    *b += *d;
                }
            }
            if li == 0 {
                break;
            }
            // d h_in = delta · W
            ws.delta_in.clear();
            ws.delta_in.resize(batch * layer.inputs, T::zero());
            T::gemm(
                batch,
                layer.outputs,
                layer.inputs,
                T::one(),
                &ws.delta,
                layer.outputs as isize,
                1,
                &layer.weights,
                layer.inputs as isize,
                1,
                T::zero(),
                &mut ws.delta_in,
                layer.inputs as isize,
                1,
            );
            // Keep the hidden part (the skip-concatenated tail feeds no parameters)
            // and gate it by the previous layer's ReLU.
            let prev_width = self.layers[li - 1].outputs;
            let pre_prev = &ws.pre[li - 1];
            ws.delta.clear();
            for r in 0..batch {
                let row = &ws.delta_in[r * layer.inputs..r * layer.inputs + prev_width];
                let z = &pre_prev[r * prev_width..(r + 1) * prev_width];
                ws.delta.extend(row.iter().zip(z).map(|(&d, &z)| if z > T::zero() { d } else { T::zero() }));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flat_map(Dense::params).all(|v| v.is_finite())
    }

    /// Converts parameters to another scalar type.
    pub fn cast<U: Real>(&self) -> OccupancyModel<U> {
        OccupancyModel {
            config: self.config.clone(),
            frozen_suffix: self.frozen_suffix,
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    inputs: l.inputs,
                    outputs: l.outputs,
                    weights: l.weights.iter().map(|w| U::lit(w.as_f64())).collect(),
                    bias: l.bias.iter().map(|b| U::lit(b.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Logistic function kept strictly inside `(0, 1)` at floating-point saturation.
#[inline]
pub fn sigmoid<T: Real>(z: T) -> T {
    let p = T::one() / (T::one() + (-z).exp());
    if p.is_nan() {
        return p;
    }
    p.max(T::min_positive_value()).min(T::one() - T::epsilon() * T::lit(0.5))
}

pub const CHECKPOINT_FORMAT: &str = "sonocc-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
struct CheckpointFile<T> {
    format: String,
    version: u32,
    scalar: String,
    #[serde(flatten)]
    model: OccupancyModel<T>,
}

/// Serializes a model into the JSON checkpoint layout.
pub fn checkpoint_to_string<T: Real>(model: &OccupancyModel<T>) -> String {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        scalar: T::NAME.into(),
        model: model.clone(),
    };
    serde_json::to_string_pretty(&file).expect("model serializes")
}

pub fn save_checkpoint<T: Real>(model: &OccupancyModel<T>, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(model)).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint, converting parameters to `T` when the stored scalar differs.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<OccupancyModel<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile<f64> = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint {} v{}", file.format, file.version)));
    }
    let model = file.model;
    model.config.validate()?;
    let shapes = model.config.layer_shapes();
    let consistent = shapes.len() == model.layers.len()
        && shapes.iter().zip(&model.layers).all(|(&(i, o), l)| {
            l.inputs == i && l.outputs == o && l.weights.len() == i * o && l.bias.len() == o
        });
    if !consistent || model.frozen_suffix > model.layers.len() {
        return Err(Error::format(path, "layer shapes do not match the stored config"));
    }
    Ok(model.cast())
}
