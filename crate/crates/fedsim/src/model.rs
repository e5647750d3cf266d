//! Dense-feature binary classifier: a small MLP with manual backpropagation,
//! per-sample gradient clipping, Gaussian noising and a local training step
//! that produces a weight delta suitable for federated aggregation.
//!
//! The network is a stack of dense layers with a fixed hidden activation and
//! a single sigmoid output unit trained with binary cross-entropy. The empty
//! hidden stack degenerates to logistic regression.

use std::io::{self, Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("feature vector has length {got}, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("local training requires at least one sample")]
    EmptySampleSet,
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("weight payload malformed: {0}")]
    Malformed(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// Hidden-layer activation, fixed per model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Sigmoid),
            _ => None,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Network shape: input width, hidden widths (possibly empty) and the fixed
/// hidden activation. The output is always one sigmoid unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
}

impl ModelConfig {
    pub fn new(
        input_dim: usize,
        hidden_widths: Vec<usize>,
        activation: Activation,
    ) -> Result<Self, ModelError> {
        let cfg = Self {
            input_dim,
            hidden_widths,
            activation,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 {
            return Err(ModelError::InvalidConfig("input_dim must be >= 1".into()));
        }
        if self.hidden_widths.contains(&0) {
            return Err(ModelError::InvalidConfig(
                "hidden widths must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// (in, out) dimension of each dense layer, ending at the 1-unit output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 1);
        let mut prev = self.input_dim;
        for &w in &self.hidden_widths {
            dims.push((prev, w));
            prev = w;
        }
        dims.push((prev, 1));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(i, o)| i * o + o)
            .sum()
    }
}

/// One dense layer; `weights` is row-major with shape `(out_dim, in_dim)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn affine(&self, input: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (row, o) in out.iter_mut().enumerate() {
            let w = &self.weights[row * self.in_dim..(row + 1) * self.in_dim];
            *o += w.iter().zip(input).map(|(wi, xi)| wi * xi).sum::<f64>();
        }
        out
    }
}

/// Versioned model parameters. The flat layout used by gradients and deltas
/// is layer by layer, each layer's weight matrix row-major followed by its
/// bias vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub layers: Vec<Layer>,
    pub activation: Activation,
    pub version: u64,
}

impl ModelWeights {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            layers: config
                .layer_dims()
                .into_iter()
                .map(|(i, o)| Layer::zeros(i, o))
                .collect(),
            activation: config.activation,
            version: 0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            flat.extend_from_slice(&layer.weights);
            flat.extend_from_slice(&layer.bias);
        }
        flat
    }

    /// Adds `scale * delta` to the parameters, in flat layout order.
    pub fn add_scaled(&mut self, delta: &[f64], scale: f64) {
        debug_assert_eq!(delta.len(), self.param_count());
        let mut offset = 0;
        for layer in &mut self.layers {
            for w in &mut layer.weights {
                *w += scale * delta[offset];
                offset += 1;
            }
            for b in &mut layer.bias {
                *b += scale * delta[offset];
                offset += 1;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Writes the versioned binary form: magic, activation tag, version,
    /// then per layer the dimensions and row-major coefficients as little-
    /// endian f64 bits. Round-trips are bit-exact.
    pub fn write_to<W: Write>(&self, out: &mut W) -> io::Result<()> {
        out.write_all(WEIGHTS_MAGIC)?;
        out.write_all(&[self.activation.tag()])?;
        out.write_all(&self.version.to_le_bytes())?;
        out.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for layer in &self.layers {
            out.write_all(&(layer.in_dim as u32).to_le_bytes())?;
            out.write_all(&(layer.out_dim as u32).to_le_bytes())?;
            for v in layer.weights.iter().chain(&layer.bias) {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("vec write cannot fail");
        buf
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self, ModelError> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != WEIGHTS_MAGIC {
            return Err(ModelError::Malformed("bad magic".into()));
        }
        let mut tag = [0u8; 1];
        input.read_exact(&mut tag)?;
        let activation = Activation::from_tag(tag[0])
            .ok_or_else(|| ModelError::Malformed(format!("unknown activation tag {}", tag[0])))?;
        let version = read_u64(input)?;
        let n_layers = read_u32(input)? as usize;
        if n_layers == 0 || n_layers > 1024 {
            return Err(ModelError::Malformed(format!(
                "implausible layer count {n_layers}"
            )));
        }
        let mut layers = Vec::with_capacity(n_layers);
        let mut expected_in: Option<usize> = None;
        for _ in 0..n_layers {
            let in_dim = read_u32(input)? as usize;
            let out_dim = read_u32(input)? as usize;
            if in_dim == 0 || out_dim == 0 {
                return Err(ModelError::Malformed("zero layer dimension".into()));
            }
            if let Some(prev) = expected_in {
                if prev != in_dim {
                    return Err(ModelError::Malformed(format!(
                        "layer input {in_dim} does not chain from previous output {prev}"
                    )));
                }
            }
            expected_in = Some(out_dim);
            let mut weights = vec![0.0; in_dim * out_dim];
            for w in &mut weights {
                *w = read_f64(input)?;
            }
            let mut bias = vec![0.0; out_dim];
            for b in &mut bias {
                *b = read_f64(input)?;
            }
            layers.push(Layer {
                in_dim,
                out_dim,
                weights,
                bias,
            });
        }
        if expected_in != Some(1) {
            return Err(ModelError::Malformed("final layer must have one output".into()));
        }
        Ok(Self {
            layers,
            activation,
            version,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut cursor = bytes;
        let weights = Self::read_from(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(ModelError::Malformed("trailing bytes".into()));
        }
        Ok(weights)
    }
}

const WEIGHTS_MAGIC: &[u8; 4] = b"FWV1";

fn read_u32<R: Read>(input: &mut R) -> Result<u32, ModelError> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64, ModelError> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64<R: Read>(input: &mut R) -> Result<f64, ModelError> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(f64::from_bits(u64::from_le_bytes(buf)))
}

/// One labeled training example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: u8,
}

impl Sample {
    pub fn new(features: Vec<f64>, label: u8) -> Result<Self, ModelError> {
        if label > 1 {
            return Err(ModelError::InvalidSample(format!(
                "label must be 0 or 1, got {label}"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidSample("non-finite feature".into()));
        }
        Ok(Self { features, label })
    }
}

/// Local-training hyperparameters, including the clipping bound and the
/// noise multiplier used for on-device differential privacy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub local_steps: usize,
    pub batch_size: usize,
}

impl TrainHyper {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(ModelError::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.clip_norm <= 0.0 || !self.clip_norm.is_finite() {
            return Err(ModelError::InvalidConfig("clip_norm must be > 0".into()));
        }
        if self.noise_multiplier < 0.0 || !self.noise_multiplier.is_finite() {
            return Err(ModelError::InvalidConfig(
                "noise_multiplier must be >= 0".into(),
            ));
        }
        if self.local_steps == 0 {
            return Err(ModelError::InvalidConfig("local_steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ModelError::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// A device's training result: the weight delta, how many samples produced
/// it, and the snapshot version it was computed against. Carries no device
/// identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientUpdate {
    pub delta: Vec<f64>,
    pub sample_weight: u64,
    pub base_version: u64,
}

impl GradientUpdate {
    pub fn is_finite(&self) -> bool {
        self.delta.iter().all(|v| v.is_finite())
    }
}

/// Deterministic initialization: each layer uniform in
/// `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`, version 0.
pub fn init_weights<R: Rng>(config: &ModelConfig, rng: &mut R) -> ModelWeights {
    let mut layers = Vec::new();
    for (in_dim, out_dim) in config.layer_dims() {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = (0..out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        layers.push(Layer {
            in_dim,
            out_dim,
            weights,
            bias,
        });
    }
    ModelWeights {
        layers,
        activation: config.activation,
        version: 0,
    }
}

struct ForwardTrace {
    /// Pre-activations per layer.
    zs: Vec<Vec<f64>>,
    /// Post-activation outputs per layer; last entry is the sigmoid score.
    outputs: Vec<Vec<f64>>,
}

fn forward_trace(weights: &ModelWeights, features: &[f64]) -> Result<ForwardTrace, ModelError> {
    let expected = weights.input_dim();
    if features.len() != expected {
        return Err(ModelError::DimensionMismatch {
            expected,
            got: features.len(),
        });
    }
    let n = weights.layers.len();
    let mut zs = Vec::with_capacity(n);
    let mut outputs = Vec::with_capacity(n);
    let mut current = features.to_vec();
    for (idx, layer) in weights.layers.iter().enumerate() {
        let z = layer.affine(&current);
        let out: Vec<f64> = if idx + 1 == n {
            z.iter().map(|&v| sigmoid(v)).collect()
        } else {
            z.iter().map(|&v| weights.activation.apply(v)).collect()
        };
        if out.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("forward pass"));
        }
        zs.push(z);
        current = out.clone();
        outputs.push(out);
    }
    Ok(ForwardTrace { zs, outputs })
}

/// Scores a feature vector; the output is the sigmoid of the final unit.
pub fn forward(weights: &ModelWeights, features: &[f64]) -> Result<f64, ModelError> {
    let trace = forward_trace(weights, features)?;
    Ok(trace.outputs.last().expect("at least one layer")[0])
}

/// Clamp applied to the score before the logarithm in the loss.
pub const SCORE_CLAMP: f64 = 1e-7;

/// Binary cross-entropy of a score against a 0/1 label, with the score
/// clamped away from 0 and 1 so the logarithm stays finite.
pub fn bce_loss(score: f64, label: u8) -> f64 {
    let p = score.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Loss and exact analytic gradient for one sample, in flat layout.
pub fn loss_and_grad(
    weights: &ModelWeights,
    sample: &Sample,
) -> Result<(f64, Vec<f64>), ModelError> {
    let trace = forward_trace(weights, &sample.features)?;
    let n = weights.layers.len();
    let score = trace.outputs[n - 1][0];
    let loss = bce_loss(score, sample.label);
    if !loss.is_finite() {
        return Err(ModelError::NonFinite("loss"));
    }

    // Output delta of BCE composed with sigmoid.
    let mut delta = vec![score - f64::from(sample.label)];
    let mut layer_grads: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(n);
    for idx in (0..n).rev() {
        let layer = &weights.layers[idx];
        let input: &[f64] = if idx == 0 {
            &sample.features
        } else {
            &trace.outputs[idx - 1]
        };
        let mut grad_w = vec![0.0; layer.weights.len()];
        for (row, &d) in delta.iter().enumerate() {
            for (col, &x) in input.iter().enumerate() {
                grad_w[row * layer.in_dim + col] = d * x;
            }
        }
        layer_grads.push((grad_w, delta.clone()));
        if idx > 0 {
            let prev_z = &trace.zs[idx - 1];
            let mut prev_delta = vec![0.0; layer.in_dim];
            for (col, pd) in prev_delta.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (row, &d) in delta.iter().enumerate() {
                    acc += d * layer.weights[row * layer.in_dim + col];
                }
                *pd = acc * weights.activation.derivative(prev_z[col]);
            }
            delta = prev_delta;
        }
    }
    layer_grads.reverse();

    let mut flat = Vec::with_capacity(weights.param_count());
    for (grad_w, grad_b) in layer_grads {
        flat.extend(grad_w);
        flat.extend(grad_b);
    }
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("gradient"));
    }
    Ok((loss, flat))
}

/// `grad * min(1, clip_norm / ||grad||_2)`: the L2 norm of the result never
/// exceeds `clip_norm` and the direction is preserved.
pub fn clip_gradient(grad: &[f64], clip_norm: f64) -> Vec<f64> {
    let norm = l2_norm(grad);
    if norm <= clip_norm || norm == 0.0 {
        return grad.to_vec();
    }
    let scale = clip_norm / norm;
    grad.iter().map(|g| g * scale).collect()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean of the clipped per-sample gradients of a batch. Bounded-sensitivity
/// building block: replacing one sample moves the result by at most
/// `2 * clip_norm / batch_len` in L2.
pub fn averaged_clipped_gradient(
    weights: &ModelWeights,
    batch: &[&Sample],
    clip_norm: f64,
) -> Result<Vec<f64>, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptySampleSet);
    }
    let mut acc = vec![0.0; weights.param_count()];
    for sample in batch {
        let (_, grad) = loss_and_grad(weights, sample)?;
        let clipped = clip_gradient(&grad, clip_norm);
        for (a, g) in acc.iter_mut().zip(&clipped) {
            *a += g;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for a in &mut acc {
        *a *= inv;
    }
    Ok(acc)
}

/// Runs `local_steps` mini-batch steps of clipped SGD starting from the
/// given snapshot and returns the resulting weight delta.
///
/// When `noise_on_device` is set, per-coordinate Gaussian noise with
/// standard deviation `noise_multiplier * clip_norm / batch_len` is added to
/// each step's averaged gradient before the step is applied. Batches are
/// drawn by sequential deterministic shuffling from the provided stream.
pub fn local_train<R: Rng>(
    weights: &ModelWeights,
    samples: &[Sample],
    hyper: &TrainHyper,
    noise_on_device: bool,
    rng: &mut R,
) -> Result<GradientUpdate, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::EmptySampleSet);
    }
    hyper.validate()?;

    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n; // forces a shuffle before the first batch
    let batch_len = hyper.batch_size.min(n);
    let mut current = weights.clone();

    for _ in 0..hyper.local_steps {
        let mut batch = Vec::with_capacity(batch_len);
        for _ in 0..batch_len {
            if cursor == n {
                order.shuffle(rng);
                cursor = 0;
            }
            batch.push(&samples[order[cursor]]);
            cursor += 1;
        }
        let mut grad = averaged_clipped_gradient(&current, &batch, hyper.clip_norm)?;
        if noise_on_device && hyper.noise_multiplier > 0.0 {
            let std = hyper.noise_multiplier * hyper.clip_norm / batch_len as f64;
            let normal = Normal::new(0.0, std).expect("finite std");
            for g in &mut grad {
                *g += normal.sample(rng);
            }
        }
        current.add_scaled(&grad, -hyper.learning_rate);
    }

    let initial = weights.flatten();
    let delta: Vec<f64> = current
        .flatten()
        .iter()
        .zip(&initial)
        .map(|(after, before)| after - before)
        .collect();
    Ok(GradientUpdate {
        delta,
        sample_weight: n as u64,
        base_version: weights.version,
    })
}
