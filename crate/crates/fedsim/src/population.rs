//! Server-side joiner, the synthetic fleet generator that makes desk-scale
//! experiments possible, and the centrally trained reference oracle.
//!
//! The data-generating process is logistic over the un-normalized features:
//! the Bayes boundary is unaffected by normalization, so the normalization
//! experiment measures optimization behavior, not a moved target. Dual-
//! origin features carry observation noise on the server copy while the
//! device signal is exact, so device overrides genuinely help.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::auc_from_scores;
use crate::analytics::ValueRange;
use crate::device::{DeviceSample, DeviceState, NetworkClass, StoreKey};
use crate::model::{
    bce_loss, forward, init_weights, loss_and_grad, sigmoid, ModelConfig, ModelError, Sample,
};
use crate::rng::{stream, SimRng};
use crate::schema::{FeatureDescriptor, FeatureOrigin, FeatureSchema, SchemaError};
use crate::transform::{apply_transform, TransformSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid population config: {0}")]
    InvalidConfig(String),
    #[error("duplicate label for example id {0}")]
    DuplicateLabel(u64),
    #[error("duplicate feature record for example id {0}")]
    DuplicateFeature(u64),
    #[error("rejection budget exceeded: cannot reach positive rate {target} with this ground truth")]
    RejectionBudgetExceeded { target: f64 },
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    ServerEvent,
    HumanRater,
    DeviceEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub example_id: u64,
    pub label: u8,
    pub source: LabelSource,
}

/// Server-visible feature values for one example; device-origin features
/// are structurally absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerFeatureRecord {
    pub example_id: u64,
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinedExample {
    pub example_id: u64,
    pub values: BTreeMap<String, f64>,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinOutput {
    pub joined: Vec<JoinedExample>,
    pub unmatched_features: u64,
    pub unmatched_labels: u64,
}

/// Inner join of feature records and labels on example id. Duplicates are
/// rejected; unmatched records on either side are counted, not dropped
/// silently, so funnel-style accounting can pick them up.
pub fn join(
    features: &[ServerFeatureRecord],
    labels: &[LabelRecord],
) -> Result<JoinOutput, DataError> {
    let mut by_id: BTreeMap<u64, &ServerFeatureRecord> = BTreeMap::new();
    for record in features {
        if by_id.insert(record.example_id, record).is_some() {
            return Err(DataError::DuplicateFeature(record.example_id));
        }
    }
    let mut label_ids: BTreeMap<u64, &LabelRecord> = BTreeMap::new();
    for label in labels {
        if label_ids.insert(label.example_id, label).is_some() {
            return Err(DataError::DuplicateLabel(label.example_id));
        }
    }
    let mut joined = Vec::new();
    let mut unmatched_labels = 0;
    for (id, label) in &label_ids {
        match by_id.get(id) {
            Some(record) => joined.push(JoinedExample {
                example_id: *id,
                values: record.values.clone(),
                label: label.label,
            }),
            None => unmatched_labels += 1,
        }
    }
    let unmatched_features = features
        .iter()
        .filter(|r| !label_ids.contains_key(&r.example_id))
        .count() as u64;
    Ok(JoinOutput {
        joined,
        unmatched_features,
        unmatched_labels,
    })
}

/// Logistic data-generating process over un-normalized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub weights: Vec<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationConfig {
    pub device_count: usize,
    /// Local samples per device; one is the common case.
    pub samples_per_device: usize,
    /// Target positive-label rate, reached by rejection.
    pub positive_rate: f64,
    /// Ratio between the largest and smallest feature scale.
    pub scale_disparity: f64,
    /// Observation-noise scale on the server copy of dual-origin features,
    /// relative to the feature scale. The device signal is exact.
    pub device_noise: f64,
    pub ground_truth: GroundTruth,
    pub seed: u64,
}

impl PopulationConfig {
    pub fn feature_count(&self) -> usize {
        self.ground_truth.weights.len()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.device_count == 0 {
            return Err(DataError::InvalidConfig("device_count must be >= 1".into()));
        }
        if self.samples_per_device == 0 {
            return Err(DataError::InvalidConfig(
                "samples_per_device must be >= 1".into(),
            ));
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return Err(DataError::InvalidConfig(
                "positive_rate must be in (0, 1)".into(),
            ));
        }
        if self.scale_disparity < 1.0 || !self.scale_disparity.is_finite() {
            return Err(DataError::InvalidConfig(
                "scale_disparity must be >= 1".into(),
            ));
        }
        if self.device_noise < 0.0 || !self.device_noise.is_finite() {
            return Err(DataError::InvalidConfig("device_noise must be >= 0".into()));
        }
        if self.ground_truth.weights.is_empty() {
            return Err(DataError::InvalidConfig(
                "ground truth needs at least one weight".into(),
            ));
        }
        Ok(())
    }
}

/// Feature scales spread geometrically from 1 up to `disparity`.
pub fn feature_scales(feature_count: usize, disparity: f64) -> Vec<f64> {
    if feature_count <= 1 {
        return vec![1.0; feature_count];
    }
    (0..feature_count)
        .map(|i| disparity.powf(i as f64 / (feature_count - 1) as f64))
        .collect()
}

/// Ground truth whose per-feature contribution to the logit is scale-free:
/// `w_i = sign_i * strength / scale_i`, alternating signs. Every feature
/// carries equal signal regardless of the declared disparity.
pub fn balanced_ground_truth(feature_count: usize, disparity: f64, strength: f64) -> GroundTruth {
    let scales = feature_scales(feature_count, disparity);
    GroundTruth {
        weights: scales
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                sign * strength / s
            })
            .collect(),
        bias: 0.0,
    }
}

/// The generated fleet plus the server-side view of it.
#[derive(Debug, Clone)]
pub struct Population {
    pub schema: FeatureSchema,
    pub devices: Vec<DeviceState>,
    pub server_records: Vec<ServerFeatureRecord>,
    pub labels: Vec<LabelRecord>,
}

impl Population {
    /// True positive rate of the generated labels (oracle track).
    pub fn exact_positive_rate(&self) -> f64 {
        let positives = self.labels.iter().filter(|l| l.label == 1).count();
        positives as f64 / self.labels.len() as f64
    }

    /// Un-normalized, origin-resolved feature vectors per device, through
    /// the same base transform devices use. Oracle-track input for the
    /// central baseline.
    pub fn raw_device_samples(&self) -> Vec<Vec<Sample>> {
        let spec = TransformSpec::base_for(&self.schema, 0);
        self.devices
            .iter()
            .map(|device| {
                device
                    .samples
                    .iter()
                    .map(|s| {
                        let out = apply_transform(
                            &spec,
                            &self.schema,
                            &s.server_features,
                            &s.device_signals,
                        );
                        Sample {
                            features: out.features,
                            label: s.label,
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

fn feature_name(i: usize) -> String {
    format!("f{i:02}")
}

fn build_schema(config: &PopulationConfig) -> Result<FeatureSchema, SchemaError> {
    let scales = feature_scales(config.feature_count(), config.scale_disparity);
    let features = scales
        .iter()
        .enumerate()
        .map(|(i, &s)| FeatureDescriptor {
            name: feature_name(i),
            origin: match i % 3 {
                0 => FeatureOrigin::Server,
                1 => FeatureOrigin::Both,
                _ => FeatureOrigin::Device,
            },
            range: ValueRange::new(-s, s).expect("positive scale"),
        })
        .collect();
    FeatureSchema::new(features)
}

struct Candidate {
    true_values: Vec<f64>,
    label: u8,
}

fn draw_candidate(
    config: &PopulationConfig,
    scales: &[f64],
    rng: &mut SimRng,
) -> Candidate {
    let true_values: Vec<f64> = scales.iter().map(|&s| rng.random_range(-s..s)).collect();
    let logit: f64 = config
        .ground_truth
        .weights
        .iter()
        .zip(&true_values)
        .map(|(w, x)| w * x)
        .sum::<f64>()
        + config.ground_truth.bias;
    let label = u8::from(rng.random_bool(sigmoid(logit).clamp(0.0, 1.0)));
    Candidate { true_values, label }
}

/// Generates the fleet: features from the scale profile, labels from the
/// ground-truth logistic model rebalanced by rejection to the configured
/// rate, dual-origin server copies perturbed by observation noise, and
/// device resources for the eligibility checks. Deterministic per seed.
pub fn generate_population(config: &PopulationConfig) -> Result<Population, DataError> {
    config.validate()?;
    let schema = build_schema(config)?;
    let scales = feature_scales(config.feature_count(), config.scale_disparity);
    let mut rng = stream(config.seed, "population");

    let total = config.device_count * config.samples_per_device;
    let mut positives_left = (config.positive_rate * total as f64).round() as usize;
    let mut negatives_left = total - positives_left;
    if positives_left == 0 || negatives_left == 0 {
        return Err(DataError::InvalidConfig(
            "positive_rate leaves one class empty at this population size".into(),
        ));
    }

    let budget = total.saturating_mul(1000);
    let mut attempts = 0usize;
    let mut accepted: Vec<Candidate> = Vec::with_capacity(total);
    while accepted.len() < total {
        attempts += 1;
        if attempts > budget {
            return Err(DataError::RejectionBudgetExceeded {
                target: config.positive_rate,
            });
        }
        let candidate = draw_candidate(config, &scales, &mut rng);
        let quota = if candidate.label == 1 {
            &mut positives_left
        } else {
            &mut negatives_left
        };
        if *quota > 0 {
            *quota -= 1;
            accepted.push(candidate);
        }
    }

    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut server_records = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    let mut all_samples = Vec::with_capacity(total);
    for (example_id, candidate) in accepted.iter().enumerate() {
        let example_id = example_id as u64;
        let mut server_values = BTreeMap::new();
        let mut device_signals = BTreeMap::new();
        for (i, descriptor) in schema.features().iter().enumerate() {
            let x = candidate.true_values[i];
            match descriptor.origin {
                FeatureOrigin::Server => {
                    server_values.insert(descriptor.name.clone(), x);
                }
                FeatureOrigin::Both => {
                    let observed = x + config.device_noise * scales[i] * noise.sample(&mut rng);
                    server_values.insert(descriptor.name.clone(), observed);
                    device_signals.insert(descriptor.name.clone(), x);
                }
                FeatureOrigin::Device => {
                    device_signals.insert(descriptor.name.clone(), x);
                }
            }
        }
        server_records.push(ServerFeatureRecord {
            example_id,
            values: server_values.clone(),
        });
        labels.push(LabelRecord {
            example_id,
            label: candidate.label,
            source: LabelSource::ServerEvent,
        });
        all_samples.push(DeviceSample {
            example_id,
            server_features: server_values,
            device_signals,
            label: candidate.label,
        });
    }

    let mut devices = Vec::with_capacity(config.device_count);
    for (device_idx, chunk) in all_samples.chunks(config.samples_per_device).enumerate() {
        let mut device = DeviceState::new(device_idx as u64, StoreKey(rng.random()));
        device.battery = rng.random_range(0.05..1.0);
        device.network = match rng.random_range(0..100) {
            0..70 => NetworkClass::Unmetered,
            70..95 => NetworkClass::Metered,
            _ => NetworkClass::Offline,
        };
        device.idle = rng.random_bool(0.8);
        device.free_storage = rng.random_range(50_000_000..5_000_000_000);
        device.app_version = match rng.random_range(0..100) {
            0..10 => 2,
            10..40 => 3,
            _ => 4,
        };
        device.age_ticks = rng.random_range(0..500);
        device.samples = chunk.to_vec();
        devices.push(device);
    }

    Ok(Population {
        schema,
        devices,
        server_records,
        labels,
    })
}

/// One device's replayable state: resources plus local samples, without
/// the simulation-internal identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceFixture {
    pub battery: f64,
    pub network: NetworkClass,
    pub idle: bool,
    pub free_storage: u64,
    pub app_version: u32,
    pub age_ticks: u64,
    pub samples: Vec<DeviceSample>,
}

/// The materialized population in a documented structured-text form, so a
/// generated fleet can be replayed and shared across implementations
/// without depending on this generator's RNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationFixture {
    pub schema: FeatureSchema,
    pub devices: Vec<DeviceFixture>,
    pub server_records: Vec<ServerFeatureRecord>,
    pub labels: Vec<LabelRecord>,
}

impl Population {
    pub fn to_fixture(&self) -> PopulationFixture {
        PopulationFixture {
            schema: self.schema.clone(),
            devices: self
                .devices
                .iter()
                .map(|d| DeviceFixture {
                    battery: d.battery,
                    network: d.network,
                    idle: d.idle,
                    free_storage: d.free_storage,
                    app_version: d.app_version,
                    age_ticks: d.age_ticks,
                    samples: d.samples.clone(),
                })
                .collect(),
            server_records: self.server_records.clone(),
            labels: self.labels.clone(),
        }
    }

    /// Rebuilds a fleet from a fixture. Simulation-internal ids and store
    /// keys are re-derived from the device index; neither affects any
    /// simulation output.
    pub fn from_fixture(fixture: PopulationFixture) -> Self {
        let devices = fixture
            .devices
            .into_iter()
            .enumerate()
            .map(|(idx, f)| {
                let mut device = DeviceState::new(idx as u64, StoreKey(idx as u128 + 1));
                device.battery = f.battery;
                device.network = f.network;
                device.idle = f.idle;
                device.free_storage = f.free_storage;
                device.app_version = f.app_version;
                device.age_ticks = f.age_ticks;
                device.samples = f.samples;
                device
            })
            .collect();
        Self {
            schema: fixture.schema,
            devices,
            server_records: fixture.server_records,
            labels: fixture.labels,
        }
    }
}

/// Reference metrics from conventional centralized training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub auc: f64,
    pub accuracy: f64,
    pub loss: f64,
    pub train_size: u64,
    pub eval_size: u64,
}

/// Trains the same MLP centrally with full data visibility: exact global
/// normalization, exact class balancing, plain mini-batch SGD. This is the
/// comparison ceiling for the federated runs, not part of the private
/// pipeline.
pub fn central_baseline(
    train_raw: &[Sample],
    eval_raw: &[Sample],
    model: &ModelConfig,
    learning_rate: f64,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<BaselineReport, ModelError> {
    if train_raw.is_empty() || eval_raw.is_empty() {
        return Err(ModelError::EmptySampleSet);
    }
    let dim = model.input_dim;

    // Exact global normalization from the training split.
    let n = train_raw.len() as f64;
    let mut mean = vec![0.0; dim];
    let mut second = vec![0.0; dim];
    for sample in train_raw {
        for (i, &x) in sample.features.iter().enumerate() {
            mean[i] += x;
            second[i] += x * x;
        }
    }
    let mut std_dev = vec![0.0; dim];
    for i in 0..dim {
        mean[i] /= n;
        std_dev[i] = (second[i] / n - mean[i] * mean[i]).max(0.0).sqrt();
    }
    let normalize = |sample: &Sample| -> Sample {
        Sample {
            features: sample
                .features
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    if std_dev[i] == 0.0 {
                        0.0
                    } else {
                        (x - mean[i]) / std_dev[i]
                    }
                })
                .collect(),
            label: sample.label,
        }
    };

    // Exact balancing: subsample the majority class to the minority count.
    let mut rng = stream(seed, "baseline");
    let mut positives: Vec<Sample> = train_raw
        .iter()
        .filter(|s| s.label == 1)
        .map(&normalize)
        .collect();
    let mut negatives: Vec<Sample> = train_raw
        .iter()
        .filter(|s| s.label == 0)
        .map(&normalize)
        .collect();
    positives.shuffle(&mut rng);
    negatives.shuffle(&mut rng);
    let keep = positives.len().min(negatives.len()).max(1);
    positives.truncate(keep);
    negatives.truncate(keep);
    let mut train: Vec<Sample> = positives.into_iter().chain(negatives).collect();
    train.shuffle(&mut rng);

    let mut weights = init_weights(model, &mut stream(seed, "baseline-init"));
    let batch = batch_size.max(1).min(train.len());
    for _ in 0..epochs {
        train.shuffle(&mut rng);
        for chunk in train.chunks(batch) {
            let mut grad = vec![0.0; weights.param_count()];
            for sample in chunk {
                let (_, g) = loss_and_grad(&weights, sample)?;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            for g in &mut grad {
                *g *= inv;
            }
            weights.add_scaled(&grad, -learning_rate);
        }
    }

    let mut scored = Vec::with_capacity(eval_raw.len());
    let mut loss = 0.0;
    let mut correct = 0u64;
    for sample in eval_raw {
        let normalized = normalize(sample);
        let score = forward(&weights, &normalized.features)?;
        loss += bce_loss(score, sample.label);
        if (score >= 0.5) == (sample.label == 1) {
            correct += 1;
        }
        scored.push((score, sample.label));
    }
    Ok(BaselineReport {
        auc: auc_from_scores(&scored),
        accuracy: correct as f64 / eval_raw.len() as f64,
        loss: loss / eval_raw.len() as f64,
        train_size: train.len() as u64,
        eval_size: eval_raw.len() as u64,
    })
}
