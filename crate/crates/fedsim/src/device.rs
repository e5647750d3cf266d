//! Simulated on-device stack: the orchestrator (eligibility checks,
//! submission control, session logging), the sealed local store, the
//! training-session pipeline and the inference path.
//!
//! A device's identity exists only inside the simulation. Nothing this
//! module exports off-device — gradient updates, bit reports, eval reports,
//! funnel events — has a field for it, and [`DeviceState`] itself is not
//! serializable.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::LabelStats;
use crate::funnel::{new_session_id, FunnelError, FunnelSink, ReasonCode, SessionId, StepStatus};
use crate::model::{forward, local_train, GradientUpdate, ModelWeights, Sample, TrainHyper};
use crate::schema::FeatureSchema;
use crate::transform::{apply_transform, StepIssue, TransformSpec};

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("no model stored on device")]
    MissingModel,
    #[error("stored model is corrupt: {0}")]
    CorruptModel(String),
    #[error("stored model version {found} does not match required version {required}")]
    StaleModel { found: u64, required: u64 },
    #[error("local store: {0}")]
    Store(#[from] StoreError),
    #[error("funnel: {0}")]
    Funnel(#[from] FunnelError),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StoreError {
    #[error("store key does not match; record is sealed")]
    WrongKey,
    #[error("no record named {0:?}")]
    Missing(String),
}

/// Device-held key for the sealed store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreKey(pub u128);

/// Encrypted-at-rest storage stand-in: a sealed keyed container that
/// refuses reads and writes without the device-held key. The trust-boundary
/// behavior is what the simulation exercises, not a cipher.
#[derive(Debug, Clone, Default)]
pub struct LocalStore {
    seal: Option<u128>,
    records: BTreeMap<String, Vec<u8>>,
}

impl LocalStore {
    pub fn sealed_with(key: StoreKey) -> Self {
        Self {
            seal: Some(key.0),
            records: BTreeMap::new(),
        }
    }

    fn check(&self, key: StoreKey) -> Result<(), StoreError> {
        match self.seal {
            Some(seal) if seal == key.0 => Ok(()),
            _ => Err(StoreError::WrongKey),
        }
    }

    pub fn put(&mut self, key: StoreKey, name: &str, bytes: Vec<u8>) -> Result<(), StoreError> {
        self.check(key)?;
        self.records.insert(name.to_string(), bytes);
        Ok(())
    }

    pub fn get(&self, key: StoreKey, name: &str) -> Result<&[u8], StoreError> {
        self.check(key)?;
        self.records
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| StoreError::Missing(name.to_string()))
    }

    pub fn remove(&mut self, key: StoreKey, name: &str) -> Result<(), StoreError> {
        self.check(key)?;
        self.records.remove(name);
        Ok(())
    }
}

pub const MODEL_RECORD: &str = "model";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkClass {
    Offline,
    Metered,
    Unmetered,
}

impl NetworkClass {
    fn rank(self) -> u8 {
        match self {
            NetworkClass::Offline => 0,
            NetworkClass::Metered => 1,
            NetworkClass::Unmetered => 2,
        }
    }
}

/// One locally held example: the served feature values, the device's own
/// signals and the label. Serializable only for population fixtures; it is
/// never part of an off-device record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSample {
    pub example_id: u64,
    pub server_features: BTreeMap<String, f64>,
    pub device_signals: BTreeMap<String, f64>,
    pub label: u8,
}

/// Simulated device. The id is simulation-internal only; the struct is
/// deliberately not serializable so it can never leak into an export.
#[derive(Debug, Clone)]
pub struct DeviceState {
    id: u64,
    pub battery: f64,
    pub network: NetworkClass,
    pub idle: bool,
    pub free_storage: u64,
    pub app_version: u32,
    /// Ticks since the device started accumulating signals.
    pub age_ticks: u64,
    pub samples: Vec<DeviceSample>,
    pub store: LocalStore,
    store_key: StoreKey,
}

impl DeviceState {
    pub fn new(id: u64, store_key: StoreKey) -> Self {
        Self {
            id,
            battery: 1.0,
            network: NetworkClass::Unmetered,
            idle: true,
            free_storage: u64::MAX,
            app_version: u32::MAX,
            age_ticks: u64::MAX,
            samples: Vec::new(),
            store: LocalStore::sealed_with(store_key),
            store_key,
        }
    }

    /// Simulation-internal index; never exported.
    pub fn sim_id(&self) -> u64 {
        self.id
    }

    pub fn store_key(&self) -> StoreKey {
        self.store_key
    }

    /// Installs a fetched model binary into the sealed store.
    pub fn install_model(&mut self, weights: &ModelWeights) {
        let key = self.store_key;
        self.store
            .put(key, MODEL_RECORD, weights.to_bytes())
            .expect("device holds its own key");
    }
}

/// Thresholds a device must pass before participating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EligibilityCriteria {
    pub min_battery: f64,
    pub required_network: NetworkClass,
    pub require_idle: bool,
    pub min_free_storage: u64,
    pub min_app_version: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IneligibleReason {
    Battery,
    Network,
    Idle,
    Storage,
    AppVersion,
}

impl IneligibleReason {
    pub fn funnel_code(self) -> ReasonCode {
        match self {
            IneligibleReason::Battery => ReasonCode::LowBattery,
            IneligibleReason::Network => ReasonCode::NetworkClass,
            IneligibleReason::Idle => ReasonCode::NotIdle,
            IneligibleReason::Storage => ReasonCode::LowStorage,
            IneligibleReason::AppVersion => ReasonCode::AppVersion,
        }
    }
}

/// Checks every criterion in a fixed order (battery, network, idle,
/// storage, app version) and names the first failure.
pub fn check_eligibility(
    device: &DeviceState,
    criteria: &EligibilityCriteria,
) -> Result<(), IneligibleReason> {
    if device.battery < criteria.min_battery {
        return Err(IneligibleReason::Battery);
    }
    if device.network.rank() < criteria.required_network.rank() {
        return Err(IneligibleReason::Network);
    }
    if criteria.require_idle && !device.idle {
        return Err(IneligibleReason::Idle);
    }
    if device.free_storage < criteria.min_free_storage {
        return Err(IneligibleReason::Storage);
    }
    if device.app_version < criteria.min_app_version {
        return Err(IneligibleReason::AppVersion);
    }
    Ok(())
}

/// Per-class coin flip against the published keep-probability.
pub fn decide_submission<R: Rng>(label: u8, policy: &LabelStats, rng: &mut R) -> bool {
    let keep = if label == 1 {
        policy.keep_pos
    } else {
        policy.keep_neg
    };
    rng.random_bool(keep.clamp(0.0, 1.0))
}

/// The training pipeline's phases, in funnel order (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TrainingPhase {
    Eligibility = 1,
    DataReady = 2,
    Transformed = 3,
    SubmissionDecision = 4,
    Trained = 5,
    Uploaded = 6,
}

impl TrainingPhase {
    pub const ALL: [TrainingPhase; 6] = [
        TrainingPhase::Eligibility,
        TrainingPhase::DataReady,
        TrainingPhase::Transformed,
        TrainingPhase::SubmissionDecision,
        TrainingPhase::Trained,
        TrainingPhase::Uploaded,
    ];

    pub fn ordinal(self) -> u16 {
        self as u16
    }
}

/// Injected mid-session faults: the phase at which the simulated failure
/// strikes and the reason it is logged with.
#[derive(Debug, Clone, Copy, Default)]
pub struct SessionFaults {
    pub fail_at: Option<(TrainingPhase, ReasonCode)>,
}

impl SessionFaults {
    pub fn none() -> Self {
        Self::default()
    }

    fn hits(&self, phase: TrainingPhase) -> Option<ReasonCode> {
        match self.fail_at {
            Some((p, reason)) if p == phase => Some(reason),
            _ => None,
        }
    }
}

/// The record server-side metadata serving pushes to devices before a
/// session: what to check, which model and transform versions to use, the
/// current keep-probabilities and the declared purpose of the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataHandshake {
    pub eligibility: EligibilityCriteria,
    pub model_version: u64,
    pub transform_spec_version: u32,
    pub keep_pos: f64,
    pub keep_neg: f64,
    pub purpose: String,
}

impl MetadataHandshake {
    pub fn new(
        eligibility: EligibilityCriteria,
        model_version: u64,
        transform_spec_version: u32,
        policy: &LabelStats,
        purpose: impl Into<String>,
    ) -> Self {
        Self {
            eligibility,
            model_version,
            transform_spec_version,
            keep_pos: policy.keep_pos,
            keep_neg: policy.keep_neg,
            purpose: purpose.into(),
        }
    }
}

/// Everything the metadata handshake and round snapshot give a session.
pub struct SessionContext<'a> {
    pub use_case: &'a str,
    pub criteria: &'a EligibilityCriteria,
    pub schema: &'a FeatureSchema,
    pub spec: &'a TransformSpec,
    pub policy: &'a LabelStats,
    pub hyper: &'a TrainHyper,
    pub snapshot: &'a ModelWeights,
    pub noise_on_device: bool,
    pub warmup_ticks: u64,
    pub now: u64,
}

#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub session: SessionId,
    /// Present only when the whole pipeline succeeded.
    pub update: Option<GradientUpdate>,
    /// Labels of the samples that survived the submission decision.
    pub submitted_labels: Vec<u8>,
    /// Transformed feature vectors, for the oracle track and equivalence
    /// tests.
    pub transformed: Vec<Vec<f64>>,
    pub transform_issues: Vec<StepIssue>,
    /// Phase the session stopped at, if it did not complete.
    pub failed_at: Option<TrainingPhase>,
}

/// Runs one device through the training pipeline, emitting exactly one
/// funnel event per phase reached: eligibility, data-ready, transformed,
/// submission-decision, trained, uploaded. Any failure logs the phase with
/// its reason code and terminates the session; faults surface as step
/// failures, never as errors.
pub fn run_training_session<R: Rng>(
    device: &DeviceState,
    ctx: &SessionContext<'_>,
    faults: &SessionFaults,
    sink: &FunnelSink,
    rng: &mut R,
) -> Result<SessionOutcome, FunnelError> {
    let session = new_session_id(rng);
    let mut outcome = SessionOutcome {
        session,
        update: None,
        submitted_labels: Vec::new(),
        transformed: Vec::new(),
        transform_issues: Vec::new(),
        failed_at: None,
    };

    let log = |phase: TrainingPhase, status: StepStatus| -> Result<(), FunnelError> {
        sink.log_step(session, ctx.use_case, phase.ordinal(), 1, status, ctx.now)
    };
    let fail = |outcome: &mut SessionOutcome,
                    phase: TrainingPhase,
                    reason: ReasonCode|
     -> Result<SessionOutcome, FunnelError> {
        sink.log_step(
            session,
            ctx.use_case,
            phase.ordinal(),
            1,
            StepStatus::Failure(reason),
            ctx.now,
        )?;
        outcome.failed_at = Some(phase);
        Ok(outcome.clone())
    };

    // Phase 1: eligibility.
    if let Some(reason) = faults.hits(TrainingPhase::Eligibility) {
        return fail(&mut outcome, TrainingPhase::Eligibility, reason);
    }
    if let Err(reason) = check_eligibility(device, ctx.criteria) {
        return fail(&mut outcome, TrainingPhase::Eligibility, reason.funnel_code());
    }
    log(TrainingPhase::Eligibility, StepStatus::Success)?;

    // Phase 2: data-ready (warm-up elapsed and local samples exist).
    if let Some(reason) = faults.hits(TrainingPhase::DataReady) {
        return fail(&mut outcome, TrainingPhase::DataReady, reason);
    }
    if device.age_ticks < ctx.warmup_ticks {
        return fail(&mut outcome, TrainingPhase::DataReady, ReasonCode::WarmingUp);
    }
    if device.samples.is_empty() {
        return fail(&mut outcome, TrainingPhase::DataReady, ReasonCode::NoLocalData);
    }
    log(TrainingPhase::DataReady, StepStatus::Success)?;

    // Phase 3: feature transformation. Missing-operand fallbacks are
    // recorded as issues, not failures; the pipeline continues.
    if let Some(reason) = faults.hits(TrainingPhase::Transformed) {
        return fail(&mut outcome, TrainingPhase::Transformed, reason);
    }
    for sample in &device.samples {
        let transformed = apply_transform(
            ctx.spec,
            ctx.schema,
            &sample.server_features,
            &sample.device_signals,
        );
        outcome.transform_issues.extend(transformed.issues);
        outcome.transformed.push(transformed.features);
    }
    log(TrainingPhase::Transformed, StepStatus::Success)?;

    // Phase 4: per-sample submission decision.
    if let Some(reason) = faults.hits(TrainingPhase::SubmissionDecision) {
        return fail(&mut outcome, TrainingPhase::SubmissionDecision, reason);
    }
    let mut training_samples = Vec::new();
    for (sample, features) in device.samples.iter().zip(&outcome.transformed) {
        if decide_submission(sample.label, ctx.policy, rng) {
            training_samples.push(Sample {
                features: features.clone(),
                label: sample.label,
            });
        }
    }
    if training_samples.is_empty() {
        return fail(
            &mut outcome,
            TrainingPhase::SubmissionDecision,
            ReasonCode::PolicyDrop,
        );
    }
    outcome.submitted_labels = training_samples.iter().map(|s| s.label).collect();
    log(TrainingPhase::SubmissionDecision, StepStatus::Success)?;

    // Phase 5: local training.
    if let Some(reason) = faults.hits(TrainingPhase::Trained) {
        return fail(&mut outcome, TrainingPhase::Trained, reason);
    }
    let update = match local_train(
        ctx.snapshot,
        &training_samples,
        ctx.hyper,
        ctx.noise_on_device,
        rng,
    ) {
        Ok(update) => update,
        Err(_) => {
            return fail(&mut outcome, TrainingPhase::Trained, ReasonCode::TrainFailure);
        }
    };
    log(TrainingPhase::Trained, StepStatus::Success)?;

    // Phase 6: upload.
    if let Some(reason) = faults.hits(TrainingPhase::Uploaded) {
        return fail(&mut outcome, TrainingPhase::Uploaded, reason);
    }
    log(TrainingPhase::Uploaded, StepStatus::Success)?;
    outcome.update = Some(update);
    Ok(outcome)
}

/// What the inference path needs from the metadata handshake.
pub struct InferenceContext<'a> {
    pub schema: &'a FeatureSchema,
    pub spec: &'a TransformSpec,
    /// Model version the metadata currently requires.
    pub required_version: u64,
}

/// Loads the model from the sealed store, refuses version mismatches, and
/// scores through the exact same transform used in training.
pub fn run_inference(
    device: &DeviceState,
    ctx: &InferenceContext<'_>,
    server_features: &BTreeMap<String, f64>,
    device_signals: &BTreeMap<String, f64>,
) -> Result<f64, DeviceError> {
    let bytes = match device.store.get(device.store_key(), MODEL_RECORD) {
        Ok(bytes) => bytes,
        Err(StoreError::Missing(_)) => return Err(DeviceError::MissingModel),
        Err(e) => return Err(e.into()),
    };
    let weights =
        ModelWeights::from_bytes(bytes).map_err(|e| DeviceError::CorruptModel(e.to_string()))?;
    if weights.version != ctx.required_version {
        return Err(DeviceError::StaleModel {
            found: weights.version,
            required: ctx.required_version,
        });
    }
    let transformed = apply_transform(ctx.spec, ctx.schema, server_features, device_signals);
    forward(&weights, &transformed.features)
        .map_err(|e| DeviceError::CorruptModel(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::ValueRange;
    use crate::funnel::{dropoff_report, validate_funnel, PipelineShape};
    use crate::model::{init_weights, Activation, ModelConfig};
    use crate::rng::stream;
    use crate::schema::{FeatureDescriptor, FeatureOrigin};

    fn schema() -> FeatureSchema {
        FeatureSchema::new(vec![
            FeatureDescriptor {
                name: "a".into(),
                origin: FeatureOrigin::Server,
                range: ValueRange::new(-5.0, 5.0).unwrap(),
            },
            FeatureDescriptor {
                name: "b".into(),
                origin: FeatureOrigin::Both,
                range: ValueRange::new(-5.0, 5.0).unwrap(),
            },
        ])
        .unwrap()
    }

    fn criteria() -> EligibilityCriteria {
        EligibilityCriteria {
            min_battery: 0.3,
            required_network: NetworkClass::Unmetered,
            require_idle: true,
            min_free_storage: 100,
            min_app_version: 2,
        }
    }

    fn healthy_device(id: u64) -> DeviceState {
        let mut device = DeviceState::new(id, StoreKey(id as u128 + 1));
        device.battery = 0.9;
        device.network = NetworkClass::Unmetered;
        device.idle = true;
        device.free_storage = 10_000;
        device.app_version = 5;
        device.age_ticks = 100;
        device.samples.push(DeviceSample {
            example_id: id,
            server_features: [("a".to_string(), 1.0), ("b".to_string(), 2.0)].into(),
            device_signals: [("b".to_string(), 2.5)].into(),
            label: 1,
        });
        device
    }

    struct Fixture {
        schema: FeatureSchema,
        spec: TransformSpec,
        criteria: EligibilityCriteria,
        policy: LabelStats,
        hyper: TrainHyper,
        snapshot: ModelWeights,
    }

    impl Fixture {
        fn new() -> Self {
            let schema = schema();
            let spec = TransformSpec::base_for(&schema, 1);
            let config = ModelConfig::new(2, vec![3], Activation::Tanh).unwrap();
            Self {
                schema,
                spec,
                criteria: criteria(),
                policy: LabelStats::keep_all(0.5),
                hyper: TrainHyper {
                    learning_rate: 0.1,
                    clip_norm: 1.0,
                    noise_multiplier: 0.0,
                    local_steps: 1,
                    batch_size: 1,
                },
                snapshot: init_weights(&config, &mut stream(1, "w")),
            }
        }

        fn ctx(&self) -> SessionContext<'_> {
            SessionContext {
                use_case: "training",
                criteria: &self.criteria,
                schema: &self.schema,
                spec: &self.spec,
                policy: &self.policy,
                hyper: &self.hyper,
                snapshot: &self.snapshot,
                noise_on_device: false,
                warmup_ticks: 24,
                now: 0,
            }
        }
    }

    // ------------------------------------------------------------------
    // check_eligibility
    // ------------------------------------------------------------------

    #[test]
    fn healthy_device_is_eligible() {
        assert!(check_eligibility(&healthy_device(1), &criteria()).is_ok());
    }

    #[test]
    fn low_battery_named_first() {
        let mut device = healthy_device(1);
        device.battery = 0.1;
        device.network = NetworkClass::Offline; // battery check comes first
        assert_eq!(
            check_eligibility(&device, &criteria()),
            Err(IneligibleReason::Battery)
        );
    }

    #[test]
    fn metered_fails_unmetered_requirement() {
        let mut device = healthy_device(1);
        device.network = NetworkClass::Metered;
        assert_eq!(
            check_eligibility(&device, &criteria()),
            Err(IneligibleReason::Network)
        );
    }

    #[test]
    fn unmetered_satisfies_metered_requirement() {
        let mut device = healthy_device(1);
        device.network = NetworkClass::Unmetered;
        let mut c = criteria();
        c.required_network = NetworkClass::Metered;
        assert!(check_eligibility(&device, &c).is_ok());
    }

    #[test]
    fn remaining_criteria_each_fail() {
        let c = criteria();
        let mut device = healthy_device(1);
        device.idle = false;
        assert_eq!(check_eligibility(&device, &c), Err(IneligibleReason::Idle));

        let mut device = healthy_device(1);
        device.free_storage = 10;
        assert_eq!(check_eligibility(&device, &c), Err(IneligibleReason::Storage));

        let mut device = healthy_device(1);
        device.app_version = 1;
        assert_eq!(
            check_eligibility(&device, &c),
            Err(IneligibleReason::AppVersion)
        );
    }

    /// Relaxing any single criterion never shrinks the eligible set.
    #[test]
    fn eligibility_is_monotone_in_each_criterion() {
        let mut rng = stream(10, "fleet");
        let fleet: Vec<DeviceState> = (0..1000)
            .map(|i| {
                let mut d = DeviceState::new(i, StoreKey(i as u128));
                d.battery = rng.random_range(0.0..1.0);
                d.network = match rng.random_range(0..3) {
                    0 => NetworkClass::Offline,
                    1 => NetworkClass::Metered,
                    _ => NetworkClass::Unmetered,
                };
                d.idle = rng.random_bool(0.5);
                d.free_storage = rng.random_range(0..1000);
                d.app_version = rng.random_range(0..6);
                d
            })
            .collect();
        let base = criteria();
        let eligible = |c: &EligibilityCriteria| -> Vec<u64> {
            fleet
                .iter()
                .filter(|d| check_eligibility(d, c).is_ok())
                .map(|d| d.sim_id())
                .collect()
        };
        let baseline = eligible(&base);

        let relaxations: Vec<EligibilityCriteria> = vec![
            EligibilityCriteria { min_battery: 0.0, ..base.clone() },
            EligibilityCriteria { required_network: NetworkClass::Metered, ..base.clone() },
            EligibilityCriteria { require_idle: false, ..base.clone() },
            EligibilityCriteria { min_free_storage: 0, ..base.clone() },
            EligibilityCriteria { min_app_version: 0, ..base.clone() },
        ];
        for relaxed in relaxations {
            let bigger = eligible(&relaxed);
            for id in &baseline {
                assert!(bigger.contains(id), "relaxing {relaxed:?} lost device {id}");
            }
        }
    }

    // ------------------------------------------------------------------
    // decide_submission
    // ------------------------------------------------------------------

    #[test]
    fn keep_probability_extremes() {
        let mut rng = stream(11, "keep");
        let always = LabelStats { positive_ratio: 0.5, keep_pos: 1.0, keep_neg: 1.0 };
        let never = LabelStats { positive_ratio: 0.5, keep_pos: 0.0, keep_neg: 0.0 };
        assert!((0..500).all(|_| decide_submission(1, &always, &mut rng)));
        assert!((0..500).all(|_| !decide_submission(0, &never, &mut rng)));
    }

    #[test]
    fn one_ninth_keep_rate_matches_binomial_expectation() {
        // n = 90000, p = 1/9: mean 10000, sigma = sqrt(n p (1-p)) ~ 94.3.
        let policy = LabelStats {
            positive_ratio: 0.1,
            keep_pos: 1.0,
            keep_neg: 1.0 / 9.0,
        };
        let mut rng = stream(12, "keep");
        let kept = (0..90_000)
            .filter(|_| decide_submission(0, &policy, &mut rng))
            .count() as f64;
        assert!((kept - 10_000.0).abs() < 3.0 * 94.3, "kept {kept}");
    }

    // ------------------------------------------------------------------
    // run_training_session
    // ------------------------------------------------------------------

    #[test]
    fn happy_path_returns_update_and_full_funnel() {
        let fx = Fixture::new();
        let sink = FunnelSink::new(3600);
        let device = healthy_device(1);
        let outcome = run_training_session(
            &device,
            &fx.ctx(),
            &SessionFaults::none(),
            &sink,
            &mut stream(2, "s"),
        )
        .unwrap();
        assert!(outcome.update.is_some());
        assert_eq!(outcome.failed_at, None);
        let events = sink.snapshot();
        assert_eq!(events.len(), 6);
        assert!(events.iter().all(|e| e.status == StepStatus::Success));
        assert!(validate_funnel(&events, &PipelineShape::training_default()).is_empty());
    }

    #[test]
    fn policy_drop_ends_at_submission_decision() {
        let mut fx = Fixture::new();
        fx.policy = LabelStats { positive_ratio: 0.5, keep_pos: 0.0, keep_neg: 0.0 };
        let sink = FunnelSink::new(3600);
        let outcome = run_training_session(
            &healthy_device(1),
            &fx.ctx(),
            &SessionFaults::none(),
            &sink,
            &mut stream(3, "s"),
        )
        .unwrap();
        assert!(outcome.update.is_none());
        assert_eq!(outcome.failed_at, Some(TrainingPhase::SubmissionDecision));
        let events = sink.snapshot();
        assert_eq!(events.len(), 4);
        assert_eq!(
            events.last().unwrap().status,
            StepStatus::Failure(ReasonCode::PolicyDrop)
        );
        assert!(validate_funnel(&events, &PipelineShape::training_default()).is_empty());
    }

    #[test]
    fn injected_upload_failure_conserves_funnel() {
        let fx = Fixture::new();
        let sink = FunnelSink::new(3600);
        let faults = SessionFaults {
            fail_at: Some((TrainingPhase::Uploaded, ReasonCode::UploadNetwork)),
        };
        let outcome = run_training_session(
            &healthy_device(1),
            &fx.ctx(),
            &faults,
            &sink,
            &mut stream(4, "s"),
        )
        .unwrap();
        assert!(outcome.update.is_none());
        assert_eq!(outcome.failed_at, Some(TrainingPhase::Uploaded));
        let events = sink.snapshot();
        assert_eq!(events.len(), 6);
        assert!(validate_funnel(&events, &PipelineShape::training_default()).is_empty());
        let report = dropoff_report(&events, &PipelineShape::training_default());
        assert_eq!(report.phases[5].top_reasons[0].0, ReasonCode::UploadNetwork);
    }

    #[test]
    fn ineligible_device_drops_at_phase_one() {
        let fx = Fixture::new();
        let sink = FunnelSink::new(3600);
        let mut device = healthy_device(1);
        device.battery = 0.0;
        let outcome = run_training_session(
            &device,
            &fx.ctx(),
            &SessionFaults::none(),
            &sink,
            &mut stream(5, "s"),
        )
        .unwrap();
        assert_eq!(outcome.failed_at, Some(TrainingPhase::Eligibility));
        let events = sink.snapshot();
        assert_eq!(events.len(), 1);
        assert_eq!(
            events[0].status,
            StepStatus::Failure(ReasonCode::LowBattery)
        );
    }

    #[test]
    fn warmup_blocks_data_ready() {
        let fx = Fixture::new();
        let sink = FunnelSink::new(3600);
        let mut device = healthy_device(1);
        device.age_ticks = 3;
        let outcome = run_training_session(
            &device,
            &fx.ctx(),
            &SessionFaults::none(),
            &sink,
            &mut stream(6, "s"),
        )
        .unwrap();
        assert_eq!(outcome.failed_at, Some(TrainingPhase::DataReady));
        assert_eq!(
            sink.snapshot().last().unwrap().status,
            StepStatus::Failure(ReasonCode::WarmingUp)
        );
    }

    #[test]
    fn sample_weight_counts_kept_samples() {
        let fx = Fixture::new();
        let sink = FunnelSink::new(3600);
        let mut device = healthy_device(1);
        device.samples.push(DeviceSample {
            example_id: 2,
            server_features: [("a".to_string(), -1.0), ("b".to_string(), 0.5)].into(),
            device_signals: [("b".to_string(), 0.75)].into(),
            label: 0,
        });
        let outcome = run_training_session(
            &device,
            &fx.ctx(),
            &SessionFaults::none(),
            &sink,
            &mut stream(8, "s"),
        )
        .unwrap();
        let update = outcome.update.unwrap();
        assert_eq!(update.sample_weight, 2);
        assert_eq!(outcome.submitted_labels.len(), 2);
    }

    #[test]
    fn sessions_are_deterministic_given_stream() {
        let fx = Fixture::new();
        let run = || {
            let sink = FunnelSink::new(3600);
            run_training_session(
                &healthy_device(1),
                &fx.ctx(),
                &SessionFaults::none(),
                &sink,
                &mut stream(7, "s"),
            )
            .unwrap()
            .update
        };
        assert_eq!(run(), run());
    }

    // ------------------------------------------------------------------
    // local store + inference
    // ------------------------------------------------------------------

    #[test]
    fn store_requires_matching_key() {
        let key = StoreKey(42);
        let mut store = LocalStore::sealed_with(key);
        store.put(key, "blob", vec![1, 2, 3]).unwrap();
        assert_eq!(store.get(key, "blob").unwrap(), &[1, 2, 3]);
        assert_eq!(store.get(StoreKey(41), "blob"), Err(StoreError::WrongKey));
        assert_eq!(
            store.put(StoreKey(41), "blob", vec![9]),
            Err(StoreError::WrongKey)
        );
    }

    #[test]
    fn metadata_handshake_round_trips_and_drives_the_session() {
        let fx = Fixture::new();
        let policy = LabelStats {
            positive_ratio: 0.2,
            keep_pos: 1.0,
            keep_neg: 0.25,
        };
        let handshake = MetadataHandshake::new(
            fx.criteria.clone(),
            fx.snapshot.version,
            fx.spec.version,
            &policy,
            "training",
        );
        let json = serde_json::to_string(&handshake).unwrap();
        let back: MetadataHandshake = serde_json::from_str(&json).unwrap();
        assert_eq!(handshake, back);

        // The handshake carries the version gate the inference path checks.
        let mut device = healthy_device(1);
        device.install_model(&fx.snapshot);
        let ctx = InferenceContext {
            schema: &fx.schema,
            spec: &fx.spec,
            required_version: back.model_version,
        };
        let sample = device.samples[0].clone();
        assert!(run_inference(&device, &ctx, &sample.server_features, &sample.device_signals)
            .is_ok());
    }

    #[test]
    fn inference_matches_training_side_forward() {
        let fx = Fixture::new();
        let mut device = healthy_device(1);
        device.install_model(&fx.snapshot);
        let ctx = InferenceContext {
            schema: &fx.schema,
            spec: &fx.spec,
            required_version: fx.snapshot.version,
        };
        let sample = device.samples[0].clone();
        let score =
            run_inference(&device, &ctx, &sample.server_features, &sample.device_signals)
                .unwrap();

        let transformed = apply_transform(
            &fx.spec,
            &fx.schema,
            &sample.server_features,
            &sample.device_signals,
        );
        let expected = forward(&fx.snapshot, &transformed.features).unwrap();
        assert_eq!(score.to_bits(), expected.to_bits());
    }

    #[test]
    fn inference_without_model_fails() {
        let fx = Fixture::new();
        let device = healthy_device(1);
        let ctx = InferenceContext {
            schema: &fx.schema,
            spec: &fx.spec,
            required_version: 0,
        };
        let err = run_inference(&device, &ctx, &BTreeMap::new(), &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, DeviceError::MissingModel));
    }

    #[test]
    fn stale_model_refused_then_refetch_succeeds() {
        let fx = Fixture::new();
        let mut device = healthy_device(1);
        device.install_model(&fx.snapshot); // version 0
        let ctx = InferenceContext {
            schema: &fx.schema,
            spec: &fx.spec,
            required_version: 3,
        };
        let err = run_inference(&device, &ctx, &BTreeMap::new(), &BTreeMap::new()).unwrap_err();
        assert!(matches!(
            err,
            DeviceError::StaleModel { found: 0, required: 3 }
        ));

        // Simulated fetch: install the required version and retry.
        let mut fresh = fx.snapshot.clone();
        fresh.version = 3;
        device.install_model(&fresh);
        assert!(run_inference(&device, &ctx, &BTreeMap::new(), &BTreeMap::new()).is_ok());
    }

    #[test]
    fn corrupt_model_binary_detected() {
        let fx = Fixture::new();
        let mut device = healthy_device(1);
        let key = device.store_key();
        device.store.put(key, MODEL_RECORD, vec![0, 1, 2]).unwrap();
        let ctx = InferenceContext {
            schema: &fx.schema,
            spec: &fx.spec,
            required_version: 0,
        };
        let err = run_inference(&device, &ctx, &BTreeMap::new(), &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, DeviceError::CorruptModel(_)));
    }

    // ------------------------------------------------------------------
    // equivalence and leak hygiene
    // ------------------------------------------------------------------

    #[test]
    fn train_and_inference_transforms_are_bit_identical() {
        let fx = Fixture::new();
        let mut rng = stream(13, "eq");
        for _ in 0..1000 {
            let server: BTreeMap<String, f64> = [
                ("a".to_string(), rng.random_range(-5.0..5.0)),
                ("b".to_string(), rng.random_range(-5.0..5.0)),
            ]
            .into();
            let signals: BTreeMap<String, f64> = if rng.random_bool(0.5) {
                [("b".to_string(), rng.random_range(-5.0..5.0))].into()
            } else {
                BTreeMap::new()
            };
            let training_side = apply_transform(&fx.spec, &fx.schema, &server, &signals);
            let inference_side = apply_transform(&fx.spec, &fx.schema, &server, &signals);
            for (a, b) in training_side.features.iter().zip(&inference_side.features) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn exported_records_have_no_identity_fields() {
        // Every record type that leaves the device, serialized and scanned.
        let update = GradientUpdate {
            delta: vec![0.0],
            sample_weight: 1,
            base_version: 0,
        };
        let report = crate::analytics::BitReport {
            bit: true,
            query_id: crate::analytics::QueryId::new("q"),
        };
        let eval = crate::aggregation::EvalReport::from_scored(&[(0.5, 1)], 11);
        let event = crate::funnel::FunnelEvent {
            session: SessionId(1),
            use_case: "t".into(),
            phase: 1,
            step: 1,
            status: StepStatus::Success,
            time_bucket: 0,
        };

        let denylist = ["device", "user", "account", "signal", "label", "imei"];
        for json in [
            serde_json::to_value(&update).unwrap(),
            serde_json::to_value(&report).unwrap(),
            serde_json::to_value(&eval).unwrap(),
            serde_json::to_value(&event).unwrap(),
        ] {
            for key in json.as_object().unwrap().keys() {
                // query_id / session are scoped tokens, not identities.
                if key == "query_id" || key == "session" {
                    continue;
                }
                let lower = key.to_lowercase();
                for needle in denylist {
                    assert!(
                        !lower.contains(needle),
                        "exported key {key:?} matches denylist entry {needle:?}"
                    );
                }
                assert!(
                    lower != "id" && !lower.ends_with("_id") && !lower.starts_with("id_"),
                    "exported key {key:?} looks like an identifier"
                );
            }
        }
    }
}
