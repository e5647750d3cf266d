//! De-identified funnel logging.
//!
//! Sessions are scoped by ephemeral 128-bit random ids with no persisted
//! mapping back to a device. Events carry only a use-case tag, phase/step
//! ordinals, a status and a coarse time bucket; the record type has no
//! field capable of holding a device identifier, and the sink's schema
//! checks reject smuggling attempts (digits in the use-case tag, ordinals
//! outside the declared pipeline bounds).
//!
//! The funnel invariant: for every phase p > 1,
//! `successes(p) + failures(p) = successes(p - 1)`.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Mutex;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FunnelError {
    #[error("invalid use-case tag {0:?}: tags are 1-32 lowercase letters, '-' or '_', no digits")]
    InvalidUseCase(String),
    #[error("phase {0} outside 1..={MAX_PHASE}")]
    PhaseOutOfRange(u16),
    #[error("step {0} outside 1..={MAX_STEP}")]
    StepOutOfRange(u16),
}

pub const MAX_PHASE: u16 = 16;
pub const MAX_STEP: u16 = 64;

/// Ephemeral 128-bit session token, serialized as 32 hex characters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SessionId(pub u128);

/// Fresh random session id; 128 bits make collisions negligible at fleet
/// scale.
pub fn new_session_id<R: Rng>(rng: &mut R) -> SessionId {
    SessionId(rng.random())
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl Serialize for SessionId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for SessionId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        u128::from_str_radix(&s, 16)
            .map(SessionId)
            .map_err(serde::de::Error::custom)
    }
}

/// Stable failure reason codes; an enum so the field cannot carry free-form
/// data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasonCode {
    LowBattery,
    NetworkClass,
    NotIdle,
    LowStorage,
    AppVersion,
    WarmingUp,
    NoLocalData,
    PolicyDrop,
    TrainFailure,
    UploadNetwork,
    BatteryDrop,
    InjectedFault,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "reason")]
pub enum StepStatus {
    Success,
    Failure(ReasonCode),
}

/// One de-identified log record. Time is already bucketed when the event is
/// constructed by the sink; ordering within a session uses (phase, step).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunnelEvent {
    pub session: SessionId,
    pub use_case: String,
    pub phase: u16,
    pub step: u16,
    #[serde(flatten)]
    pub status: StepStatus,
    pub time_bucket: u64,
}

/// Declared funnel layout: phases in order, each with a step count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseShape {
    pub name: String,
    pub steps: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineShape {
    pub phases: Vec<PhaseShape>,
}

impl PipelineShape {
    pub fn new(phases: Vec<PhaseShape>) -> Self {
        Self { phases }
    }

    /// The training pipeline used by the device runtime: six phases of one
    /// step each.
    pub fn training_default() -> Self {
        Self::new(
            [
                "eligibility",
                "data-ready",
                "transformed",
                "submission-decision",
                "trained",
                "uploaded",
            ]
            .into_iter()
            .map(|name| PhaseShape {
                name: name.to_string(),
                steps: 1,
            })
            .collect(),
        )
    }
}

fn validate_use_case(tag: &str) -> Result<(), FunnelError> {
    let ok = !tag.is_empty()
        && tag.len() <= 32
        && tag.starts_with(|c: char| c.is_ascii_lowercase())
        && tag
            .chars()
            .all(|c| c.is_ascii_lowercase() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(FunnelError::InvalidUseCase(tag.to_string()))
    }
}

/// Append-only event sink, safe for concurrent appends from parallel device
/// simulations. Events are schema-checked on entry and timestamps are
/// coarsened to the configured bucket width.
#[derive(Debug)]
pub struct FunnelSink {
    bucket_ticks: u64,
    events: Mutex<Vec<FunnelEvent>>,
}

impl FunnelSink {
    pub fn new(bucket_ticks: u64) -> Self {
        Self {
            bucket_ticks: bucket_ticks.max(1),
            events: Mutex::new(Vec::new()),
        }
    }

    pub fn log_step(
        &self,
        session: SessionId,
        use_case: &str,
        phase: u16,
        step: u16,
        status: StepStatus,
        raw_tick: u64,
    ) -> Result<(), FunnelError> {
        validate_use_case(use_case)?;
        if phase == 0 || phase > MAX_PHASE {
            return Err(FunnelError::PhaseOutOfRange(phase));
        }
        if step == 0 || step > MAX_STEP {
            return Err(FunnelError::StepOutOfRange(step));
        }
        let event = FunnelEvent {
            session,
            use_case: use_case.to_string(),
            phase,
            step,
            status,
            time_bucket: raw_tick / self.bucket_ticks,
        };
        self.events.lock().expect("sink poisoned").push(event);
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<FunnelEvent> {
        self.events.lock().expect("sink poisoned").clone()
    }

    pub fn len(&self) -> usize {
        self.events.lock().expect("sink poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Canonical dedup by (session, use_case, phase, step): events are sorted
/// by a total key first so the surviving representative does not depend on
/// input order, then consecutive duplicates collapse.
pub fn dedup_events(events: &[FunnelEvent]) -> Vec<FunnelEvent> {
    let mut sorted = events.to_vec();
    sorted.sort_by(|a, b| {
        (a.session, &a.use_case, a.phase, a.step, a.status, a.time_bucket).cmp(&(
            b.session,
            &b.use_case,
            b.phase,
            b.step,
            b.status,
            b.time_bucket,
        ))
    });
    sorted.dedup_by(|a, b| {
        a.session == b.session && a.use_case == b.use_case && a.phase == b.phase && a.step == b.step
    });
    sorted
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConservationViolation {
    pub phase: u16,
    pub observed: u64,
    pub expected: u64,
}

struct PhaseCounts {
    successes: u64,
    failures: u64,
    reasons: BTreeMap<ReasonCode, u64>,
}

fn count_phases(events: &[FunnelEvent], shape: &PipelineShape) -> Vec<PhaseCounts> {
    let deduped = dedup_events(events);
    let mut counts: Vec<PhaseCounts> = shape
        .phases
        .iter()
        .map(|_| PhaseCounts {
            successes: 0,
            failures: 0,
            reasons: BTreeMap::new(),
        })
        .collect();
    for event in &deduped {
        let Some(idx) = (event.phase as usize).checked_sub(1) else {
            continue;
        };
        let Some(phase_shape) = shape.phases.get(idx) else {
            continue;
        };
        match event.status {
            // A phase succeeds when its final step succeeds.
            StepStatus::Success if event.step == phase_shape.steps => {
                counts[idx].successes += 1;
            }
            StepStatus::Success => {}
            StepStatus::Failure(reason) => {
                counts[idx].failures += 1;
                *counts[idx].reasons.entry(reason).or_insert(0) += 1;
            }
        }
    }
    counts
}

/// Checks the conservation law on deduped events: every phase's successes
/// plus failures must equal the previous phase's successes. Violations are
/// data, not errors.
pub fn validate_funnel(
    events: &[FunnelEvent],
    shape: &PipelineShape,
) -> Vec<ConservationViolation> {
    let counts = count_phases(events, shape);
    let mut violations = Vec::new();
    for p in 1..counts.len() {
        let expected = counts[p - 1].successes;
        let observed = counts[p].successes + counts[p].failures;
        // Trailing phases that nothing reached are fine.
        if observed == 0 && expected == 0 {
            continue;
        }
        if observed != expected {
            violations.push(ConservationViolation {
                phase: (p + 1) as u16,
                observed,
                expected,
            });
        }
    }
    violations
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub name: String,
    pub entrants: u64,
    pub successes: u64,
    pub failures: u64,
    /// successes / entrants; 1.0 for phases nothing reached.
    pub survival: f64,
    /// Failure reasons, most frequent first.
    pub top_reasons: Vec<(ReasonCode, u64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunnelReport {
    pub phases: Vec<PhaseReport>,
    pub violations: Vec<ConservationViolation>,
    pub sessions: u64,
}

/// Per-phase survival rates and top failure reasons, over deduped events.
pub fn dropoff_report(events: &[FunnelEvent], shape: &PipelineShape) -> FunnelReport {
    let counts = count_phases(events, shape);
    let deduped = dedup_events(events);
    let sessions = {
        let mut ids: Vec<SessionId> = deduped.iter().map(|e| e.session).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len() as u64
    };
    let mut phases = Vec::with_capacity(counts.len());
    for (idx, count) in counts.iter().enumerate() {
        let entrants = if idx == 0 {
            count.successes + count.failures
        } else {
            counts[idx - 1].successes
        };
        let survival = if entrants == 0 {
            1.0
        } else {
            count.successes as f64 / entrants as f64
        };
        let mut top_reasons: Vec<(ReasonCode, u64)> =
            count.reasons.iter().map(|(&r, &n)| (r, n)).collect();
        top_reasons.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        phases.push(PhaseReport {
            name: shape.phases[idx].name.clone(),
            entrants,
            successes: count.successes,
            failures: count.failures,
            survival,
            top_reasons,
        });
    }
    FunnelReport {
        phases,
        violations: validate_funnel(events, shape),
        sessions,
    }
}
