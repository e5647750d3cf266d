//! Simulated TEE federated-learning server: synchronous round lifecycle,
//! update collection to a completion threshold, weighted averaging with a
//! configurable noise placement, the stopping rule, and noised aggregation
//! of evaluation metrics.
//!
//! The trust boundary is simulated, not cryptographic: nothing outside this
//! module ever sees individual updates, only the aggregated model.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{bce_loss, l2_norm, GradientUpdate, ModelWeights};

#[derive(Debug, Error)]
pub enum AggregationError {
    #[error("invalid aggregation config: {0}")]
    InvalidConfig(String),
    #[error("a round is already open")]
    RoundAlreadyOpen,
    #[error("no open round")]
    NoOpenRound,
    #[error("round is not complete")]
    RoundNotComplete,
    #[error("no evaluation reports to aggregate")]
    NoReports,
    #[error("evaluation reports use mismatched threshold grids")]
    GridMismatch,
}

/// Where differential-privacy noise is applied: on each device before the
/// update leaves it, or inside the trusted boundary after aggregation. The
/// two placements are mutually exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePlacement {
    Device,
    Tee,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationConfig {
    /// Updates required to complete a round (K).
    pub target_updates: usize,
    /// Simulated-time units a round may stay open before abandonment.
    pub max_wait: u64,
    pub noise_placement: NoisePlacement,
    /// Per-coordinate Gaussian std applied to the aggregate under TEE
    /// placement.
    pub tee_noise_std: f64,
    /// Server-side step size applied to the averaged delta.
    pub server_lr: f64,
    pub max_rounds: usize,
    /// Stop early once the latest noised eval metric reaches this value.
    pub stop_metric_threshold: Option<f64>,
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<(), AggregationError> {
        if self.target_updates == 0 {
            return Err(AggregationError::InvalidConfig(
                "target_updates must be >= 1".into(),
            ));
        }
        if self.tee_noise_std < 0.0 || !self.tee_noise_std.is_finite() {
            return Err(AggregationError::InvalidConfig(
                "tee_noise_std must be >= 0".into(),
            ));
        }
        if self.server_lr <= 0.0 || !self.server_lr.is_finite() {
            return Err(AggregationError::InvalidConfig(
                "server_lr must be > 0".into(),
            ));
        }
        if self.max_rounds == 0 {
            return Err(AggregationError::InvalidConfig(
                "max_rounds must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundStatus {
    Open,
    Complete,
    Abandoned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    /// Update was computed against a different model snapshot.
    Stale,
    /// Update contains non-finite values or the wrong parameter count.
    Corrupt,
    /// Round already complete or abandoned.
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubmitOutcome {
    Accepted { completed: bool },
    Rejected(RejectReason),
}

/// One synchronous round: updates are accepted only while the round is
/// open and only against the round's snapshot version. The accept decision
/// and the open-to-complete transition are a single atomic step: callers
/// hold exclusive access (`&mut`) for the whole decision, so no interleaving
/// can admit more than `target` updates.
#[derive(Debug, Clone)]
pub struct RoundState {
    pub round_id: u64,
    pub snapshot_version: u64,
    pub opened_at: u64,
    pub status: RoundStatus,
    param_count: usize,
    accepted: Vec<GradientUpdate>,
}

impl RoundState {
    fn new(round_id: u64, snapshot_version: u64, opened_at: u64, param_count: usize) -> Self {
        Self {
            round_id,
            snapshot_version,
            opened_at,
            status: RoundStatus::Open,
            param_count,
            accepted: Vec::new(),
        }
    }

    pub fn accepted_count(&self) -> usize {
        self.accepted.len()
    }

    pub fn submit(&mut self, update: GradientUpdate, target: usize) -> SubmitOutcome {
        if self.status != RoundStatus::Open {
            return SubmitOutcome::Rejected(RejectReason::Closed);
        }
        if update.base_version != self.snapshot_version {
            return SubmitOutcome::Rejected(RejectReason::Stale);
        }
        if update.delta.len() != self.param_count || !update.is_finite() {
            return SubmitOutcome::Rejected(RejectReason::Corrupt);
        }
        self.accepted.push(update);
        let completed = self.accepted.len() >= target;
        if completed {
            self.status = RoundStatus::Complete;
        }
        SubmitOutcome::Accepted { completed }
    }
}

/// Per-round record kept for dashboards and the stopping rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round_id: u64,
    pub participants: u64,
    pub delta_norm: f64,
    pub eval_metric: Option<f64>,
}

/// The versioned global model plus its round history. The version increases
/// by exactly one per completed round.
#[derive(Debug, Clone)]
pub struct GlobalModel {
    pub weights: ModelWeights,
    pub history: Vec<RoundRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxRounds,
    MetricReached,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop(StopReason),
}

/// Stops at `max_rounds`, or earlier once the latest noised eval metric
/// reaches the configured threshold.
pub fn should_stop(history: &[RoundRecord], config: &AggregationConfig) -> StopDecision {
    if history.len() >= config.max_rounds {
        return StopDecision::Stop(StopReason::MaxRounds);
    }
    if let (Some(threshold), Some(record)) = (config.stop_metric_threshold, history.last()) {
        if let Some(metric) = record.eval_metric {
            if metric >= threshold {
                return StopDecision::Stop(StopReason::MetricReached);
            }
        }
    }
    StopDecision::Continue
}

/// Weighted average of update deltas with a canonical summation order, so
/// the result is bitwise identical for any arrival order of the same
/// multiset of updates. Floating-point addition is not associative; sorting
/// by a content key before summing removes the arrival-order dependence.
pub fn weighted_average_delta(updates: &[GradientUpdate], param_count: usize) -> Vec<f64> {
    let mut sorted: Vec<&GradientUpdate> = updates.iter().collect();
    sorted.sort_by(|a, b| {
        a.sample_weight
            .cmp(&b.sample_weight)
            .then_with(|| {
                for (x, y) in a.delta.iter().zip(&b.delta) {
                    let ord = x.total_cmp(y);
                    if ord != std::cmp::Ordering::Equal {
                        return ord;
                    }
                }
                std::cmp::Ordering::Equal
            })
    });
    let total_weight: f64 = sorted.iter().map(|u| u.sample_weight as f64).sum();
    let mut delta = vec![0.0; param_count];
    for update in sorted {
        let w = update.sample_weight as f64;
        for (d, u) in delta.iter_mut().zip(&update.delta) {
            *d += w * u;
        }
    }
    for d in &mut delta {
        *d /= total_weight;
    }
    delta
}

/// The federated-learning server, owner of the round lifecycle and the
/// global model. For concurrent submission wrap it in a mutex; each call to
/// [`FlServer::submit_update`] is one atomic accept/complete decision.
#[derive(Debug)]
pub struct FlServer {
    config: AggregationConfig,
    global: GlobalModel,
    round: Option<RoundState>,
    next_round_id: u64,
}

impl FlServer {
    pub fn new(config: AggregationConfig, initial: ModelWeights) -> Result<Self, AggregationError> {
        config.validate()?;
        Ok(Self {
            config,
            global: GlobalModel {
                weights: initial,
                history: Vec::new(),
            },
            round: None,
            next_round_id: 0,
        })
    }

    pub fn config(&self) -> &AggregationConfig {
        &self.config
    }

    pub fn global(&self) -> &GlobalModel {
        &self.global
    }

    pub fn current_round(&self) -> Option<&RoundState> {
        self.round.as_ref()
    }

    /// Opens a fresh round bound to the current model version.
    pub fn open_round(&mut self, now: u64) -> Result<&RoundState, AggregationError> {
        if matches!(self.round, Some(ref r) if r.status == RoundStatus::Open) {
            return Err(AggregationError::RoundAlreadyOpen);
        }
        let round = RoundState::new(
            self.next_round_id,
            self.global.weights.version,
            now,
            self.global.weights.param_count(),
        );
        self.next_round_id += 1;
        self.round = Some(round);
        Ok(self.round.as_ref().expect("just set"))
    }

    pub fn submit_update(&mut self, update: GradientUpdate) -> SubmitOutcome {
        match self.round.as_mut() {
            Some(round) => round.submit(update, self.config.target_updates),
            None => SubmitOutcome::Rejected(RejectReason::Closed),
        }
    }

    /// Abandons the open round if it has exceeded `max_wait`; its updates
    /// are discarded and the next round reopens on the same version.
    pub fn check_timeout(&mut self, now: u64) -> bool {
        if let Some(round) = self.round.as_mut() {
            if round.status == RoundStatus::Open
                && now.saturating_sub(round.opened_at) >= self.config.max_wait
            {
                round.status = RoundStatus::Abandoned;
                round.accepted.clear();
                return true;
            }
        }
        false
    }

    /// Abandons the open round unconditionally (e.g. the candidate pool is
    /// exhausted).
    pub fn abandon_round(&mut self) -> Result<(), AggregationError> {
        match self.round.as_mut() {
            Some(round) if round.status == RoundStatus::Open => {
                round.status = RoundStatus::Abandoned;
                round.accepted.clear();
                Ok(())
            }
            _ => Err(AggregationError::NoOpenRound),
        }
    }

    /// Weighted-averages the completed round's updates, applies noise under
    /// TEE placement, and advances the global model by one version. The
    /// model is only updated with the post-noise aggregate.
    pub fn aggregate<R: Rng>(&mut self, rng: &mut R) -> Result<&GlobalModel, AggregationError> {
        let round = self.round.take().ok_or(AggregationError::NoOpenRound)?;
        if round.status != RoundStatus::Complete {
            self.round = Some(round);
            return Err(AggregationError::RoundNotComplete);
        }
        let param_count = self.global.weights.param_count();
        let mut delta = weighted_average_delta(&round.accepted, param_count);
        if self.config.noise_placement == NoisePlacement::Tee && self.config.tee_noise_std > 0.0 {
            let normal = Normal::new(0.0, self.config.tee_noise_std).expect("finite std");
            for d in &mut delta {
                *d += normal.sample(rng);
            }
        }
        self.global.weights.add_scaled(&delta, self.config.server_lr);
        self.global.weights.version += 1;
        self.global.history.push(RoundRecord {
            round_id: round.round_id,
            participants: round.accepted.len() as u64,
            delta_norm: l2_norm(&delta),
            eval_metric: None,
        });
        Ok(&self.global)
    }

    /// Attaches the round's noised eval metric for the stopping rule.
    pub fn record_eval_metric(&mut self, metric: f64) {
        if let Some(record) = self.global.history.last_mut() {
            record.eval_metric = Some(metric);
        }
    }

    pub fn should_stop(&self) -> StopDecision {
        should_stop(&self.global.history, &self.config)
    }
}

// ---------------------------------------------------------------------------
// Evaluation metrics
// ---------------------------------------------------------------------------

/// Per-threshold confusion counts over a fixed grid, scored on one device's
/// local eval samples. Threshold `i` of a grid of size `G` is `i / (G - 1)`;
/// a sample is predicted positive when `score >= threshold`. Carries no
/// device identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub grid: u32,
    pub true_pos: Vec<u64>,
    pub false_pos: Vec<u64>,
    pub true_neg: Vec<u64>,
    pub false_neg: Vec<u64>,
    pub n_samples: u64,
    /// Summed binary cross-entropy over the local samples; aggregated and
    /// noised server-side into the loss estimate.
    pub loss_sum: f64,
}

impl EvalReport {
    pub fn thresholds(grid: u32) -> Vec<f64> {
        (0..grid).map(|i| f64::from(i) / f64::from(grid - 1)).collect()
    }

    pub fn from_scored(scored: &[(f64, u8)], grid: u32) -> Self {
        assert!(grid >= 2, "threshold grid needs at least two points");
        let g = grid as usize;
        let mut report = Self {
            grid,
            true_pos: vec![0; g],
            false_pos: vec![0; g],
            true_neg: vec![0; g],
            false_neg: vec![0; g],
            n_samples: scored.len() as u64,
            loss_sum: 0.0,
        };
        for &(score, label) in scored {
            report.loss_sum += bce_loss(score, label);
            for (i, t) in Self::thresholds(grid).into_iter().enumerate() {
                let predicted_pos = score >= t;
                match (label == 1, predicted_pos) {
                    (true, true) => report.true_pos[i] += 1,
                    (true, false) => report.false_neg[i] += 1,
                    (false, true) => report.false_pos[i] += 1,
                    (false, false) => report.true_neg[i] += 1,
                }
            }
        }
        report
    }
}

/// Aggregated metrics with statistical noise applied to the underlying
/// counts before any rate is computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisedMetrics {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub auc: f64,
    /// Accuracy at the threshold nearest 0.5.
    pub accuracy: f64,
    pub loss: f64,
    pub noise_std: f64,
    pub n_reports: u64,
}

/// Sums eval reports, adds Gaussian noise (std `noise_std`) to every
/// aggregated count, clamps at zero, then derives precision/recall per
/// threshold, accuracy, the loss estimate, and the ROC AUC by trapezoid
/// over the (FPR, TPR) curve.
pub fn aggregate_eval<R: Rng>(
    reports: &[EvalReport],
    noise_std: f64,
    rng: &mut R,
) -> Result<NoisedMetrics, AggregationError> {
    let first = reports.first().ok_or(AggregationError::NoReports)?;
    let grid = first.grid;
    if reports.iter().any(|r| r.grid != grid) {
        return Err(AggregationError::GridMismatch);
    }
    let g = grid as usize;
    let mut tp = vec![0.0f64; g];
    let mut fp = vec![0.0f64; g];
    let mut tn = vec![0.0f64; g];
    let mut fneg = vec![0.0f64; g];
    let mut loss_sum = 0.0;
    for report in reports {
        loss_sum += report.loss_sum;
        for i in 0..g {
            tp[i] += report.true_pos[i] as f64;
            fp[i] += report.false_pos[i] as f64;
            tn[i] += report.true_neg[i] as f64;
            fneg[i] += report.false_neg[i] as f64;
        }
    }

    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).expect("finite std");
        for counts in [&mut tp, &mut fp, &mut tn, &mut fneg] {
            for c in counts.iter_mut() {
                *c = (*c + normal.sample(rng)).max(0.0);
            }
        }
        loss_sum = (loss_sum + normal.sample(rng)).max(0.0);
    }

    let thresholds = EvalReport::thresholds(grid);
    let mut precision = Vec::with_capacity(g);
    let mut recall = Vec::with_capacity(g);
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(g + 2);
    for i in 0..g {
        let predicted_pos = tp[i] + fp[i];
        precision.push(if predicted_pos > 0.0 { tp[i] / predicted_pos } else { 1.0 });
        let positives = tp[i] + fneg[i];
        recall.push(if positives > 0.0 { tp[i] / positives } else { 0.0 });
        let negatives = fp[i] + tn[i];
        let tpr = if positives > 0.0 { tp[i] / positives } else { 0.0 };
        let fpr = if negatives > 0.0 { fp[i] / negatives } else { 0.0 };
        points.push((fpr, tpr));
    }
    points.push((0.0, 0.0));
    points.push((1.0, 1.0));
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut auc = 0.0;
    for pair in points.windows(2) {
        let (x0, y0) = pair[0];
        let (x1, y1) = pair[1];
        auc += (x1 - x0) * 0.5 * (y0 + y1);
    }
    let auc = auc.clamp(0.0, 1.0);

    let mid = thresholds
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| (*a - 0.5).abs().total_cmp(&(*b - 0.5).abs()))
        .map(|(i, _)| i)
        .expect("non-empty grid");
    let total_mid = tp[mid] + fp[mid] + tn[mid] + fneg[mid];
    let accuracy = if total_mid > 0.0 {
        (tp[mid] + tn[mid]) / total_mid
    } else {
        0.0
    };
    let total_samples = tp[0] + fp[0] + tn[0] + fneg[0];
    let loss = if total_samples > 0.0 { loss_sum / total_samples } else { 0.0 };

    Ok(NoisedMetrics {
        thresholds,
        precision,
        recall,
        auc,
        accuracy,
        loss,
        noise_std,
        n_reports: reports.len() as u64,
    })
}

/// Exact ROC AUC from raw scores (rank statistic with tie correction).
/// Oracle-track only; the noised pipeline never sees raw scores.
pub fn auc_from_scores(scored: &[(f64, u8)]) -> f64 {
    let positives = scored.iter().filter(|(_, l)| *l == 1).count();
    let negatives = scored.len() - positives;
    if positives == 0 || negatives == 0 {
        return 0.5;
    }
    let mut sorted: Vec<(f64, u8)> = scored.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Average ranks across ties, then apply the Mann-Whitney identity.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0; // ranks are 1-based
        for item in &sorted[i..j] {
            if item.1 == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let p = positives as f64;
    let n = negatives as f64;
    (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, ModelConfig};
    use crate::rng::stream;

    fn config(k: usize) -> AggregationConfig {
        AggregationConfig {
            target_updates: k,
            max_wait: 1000,
            noise_placement: NoisePlacement::Device,
            tee_noise_std: 0.0,
            server_lr: 1.0,
            max_rounds: 10,
            stop_metric_threshold: None,
        }
    }

    fn zero_weights(dim: usize) -> ModelWeights {
        ModelWeights::zeros(&ModelConfig::new(dim, vec![], Activation::Tanh).unwrap())
    }

    fn update(delta: Vec<f64>, weight: u64, version: u64) -> GradientUpdate {
        GradientUpdate {
            delta,
            sample_weight: weight,
            base_version: version,
        }
    }

    // ------------------------------------------------------------------
    // open_round
    // ------------------------------------------------------------------

    #[test]
    fn first_round_binds_version_zero() {
        let mut server = FlServer::new(config(1), zero_weights(2)).unwrap();
        let round = server.open_round(0).unwrap();
        assert_eq!(round.round_id, 0);
        assert_eq!(round.snapshot_version, 0);
    }

    #[test]
    fn versions_track_completed_rounds() {
        let mut server = FlServer::new(config(1), zero_weights(1)).unwrap();
        for expected in 0..3u64 {
            let round = server.open_round(expected).unwrap();
            assert_eq!(round.round_id, expected);
            assert_eq!(round.snapshot_version, expected);
            server.submit_update(update(vec![0.1, 0.0], 1, expected));
            server.aggregate(&mut stream(0, "agg")).unwrap();
        }
        let round = server.open_round(3).unwrap();
        assert_eq!(round.round_id, 3);
        assert_eq!(round.snapshot_version, 3);
    }

    #[test]
    fn opening_while_open_is_an_error() {
        let mut server = FlServer::new(config(2), zero_weights(1)).unwrap();
        server.open_round(0).unwrap();
        assert!(matches!(
            server.open_round(1),
            Err(AggregationError::RoundAlreadyOpen)
        ));
    }

    // ------------------------------------------------------------------
    // submit_update
    // ------------------------------------------------------------------

    #[test]
    fn threshold_completes_round() {
        let mut server = FlServer::new(config(2), zero_weights(1)).unwrap();
        server.open_round(0).unwrap();
        assert_eq!(
            server.submit_update(update(vec![1.0, 0.0], 1, 0)),
            SubmitOutcome::Accepted { completed: false }
        );
        assert_eq!(
            server.submit_update(update(vec![2.0, 0.0], 1, 0)),
            SubmitOutcome::Accepted { completed: true }
        );
    }

    #[test]
    fn stale_version_is_rejected() {
        let mut server = FlServer::new(config(1), zero_weights(1)).unwrap();
        server.open_round(0).unwrap();
        server.submit_update(update(vec![0.5, 0.0], 1, 0));
        server.aggregate(&mut stream(0, "agg")).unwrap();
        server.open_round(1).unwrap();
        assert_eq!(
            server.submit_update(update(vec![0.5, 0.0], 1, 0)),
            SubmitOutcome::Rejected(RejectReason::Stale)
        );
    }

    #[test]
    fn corrupt_updates_are_rejected() {
        let mut server = FlServer::new(config(2), zero_weights(2)).unwrap();
        server.open_round(0).unwrap();
        assert_eq!(
            server.submit_update(update(vec![f64::NAN, 0.0, 0.0], 1, 0)),
            SubmitOutcome::Rejected(RejectReason::Corrupt)
        );
        assert_eq!(
            server.submit_update(update(vec![1.0], 1, 0)), // wrong length
            SubmitOutcome::Rejected(RejectReason::Corrupt)
        );
    }

    #[test]
    fn closed_round_rejects_and_never_alters_aggregate() {
        let mut server = FlServer::new(config(2), zero_weights(1)).unwrap();
        server.open_round(0).unwrap();
        server.submit_update(update(vec![1.0, 0.0], 1, 0));
        server.submit_update(update(vec![3.0, 0.0], 1, 0));
        assert_eq!(
            server.submit_update(update(vec![100.0, 0.0], 1, 0)),
            SubmitOutcome::Rejected(RejectReason::Closed)
        );
        server.aggregate(&mut stream(0, "agg")).unwrap();
        assert!((server.global().weights.layers[0].weights[0] - 2.0).abs() < 1e-15);
    }

    /// Exactly K accepted under every arrival order of 5 submitters at K=3.
    #[test]
    fn exactly_k_accepted_under_exhaustive_interleavings() {
        let submissions: Vec<GradientUpdate> =
            (0..5).map(|i| update(vec![i as f64, 0.0], 1, 0)).collect();
        let mut order: Vec<usize> = (0..5).collect();
        let mut checked = 0;
        permute(&mut order, 0, &mut |perm: &[usize]| {
            let mut server = FlServer::new(config(3), zero_weights(1)).unwrap();
            server.open_round(0).unwrap();
            let mut accepted = 0;
            for &i in perm {
                if matches!(
                    server.submit_update(submissions[i].clone()),
                    SubmitOutcome::Accepted { .. }
                ) {
                    accepted += 1;
                }
            }
            assert_eq!(accepted, 3, "order {perm:?}");
            assert_eq!(server.current_round().unwrap().accepted_count(), 3);
            checked += 1;
        });
        assert_eq!(checked, 120);
    }

    fn permute(items: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
        if k == items.len() {
            visit(items);
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            permute(items, k + 1, visit);
            items.swap(k, i);
        }
    }

    #[test]
    fn concurrent_submissions_accept_exactly_k() {
        use std::sync::{Arc, Mutex};
        let server = Arc::new(Mutex::new(
            FlServer::new(config(3), zero_weights(1)).unwrap(),
        ));
        server.lock().unwrap().open_round(0).unwrap();
        let mut handles = Vec::new();
        for i in 0..8 {
            let server = Arc::clone(&server);
            handles.push(std::thread::spawn(move || {
                let outcome = server
                    .lock()
                    .unwrap()
                    .submit_update(update(vec![i as f64, 0.0], 1, 0));
                matches!(outcome, SubmitOutcome::Accepted { .. })
            }));
        }
        let accepted = handles
            .into_iter()
            .map(|h| h.join().expect("submitter thread panicked"))
            .filter(|&ok| ok)
            .count();
        assert_eq!(accepted, 3);
        assert_eq!(
            server.lock().unwrap().current_round().unwrap().accepted_count(),
            3
        );
    }

    // ------------------------------------------------------------------
    // aggregate
    // ------------------------------------------------------------------

    #[test]
    fn equal_updates_average_to_themselves() {
        let mut server = FlServer::new(config(2), zero_weights(2)).unwrap();
        server.open_round(0).unwrap();
        let u = update(vec![0.5, -0.25, 0.0], 3, 0);
        server.submit_update(u.clone());
        server.submit_update(u.clone());
        server.aggregate(&mut stream(1, "agg")).unwrap();
        let w = &server.global().weights.layers[0];
        assert!((w.weights[0] - 0.5).abs() < 1e-15);
        assert!((w.weights[1] + 0.25).abs() < 1e-15);
        assert_eq!(server.global().weights.version, 1);
    }

    #[test]
    fn weighted_average_by_sample_count() {
        // (1*1 + 3*3) / 4 = 2.5 per coordinate.
        let updates = [update(vec![1.0, 1.0], 1, 0), update(vec![3.0, 3.0], 3, 0)];
        let delta = weighted_average_delta(&updates, 2);
        assert!((delta[0] - 2.5).abs() < 1e-15);
        assert!((delta[1] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn tee_zero_noise_equals_device_placement() {
        let mut device_cfg = config(2);
        device_cfg.noise_placement = NoisePlacement::Device;
        let mut tee_cfg = config(2);
        tee_cfg.noise_placement = NoisePlacement::Tee;
        tee_cfg.tee_noise_std = 0.0;

        let mut results = Vec::new();
        for cfg in [device_cfg, tee_cfg] {
            let mut server = FlServer::new(cfg, zero_weights(2)).unwrap();
            server.open_round(0).unwrap();
            server.submit_update(update(vec![1.0, -1.0, 0.0], 2, 0));
            server.submit_update(update(vec![0.0, 3.0, 0.0], 1, 0));
            server.aggregate(&mut stream(7, "agg")).unwrap();
            results.push(server.global().weights.clone());
        }
        assert_eq!(results[0], results[1]);
    }

    #[test]
    fn tee_noise_perturbs_aggregate() {
        let mut cfg = config(1);
        cfg.noise_placement = NoisePlacement::Tee;
        cfg.tee_noise_std = 0.5;
        let mut server = FlServer::new(cfg, zero_weights(2)).unwrap();
        server.open_round(0).unwrap();
        server.submit_update(update(vec![1.0, 1.0, 0.0], 1, 0));
        server.aggregate(&mut stream(3, "tee")).unwrap();
        let w = &server.global().weights.layers[0];
        assert_ne!(w.weights[0], 1.0);
    }

    #[test]
    fn aggregate_requires_complete_round() {
        let mut server = FlServer::new(config(2), zero_weights(1)).unwrap();
        server.open_round(0).unwrap();
        server.submit_update(update(vec![1.0, 0.0], 1, 0));
        assert!(matches!(
            server.aggregate(&mut stream(0, "agg")),
            Err(AggregationError::RoundNotComplete)
        ));
    }

    #[test]
    fn canonical_summation_is_permutation_invariant() {
        let mut rng = stream(5, "perm");
        let updates: Vec<GradientUpdate> = (0..7)
            .map(|i| {
                update(
                    (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    1 + (i % 3),
                    0,
                )
            })
            .collect();
        let reference = weighted_average_delta(&updates, 4);
        let mut shuffled = updates.clone();
        for seed in 0..20 {
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut stream(seed, "shuffle"));
            let other = weighted_average_delta(&shuffled, 4);
            for (a, b) in reference.iter().zip(&other) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn abandoned_round_discards_updates_and_keeps_version() {
        let mut cfg = config(5);
        cfg.max_wait = 10;
        let mut server = FlServer::new(cfg, zero_weights(1)).unwrap();
        server.open_round(0).unwrap();
        server.submit_update(update(vec![9.0, 0.0], 1, 0));
        assert!(server.check_timeout(10));
        assert_eq!(
            server.current_round().unwrap().status,
            RoundStatus::Abandoned
        );
        // Reopens on the same version with a fresh round id.
        let round = server.open_round(11).unwrap();
        assert_eq!(round.snapshot_version, 0);
        assert_eq!(round.round_id, 1);
        assert_eq!(server.global().weights.version, 0);
    }

    // ------------------------------------------------------------------
    // should_stop
    // ------------------------------------------------------------------

    #[test]
    fn stops_at_max_rounds() {
        let mut cfg = config(1);
        cfg.max_rounds = 2;
        let history = vec![
            RoundRecord { round_id: 0, participants: 1, delta_norm: 0.0, eval_metric: None },
            RoundRecord { round_id: 1, participants: 1, delta_norm: 0.0, eval_metric: None },
        ];
        assert_eq!(
            should_stop(&history, &cfg),
            StopDecision::Stop(StopReason::MaxRounds)
        );
    }

    #[test]
    fn runs_to_max_rounds_without_threshold() {
        let cfg = config(1);
        let history = vec![RoundRecord {
            round_id: 0,
            participants: 1,
            delta_norm: 0.0,
            eval_metric: Some(0.99),
        }];
        assert_eq!(should_stop(&history, &cfg), StopDecision::Continue);
    }

    #[test]
    fn stops_when_metric_reaches_threshold() {
        let mut cfg = config(1);
        cfg.stop_metric_threshold = Some(0.9);
        let history = vec![RoundRecord {
            round_id: 0,
            participants: 1,
            delta_norm: 0.0,
            eval_metric: Some(0.91),
        }];
        assert_eq!(
            should_stop(&history, &cfg),
            StopDecision::Stop(StopReason::MetricReached)
        );
    }

    // ------------------------------------------------------------------
    // aggregate_eval
    // ------------------------------------------------------------------

    #[test]
    fn perfectly_separated_scores_reach_auc_one() {
        let scored: Vec<(f64, u8)> = (0..10)
            .map(|i| if i < 5 { (0.9, 1) } else { (0.1, 0) })
            .collect();
        let report = EvalReport::from_scored(&scored, 101);
        let metrics = aggregate_eval(&[report], 0.0, &mut stream(0, "ev")).unwrap();
        assert!((metrics.auc - 1.0).abs() < 1e-12, "auc {}", metrics.auc);
    }

    #[test]
    fn label_independent_scores_sit_at_chance() {
        // Same score distribution in both classes.
        let mut scored = Vec::new();
        for i in 0..50 {
            let s = i as f64 / 49.0;
            scored.push((s, 0));
            scored.push((s, 1));
        }
        let report = EvalReport::from_scored(&scored, 101);
        let metrics = aggregate_eval(&[report], 0.0, &mut stream(0, "ev")).unwrap();
        assert!((metrics.auc - 0.5).abs() < 0.02, "auc {}", metrics.auc);
    }

    /// Brute-force pairwise AUC: fraction of (positive, negative) pairs
    /// ranked correctly, ties counting one half.
    fn pairwise_auc(scored: &[(f64, u8)]) -> f64 {
        let pos: Vec<f64> = scored.iter().filter(|(_, l)| *l == 1).map(|(s, _)| *s).collect();
        let neg: Vec<f64> = scored.iter().filter(|(_, l)| *l == 0).map(|(s, _)| *s).collect();
        let mut total = 0.0;
        for &p in &pos {
            for &n in &neg {
                total += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        total / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn grid_auc_tracks_pairwise_oracle_on_toy_set() {
        let mut rng = stream(21, "toy");
        let scored: Vec<(f64, u8)> = (0..20)
            .map(|_| {
                let label = u8::from(rng.random_bool(0.5));
                let score: f64 = if label == 1 {
                    rng.random_range(0.3..1.0)
                } else {
                    rng.random_range(0.0..0.7)
                };
                (score, label)
            })
            .collect();
        let report = EvalReport::from_scored(&scored, 101);
        let metrics = aggregate_eval(&[report], 0.0, &mut stream(0, "ev")).unwrap();
        let oracle = pairwise_auc(&scored);
        assert!(
            (metrics.auc - oracle).abs() < 0.01,
            "grid {} vs pairwise {}",
            metrics.auc,
            oracle
        );
    }

    #[test]
    fn rank_auc_matches_pairwise_oracle() {
        let mut rng = stream(33, "rank");
        for _ in 0..20 {
            let scored: Vec<(f64, u8)> = (0..30)
                .map(|_| {
                    (
                        (rng.random_range(0.0..1.0f64) * 10.0).round() / 10.0, // force ties
                        u8::from(rng.random_bool(0.4)),
                    )
                })
                .collect();
            let pos = scored.iter().filter(|(_, l)| *l == 1).count();
            if pos == 0 || pos == scored.len() {
                continue;
            }
            let a = auc_from_scores(&scored);
            let b = pairwise_auc(&scored);
            assert!((a - b).abs() < 1e-12, "rank {a} vs pairwise {b}");
        }
    }

    #[test]
    fn eval_reports_conserve_counts() {
        let mut rng = stream(8, "cons");
        let mut reports = Vec::new();
        let mut total_pos = 0u64;
        for _ in 0..10 {
            let scored: Vec<(f64, u8)> = (0..5)
                .map(|_| (rng.random_range(0.0..1.0), u8::from(rng.random_bool(0.3))))
                .collect();
            total_pos += scored.iter().filter(|(_, l)| *l == 1).count() as u64;
            reports.push(EvalReport::from_scored(&scored, 21));
        }
        // Zero noise: summed TP+FN equals total positives at every
        // threshold, and FP+TN the total negatives.
        let total: u64 = reports.iter().map(|r| r.n_samples).sum();
        for i in 0..21 {
            let pos: u64 = reports.iter().map(|r| r.true_pos[i] + r.false_neg[i]).sum();
            assert_eq!(pos, total_pos);
            let neg: u64 = reports.iter().map(|r| r.false_pos[i] + r.true_neg[i]).sum();
            assert_eq!(neg, total - total_pos);
        }
    }

    #[test]
    fn mismatched_grids_rejected() {
        let a = EvalReport::from_scored(&[(0.5, 1)], 11);
        let b = EvalReport::from_scored(&[(0.5, 0)], 21);
        assert!(matches!(
            aggregate_eval(&[a, b], 0.0, &mut stream(0, "ev")),
            Err(AggregationError::GridMismatch)
        ));
        assert!(matches!(
            aggregate_eval(&[], 0.0, &mut stream(0, "ev")),
            Err(AggregationError::NoReports)
        ));
    }

    #[test]
    fn noised_metrics_stay_in_bounds() {
        let scored: Vec<(f64, u8)> = (0..40)
            .map(|i| (i as f64 / 39.0, u8::from(i % 3 == 0)))
            .collect();
        let report = EvalReport::from_scored(&scored, 51);
        for seed in 0..20 {
            let metrics =
                aggregate_eval(std::slice::from_ref(&report), 5.0, &mut stream(seed, "noise")).unwrap();
            assert!((0.0..=1.0).contains(&metrics.auc));
            assert!(metrics.loss >= 0.0);
        }
    }

    // ------------------------------------------------------------------
    // replay and weighted-mean oracle
    // ------------------------------------------------------------------

    #[test]
    fn replay_with_extra_rejected_submissions_is_identical() {
        let updates: Vec<GradientUpdate> =
            (0..3).map(|i| update(vec![i as f64, 1.0, 0.5], 1 + i as u64, 0)).collect();

        let run = |extra: bool| {
            let mut server = FlServer::new(config(3), zero_weights(2)).unwrap();
            server.open_round(0).unwrap();
            for u in &updates {
                server.submit_update(u.clone());
            }
            if extra {
                server.submit_update(update(vec![500.0, 500.0, 500.0], 9, 0));
                server.submit_update(update(vec![f64::NAN, 0.0, 0.0], 1, 0));
            }
            server.aggregate(&mut stream(0, "agg")).unwrap();
            server.global().weights.clone()
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn zero_noise_aggregation_matches_direct_mean() {
        let mut rng = stream(17, "sets");
        for _ in 0..100 {
            let dim = rng.random_range(1..6);
            let count = rng.random_range(1..30);
            let updates: Vec<GradientUpdate> = (0..count)
                .map(|_| {
                    update(
                        (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect(),
                        rng.random_range(1..20),
                        0,
                    )
                })
                .collect();
            let got = weighted_average_delta(&updates, dim);
            // Direct weighted mean in natural order.
            let total: f64 = updates.iter().map(|u| u.sample_weight as f64).sum();
            for (j, &value) in got.iter().enumerate() {
                let direct: f64 = updates
                    .iter()
                    .map(|u| u.sample_weight as f64 * u.delta[j])
                    .sum::<f64>()
                    / total;
                assert!((value - direct).abs() < 1e-12, "{value} vs {direct}");
            }
        }
    }
}
