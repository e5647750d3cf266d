//! Experiment configuration and drivers: the full simulation lifecycle
//! (analytics, policy publication, training rounds, noised evaluation,
//! funnel validation) plus the two comparison experiments for label
//! balancing and feature normalization.
//!
//! A config file plus its seed reproduces a run bit for bit. The report
//! carries two tracks: the noised, privacy-respecting values a production
//! deployment would see, and an oracle track (exact metrics, true
//! statistics) that exists only for testing and is suppressed entirely in
//! production mode.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{
    aggregate_eval, auc_from_scores, AggregationConfig, AggregationError, EvalReport, FlServer,
    NoisePlacement, NoisedMetrics, StopDecision, StopReason, SubmitOutcome,
};
use crate::analytics::{
    compute_feature_stats, estimate_label_stats, AnalyticsError, FeatureCohort, FeatureStats,
    LabelStats,
};
use crate::device::{
    run_training_session, EligibilityCriteria, MetadataHandshake, NetworkClass, SessionContext,
    SessionFaults, TrainingPhase,
};
use crate::funnel::{
    dropoff_report, FunnelError, FunnelEvent, FunnelReport, FunnelSink, PipelineShape, ReasonCode,
};
use crate::model::{
    bce_loss, forward, init_weights, Activation, ModelConfig, ModelError, ModelWeights,
    TrainHyper,
};
use crate::population::{
    balanced_ground_truth, generate_population, join, DataError, Population, PopulationConfig,
};
use crate::rng::stream;
use crate::schema::FeatureSchema;
use crate::transform::{TransformError, TransformSpec};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("configuration contradiction: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Funnel(#[from] FunnelError),
    #[error(transparent)]
    Transform(#[from] TransformError),
}

/// Federated-analytics knobs for the simulated queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticsSettings {
    pub flip_prob: f64,
    /// Devices sampled per feature-statistics query.
    pub feature_cohort: usize,
    /// Devices sampled per per-round label-ratio query.
    pub label_cohort: usize,
    /// Devices sampled per quantile-search iteration.
    pub quantile_cohort: usize,
    pub quantile_iterations: u32,
    pub target_minority_share: f64,
}

/// Disjoint device pools; analytics devices are selected independently of
/// training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortFractions {
    pub train: f64,
    pub eval: f64,
    pub analytics: f64,
}

/// Simulated mid-session fault rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultSettings {
    /// Probability a session loses the network at upload.
    pub upload_loss_prob: f64,
    /// Probability the battery dies during local training.
    pub battery_drop_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub population: PopulationConfig,
    pub model: ModelConfig,
    pub hyper: TrainHyper,
    pub aggregation: AggregationConfig,
    pub analytics: AnalyticsSettings,
    pub eligibility: EligibilityCriteria,
    pub cohorts: CohortFractions,
    pub balancing: bool,
    pub normalization: bool,
    /// Gaussian std added to every aggregated eval count.
    pub eval_noise_std: f64,
    /// Threshold-grid size for eval reports.
    pub eval_grid: u32,
    pub warmup_ticks: u64,
    pub funnel_bucket_ticks: u64,
    pub faults: FaultSettings,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Desk-scale defaults: seconds-long runs, analytics estimates stable.
    pub fn desk_default() -> Self {
        let feature_count = 9;
        let disparity = 1.0;
        Self {
            population: PopulationConfig {
                device_count: 2000,
                samples_per_device: 1,
                positive_rate: 0.5,
                scale_disparity: disparity,
                device_noise: 0.1,
                ground_truth: balanced_ground_truth(feature_count, disparity, 3.0),
                seed: 0,
            },
            model: ModelConfig {
                input_dim: feature_count,
                hidden_widths: vec![16],
                activation: Activation::Tanh,
            },
            hyper: TrainHyper {
                learning_rate: 1.0,
                clip_norm: 1.0,
                noise_multiplier: 0.0,
                local_steps: 1,
                batch_size: 1,
            },
            aggregation: AggregationConfig {
                target_updates: 100,
                max_wait: 1_000_000,
                noise_placement: NoisePlacement::Device,
                tee_noise_std: 0.0,
                server_lr: 1.0,
                max_rounds: 30,
                stop_metric_threshold: None,
            },
            analytics: AnalyticsSettings {
                flip_prob: 0.1,
                feature_cohort: 400,
                label_cohort: 400,
                quantile_cohort: 400,
                quantile_iterations: 12,
                target_minority_share: 0.5,
            },
            eligibility: EligibilityCriteria {
                min_battery: 0.2,
                required_network: NetworkClass::Metered,
                require_idle: false,
                min_free_storage: 1_000_000,
                min_app_version: 3,
            },
            cohorts: CohortFractions {
                train: 0.6,
                eval: 0.2,
                analytics: 0.2,
            },
            balancing: true,
            normalization: true,
            eval_noise_std: 1.0,
            eval_grid: 101,
            warmup_ticks: 24,
            funnel_bucket_ticks: 3600,
            faults: FaultSettings {
                upload_loss_prob: 0.0,
                battery_drop_prob: 0.0,
            },
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.population.validate()?;
        self.model.validate()?;
        self.hyper.validate()?;
        self.aggregation.validate()?;
        if self.model.input_dim != self.population.feature_count() {
            return Err(SimError::Config(format!(
                "model input_dim {} != population feature count {}",
                self.model.input_dim,
                self.population.feature_count()
            )));
        }
        if !(0.0..0.5).contains(&self.analytics.flip_prob) {
            return Err(SimError::Config("flip_prob must be in [0, 0.5)".into()));
        }
        let f = self.cohorts;
        if !(f.train > 0.0 && f.eval > 0.0 && f.analytics > 0.0)
            || f.train + f.eval + f.analytics > 1.0 + 1e-9
        {
            return Err(SimError::Config(
                "cohort fractions must be positive and sum to at most 1".into(),
            ));
        }
        if self.eval_grid < 2 {
            return Err(SimError::Config("eval_grid must be >= 2".into()));
        }
        for p in [self.faults.upload_loss_prob, self.faults.battery_drop_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::Config("fault probabilities must be in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Report types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinSummary {
    pub joined: u64,
    pub unmatched_features: u64,
    pub unmatched_labels: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub pi_hat: f64,
    pub keep_pos: f64,
    pub keep_neg: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_positive_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticsRecord {
    pub feature: String,
    pub est_mean: f64,
    pub est_std: f64,
    pub lo: f64,
    pub hi: f64,
    pub n_reports: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_std: Option<f64>,
}

/// One evaluation snapshot; the exact fields are the oracle track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub noised_loss: f64,
    pub noised_accuracy: f64,
    pub noised_auc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round_id: u64,
    pub participants: u64,
    pub delta_norm: f64,
    pub pi_hat: f64,
    pub keep_pos: f64,
    pub keep_neg: f64,
    #[serde(flatten)]
    pub eval: EvalPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub production_mode: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
    pub stop_reason: String,
    pub joiner: JoinSummary,
    pub label_stats: LabelSummary,
    pub analytics: Vec<AnalyticsRecord>,
    /// Pre-training evaluation of the initial model.
    pub initial_eval: EvalPoint,
    pub rounds: Vec<RoundMetrics>,
    pub score_histogram: Vec<u64>,
    pub histogram_entropy: f64,
    /// Share of held-out scores inside [0.2, 0.8].
    pub central_mass: f64,
    pub funnel: FunnelReport,
}

/// Full per-round noised metrics as exported for dashboarding: round id,
/// participation, aggregate delta norm, the per-threshold curves, AUC and
/// the noise scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisedMetricsRecord {
    pub round_id: u64,
    pub participants: u64,
    pub delta_norm: f64,
    #[serde(flatten)]
    pub metrics: NoisedMetrics,
}

/// Full simulation result; the funnel events and per-round metric records
/// ship separately from the report so downstream consumers can stream them
/// line by line.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub report: RunReport,
    pub events: Vec<FunnelEvent>,
    pub round_metrics: Vec<NoisedMetricsRecord>,
    pub final_weights: ModelWeights,
}

pub const SCORE_HISTOGRAM_BINS: usize = 20;

/// Histogram over [0, 1) with 20 bins.
pub fn score_histogram(scores: &[f64]) -> Vec<u64> {
    let mut bins = vec![0u64; SCORE_HISTOGRAM_BINS];
    for &s in scores {
        let idx = ((s * SCORE_HISTOGRAM_BINS as f64) as usize).min(SCORE_HISTOGRAM_BINS - 1);
        bins[idx] += 1;
    }
    bins
}

pub fn histogram_entropy(histogram: &[u64]) -> f64 {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return 0.0;
    }
    histogram
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Share of mass in the bins covering [0.2, 0.8].
pub fn central_mass(histogram: &[u64]) -> f64 {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let center: u64 = histogram[4..16].iter().sum();
    center as f64 / total as f64
}

// ---------------------------------------------------------------------------
// run_simulation
// ---------------------------------------------------------------------------

struct Cohorts {
    train: Vec<usize>,
    eval: Vec<usize>,
    analytics: Vec<usize>,
}

fn split_cohorts(config: &ExperimentConfig, device_count: usize) -> Cohorts {
    use rand::seq::SliceRandom;
    let mut indices: Vec<usize> = (0..device_count).collect();
    indices.shuffle(&mut stream(config.seed, "cohorts"));
    let n_train = ((device_count as f64 * config.cohorts.train) as usize).max(1);
    let n_eval = ((device_count as f64 * config.cohorts.eval) as usize).max(1);
    let n_analytics = ((device_count as f64 * config.cohorts.analytics) as usize).max(1);
    let train = indices[..n_train].to_vec();
    let eval = indices[n_train..n_train + n_eval].to_vec();
    let analytics = indices[n_train + n_eval..n_train + n_eval + n_analytics].to_vec();
    Cohorts {
        train,
        eval,
        analytics,
    }
}

/// The raw (pre-normalization) value a device would report for a feature:
/// the origin-resolved value its own transformer produces.
fn reported_feature_values(
    population: &Population,
    base_spec: &TransformSpec,
    pool: &[usize],
    feature_index: usize,
) -> Vec<f64> {
    pool.iter()
        .filter_map(|&idx| {
            let device = &population.devices[idx];
            device.samples.first().map(|sample| {
                crate::transform::apply_transform(
                    base_spec,
                    &population.schema,
                    &sample.server_features,
                    &sample.device_signals,
                )
                .features[feature_index]
            })
        })
        .collect()
}

fn estimate_round_policy(
    config: &ExperimentConfig,
    population: &Population,
    analytics_pool: &[usize],
    round_tag: &str,
) -> Result<LabelStats, SimError> {
    use rand::seq::SliceRandom;
    let mut pool = analytics_pool.to_vec();
    pool.shuffle(&mut stream(config.seed, &format!("label-cohort/{round_tag}")));
    pool.truncate(config.analytics.label_cohort.max(1));
    let labels: Vec<u8> = pool
        .iter()
        .filter_map(|&idx| population.devices[idx].samples.first().map(|s| s.label))
        .collect();
    let mut rng = stream(config.seed, &format!("label-bits/{round_tag}"));
    if config.balancing {
        Ok(estimate_label_stats(
            &labels,
            config.analytics.flip_prob,
            config.analytics.target_minority_share,
            &mut rng,
        )?)
    } else {
        // Ratio is still estimated (the metadata store always carries it);
        // the keep-policy just does not act on it.
        let stats = estimate_label_stats(&labels, config.analytics.flip_prob, 0.5, &mut rng);
        let pi_hat = match stats {
            Ok(s) => s.positive_ratio,
            Err(AnalyticsError::SingleClassPopulation) => 0.0,
            Err(e) => return Err(e.into()),
        };
        Ok(LabelStats::keep_all(pi_hat))
    }
}

struct EvalOutcome {
    point: EvalPoint,
    metrics: NoisedMetrics,
    scores: Vec<f64>,
    noised_accuracy: f64,
}

fn evaluate(
    config: &ExperimentConfig,
    population: &Population,
    eval_pool: &[usize],
    spec: &TransformSpec,
    weights: &ModelWeights,
    production: bool,
    noise_tag: &str,
) -> Result<EvalOutcome, SimError> {
    let mut reports = Vec::new();
    let mut all_scored: Vec<(f64, u8)> = Vec::new();
    for &idx in eval_pool {
        let device = &population.devices[idx];
        let mut scored = Vec::with_capacity(device.samples.len());
        for sample in &device.samples {
            let transformed = crate::transform::apply_transform(
                spec,
                &population.schema,
                &sample.server_features,
                &sample.device_signals,
            );
            let score = forward(weights, &transformed.features)?;
            scored.push((score, sample.label));
        }
        if !scored.is_empty() {
            reports.push(EvalReport::from_scored(&scored, config.eval_grid));
            all_scored.extend(scored);
        }
    }
    let noised = aggregate_eval(
        &reports,
        config.eval_noise_std,
        &mut stream(config.seed, noise_tag),
    )?;

    let (exact_loss, exact_accuracy, exact_auc) = if production {
        (None, None, None)
    } else {
        let n = all_scored.len() as f64;
        let loss = all_scored.iter().map(|&(s, l)| bce_loss(s, l)).sum::<f64>() / n;
        let correct = all_scored
            .iter()
            .filter(|&&(s, l)| (s >= 0.5) == (l == 1))
            .count() as f64;
        (
            Some(loss),
            Some(correct / n),
            Some(auc_from_scores(&all_scored)),
        )
    };

    Ok(EvalOutcome {
        point: EvalPoint {
            noised_loss: noised.loss,
            noised_accuracy: noised.accuracy,
            noised_auc: noised.auc,
            exact_loss,
            exact_accuracy,
            exact_auc,
        },
        scores: all_scored.iter().map(|&(s, _)| s).collect(),
        noised_accuracy: noised.accuracy,
        metrics: noised,
    })
}

fn sample_faults<R: rand::Rng>(config: &ExperimentConfig, rng: &mut R) -> SessionFaults {
    if config.faults.battery_drop_prob > 0.0 && rng.random_bool(config.faults.battery_drop_prob) {
        return SessionFaults {
            fail_at: Some((TrainingPhase::Trained, ReasonCode::BatteryDrop)),
        };
    }
    if config.faults.upload_loss_prob > 0.0 && rng.random_bool(config.faults.upload_loss_prob) {
        return SessionFaults {
            fail_at: Some((TrainingPhase::Uploaded, ReasonCode::UploadNetwork)),
        };
    }
    SessionFaults::none()
}

/// Executes the full lifecycle: analytics cohorts, feature statistics,
/// label statistics, keep-policy publication, training rounds with
/// per-round policy refresh and noised evaluation, then funnel validation.
/// Deterministic for a given config.
pub fn run_simulation(config: &ExperimentConfig, production: bool) -> Result<SimOutput, SimError> {
    config.validate()?;
    let population = generate_population(&config.population)?;
    let schema: &FeatureSchema = &population.schema;
    let cohorts = split_cohorts(config, population.devices.len());

    // Server-side joiner: in this simulation devices already hold their
    // joined samples; the join runs to produce the feed accounting.
    let join_out = join(&population.server_records, &population.labels)?;
    let joiner = JoinSummary {
        joined: join_out.joined.len() as u64,
        unmatched_features: join_out.unmatched_features,
        unmatched_labels: join_out.unmatched_labels,
    };

    // Federated analytics: per-feature mean and second-moment queries over
    // fresh cohorts from the analytics pool.
    use rand::seq::SliceRandom;
    let base_spec = TransformSpec::base_for(schema, 1);
    base_spec.validate(schema)?;
    let mut cohort_values: Vec<(String, Vec<f64>)> = Vec::with_capacity(schema.len());
    for (i, descriptor) in schema.features().iter().enumerate() {
        let mut pool = cohorts.analytics.clone();
        pool.shuffle(&mut stream(
            config.seed,
            &format!("feature-cohort/{}", descriptor.name),
        ));
        pool.truncate(config.analytics.feature_cohort.max(1));
        cohort_values.push((
            descriptor.name.clone(),
            reported_feature_values(&population, &base_spec, &pool, i),
        ));
    }
    let feature_cohorts: Vec<FeatureCohort> = schema
        .features()
        .iter()
        .zip(&cohort_values)
        .map(|(descriptor, (name, values))| FeatureCohort {
            name,
            range: descriptor.range,
            values,
        })
        .collect();
    let stats: FeatureStats = compute_feature_stats(
        &feature_cohorts,
        config.analytics.flip_prob,
        &mut stream(config.seed, "feature-stats"),
    )?;

    let analytics_records: Vec<AnalyticsRecord> = stats
        .stats
        .iter()
        .zip(&cohort_values)
        .map(|(stat, (_, values))| {
            let (exact_mean, exact_std) = if production {
                (None, None)
            } else {
                let n = values.len() as f64;
                let clamped: Vec<f64> = values.iter().map(|&v| stat.range.clamp(v)).collect();
                let mean = clamped.iter().sum::<f64>() / n;
                let var =
                    (clamped.iter().map(|v| v * v).sum::<f64>() / n - mean * mean).max(0.0);
                (Some(mean), Some(var.sqrt()))
            };
            AnalyticsRecord {
                feature: stat.name.clone(),
                est_mean: stat.mean,
                est_std: stat.std_dev,
                lo: stat.range.lo,
                hi: stat.range.hi,
                n_reports: stat.n_reports,
                exact_mean,
                exact_std,
            }
        })
        .collect();

    // Transform spec pushed to devices: origin resolution plus federated
    // normalization when enabled.
    let spec = if config.normalization {
        base_spec.clone().with_normalization(&stats)
    } else {
        base_spec.clone()
    };
    spec.validate(schema)?;

    // Initial keep-policy; refreshed every round from the metadata store.
    let initial_policy = estimate_round_policy(config, &population, &cohorts.analytics, "init")?;
    let label_summary = LabelSummary {
        pi_hat: initial_policy.positive_ratio,
        keep_pos: initial_policy.keep_pos,
        keep_neg: initial_policy.keep_neg,
        exact_positive_rate: if production {
            None
        } else {
            Some(population.exact_positive_rate())
        },
    };

    let initial_weights = init_weights(&config.model, &mut stream(config.seed, "init"));
    let mut server = FlServer::new(config.aggregation.clone(), initial_weights)?;
    let sink = FunnelSink::new(config.funnel_bucket_ticks);

    let initial_eval = evaluate(
        config,
        &population,
        &cohorts.eval,
        &spec,
        &server.global().weights,
        production,
        "eval-noise/init",
    )?;

    let noise_on_device = config.aggregation.noise_placement == NoisePlacement::Device;
    let mut rounds: Vec<RoundMetrics> = Vec::new();
    let mut round_metrics: Vec<NoisedMetricsRecord> = Vec::new();
    let mut clock: u64 = 0;
    let mut stop_reason: Option<String> = None;
    let mut eligible_sessions: u64 = 0;
    let mut attempts = 0usize;
    let max_attempts = config.aggregation.max_rounds * 2 + 3;

    while rounds.len() < config.aggregation.max_rounds && attempts < max_attempts {
        attempts += 1;
        let round_tag = format!("{attempts}");
        let policy = estimate_round_policy(config, &population, &cohorts.analytics, &round_tag)?;

        server.open_round(clock)?;
        let round_id = server.current_round().expect("just opened").round_id;
        let snapshot = server.global().weights.clone();

        // Published to devices through metadata serving; sessions read their
        // criteria and keep-probabilities from it.
        let handshake = MetadataHandshake::new(
            config.eligibility.clone(),
            snapshot.version,
            spec.version,
            &policy,
            "training",
        );

        let mut order = cohorts.train.clone();
        order.shuffle(&mut stream(config.seed, &format!("round-order/{round_tag}")));

        let ctx = SessionContext {
            use_case: &handshake.purpose,
            criteria: &handshake.eligibility,
            schema,
            spec: &spec,
            policy: &policy,
            hyper: &config.hyper,
            snapshot: &snapshot,
            noise_on_device,
            warmup_ticks: config.warmup_ticks,
            now: clock,
        };

        let mut completed = false;
        for &device_idx in &order {
            let device = &population.devices[device_idx];
            let mut session_rng = stream(
                config.seed,
                &format!("session/{round_tag}/{device_idx}"),
            );
            let faults = sample_faults(config, &mut session_rng);
            let ctx = SessionContext { now: clock, ..ctx };
            let outcome = run_training_session(device, &ctx, &faults, &sink, &mut session_rng)?;
            clock += 1;
            if outcome.failed_at != Some(TrainingPhase::Eligibility) {
                eligible_sessions += 1;
            }
            if let Some(update) = outcome.update {
                if let SubmitOutcome::Accepted { completed: done } = server.submit_update(update) {
                    if done {
                        completed = true;
                        break;
                    }
                }
            }
            if server.check_timeout(clock) {
                break;
            }
        }

        if !completed {
            // Candidate pool exhausted or timed out: the round abandons and
            // the next one reopens on the same version.
            if server
                .current_round()
                .is_some_and(|r| r.status == crate::aggregation::RoundStatus::Open)
            {
                server.abandon_round()?;
            }
            if eligible_sessions == 0 {
                stop_reason = Some("aborted".into());
                break;
            }
            continue;
        }

        server.aggregate(&mut stream(config.seed, &format!("tee/{round_tag}")))?;
        let eval = evaluate(
            config,
            &population,
            &cohorts.eval,
            &spec,
            &server.global().weights,
            production,
            &format!("eval-noise/{round_tag}"),
        )?;
        server.record_eval_metric(eval.noised_accuracy);

        let record = server.global().history.last().expect("round recorded");
        round_metrics.push(NoisedMetricsRecord {
            round_id,
            participants: record.participants,
            delta_norm: record.delta_norm,
            metrics: eval.metrics,
        });
        rounds.push(RoundMetrics {
            round_id,
            participants: record.participants,
            delta_norm: record.delta_norm,
            pi_hat: policy.positive_ratio,
            keep_pos: policy.keep_pos,
            keep_neg: policy.keep_neg,
            eval: eval.point,
        });

        if let StopDecision::Stop(reason) = server.should_stop() {
            stop_reason = Some(match reason {
                StopReason::MaxRounds => "max_rounds".into(),
                StopReason::MetricReached => "metric_reached".into(),
            });
            break;
        }
    }

    let aborted = if rounds.is_empty() {
        if eligible_sessions == 0 {
            Some("no round completed: all sessions ineligible".to_string())
        } else {
            Some("no round completed".to_string())
        }
    } else {
        None
    };
    if stop_reason.is_none() && rounds.len() < config.aggregation.max_rounds {
        // Too many abandoned rounds burned the attempt budget.
        stop_reason = Some("attempt_budget".into());
    }

    // Final held-out score distribution.
    let final_eval = evaluate(
        config,
        &population,
        &cohorts.eval,
        &spec,
        &server.global().weights,
        production,
        "eval-noise/final",
    )?;
    let histogram = score_histogram(&final_eval.scores);
    let entropy = histogram_entropy(&histogram);
    let center = central_mass(&histogram);

    let events = sink.snapshot();
    let funnel = dropoff_report(&events, &PipelineShape::training_default());

    let report = RunReport {
        seed: config.seed,
        production_mode: production,
        aborted,
        stop_reason: stop_reason.unwrap_or_else(|| "max_rounds".into()),
        joiner,
        label_stats: label_summary,
        analytics: analytics_records,
        initial_eval: initial_eval.point,
        rounds,
        score_histogram: histogram,
        histogram_entropy: entropy,
        central_mass: center,
        funnel,
    };

    Ok(SimOutput {
        report,
        events,
        round_metrics,
        final_weights: server.global().weights.clone(),
    })
}

// ---------------------------------------------------------------------------
// Analytics-only driver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileRecord {
    pub feature: String,
    pub q: f64,
    pub estimate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticsOutput {
    pub features: Vec<AnalyticsRecord>,
    pub label_stats: LabelSummary,
    pub medians: Vec<QuantileRecord>,
}

/// Runs only the federated-analytics phase: feature statistics, label
/// statistics and a median search per feature. Each quantile iteration
/// draws a fresh cohort; a device serves at most one iteration per search.
pub fn run_analytics(config: &ExperimentConfig, production: bool) -> Result<AnalyticsOutput, SimError> {
    use rand::seq::SliceRandom;
    config.validate()?;
    let population = generate_population(&config.population)?;
    let schema = &population.schema;
    let cohorts = split_cohorts(config, population.devices.len());
    let base_spec = TransformSpec::base_for(schema, 1);

    let mut features = Vec::with_capacity(schema.len());
    let mut medians = Vec::with_capacity(schema.len());
    for (i, descriptor) in schema.features().iter().enumerate() {
        let mut pool = cohorts.analytics.clone();
        pool.shuffle(&mut stream(
            config.seed,
            &format!("analytics/feature-cohort/{}", descriptor.name),
        ));
        let stat_pool: Vec<usize> = pool
            .iter()
            .copied()
            .take(config.analytics.feature_cohort.max(1))
            .collect();
        let values = reported_feature_values(&population, &base_spec, &stat_pool, i);
        let cohort = FeatureCohort {
            name: &descriptor.name,
            range: descriptor.range,
            values: &values,
        };
        let stats = compute_feature_stats(
            &[cohort],
            config.analytics.flip_prob,
            &mut stream(config.seed, &format!("analytics/stats/{}", descriptor.name)),
        )?;
        let stat = &stats.stats[0];
        let (exact_mean, exact_std) = if production {
            (None, None)
        } else {
            let n = values.len() as f64;
            let clamped: Vec<f64> = values.iter().map(|&v| stat.range.clamp(v)).collect();
            let mean = clamped.iter().sum::<f64>() / n;
            let var = (clamped.iter().map(|v| v * v).sum::<f64>() / n - mean * mean).max(0.0);
            (Some(mean), Some(var.sqrt()))
        };
        features.push(AnalyticsRecord {
            feature: stat.name.clone(),
            est_mean: stat.mean,
            est_std: stat.std_dev,
            lo: stat.range.lo,
            hi: stat.range.hi,
            n_reports: stat.n_reports,
            exact_mean,
            exact_std,
        });

        // Median search: disjoint per-iteration cohorts from a fresh shuffle.
        let mut search_pool = cohorts.analytics.clone();
        search_pool.shuffle(&mut stream(
            config.seed,
            &format!("analytics/quantile-cohort/{}", descriptor.name),
        ));
        let iterations = config.analytics.quantile_iterations.max(1);
        let chunk = (search_pool.len() / iterations as usize).max(1);
        let mut iteration = 0usize;
        let mut bits_rng = stream(
            config.seed,
            &format!("analytics/quantile-bits/{}", descriptor.name),
        );
        let query_id = crate::analytics::QueryId::new(format!("{}/median", descriptor.name));
        let flip = config.analytics.flip_prob;
        let estimate = crate::analytics::estimate_quantile(
            |threshold| {
                let start = iteration * chunk;
                iteration += 1;
                search_pool[start.min(search_pool.len())..]
                    .iter()
                    .take(chunk.min(config.analytics.quantile_cohort.max(1)))
                    .filter_map(|&idx| {
                        let device = &population.devices[idx];
                        device.samples.first().map(|sample| {
                            let value = crate::transform::apply_transform(
                                &base_spec,
                                schema,
                                &sample.server_features,
                                &sample.device_signals,
                            )
                            .features[i];
                            crate::analytics::threshold_report(
                                value,
                                threshold,
                                flip,
                                &query_id,
                                &mut bits_rng,
                            )
                        })
                    })
                    .collect()
            },
            0.5,
            descriptor.range,
            iterations,
            flip,
        )?;
        let exact = if production {
            None
        } else {
            let mut sorted = reported_feature_values(&population, &base_spec, &cohorts.analytics, i);
            sorted.sort_by(f64::total_cmp);
            let rank = (0.5 * sorted.len() as f64).ceil() as usize;
            Some(sorted[rank.max(1) - 1])
        };
        medians.push(QuantileRecord {
            feature: descriptor.name.clone(),
            q: 0.5,
            estimate,
            exact,
        });
    }

    let policy = estimate_round_policy(config, &population, &cohorts.analytics, "analytics")?;
    let label_stats = LabelSummary {
        pi_hat: policy.positive_ratio,
        keep_pos: policy.keep_pos,
        keep_neg: policy.keep_neg,
        exact_positive_rate: if production {
            None
        } else {
            Some(population.exact_positive_rate())
        },
    };

    Ok(AnalyticsOutput {
        features,
        label_stats,
        medians,
    })
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub histogram: Vec<u64>,
    pub entropy: f64,
    pub central_mass: f64,
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub final_auc: f64,
}

fn variant_summary(output: &SimOutput) -> VariantSummary {
    let last = output
        .report
        .rounds
        .last()
        .map(|r| r.eval.clone())
        .unwrap_or_else(|| output.report.initial_eval.clone());
    VariantSummary {
        histogram: output.report.score_histogram.clone(),
        entropy: output.report.histogram_entropy,
        central_mass: output.report.central_mass,
        final_loss: last.exact_loss.unwrap_or(last.noised_loss),
        final_accuracy: last.exact_accuracy.unwrap_or(last.noised_accuracy),
        final_auc: last.exact_auc.unwrap_or(last.noised_auc),
    }
}

/// Label-balancing comparison: the same config with the keep-policy off and
/// on. The balanced variant should spread the score distribution instead of
/// pinning it to the extremes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancingComparison {
    pub unbalanced: VariantSummary,
    pub balanced: VariantSummary,
    pub entropy_increased: bool,
    pub central_mass_increased: bool,
}

impl BalancingComparison {
    pub fn passed(&self) -> bool {
        self.entropy_increased && self.central_mass_increased
    }
}

pub fn experiment_balancing(config: &ExperimentConfig) -> Result<BalancingComparison, SimError> {
    let mut off = config.clone();
    off.balancing = false;
    let mut on = config.clone();
    on.balancing = true;

    let unbalanced = variant_summary(&run_simulation(&off, false)?);
    let balanced = variant_summary(&run_simulation(&on, false)?);
    Ok(BalancingComparison {
        entropy_increased: balanced.entropy > unbalanced.entropy,
        central_mass_increased: balanced.central_mass > unbalanced.central_mass,
        unbalanced,
        balanced,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    /// Loss per evaluation point, starting at the untrained model.
    pub loss: Vec<f64>,
    pub accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaturationCheck {
    pub first_third_improvement: f64,
    pub last_third_improvement: f64,
    pub saturated: bool,
}

/// Feature-normalization comparison at identical seeds and learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationComparison {
    pub unnormalized: CurveSummary,
    pub normalized: CurveSummary,
    /// normalized final loss / un-normalized final loss.
    pub final_loss_ratio: f64,
    /// Accuracy percentage points gained by normalization.
    pub accuracy_gain_points: f64,
    pub saturation: SaturationCheck,
    pub loss_halved: bool,
    pub accuracy_gained: bool,
}

impl NormalizationComparison {
    pub fn passed(&self) -> bool {
        self.loss_halved && self.accuracy_gained && self.saturation.saturated
    }
}

fn curve_summary(output: &SimOutput) -> CurveSummary {
    let mut loss = vec![output
        .report
        .initial_eval
        .exact_loss
        .unwrap_or(output.report.initial_eval.noised_loss)];
    let mut accuracy = vec![output
        .report
        .initial_eval
        .exact_accuracy
        .unwrap_or(output.report.initial_eval.noised_accuracy)];
    for round in &output.report.rounds {
        loss.push(round.eval.exact_loss.unwrap_or(round.eval.noised_loss));
        accuracy.push(
            round
                .eval
                .exact_accuracy
                .unwrap_or(round.eval.noised_accuracy),
        );
    }
    CurveSummary { loss, accuracy }
}

/// Improvement is measured best-so-far, so round-to-round evaluation jitter
/// cannot fake progress: the first-third improvement is the drop from the
/// starting loss to the best loss seen in the first third, the last-third
/// improvement is how much lower the last third gets than everything
/// before it.
fn saturation_check(loss: &[f64]) -> SaturationCheck {
    let n = loss.len();
    let third = (n / 3).max(1);
    let min_of = |slice: &[f64]| slice.iter().copied().fold(f64::INFINITY, f64::min);
    let first = loss[0] - min_of(&loss[..third.min(n)]);
    let cut = (n - third).max(1);
    let last = min_of(&loss[..cut]) - min_of(&loss[cut.min(n - 1)..]);
    SaturationCheck {
        first_third_improvement: first,
        last_third_improvement: last,
        saturated: last < 0.1 * first,
    }
}

pub fn experiment_normalization(
    config: &ExperimentConfig,
) -> Result<NormalizationComparison, SimError> {
    let mut off = config.clone();
    off.normalization = false;
    let mut on = config.clone();
    on.normalization = true;

    let raw = run_simulation(&off, false)?;
    let norm = run_simulation(&on, false)?;
    let unnormalized = curve_summary(&raw);
    let normalized = curve_summary(&norm);

    let final_raw = *unnormalized.loss.last().expect("non-empty curve");
    let final_norm = *normalized.loss.last().expect("non-empty curve");
    let final_loss_ratio = final_norm / final_raw;
    let accuracy_gain_points = (normalized.accuracy.last().unwrap()
        - unnormalized.accuracy.last().unwrap())
        * 100.0;
    let saturation = saturation_check(&unnormalized.loss);

    Ok(NormalizationComparison {
        final_loss_ratio,
        accuracy_gain_points,
        loss_halved: final_loss_ratio <= 0.5,
        accuracy_gained: accuracy_gain_points >= 2.0,
        saturation,
        unnormalized,
        normalized,
    })
}

/// Central-oracle comparison input: the population's raw samples split by
/// the simulation's own cohorts, so the baseline and the federated run
/// train and evaluate on the same devices.
pub fn baseline_split(
    config: &ExperimentConfig,
) -> Result<(Vec<crate::model::Sample>, Vec<crate::model::Sample>), SimError> {
    config.validate()?;
    let population = generate_population(&config.population)?;
    let cohorts = split_cohorts(config, population.devices.len());
    let per_device = population.raw_device_samples();
    let collect = |pool: &[usize]| -> Vec<crate::model::Sample> {
        pool.iter()
            .flat_map(|&idx| per_device[idx].iter().cloned())
            .collect()
    };
    Ok((collect(&cohorts.train), collect(&cohorts.eval)))
}
