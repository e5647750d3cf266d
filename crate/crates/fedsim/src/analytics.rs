//! Federated analytics: population statistics estimated from single-bit
//! client reports.
//!
//! Each device contributes one randomized bit per query. A value in a
//! declared range is encoded as a Bernoulli bit whose expectation is the
//! value's position in the range, the bit is flipped with probability `f`
//! (randomized response, local epsilon `ln((1-f)/f)`), and the server
//! debiases the aggregate with `(r - f) / (1 - 2f)`. Means, second moments
//! and label ratios come from one query each; quantiles run a binary search
//! where every iteration asks a fresh cohort for threshold bits.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("no reports to aggregate")]
    EmptyReports,
    #[error("quantile search iteration {iteration} received an empty cohort")]
    EmptyCohort { iteration: u32 },
    #[error("degenerate range: lo must be < hi")]
    DegenerateRange,
    #[error("label balancing unavailable: population is single-class")]
    SingleClassPopulation,
}

/// Closed value range `[lo, hi]` with `lo < hi`; out-of-range values are
/// clamped, never rejected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueRange {
    pub lo: f64,
    pub hi: f64,
}

impl ValueRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self, AnalyticsError> {
        if lo >= hi || !lo.is_finite() || !hi.is_finite() {
            return Err(AnalyticsError::DegenerateRange);
        }
        Ok(Self { lo, hi })
    }

    pub fn width(self) -> f64 {
        self.hi - self.lo
    }

    pub fn clamp(self, value: f64) -> f64 {
        value.clamp(self.lo, self.hi)
    }

    /// Range of the squared values, used by second-moment queries.
    pub fn squared(self) -> Self {
        Self {
            lo: 0.0,
            hi: (self.lo * self.lo).max(self.hi * self.hi),
        }
    }
}

/// Opaque token identifying a query; reports carry it and nothing else.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QueryId(pub String);

impl QueryId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryTarget {
    Feature(String),
    Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    Mean,
    Quantile(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticsQuery {
    pub id: QueryId,
    pub target: QueryTarget,
    pub kind: QueryKind,
    pub range: ValueRange,
    pub flip_prob: f64,
    pub cohort_size: usize,
}

impl AnalyticsQuery {
    pub fn new(
        id: QueryId,
        target: QueryTarget,
        kind: QueryKind,
        range: ValueRange,
        flip_prob: f64,
        cohort_size: usize,
    ) -> Result<Self, AnalyticsError> {
        if !(0.0..0.5).contains(&flip_prob) {
            return Err(AnalyticsError::InvalidQuery(format!(
                "flip_prob must be in [0, 0.5), got {flip_prob}"
            )));
        }
        if cohort_size == 0 {
            return Err(AnalyticsError::InvalidQuery("cohort_size must be >= 1".into()));
        }
        if let QueryKind::Quantile(q) = kind {
            if !(q > 0.0 && q < 1.0) {
                return Err(AnalyticsError::InvalidQuery(format!(
                    "quantile must be in (0, 1), got {q}"
                )));
            }
        }
        Ok(Self {
            id,
            target,
            kind,
            range,
            flip_prob,
            cohort_size,
        })
    }
}

/// One client's contribution: a single randomized bit tied to a query id.
/// Deliberately has no room for a device identifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitReport {
    pub bit: bool,
    pub query_id: QueryId,
}

/// A debiased aggregate with a rough standard-error hint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsResult {
    pub estimate: f64,
    pub stderr_hint: f64,
    pub n_reports: u64,
}

/// Encodes a value into a bit with expectation equal to the value's
/// clamped position in the range.
pub fn encode_bit<R: Rng>(value: f64, range: ValueRange, rng: &mut R) -> bool {
    let u = ((value - range.lo) / range.width()).clamp(0.0, 1.0);
    rng.random_bool(u)
}

/// Randomized response: flips the bit with probability `flip_prob`.
pub fn randomize_bit<R: Rng>(bit: bool, flip_prob: f64, rng: &mut R) -> bool {
    debug_assert!((0.0..0.5).contains(&flip_prob) || flip_prob == 0.0);
    if flip_prob > 0.0 && rng.random_bool(flip_prob) {
        !bit
    } else {
        bit
    }
}

/// Inverts randomized response on an observed mean of bits, clamped to
/// `[0, 1]`.
pub fn debias_fraction(observed: f64, flip_prob: f64) -> f64 {
    ((observed - flip_prob) / (1.0 - 2.0 * flip_prob)).clamp(0.0, 1.0)
}

/// Client-side helper for mean queries: encode then randomize.
pub fn make_report<R: Rng>(value: f64, query: &AnalyticsQuery, rng: &mut R) -> BitReport {
    let raw = encode_bit(value, query.range, rng);
    BitReport {
        bit: randomize_bit(raw, query.flip_prob, rng),
        query_id: query.id.clone(),
    }
}

/// Client-side helper for quantile threshold queries: the raw bit is
/// `value <= threshold`, then randomized.
pub fn threshold_report<R: Rng>(
    value: f64,
    threshold: f64,
    flip_prob: f64,
    query_id: &QueryId,
    rng: &mut R,
) -> BitReport {
    BitReport {
        bit: randomize_bit(value <= threshold, flip_prob, rng),
        query_id: query_id.clone(),
    }
}

/// Order-free bit aggregation; merging partial accumulators in any order
/// yields identical results because the counts are integers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BitAccumulator {
    pub ones: u64,
    pub total: u64,
}

impl BitAccumulator {
    pub fn add(&mut self, bit: bool) {
        self.ones += u64::from(bit);
        self.total += 1;
    }

    pub fn merge(&mut self, other: BitAccumulator) {
        self.ones += other.ones;
        self.total += other.total;
    }

    pub fn observed_mean(&self) -> Option<f64> {
        if self.total == 0 {
            None
        } else {
            Some(self.ones as f64 / self.total as f64)
        }
    }
}

/// Debiases a set of randomized bit reports into a mean estimate over the
/// query's range.
pub fn estimate_mean(
    reports: &[BitReport],
    query: &AnalyticsQuery,
) -> Result<StatsResult, AnalyticsError> {
    let mut acc = BitAccumulator::default();
    for report in reports {
        acc.add(report.bit);
    }
    estimate_mean_from_accumulator(&acc, query)
}

pub fn estimate_mean_from_accumulator(
    acc: &BitAccumulator,
    query: &AnalyticsQuery,
) -> Result<StatsResult, AnalyticsError> {
    let observed = acc.observed_mean().ok_or(AnalyticsError::EmptyReports)?;
    let width = query.range.width();
    let estimate = query.range.lo + width * debias_fraction(observed, query.flip_prob);
    let n = acc.total as f64;
    let stderr_hint =
        width * (observed * (1.0 - observed) / n).sqrt() / (1.0 - 2.0 * query.flip_prob);
    Ok(StatsResult {
        estimate,
        stderr_hint,
        n_reports: acc.total,
    })
}

/// Binary search for the q-quantile over the declared range.
///
/// Each iteration asks `cohort` for one fresh cohort's randomized bits of
/// `1{x <= t}` at the current threshold, debiases the fraction and halves
/// the interval. The returned midpoint is within `range.width() / 2^iterations`
/// of the point the (noisy) comparisons converge to.
pub fn estimate_quantile<F>(
    mut cohort: F,
    q: f64,
    range: ValueRange,
    iterations: u32,
    flip_prob: f64,
) -> Result<f64, AnalyticsError>
where
    F: FnMut(f64) -> Vec<BitReport>,
{
    if !(q > 0.0 && q < 1.0) {
        return Err(AnalyticsError::InvalidQuery(format!(
            "quantile must be in (0, 1), got {q}"
        )));
    }
    if iterations == 0 {
        return Err(AnalyticsError::InvalidQuery("iterations must be >= 1".into()));
    }
    let mut lo = range.lo;
    let mut hi = range.hi;
    for iteration in 0..iterations {
        let threshold = 0.5 * (lo + hi);
        let reports = cohort(threshold);
        if reports.is_empty() {
            return Err(AnalyticsError::EmptyCohort { iteration });
        }
        let mut acc = BitAccumulator::default();
        for report in &reports {
            acc.add(report.bit);
        }
        let fraction = debias_fraction(acc.observed_mean().expect("non-empty"), flip_prob);
        if fraction >= q {
            hi = threshold;
        } else {
            lo = threshold;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Per-feature first and second moments estimated through the bit protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStat {
    pub name: String,
    pub mean: f64,
    pub std_dev: f64,
    pub range: ValueRange,
    pub n_reports: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureStats {
    pub stats: Vec<FeatureStat>,
}

impl FeatureStats {
    pub fn get(&self, name: &str) -> Option<&FeatureStat> {
        self.stats.iter().find(|s| s.name == name)
    }
}

/// One feature's analytics cohort: the values the sampled devices would
/// report, plus the declared range.
pub struct FeatureCohort<'a> {
    pub name: &'a str,
    pub range: ValueRange,
    pub values: &'a [f64],
}

/// Estimates mean and standard deviation per feature. The variance comes
/// from a second-moment query over the squared range, clamped at zero.
pub fn compute_feature_stats<R: Rng>(
    cohorts: &[FeatureCohort],
    flip_prob: f64,
    rng: &mut R,
) -> Result<FeatureStats, AnalyticsError> {
    let mut stats = Vec::with_capacity(cohorts.len());
    for cohort in cohorts {
        if cohort.values.is_empty() {
            return Err(AnalyticsError::EmptyReports);
        }
        let mean_query = AnalyticsQuery::new(
            QueryId::new(format!("{}/mean", cohort.name)),
            QueryTarget::Feature(cohort.name.to_string()),
            QueryKind::Mean,
            cohort.range,
            flip_prob,
            cohort.values.len(),
        )?;
        let sq_query = AnalyticsQuery::new(
            QueryId::new(format!("{}/sq", cohort.name)),
            QueryTarget::Feature(cohort.name.to_string()),
            QueryKind::Mean,
            cohort.range.squared(),
            flip_prob,
            cohort.values.len(),
        )?;
        let mut mean_acc = BitAccumulator::default();
        let mut sq_acc = BitAccumulator::default();
        for &v in cohort.values {
            mean_acc.add(make_report(v, &mean_query, rng).bit);
            sq_acc.add(make_report(v * v, &sq_query, rng).bit);
        }
        let mean = estimate_mean_from_accumulator(&mean_acc, &mean_query)?.estimate;
        let second = estimate_mean_from_accumulator(&sq_acc, &sq_query)?.estimate;
        let variance = (second - mean * mean).max(0.0);
        stats.push(FeatureStat {
            name: cohort.name.to_string(),
            mean,
            std_dev: variance.sqrt(),
            range: cohort.range,
            n_reports: mean_acc.total,
        });
    }
    Ok(FeatureStats { stats })
}

/// Estimated positive-label ratio and the per-class keep-probabilities
/// derived from it. Published to devices through the metadata store.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub positive_ratio: f64,
    pub keep_pos: f64,
    pub keep_neg: f64,
}

impl LabelStats {
    /// Keep everything; the policy when balancing is disabled.
    pub fn keep_all(positive_ratio: f64) -> Self {
        Self {
            positive_ratio,
            keep_pos: 1.0,
            keep_neg: 1.0,
        }
    }
}

/// Derives per-class keep-probabilities from an estimated positive ratio.
///
/// The minority class keeps probability 1; the majority class keeps
/// `pi_min * (1 - target) / (target * pi_maj)` so the expected post-drop
/// minority share equals `target`. With `target = 0.5` this reduces to
/// `pi_min / pi_maj`.
pub fn label_balance_policy(
    pi_hat: f64,
    target_minority_share: f64,
) -> Result<LabelStats, AnalyticsError> {
    if !(pi_hat > 0.0 && pi_hat < 1.0) {
        return Err(AnalyticsError::SingleClassPopulation);
    }
    if !(target_minority_share > 0.0 && target_minority_share <= 0.5) {
        return Err(AnalyticsError::InvalidQuery(format!(
            "target minority share must be in (0, 0.5], got {target_minority_share}"
        )));
    }
    let t = target_minority_share;
    let (pi_min, pi_maj) = if pi_hat <= 0.5 {
        (pi_hat, 1.0 - pi_hat)
    } else {
        (1.0 - pi_hat, pi_hat)
    };
    let keep_majority = (pi_min * (1.0 - t) / (t * pi_maj)).min(1.0);
    let (keep_pos, keep_neg) = if pi_hat <= 0.5 {
        (1.0, keep_majority)
    } else {
        (keep_majority, 1.0)
    };
    Ok(LabelStats {
        positive_ratio: pi_hat,
        keep_pos,
        keep_neg,
    })
}

/// Estimates the positive-label ratio from randomized label bits and
/// derives the keep-policy.
pub fn estimate_label_stats<R: Rng>(
    labels: &[u8],
    flip_prob: f64,
    target_minority_share: f64,
    rng: &mut R,
) -> Result<LabelStats, AnalyticsError> {
    if labels.is_empty() {
        return Err(AnalyticsError::EmptyReports);
    }
    let mut acc = BitAccumulator::default();
    for &label in labels {
        // A label is already a bit; only randomization is needed.
        acc.add(randomize_bit(label == 1, flip_prob, rng));
    }
    let pi_hat = debias_fraction(acc.observed_mean().expect("non-empty"), flip_prob);
    label_balance_policy(pi_hat, target_minority_share)
}
