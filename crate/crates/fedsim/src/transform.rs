//! Signal Transformer: the declarative on-device pipeline that turns raw
//! signals and served values into the dense feature vector.
//!
//! A [`TransformSpec`] is data, not code, so the server can push a new
//! version to devices without an app release. Specs are validated against
//! the feature schema at load time; applying a valid spec is total — a
//! missing operand falls back to a documented default of 0 and the step is
//! recorded as an issue rather than aborting the pipeline.
//!
//! Training and inference share this one code path, which is what makes
//! their feature vectors bit-identical for the same inputs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::FeatureStats;
use crate::schema::{FeatureOrigin, FeatureSchema};

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("transform step {index} references unknown feature {name:?}")]
    UnknownFeature { index: usize, name: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "op")]
pub enum TransformStep {
    /// `(x - mean) / std_dev`; a constant feature (`std_dev == 0`) maps to 0.
    Normalize {
        feature: String,
        mean: f64,
        std_dev: f64,
    },
    Clamp {
        feature: String,
        lo: f64,
        hi: f64,
    },
    Log1p {
        feature: String,
    },
    /// Pulls the server-side value into the working set (default 0 when the
    /// server did not provide one).
    InjectServer {
        feature: String,
    },
    /// Replaces the working value with the device's own signal, only when
    /// the device has one.
    OverrideWithDevice {
        feature: String,
    },
}

impl TransformStep {
    pub fn feature(&self) -> &str {
        match self {
            TransformStep::Normalize { feature, .. }
            | TransformStep::Clamp { feature, .. }
            | TransformStep::Log1p { feature }
            | TransformStep::InjectServer { feature }
            | TransformStep::OverrideWithDevice { feature } => feature,
        }
    }
}

/// Versioned ordered list of transform steps; the version participates in
/// the metadata handshake so devices and server agree on the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub version: u32,
    pub steps: Vec<TransformStep>,
}

impl TransformSpec {
    /// Rejects specs referencing features outside the schema. Runs at load
    /// time; apply never re-checks.
    pub fn validate(&self, schema: &FeatureSchema) -> Result<(), TransformError> {
        for (index, step) in self.steps.iter().enumerate() {
            if !schema.contains(step.feature()) {
                return Err(TransformError::UnknownFeature {
                    index,
                    name: step.feature().to_string(),
                });
            }
        }
        Ok(())
    }

    /// The origin-resolution pipeline implied by the schema: inject served
    /// values for server-visible features, then apply device overrides for
    /// dual-origin ones. Device-origin features flow in from local signals
    /// without a step.
    pub fn base_for(schema: &FeatureSchema, version: u32) -> Self {
        let mut steps = Vec::new();
        for descriptor in schema.features() {
            match descriptor.origin {
                FeatureOrigin::Server => steps.push(TransformStep::InjectServer {
                    feature: descriptor.name.clone(),
                }),
                FeatureOrigin::Both => {
                    steps.push(TransformStep::InjectServer {
                        feature: descriptor.name.clone(),
                    });
                    steps.push(TransformStep::OverrideWithDevice {
                        feature: descriptor.name.clone(),
                    });
                }
                FeatureOrigin::Device => {}
            }
        }
        Self { version, steps }
    }

    /// Appends normalization steps with parameters from federated feature
    /// statistics, bumping the spec version.
    pub fn with_normalization(mut self, stats: &FeatureStats) -> Self {
        for stat in &stats.stats {
            self.steps.push(TransformStep::Normalize {
                feature: stat.name.clone(),
                mean: stat.mean,
                std_dev: stat.std_dev,
            });
        }
        self.version += 1;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueKind {
    MissingServerValue,
    MissingOperand,
}

/// A step that fell back to the default value; diagnostics, not a pipeline
/// failure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepIssue {
    pub step_index: usize,
    pub feature: String,
    pub kind: IssueKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformOutput {
    /// Dense vector in schema order.
    pub features: Vec<f64>,
    pub issues: Vec<StepIssue>,
}

/// Applies the spec in order over a working map seeded with the device's
/// local signals, then reads the output vector in schema order (0 for any
/// feature never produced). The spec must have been validated against the
/// same schema.
pub fn apply_transform(
    spec: &TransformSpec,
    schema: &FeatureSchema,
    server_features: &BTreeMap<String, f64>,
    device_signals: &BTreeMap<String, f64>,
) -> TransformOutput {
    let mut working: BTreeMap<&str, f64> = device_signals
        .iter()
        .map(|(k, v)| (k.as_str(), *v))
        .collect();
    let mut issues = Vec::new();

    for (step_index, step) in spec.steps.iter().enumerate() {
        match step {
            TransformStep::InjectServer { feature } => match server_features.get(feature) {
                Some(&value) => {
                    working.insert(feature, value);
                }
                None => {
                    working.insert(feature, 0.0);
                    issues.push(StepIssue {
                        step_index,
                        feature: feature.clone(),
                        kind: IssueKind::MissingServerValue,
                    });
                }
            },
            TransformStep::OverrideWithDevice { feature } => {
                if let Some(&value) = device_signals.get(feature) {
                    working.insert(feature, value);
                }
            }
            TransformStep::Normalize {
                feature,
                mean,
                std_dev,
            } => {
                let x = operand(&mut working, feature, step_index, &mut issues);
                let normalized = if *std_dev == 0.0 {
                    0.0
                } else {
                    (x - mean) / std_dev
                };
                working.insert(feature, normalized);
            }
            TransformStep::Clamp { feature, lo, hi } => {
                let x = operand(&mut working, feature, step_index, &mut issues);
                working.insert(feature, x.clamp(*lo, *hi));
            }
            TransformStep::Log1p { feature } => {
                let x = operand(&mut working, feature, step_index, &mut issues);
                working.insert(feature, x.ln_1p());
            }
        }
    }

    let features = schema
        .features()
        .iter()
        .map(|d| working.get(d.name.as_str()).copied().unwrap_or(0.0))
        .collect();
    TransformOutput { features, issues }
}

fn operand<'a>(
    working: &mut BTreeMap<&'a str, f64>,
    feature: &'a str,
    step_index: usize,
    issues: &mut Vec<StepIssue>,
) -> f64 {
    match working.get(feature) {
        Some(&v) => v,
        None => {
            issues.push(StepIssue {
                step_index,
                feature: feature.to_string(),
                kind: IssueKind::MissingOperand,
            });
            0.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::{FeatureStat, ValueRange};
    use crate::schema::FeatureDescriptor;

    fn schema() -> FeatureSchema {
        FeatureSchema::new(vec![
            FeatureDescriptor {
                name: "srv".into(),
                origin: FeatureOrigin::Server,
                range: ValueRange::new(0.0, 10.0).unwrap(),
            },
            FeatureDescriptor {
                name: "dual".into(),
                origin: FeatureOrigin::Both,
                range: ValueRange::new(0.0, 10.0).unwrap(),
            },
            FeatureDescriptor {
                name: "dev".into(),
                origin: FeatureOrigin::Device,
                range: ValueRange::new(0.0, 10.0).unwrap(),
            },
        ])
        .unwrap()
    }

    fn map(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn normalize_at_mean_is_zero() {
        let spec = TransformSpec {
            version: 1,
            steps: vec![TransformStep::Normalize {
                feature: "dev".into(),
                mean: 4.0,
                std_dev: 2.0,
            }],
        };
        let out = apply_transform(&spec, &schema(), &map(&[]), &map(&[("dev", 4.0)]));
        assert_eq!(out.features[2], 0.0);
        assert!(out.issues.is_empty());
    }

    #[test]
    fn normalize_two_sigma_above_mean() {
        let spec = TransformSpec {
            version: 1,
            steps: vec![TransformStep::Normalize {
                feature: "dev".into(),
                mean: 4.0,
                std_dev: 2.0,
            }],
        };
        let out = apply_transform(&spec, &schema(), &map(&[]), &map(&[("dev", 8.0)]));
        assert_eq!(out.features[2], 2.0);
    }

    #[test]
    fn zero_std_maps_to_zero() {
        let spec = TransformSpec {
            version: 1,
            steps: vec![TransformStep::Normalize {
                feature: "dev".into(),
                mean: 4.0,
                std_dev: 0.0,
            }],
        };
        let out = apply_transform(&spec, &schema(), &map(&[]), &map(&[("dev", 9.0)]));
        assert_eq!(out.features[2], 0.0);
    }

    #[test]
    fn device_value_overrides_server_value() {
        let spec = TransformSpec::base_for(&schema(), 1);
        let out = apply_transform(
            &spec,
            &schema(),
            &map(&[("srv", 2.0), ("dual", 5.0)]),
            &map(&[("dual", 7.0), ("dev", 1.0)]),
        );
        assert_eq!(out.features, vec![2.0, 7.0, 1.0]);
        assert!(out.issues.is_empty());
    }

    #[test]
    fn override_skipped_when_signal_absent() {
        let spec = TransformSpec::base_for(&schema(), 1);
        let out = apply_transform(
            &spec,
            &schema(),
            &map(&[("srv", 2.0), ("dual", 5.0)]),
            &map(&[]),
        );
        assert_eq!(out.features[1], 5.0);
    }

    #[test]
    fn missing_server_value_defaults_to_zero_with_issue() {
        let spec = TransformSpec::base_for(&schema(), 1);
        let out = apply_transform(&spec, &schema(), &map(&[]), &map(&[("dev", 3.0)]));
        assert_eq!(out.features[0], 0.0);
        assert!(out
            .issues
            .iter()
            .any(|i| i.feature == "srv" && i.kind == IssueKind::MissingServerValue));
    }

    #[test]
    fn unknown_feature_rejected_at_load() {
        let spec = TransformSpec {
            version: 1,
            steps: vec![TransformStep::Log1p {
                feature: "ghost".into(),
            }],
        };
        let err = spec.validate(&schema()).unwrap_err();
        assert!(matches!(
            err,
            TransformError::UnknownFeature { index: 0, name } if name == "ghost"
        ));
    }

    #[test]
    fn clamp_and_log1p_compose_in_order() {
        let spec = TransformSpec {
            version: 1,
            steps: vec![
                TransformStep::Clamp {
                    feature: "dev".into(),
                    lo: 0.0,
                    hi: 3.0,
                },
                TransformStep::Log1p {
                    feature: "dev".into(),
                },
            ],
        };
        let out = apply_transform(&spec, &schema(), &map(&[]), &map(&[("dev", 10.0)]));
        assert!((out.features[2] - 3.0f64.ln_1p()).abs() < 1e-15);
    }

    #[test]
    fn with_normalization_appends_stats_steps() {
        let stats = FeatureStats {
            stats: vec![FeatureStat {
                name: "srv".into(),
                mean: 1.0,
                std_dev: 2.0,
                range: ValueRange::new(0.0, 10.0).unwrap(),
                n_reports: 10,
            }],
        };
        let spec = TransformSpec::base_for(&schema(), 1).with_normalization(&stats);
        assert_eq!(spec.version, 2);
        assert!(matches!(
            spec.steps.last(),
            Some(TransformStep::Normalize { feature, mean, std_dev })
                if feature == "srv" && *mean == 1.0 && *std_dev == 2.0
        ));
        spec.validate(&schema()).unwrap();
    }

    #[test]
    fn specs_serialize_for_metadata_push() {
        let spec = TransformSpec::base_for(&schema(), 3);
        let json = serde_json::to_string(&spec).unwrap();
        let back: TransformSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(spec, back);
    }
}
