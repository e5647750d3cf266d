//! Deterministic desk-scale simulator of a federated-learning system with
//! differential privacy: synchronous round aggregation behind a simulated
//! trusted boundary, bit-protocol federated analytics, on-device
//! orchestration and feature transformation, label balancing, noised metric
//! aggregation, and de-identified funnel logging.

pub mod aggregation;
pub mod analytics;
pub mod device;
pub mod export;
pub mod funnel;
pub mod harness;
pub mod model;
pub mod population;
pub mod rng;
pub mod schema;
pub mod transform;

pub use harness::{run_analytics, run_simulation, ExperimentConfig, RunReport, SimOutput};
pub use model::{ModelConfig, ModelWeights, Sample, TrainHyper};
pub use rng::{stream, SimRng};
