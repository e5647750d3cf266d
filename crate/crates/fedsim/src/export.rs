//! Line-oriented record export and the human-readable tables.
//!
//! Every record file the simulator writes is one JSON object per line with
//! stable field names, so downstream tooling (and the funnel checker) can
//! stream them.

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::funnel::FunnelReport;

/// One JSON object per line, in input order.
pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("serializable record"));
        out.push('\n');
    }
    out
}

pub fn from_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>, serde_json::Error> {
    text.lines()
        .filter(|line| !line.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

/// Fixed-width histogram table over the 20-bin score grid.
pub fn histogram_table(histogram: &[u64]) -> String {
    let total: u64 = histogram.iter().sum();
    let peak = histogram.iter().copied().max().unwrap_or(0).max(1);
    let mut out = String::from("bin        count  share\n");
    for (i, &count) in histogram.iter().enumerate() {
        let lo = i as f64 / histogram.len() as f64;
        let hi = (i + 1) as f64 / histogram.len() as f64;
        let share = if total == 0 { 0.0 } else { count as f64 / total as f64 };
        let bar = "#".repeat((count * 40 / peak) as usize);
        out.push_str(&format!(
            "[{lo:.2},{hi:.2}) {count:>6}  {share:>6.3} {bar}\n"
        ));
    }
    out
}

/// Per-phase funnel table with survival rates and top failure reasons.
pub fn funnel_table(report: &FunnelReport) -> String {
    let mut out = String::from("phase                 entrants  success  failure  survival  top reason\n");
    for phase in &report.phases {
        let top = phase
            .top_reasons
            .first()
            .map(|(reason, n)| format!("{reason:?} x{n}"))
            .unwrap_or_else(|| "-".to_string());
        out.push_str(&format!(
            "{:<20} {:>9} {:>8} {:>8} {:>9.3}  {}\n",
            phase.name, phase.entrants, phase.successes, phase.failures, phase.survival, top
        ));
    }
    if report.violations.is_empty() {
        out.push_str("conservation: ok\n");
    } else {
        for v in &report.violations {
            out.push_str(&format!(
                "conservation VIOLATION at phase {}: observed {} expected {}\n",
                v.phase, v.observed, v.expected
            ));
        }
    }
    out
}
