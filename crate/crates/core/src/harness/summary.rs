//! Per-cell, per-estimator aggregation of replication MSEs.

use serde::{Deserialize, Serialize};

use super::ReplicationRecord;
use crate::datamodel::Regime;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub regime: Regime,
    pub n: usize,
    pub delta: f64,
    pub estimator: String,
    pub rep_count: usize,
    pub mean_mse: f64,
    pub q025: f64,
    pub q975: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<SummaryRecord>,
    /// Error rows left out of the aggregates.
    pub error_rows: usize,
    /// `(cell, estimator)` groups with no successful replication.
    pub empty_groups: Vec<String>,
}

/// Quantile of sorted data by linear interpolation between order statistics:
/// position `h = (len - 1) q`.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        len => {
            let h = (len - 1) as f64 * q.clamp(0.0, 1.0);
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(len - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

/// Groups by `(regime, n, delta, estimator)` in order of first appearance.
pub fn summarize(records: &[ReplicationRecord]) -> Summary {
    let mut groups: Vec<(&ReplicationRecord, Vec<f64>)> = Vec::new();
    let mut error_rows = 0;
    for r in records {
        let slot = groups.iter().position(|(head, _)| {
            head.regime == r.regime
                && head.n == r.n
                && head.delta.to_bits() == r.delta.to_bits()
                && head.estimator == r.estimator
        });
        let idx = match slot {
            Some(i) => i,
            None => {
                groups.push((r, Vec::new()));
                groups.len() - 1
            }
        };
        if r.is_error() {
            error_rows += 1;
        } else {
            groups[idx].1.push(r.mse);
        }
    }

    let mut rows = Vec::with_capacity(groups.len());
    let mut empty_groups = Vec::new();
    for (head, mut values) in groups {
        if values.is_empty() {
            let label = format!("{}/n={}/delta={}/{}", head.regime, head.n, head.delta, head.estimator);
            log::warn!("no successful replications for {label}; skipped");
            empty_groups.push(label);
            continue;
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        values.sort_by(f64::total_cmp);
        rows.push(SummaryRecord {
            regime: head.regime,
            n: head.n,
            delta: head.delta,
            estimator: head.estimator.clone(),
            rep_count: values.len(),
            mean_mse: mean,
            q025: quantile(&values, 0.025),
            q975: quantile(&values, 0.975),
        });
    }
    Summary { rows, error_rows, empty_groups }
}
