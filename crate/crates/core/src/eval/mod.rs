//! Localization error statistics, the synthetic scene harness and the
//! end-to-end pipeline driver.

pub mod pipeline;
pub mod synth;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{position_error, rotation_error_deg, CameraPose};
use crate::pose::{LocalizationResult, RejectReason, LOCALIZED};

pub const PERCENTILES: [u32; 5] = [25, 50, 75, 90, 95];

/// Value at 1-based rank `ceil(q / 100 * n)` of an ascending list, i.e. the
/// largest error among the best `q` percent.
pub fn percentile(sorted: &[f64], q: u32) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::InvalidParameter("percentile of an empty list".into()));
    }
    if q == 0 || q > 100 {
        return Err(Error::InvalidParameter(format!("percentile {q} outside 1..=100")));
    }
    // Integer arithmetic keeps exact ranks such as 50% of 4.
    let rank = (q as usize * sorted.len()).div_ceil(100);
    Ok(sorted[rank.max(1) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub median: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p90: f64,
    pub p95: f64,
}

impl Percentiles {
    pub fn of(values: &[f64]) -> Result<Self> {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let p = |q| percentile(&v, q);
        Ok(Percentiles {
            median: p(50)?,
            p25: p(25)?,
            p50: p(50)?,
            p75: p(75)?,
            p90: p(90)?,
            p95: p(95)?,
        })
    }

    pub fn columns(&self) -> [f64; 6] {
        [self.median, self.p25, self.p50, self.p75, self.p90, self.p95]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub query_id: String,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<RejectReason>,
    /// Scene units.
    pub position_error: Option<f64>,
    /// Degrees.
    pub rotation_error: Option<f64>,
    pub inliers: usize,
    pub matches: usize,
}

/// Percentiles over localized queries only. Both are `None` when nothing was
/// localized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub position: Option<Percentiles>,
    pub rotation: Option<Percentiles>,
    pub localized: usize,
    pub rejected: usize,
    pub total: usize,
}

/// Per-query errors sorted by query id, and their summary. Rejected queries
/// count towards `rejected` and `total` but not the percentiles.
pub fn evaluate(
    results: &[(String, LocalizationResult)],
    ground_truth: &BTreeMap<String, CameraPose>,
) -> Result<(ErrorSummary, Vec<ErrorRecord>)> {
    let mut records = Vec::with_capacity(results.len());
    for (id, r) in results {
        let mut rec = ErrorRecord {
            query_id: id.clone(),
            status: r.status.clone(),
            reason: r.reason,
            position_error: None,
            rotation_error: None,
            inliers: r.inliers.len(),
            matches: r.matches,
        };
        if r.status == LOCALIZED {
            let gt = ground_truth.get(id).ok_or_else(|| Error::MissingGroundTruth(id.clone()))?;
            let pose = r
                .pose
                .as_ref()
                .ok_or_else(|| Error::InvalidParameter(format!("query {id} is localized but has no pose")))?;
            rec.position_error = Some(position_error(&gt.center, &pose.center));
            rec.rotation_error = Some(rotation_error_deg(&gt.rotation, &pose.rotation));
        }
        records.push(rec);
    }
    records.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    let pos: Vec<f64> = records.iter().filter_map(|r| r.position_error).collect();
    let rot: Vec<f64> = records.iter().filter_map(|r| r.rotation_error).collect();
    let summary = ErrorSummary {
        position: if pos.is_empty() { None } else { Some(Percentiles::of(&pos)?) },
        rotation: if rot.is_empty() { None } else { Some(Percentiles::of(&rot)?) },
        localized: pos.len(),
        rejected: records.len() - pos.len(),
        total: records.len(),
    };
    Ok((summary, records))
}

const HEADERS: [&str; 6] = ["Median", "P25", "P50", "P75", "P90", "P95"];
const ROWS: [(&str, &str); 2] = [("Position (m)", "position_m"), ("Angle (degrees)", "angle_deg")];

/// Aligned plain-text table with one row per error kind.
pub fn format_table(summary: &ErrorSummary) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<16}", "");
    for h in HEADERS {
        let _ = write!(out, "{h:>10}");
    }
    out.push('\n');
    for ((label, _), stats) in ROWS.iter().zip([&summary.position, &summary.rotation]) {
        let _ = write!(out, "{label:<16}");
        for v in stats.map(|s| s.columns()).into_iter().flatten() {
            let _ = write!(out, "{v:>10.3}");
        }
        if stats.is_none() {
            for _ in HEADERS {
                let _ = write!(out, "{:>10}", "-");
            }
        }
        out.push('\n');
    }
    let _ = writeln!(
        out,
        "localized {} of {} queries ({} rejected)",
        summary.localized, summary.total, summary.rejected
    );
    out
}

pub fn format_csv(summary: &ErrorSummary) -> String {
    let mut out = String::from("metric,median,p25,p50,p75,p90,p95\n");
    for ((_, key), stats) in ROWS.iter().zip([&summary.position, &summary.rotation]) {
        out.push_str(key);
        match stats {
            Some(s) => s.columns().iter().for_each(|v| {
                let _ = write!(out, ",{v}");
            }),
            None => out.push_str(",,,,,,"),
        }
        out.push('\n');
    }
    out
}
