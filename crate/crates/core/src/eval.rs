//! Pose recall within paired position/orientation thresholds.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PoseError, RigidPose};
use crate::ImageId;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    #[default]
    Day,
    Night,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::Day => "day",
            Condition::Night => "night",
        })
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "day" => Ok(Condition::Day),
            "night" => Ok(Condition::Night),
            other => Err(Error::InvalidConfig(format!("unknown condition `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdBucket {
    /// Meters.
    pub max_position: f64,
    /// Degrees.
    pub max_orientation: f64,
    #[serde(default)]
    pub label: String,
}

impl ThresholdBucket {
    pub fn new(max_position: f64, max_orientation: f64) -> Self {
        ThresholdBucket {
            max_position,
            max_orientation,
            label: format!("({max_position}m, {max_orientation}deg)"),
        }
    }

    /// Inclusive on both bounds.
    pub fn contains(&self, e: &PoseError) -> bool {
        e.position_error <= self.max_position && e.orientation_error <= self.max_orientation
    }
}

pub fn day_buckets() -> Vec<ThresholdBucket> {
    vec![
        ThresholdBucket::new(0.25, 2.0),
        ThresholdBucket::new(0.5, 5.0),
        ThresholdBucket::new(5.0, 10.0),
    ]
}

pub fn night_buckets() -> Vec<ThresholdBucket> {
    vec![
        ThresholdBucket::new(0.5, 2.0),
        ThresholdBucket::new(1.0, 5.0),
        ThresholdBucket::new(5.0, 10.0),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BucketSets {
    pub day: Vec<ThresholdBucket>,
    pub night: Vec<ThresholdBucket>,
}

impl Default for BucketSets {
    fn default() -> Self {
        BucketSets {
            day: day_buckets(),
            night: night_buckets(),
        }
    }
}

impl BucketSets {
    pub fn for_condition(&self, c: Condition) -> &[ThresholdBucket] {
        match c {
            Condition::Day => &self.day,
            Condition::Night => &self.night,
        }
    }
}

pub fn validate_buckets(buckets: &[ThresholdBucket]) -> Result<()> {
    if buckets.is_empty() {
        return Err(Error::InvalidConfig(
            "at least one threshold bucket required".into(),
        ));
    }
    for b in buckets {
        if !(b.max_position > 0.0 && b.max_orientation > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "bucket bounds must be > 0: {b:?}"
            )));
        }
    }
    for w in buckets.windows(2) {
        if w[1].max_position < w[0].max_position || w[1].max_orientation < w[0].max_orientation {
            return Err(Error::InvalidConfig(
                "threshold buckets must be nested (non-decreasing)".into(),
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub condition: String,
    pub buckets: Vec<ThresholdBucket>,
    /// Percentage of queries inside each bucket, 0-100.
    pub percentages: Vec<f64>,
    pub total: usize,
    /// Queries without an estimate.
    pub failures: Vec<ImageId>,
    /// Per-query error; `None` for failures.
    pub errors: BTreeMap<ImageId, Option<PoseError>>,
}

impl RecallReport {
    /// Recomputes a report from per-query errors.
    pub fn from_errors(
        condition: impl Into<String>,
        errors: BTreeMap<ImageId, Option<PoseError>>,
        buckets: &[ThresholdBucket],
    ) -> Result<Self> {
        validate_buckets(buckets)?;
        if errors.is_empty() {
            return Err(Error::EmptyInput("no queries to evaluate"));
        }
        let total = errors.len();
        let percentages: Vec<f64> = buckets
            .iter()
            .map(|b| {
                let n = errors
                    .values()
                    .filter(|e| e.as_ref().is_some_and(|e| b.contains(e)))
                    .count();
                100.0 * n as f64 / total as f64
            })
            .collect();
        assert!(
            percentages.windows(2).all(|w| w[0] <= w[1]),
            "recall must be non-decreasing over nested buckets"
        );
        let failures = errors
            .iter()
            .filter(|(_, e)| e.is_none())
            .map(|(id, _)| *id)
            .collect();
        Ok(RecallReport {
            condition: condition.into(),
            buckets: buckets.to_vec(),
            percentages,
            total,
            failures,
            errors,
        })
    }

    /// `"a / b / c"` with one decimal.
    pub fn row(&self) -> String {
        self.percentages
            .iter()
            .map(|p| format!("{p:.1}"))
            .collect::<Vec<_>>()
            .join(" / ")
    }
}

/// Compares estimates against ground truth. Every ground-truth query counts;
/// an absent (or `None`) estimate fails all buckets.
pub fn evaluate(
    condition: impl Into<String>,
    estimates: &BTreeMap<ImageId, Option<RigidPose>>,
    ground_truth: &BTreeMap<ImageId, RigidPose>,
    buckets: &[ThresholdBucket],
) -> Result<RecallReport> {
    if let Some(id) = estimates.keys().find(|id| !ground_truth.contains_key(id)) {
        return Err(Error::UnknownQuery(*id));
    }
    let errors = ground_truth
        .iter()
        .map(|(id, gt)| {
            let e = estimates
                .get(id)
                .copied()
                .flatten()
                .map(|est| PoseError::between(gt, &est));
            (*id, e)
        })
        .collect();
    RecallReport::from_errors(condition, errors, buckets)
}

/// One report per condition present among the ground-truth queries.
/// Queries without a condition tag count as day.
pub fn evaluate_by_condition(
    estimates: &BTreeMap<ImageId, Option<RigidPose>>,
    ground_truth: &BTreeMap<ImageId, RigidPose>,
    conditions: &BTreeMap<ImageId, Condition>,
    buckets: &BucketSets,
) -> Result<Vec<RecallReport>> {
    if let Some(id) = estimates.keys().find(|id| !ground_truth.contains_key(id)) {
        return Err(Error::UnknownQuery(*id));
    }
    if ground_truth.is_empty() {
        return Err(Error::EmptyInput("no queries to evaluate"));
    }
    let mut groups: BTreeMap<Condition, BTreeMap<ImageId, RigidPose>> = BTreeMap::new();
    for (id, gt) in ground_truth {
        let c = conditions.get(id).copied().unwrap_or_default();
        groups.entry(c).or_default().insert(*id, *gt);
    }
    groups
        .into_iter()
        .map(|(c, gt)| {
            let est: BTreeMap<_, _> = estimates
                .iter()
                .filter(|(id, _)| gt.contains_key(id))
                .map(|(id, e)| (*id, *e))
                .collect();
            evaluate(c.to_string(), &est, &gt, buckets.for_condition(c))
        })
        .collect()
}

/// Human-readable table, one row per report.
pub fn render_report(reports: &[RecallReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let thresholds: Vec<String> = r
            .buckets
            .iter()
            .map(|b| format!("{}m/{}deg", b.max_position, b.max_orientation))
            .collect();
        out.push_str(&format!(
            "{}: {}  [{}]  queries={} failed={}\n",
            r.condition,
            r.row(),
            thresholds.join(" | "),
            r.total,
            r.failures.len()
        ));
    }
    out
}
