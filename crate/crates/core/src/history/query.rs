//! Query math behind the dashboard visualizations. All intervals are
//! half-open, `[from, to)`.

use serde::Serialize;
use thiserror::Error;

use super::SeriesStore;
use crate::records::{Record, SensorId};
use crate::registry::{HierarchyError, SensorHierarchy, SensorKind};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QueryError {
    #[error("interval start {from} is after its end {to}")]
    InvalidInterval { from: i64, to: i64 },
    #[error("window must be positive")]
    InvalidWindow,
    #[error("bin count must be at least 1")]
    InvalidBins,
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
}

fn check_interval(from: i64, to: i64) -> Result<(), QueryError> {
    if from > to {
        return Err(QueryError::InvalidInterval { from, to });
    }
    Ok(())
}

/// Count/sum/average/min/max of the power values in an interval. Average,
/// min and max are `None` for an empty interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct StatsSummary {
    pub count: u64,
    pub sum_in_w: f64,
    pub average_in_w: Option<f64>,
    pub min_in_w: Option<f64>,
    pub max_in_w: Option<f64>,
}

impl StatsSummary {
    pub fn from_values(values: impl IntoIterator<Item = f64>) -> Self {
        let mut count = 0u64;
        let mut sum = 0.0;
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for v in values {
            count += 1;
            sum += v;
            min = min.min(v);
            max = max.max(v);
        }
        if count == 0 {
            return Self {
                count: 0,
                sum_in_w: 0.0,
                average_in_w: None,
                min_in_w: None,
                max_in_w: None,
            };
        }
        Self {
            count,
            sum_in_w: sum,
            average_in_w: Some(sum / count as f64),
            min_in_w: Some(min),
            max_in_w: Some(max),
        }
    }
}

/// One histogram bucket. Buckets are `[lower, upper)` except the last,
/// which also includes `upper`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Bucket {
    #[serde(rename = "bucketLower")]
    pub lower: f64,
    #[serde(rename = "bucketUpper")]
    pub upper: f64,
    pub count: u64,
}

/// A direct child's part of its group's consumption.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Share {
    pub identifier: SensorId,
    pub value_in_w: f64,
    /// `None` when the children's total is zero.
    pub share: Option<f64>,
}

impl SeriesStore {
    /// Records of `id` with `from <= timestamp < to`, ascending.
    pub fn range(&self, id: &str, from: i64, to: i64) -> Result<Vec<Record>, QueryError> {
        check_interval(from, to)?;
        Ok(self.scan(id, from, to, |it| it.cloned().collect()))
    }

    pub fn stats(&self, id: &str, from: i64, to: i64) -> Result<StatsSummary, QueryError> {
        check_interval(from, to)?;
        Ok(self.scan(id, from, to, |it| StatsSummary::from_values(it.map(Record::power_in_w))))
    }

    /// Ratio of the average over `[now - window, now)` to the average over
    /// the window before it. Values above 1 mean rising consumption. `None`
    /// if either window is empty or the ratio is not finite.
    pub fn trend(&self, id: &str, window_ms: i64, now: i64) -> Result<Option<f64>, QueryError> {
        if window_ms <= 0 {
            return Err(QueryError::InvalidWindow);
        }
        let recent_start = now.saturating_sub(window_ms);
        let previous_start = recent_start.saturating_sub(window_ms);
        let recent = self.stats(id, recent_start, now)?.average_in_w;
        let previous = self.stats(id, previous_start, recent_start)?.average_in_w;
        Ok(match (recent, previous) {
            (Some(r), Some(p)) => Some(r / p).filter(|x| x.is_finite()),
            _ => None,
        })
    }

    /// Equal-width histogram over `[min, max]` of the values in the interval.
    /// If all values are equal there is a single bucket holding all of them.
    pub fn histogram(&self, id: &str, from: i64, to: i64, bins: usize) -> Result<Vec<Bucket>, QueryError> {
        if bins < 1 {
            return Err(QueryError::InvalidBins);
        }
        check_interval(from, to)?;
        let values: Vec<f64> = self.scan(id, from, to, |it| it.map(Record::power_in_w).collect());
        Ok(bucketize(&values, bins))
    }

    /// Share of each direct child of group `group` in the group's total, using
    /// every child's latest value at or before `at`. Children without data
    /// are left out.
    pub fn distribution(&self, hierarchy: &SensorHierarchy, group: &str, at: i64) -> Result<Vec<Share>, QueryError> {
        if hierarchy.kind(group) == Some(SensorKind::Machine) {
            return Err(HierarchyError::NotAggregated(group.to_string()).into());
        }
        let mut shares: Vec<Share> = hierarchy
            .children(group)?
            .into_iter()
            .filter_map(|child| {
                self.latest_at_or_before(child.identifier.as_str(), at).map(|r| Share {
                    identifier: child.identifier.clone(),
                    value_in_w: r.power_in_w(),
                    share: None,
                })
            })
            .collect();
        let total: f64 = shares.iter().map(|s| s.value_in_w).sum();
        if total != 0.0 {
            for s in &mut shares {
                s.share = Some(s.value_in_w / total);
            }
        }
        Ok(shares)
    }
}

fn bucketize(values: &[f64], bins: usize) -> Vec<Bucket> {
    if values.is_empty() {
        return Vec::new();
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return vec![Bucket {
            lower: min,
            upper: max,
            count: values.len() as u64,
        }];
    }
    // Scaled separately so that extreme ranges do not overflow.
    let width = max / bins as f64 - min / bins as f64;
    let lower = |i: usize| min + i as f64 * width;
    let mut buckets: Vec<Bucket> = (0..bins)
        .map(|i| Bucket {
            lower: lower(i),
            upper: if i + 1 == bins { max } else { lower(i + 1) },
            count: 0,
        })
        .collect();
    for &v in values {
        let mut idx = (((v - min) / width).floor().max(0.0) as usize).min(bins - 1);
        // Snap to the bucket whose float bounds actually contain v.
        while idx > 0 && v < buckets[idx].lower {
            idx -= 1;
        }
        while idx + 1 < bins && v >= buckets[idx + 1].lower {
            idx += 1;
        }
        buckets[idx].count += 1;
    }
    buckets
}
