//! Turning an importance ranking into connections an attacker can replay.
//!
//! 1. [`compute_assignment`]: ideal values of the selected features, the
//!    nearest-rank `t`-th percentile over nontarget points.
//! 2. [`find_prototype`]: the nontarget point nearest that assignment.
//! 3. [`extract_full_trigger`]: the contiguous run of the attacker's own
//!    nontarget connections whose features best match the prototype.
//! 4. [`reduce_trigger`]: optionally drop connections the selected features
//!    do not need.
//! 5. [`inject_training`] / [`inject_test_points`]: replay the trigger inside
//!    chosen windows, insertion only, labels untouched.
//!
//! Distances are Euclidean over the selected features after per-feature
//! min-max scaling fit on the adversary's nontarget points.

pub mod blocks;
mod extract;
mod inject;
mod reduce;

use std::net::IpAddr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::{AggregationKey, FeaturePoint};
use crate::flowlog::{ConnRecord, Label};

pub use extract::{default_l_max, extract_full_trigger, SearchParams};
pub use inject::{
    apply_injections, inject_test_points, inject_training, read_manifest, write_manifest, InjectParams, Injection,
    ManifestEntry,
};
pub use reduce::reduce_trigger;

pub const DEFAULT_PERCENTILE: f64 = 95.0;

/// Ideal values for the selected features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub features: Vec<usize>,
    pub values: Vec<f64>,
    pub percentile: f64,
}

/// Nearest-rank percentile of an ascending slice: the value at rank
/// `ceil(t / 100 * n)`, counting from 1.
pub fn nearest_rank(sorted: &[f64], t: f64) -> f64 {
    assert!(!sorted.is_empty());
    let n = sorted.len();
    // t * n first: exact for integer t, so no spurious rounding up.
    let rank = (t * n as f64 / 100.0).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Assignment over raw feature rows.
pub fn assignment_from_rows<'a>(
    rows: impl IntoIterator<Item = &'a [f64]>,
    features: &[usize],
    t: f64,
) -> Result<Assignment> {
    if !(t > 0.0 && t <= 100.0) {
        return Err(Error::Config(format!("percentile {t} outside (0, 100]")));
    }
    let rows: Vec<&[f64]> = rows.into_iter().collect();
    if rows.is_empty() {
        return Err(Error::Attack("no nontarget points for the assignment".into()));
    }
    let values = features
        .iter()
        .map(|&f| {
            let mut col: Vec<f64> = rows.iter().map(|r| r[f]).collect();
            col.sort_by(f64::total_cmp);
            nearest_rank(&col, t)
        })
        .collect();
    Ok(Assignment {
        features: features.to_vec(),
        values,
        percentile: t,
    })
}

/// Assignment over the nontarget points among `points`.
pub fn compute_assignment(points: &[FeaturePoint], features: &[usize], t: f64) -> Result<Assignment> {
    assignment_from_rows(
        points
            .iter()
            .filter(|p| p.label == Label::NonTarget)
            .map(|p| p.values.as_slice()),
        features,
        t,
    )
}

/// Per-feature min-max scaling over the selected features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub features: Vec<usize>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Normalizer {
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>, features: &[usize]) -> Self {
        let mut lo = vec![f64::INFINITY; features.len()];
        let mut hi = vec![f64::NEG_INFINITY; features.len()];
        for r in rows {
            for (k, &f) in features.iter().enumerate() {
                lo[k] = lo[k].min(r[f]);
                hi[k] = hi[k].max(r[f]);
            }
        }
        for k in 0..features.len() {
            if lo[k] > hi[k] {
                lo[k] = 0.0;
                hi[k] = 0.0;
            }
        }
        Normalizer {
            features: features.to_vec(),
            lo,
            hi,
        }
    }

    pub fn fit_nontarget(points: &[FeaturePoint], features: &[usize]) -> Self {
        Self::fit(
            points
                .iter()
                .filter(|p| p.label == Label::NonTarget)
                .map(|p| p.values.as_slice()),
            features,
        )
    }

    /// Scaled value of the `k`-th selected feature; zero-range features map
    /// to 0 so they never contribute to a distance.
    pub fn scale(&self, k: usize, v: f64) -> f64 {
        let range = self.hi[k] - self.lo[k];
        if range > 0.0 {
            (v - self.lo[k]) / range
        } else {
            0.0
        }
    }

    /// Distance between two vectors of selected-feature values.
    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .enumerate()
            .map(|(k, (&x, &y))| (self.scale(k, x) - self.scale(k, y)).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Distance with `a` given as a full feature row.
    pub fn row_distance(&self, row: &[f64], b: &[f64]) -> f64 {
        let sel: Vec<f64> = self.features.iter().map(|&f| row[f]).collect();
        self.distance(&sel, b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerProto {
    /// Index into the slice handed to [`find_prototype`].
    pub index: usize,
    pub key: Option<AggregationKey>,
    pub values: Vec<f64>,
    /// Distance to the assignment.
    pub distance: f64,
    /// Number of records carrying the prototype's key.
    pub n_records: usize,
}

impl TriggerProto {
    pub fn selected(&self, features: &[usize]) -> Vec<f64> {
        features.iter().map(|&f| self.values[f]).collect()
    }
}

/// Nearest row to the assignment; ties go to the lower index.
pub fn prototype_from_rows<'a>(
    rows: impl IntoIterator<Item = &'a [f64]>,
    assignment: &Assignment,
    norm: &Normalizer,
) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in rows.into_iter().enumerate() {
        let d = norm.row_distance(r, &assignment.values);
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.ok_or_else(|| Error::Attack("no candidate points for the prototype".into()))
}

/// Nearest nontarget point to the assignment. `index` refers to `points`.
pub fn find_prototype(points: &[FeaturePoint], assignment: &Assignment, norm: &Normalizer) -> Result<TriggerProto> {
    if assignment.features.is_empty() {
        return Err(Error::Attack("empty assignment".into()));
    }
    let candidates: Vec<usize> = (0..points.len())
        .filter(|&i| points[i].label == Label::NonTarget)
        .collect();
    let (k, distance) = prototype_from_rows(
        candidates.iter().map(|&i| points[i].values.as_slice()),
        assignment,
        norm,
    )?;
    let p = &points[candidates[k]];
    Ok(TriggerProto {
        index: candidates[k],
        key: Some(p.key),
        values: p.values.clone(),
        distance,
        n_records: p.provenance.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TriggerVariant {
    Full,
    Reduced,
    Generated,
}

impl TriggerVariant {
    pub const ALL: [TriggerVariant; 3] = [TriggerVariant::Full, TriggerVariant::Reduced, TriggerVariant::Generated];

    pub fn as_str(self) -> &'static str {
        match self {
            TriggerVariant::Full => "full",
            TriggerVariant::Reduced => "reduced",
            TriggerVariant::Generated => "generated",
        }
    }
}

impl std::str::FromStr for TriggerVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        TriggerVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown trigger variant `{s}`"))
    }
}

impl std::fmt::Display for TriggerVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Connections to replay, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trigger {
    pub variant: TriggerVariant,
    pub records: Vec<ConnRecord>,
    /// Internal endpoint the records were observed on; injection swaps it
    /// for the victim host.
    pub host: IpAddr,
    /// Destination port whose feature point carries the trigger.
    pub port: u16,
    pub features: Vec<usize>,
    /// Selected-feature values the records produce on their own.
    pub achieved: Vec<f64>,
    /// Distance from `achieved` to the prototype.
    pub distance: f64,
    /// Global indices of the records in the source list, where they came
    /// from one.
    pub source_indices: Vec<usize>,
}

impl Trigger {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}
