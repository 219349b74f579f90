//! How visible a poisoning campaign is.
//!
//! Feature space: an isolation forest trained on a clean tenth of the
//! training points tries to pick out the poisoned ones. Problem space:
//! per-field Jensen-Shannon distance between poisoned and clean records.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowlog::ConnRecord;
use crate::models::iforest::train_isolation_forest;
use crate::models::metrics::{average_precision, Confusion};
use crate::scalar::Scalar;

pub const DETECTOR_FRACTION: f64 = 0.1;
pub const DETECTOR_TREES: usize = 100;
pub const DETECTOR_SUBSAMPLE: usize = 256;
pub const NUMERIC_BINS: usize = 50;
pub const THRESHOLD_RULE: &str = "flag the top-q scores, q = poisoned fraction of the evaluation set";

/// Which clean points join the poisoned ones for scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSet {
    /// Every clean point outside the detector's training subset, so the
    /// evaluation prevalence matches the poisoning rate.
    #[default]
    Remaining,
    /// A random clean subset as large as the poisoned set.
    EqualSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub pr_auc: f64,
    pub f1: f64,
    pub n_poisoned: usize,
    pub n_clean_eval: usize,
    pub n_detector_train: usize,
    pub eval_set: EvalSet,
    pub threshold_rule: String,
}

/// Indices of the detector's clean training subset: `DETECTOR_FRACTION` of
/// all points, drawn from the clean ones.
pub fn detector_subset(poisoned: &[bool], seed: u64) -> Vec<usize> {
    let mut clean: Vec<usize> = (0..poisoned.len()).filter(|&i| !poisoned[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    clean.shuffle(&mut rng);
    let n = ((DETECTOR_FRACTION * poisoned.len() as f64).round() as usize).clamp(1, clean.len().max(1));
    clean.truncate(n.min(clean.len()));
    clean.sort_unstable();
    clean
}

/// Isolation-forest detection of the poisoned rows of `x`. `None` when
/// nothing is poisoned or no clean point is left to evaluate against.
pub fn evaluate_anomaly_detection<S: Scalar>(
    x: ArrayView2<S>,
    poisoned: &[bool],
    eval_set: EvalSet,
    seed: u64,
) -> Result<Option<AnomalyReport>> {
    if poisoned.len() != x.nrows() {
        return Err(Error::Config("one poisoned flag per training point is required".into()));
    }
    let n_pos = poisoned.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Ok(None);
    }
    let train_idx = detector_subset(poisoned, seed);
    if train_idx.is_empty() {
        return Ok(None);
    }
    assert!(train_idx.iter().all(|&i| !poisoned[i]), "detector subset touches poisoned points");
    let mut in_train = vec![false; poisoned.len()];
    for &i in &train_idx {
        in_train[i] = true;
    }
    let mut clean_eval: Vec<usize> = (0..poisoned.len()).filter(|&i| !poisoned[i] && !in_train[i]).collect();
    if eval_set == EvalSet::EqualSize {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        clean_eval.shuffle(&mut rng);
        clean_eval.truncate(n_pos);
        clean_eval.sort_unstable();
    }
    if clean_eval.is_empty() {
        return Ok(None);
    }
    let forest = train_isolation_forest(x.select(Axis(0), &train_idx).view(), DETECTOR_TREES, DETECTOR_SUBSAMPLE, seed)?;
    let eval: Vec<usize> = (0..poisoned.len()).filter(|&i| poisoned[i]).chain(clean_eval.iter().copied()).collect();
    let scores = forest.score(x.select(Axis(0), &eval).view());
    let truth: Vec<bool> = eval.iter().map(|&i| poisoned[i]).collect();
    let pr_auc = average_precision(&scores, &truth).expect("evaluation set holds a poisoned point");
    let mut order: Vec<usize> = (0..eval.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut flagged = vec![0u8; eval.len()];
    for &i in order.iter().take(n_pos) {
        flagged[i] = 1;
    }
    let truth_u8: Vec<u8> = truth.iter().map(|&t| u8::from(t)).collect();
    Ok(Some(AnomalyReport {
        pr_auc,
        f1: Confusion::new(&truth_u8, &flagged).f1(),
        n_poisoned: n_pos,
        n_clean_eval: clean_eval.len(),
        n_detector_train: train_idx.len(),
        eval_set,
        threshold_rule: THRESHOLD_RULE.into(),
    }))
}

/// Fields compared in problem space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Categorical,
    Numeric,
}

pub const JS_FIELDS: [(&str, FieldKind); 10] = [
    ("proto", FieldKind::Categorical),
    ("service", FieldKind::Categorical),
    ("conn_state", FieldKind::Categorical),
    ("resp_p", FieldKind::Categorical),
    ("orig_p", FieldKind::Numeric),
    ("duration", FieldKind::Numeric),
    ("orig_bytes", FieldKind::Numeric),
    ("resp_bytes", FieldKind::Numeric),
    ("orig_pkts", FieldKind::Numeric),
    ("resp_pkts", FieldKind::Numeric),
];

fn categorical(r: &ConnRecord, field: &str) -> String {
    match field {
        "proto" => r.proto.as_str().into(),
        "service" => r.service_str().into(),
        "conn_state" => r.conn_state.as_str().into(),
        "resp_p" => r.resp_p.to_string(),
        _ => unreachable!(),
    }
}

fn numeric(r: &ConnRecord, field: &str) -> Option<f64> {
    match field {
        "orig_p" => Some(r.orig_p as f64),
        "duration" => r.duration,
        "orig_bytes" => r.orig_bytes.map(|v| v as f64),
        "resp_bytes" => r.resp_bytes.map(|v| v as f64),
        "orig_pkts" => Some(r.orig_pkts as f64),
        "resp_pkts" => Some(r.resp_pkts as f64),
        _ => unreachable!(),
    }
}

/// Jensen-Shannon distance with base-2 logs: `sqrt(JSD)`, in `[0, 1]`.
/// Inputs are unnormalized counts over the same bins.
pub fn js_distance(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
    if sp <= 0.0 || sq <= 0.0 {
        return if sp == sq { 0.0 } else { 1.0 };
    }
    let mut d = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let (a, b) = (a / sp, b / sq);
        // Fixed operand order keeps the result exactly symmetric.
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        let m = 0.5 * (a + b);
        if a > 0.0 {
            d += 0.5 * a * (a / m).log2();
        }
        if b > 0.0 {
            d += 0.5 * b * (b / m).log2();
        }
    }
    d.clamp(0.0, 1.0).sqrt()
}

/// `NUMERIC_BINS` equal-width bins over `log1p` of the clean values, plus an
/// underflow, an overflow and a missing-value bin.
pub struct LogBins {
    lo: f64,
    hi: f64,
}

impl LogBins {
    pub fn fit(clean: impl Iterator<Item = f64>) -> Self {
        let (lo, hi) = clean
            .map(|v| v.max(0.0).ln_1p())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if lo > hi {
            LogBins { lo: 0.0, hi: 0.0 }
        } else {
            LogBins { lo, hi }
        }
    }

    pub const N: usize = NUMERIC_BINS + 3;

    pub fn index(&self, v: Option<f64>) -> usize {
        let Some(v) = v else { return NUMERIC_BINS + 2 };
        let x = v.max(0.0).ln_1p();
        if x < self.lo {
            return 0;
        }
        if x > self.hi {
            return NUMERIC_BINS + 1;
        }
        let width = (self.hi - self.lo) / NUMERIC_BINS as f64;
        if width <= 0.0 {
            return 1;
        }
        1 + (((x - self.lo) / width) as usize).min(NUMERIC_BINS - 1)
    }
}

fn field_distance(field: &str, kind: FieldKind, a: &[ConnRecord], clean: &[ConnRecord]) -> f64 {
    match kind {
        FieldKind::Categorical => {
            let mut counts: BTreeMap<String, [f64; 2]> = BTreeMap::new();
            for r in a {
                counts.entry(categorical(r, field)).or_default()[0] += 1.0;
            }
            for r in clean {
                counts.entry(categorical(r, field)).or_default()[1] += 1.0;
            }
            let p: Vec<f64> = counts.values().map(|c| c[0]).collect();
            let q: Vec<f64> = counts.values().map(|c| c[1]).collect();
            js_distance(&p, &q)
        }
        FieldKind::Numeric => {
            let bins = LogBins::fit(clean.iter().filter_map(|r| numeric(r, field)));
            let mut p = vec![0.0; LogBins::N];
            let mut q = vec![0.0; LogBins::N];
            for r in a {
                p[bins.index(numeric(r, field))] += 1.0;
            }
            for r in clean {
                q[bins.index(numeric(r, field))] += 1.0;
            }
            js_distance(&p, &q)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsReport {
    pub fields: Vec<(String, f64)>,
    pub average: f64,
    /// Distance between the clean training and test records, for scale.
    pub d_ref: Option<f64>,
}

/// Per-field distances between `poisoned` and `clean`, binned on `clean`.
pub fn js_fields(poisoned: &[ConnRecord], clean: &[ConnRecord]) -> Result<Vec<(String, f64)>> {
    if poisoned.is_empty() || clean.is_empty() {
        return Err(Error::Config("both record sets must be nonempty".into()));
    }
    Ok(JS_FIELDS
        .par_iter()
        .map(|&(f, k)| (f.to_string(), field_distance(f, k, poisoned, clean)))
        .collect())
}

fn mean(v: &[(String, f64)]) -> f64 {
    v.iter().map(|(_, d)| d).sum::<f64>() / v.len() as f64
}

/// Field distances and their average, plus the reference distance when a
/// clean test set is given.
pub fn jensen_shannon_report(
    poisoned: &[ConnRecord],
    clean: &[ConnRecord],
    reference_test: Option<&[ConnRecord]>,
) -> Result<JsReport> {
    let fields = js_fields(poisoned, clean)?;
    let d_ref = match reference_test {
        Some(t) => Some(mean(&js_fields(t, clean)?)),
        None => None,
    };
    Ok(JsReport {
        average: mean(&fields),
        fields,
        d_ref,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StealthReport {
    pub anomaly: Option<AnomalyReport>,
    pub js: Option<JsReport>,
}

/// Rows of `x` as an owned matrix, for callers holding per-point vectors.
pub fn rows_to_matrix<S: Scalar>(rows: &[Vec<f64>]) -> Array2<S> {
    let d = rows.first().map_or(0, Vec::len);
    Array2::from_shape_fn((rows.len(), d), |(i, j)| S::of(rows[i][j]))
}
