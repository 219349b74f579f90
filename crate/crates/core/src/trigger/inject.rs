//! Insertion-only trigger placement in training and test windows.
//!
//! For each chosen `(window, host)` the trigger records are cloned, the
//! endpoint they were observed on is replaced by the chosen host, and their
//! timestamps are mapped linearly into the final `placement` fraction of the
//! window. Injected records take the label of the point they join, so labels
//! never change. Original records are never altered or removed.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::net::IpAddr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Trigger;
use crate::error::{Error, Result};
use crate::featurize::{AggregationKey, Aggregator, FeaturePoint};
use crate::flowlog::{ConnRecord, Dataset, Label};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectParams {
    pub window_seconds: f64,
    /// Trailing fraction of the window the trigger is squeezed into.
    pub placement: f64,
}

impl Default for InjectParams {
    fn default() -> Self {
        InjectParams {
            window_seconds: crate::flowlog::WINDOW_SECONDS,
            placement: 0.5,
        }
    }
}

/// One poisoned or triggered point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub key: AggregationKey,
    pub label: Label,
    /// Positions of the injected records in the output dataset.
    pub record_indices: Vec<usize>,
    /// Selected-feature values before and after injection.
    pub before: Vec<f64>,
    pub achieved: Vec<f64>,
    /// Full feature vector after injection.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Injection {
    pub dataset: Dataset,
    pub manifest: Vec<ManifestEntry>,
}

fn last_float_below(x: f64) -> f64 {
    if x > 0.0 {
        f64::from_bits(x.to_bits() - 1)
    } else {
        x - f64::EPSILON
    }
}

/// Trigger records adapted to one `(window, host)`.
pub(crate) fn place(trigger: &Trigger, key: &AggregationKey, label: Label, params: &InjectParams) -> Vec<ConnRecord> {
    let w = params.window_seconds;
    let start = key.window_index as f64 * w;
    let end = start + w;
    let lo = start + (1.0 - params.placement.clamp(0.0, 1.0)) * w;
    let span_to = (end - lo) * (1.0 - 1e-6);
    let t0 = trigger.records.iter().map(|r| r.ts).fold(f64::INFINITY, f64::min);
    let t1 = trigger.records.iter().map(|r| r.ts).fold(f64::NEG_INFINITY, f64::max);
    let span = t1 - t0;
    trigger
        .records
        .iter()
        .map(|r| {
            let mut c = r.clone();
            if c.orig_ip == trigger.host {
                c.orig_ip = key.internal_ip;
            } else if c.resp_ip == trigger.host {
                c.resp_ip = key.internal_ip;
            } else {
                c.orig_ip = key.internal_ip;
            }
            let frac = if span > 0.0 { (r.ts - t0) / span } else { 0.0 };
            let mut ts = lo + frac * span_to;
            while crate::flowlog::window_index(ts, w) > key.window_index {
                ts = last_float_below(ts);
            }
            c.ts = ts.max(start);
            c.label = label;
            c
        })
        .collect()
}

/// Record indices of every `(window, key endpoint)` group.
fn group_index(ds: &Dataset, agg: &Aggregator) -> HashMap<(i64, IpAddr), Vec<usize>> {
    let mut g: HashMap<(i64, IpAddr), Vec<usize>> = HashMap::new();
    for (i, r) in ds.records.iter().enumerate() {
        if let Some(h) = agg.key_endpoint(r) {
            g.entry((r.window_index(agg.window_seconds), h)).or_default().push(i);
        }
    }
    g
}

/// Injects `trigger` at every key, each with its point label. The output
/// dataset holds the original records plus the injected ones, stably sorted
/// by timestamp.
pub fn apply_injections(
    ds: &Dataset,
    trigger: &Trigger,
    targets: &[(AggregationKey, Label)],
    params: &InjectParams,
) -> Injection {
    if targets.is_empty() {
        return Injection {
            dataset: ds.clone(),
            manifest: Vec::new(),
        };
    }
    let agg = Aggregator::new(ds.internal_subnets.clone(), params.window_seconds);
    let groups = group_index(ds, &agg);
    let mut all: Vec<ConnRecord> = ds.records.clone();
    let mut spans = Vec::with_capacity(targets.len());
    let mut manifest = Vec::with_capacity(targets.len());
    for (key, label) in targets {
        let injected = place(trigger, key, *label, params);
        let group: Vec<ConnRecord> = groups
            .get(&(key.window_index, key.internal_ip))
            .map(|idx| idx.iter().map(|&i| ds.records[i].clone()).collect())
            .unwrap_or_default();
        let before = agg.recompute_point(&group, *key);
        let mut after_records = group;
        after_records.extend(injected.iter().cloned());
        // Same order as the merged dataset, so float sums match re-aggregation.
        crate::flowlog::sort_by_ts(&mut after_records);
        let after = agg.recompute_point(&after_records, *key);
        spans.push(all.len()..all.len() + injected.len());
        all.extend(injected);
        manifest.push(ManifestEntry {
            key: *key,
            label: *label,
            record_indices: Vec::new(),
            before: before.selected(&trigger.features),
            achieved: after.selected(&trigger.features),
            values: after.values,
        });
    }
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.sort_by(|&a, &b| all[a].ts.total_cmp(&all[b].ts));
    let mut new_pos = vec![0; all.len()];
    for (pos, &i) in order.iter().enumerate() {
        new_pos[i] = pos;
    }
    for (entry, span) in manifest.iter_mut().zip(spans) {
        entry.record_indices = span.map(|i| new_pos[i]).collect();
    }
    let mut slots: Vec<Option<ConnRecord>> = all.into_iter().map(Some).collect();
    let records: Vec<ConnRecord> = order.iter().map(|&i| slots[i].take().expect("each record moved once")).collect();
    Injection {
        dataset: Dataset {
            records,
            internal_subnets: ds.internal_subnets.clone(),
            scenario_name: ds.scenario_name.clone(),
        },
        manifest,
    }
}

/// Poisons `p_percent` percent of the training points, counted over all
/// points. Each poisoned point lives in a distinct `(window, host)` group
/// whose points are all target-class; the trigger lands on the trigger's
/// port within that group.
pub fn inject_training(
    ds: &Dataset,
    points: &[FeaturePoint],
    trigger: &Trigger,
    p_percent: f64,
    seed: u64,
    params: &InjectParams,
) -> Result<Injection> {
    if !(0.0..=100.0).contains(&p_percent) {
        return Err(Error::Config(format!("poison rate {p_percent}% outside [0, 100]")));
    }
    if p_percent == 0.0 {
        return Ok(Injection {
            dataset: ds.clone(),
            manifest: Vec::new(),
        });
    }
    if trigger.is_empty() {
        return Err(Error::Attack("empty trigger".into()));
    }
    let mut groups: BTreeMap<(i64, IpAddr), bool> = BTreeMap::new();
    for p in points {
        let all_target = groups.entry((p.key.window_index, p.key.internal_ip)).or_insert(true);
        *all_target &= p.label == Label::Target;
    }
    let eligible: Vec<(i64, IpAddr)> = groups.into_iter().filter(|(_, ok)| *ok).map(|(k, _)| k).collect();
    if eligible.is_empty() {
        return Err(Error::Attack("no target-class points to poison".into()));
    }
    let mut n = (p_percent / 100.0 * points.len() as f64).round() as usize;
    if n == 0 {
        log::warn!("{p_percent}% of {} points rounds to zero; poisoning one point", points.len());
        n = 1;
    }
    if n > eligible.len() {
        log::warn!("only {} target-class groups available for {n} poisoned points", eligible.len());
        n = eligible.len();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = sample(&mut rng, eligible.len(), n).into_vec();
    chosen.sort_unstable();
    let targets: Vec<(AggregationKey, Label)> = chosen
        .into_iter()
        .map(|i| {
            let (window_index, internal_ip) = eligible[i];
            (
                AggregationKey {
                    window_index,
                    internal_ip,
                    resp_p: trigger.port,
                },
                Label::Target,
            )
        })
        .collect();
    Ok(apply_injections(ds, trigger, &targets, params))
}

/// Victim points for test-time injection: nontarget points on the trigger's
/// port that the clean model classifies correctly (`clean_pred[i] == 1`).
pub fn eligible_victims(points: &[FeaturePoint], clean_pred: &[u8], port: u16) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| points[i].label == Label::NonTarget && clean_pred[i] == 1 && points[i].key.resp_p == port)
        .collect()
}

/// Splices the trigger into `n_points` victim test points.
pub fn inject_test_points(
    ds: &Dataset,
    points: &[FeaturePoint],
    clean_pred: &[u8],
    trigger: &Trigger,
    n_points: usize,
    seed: u64,
    params: &InjectParams,
) -> Result<Injection> {
    if clean_pred.len() != points.len() {
        return Err(Error::Attack("one clean prediction per test point is required".into()));
    }
    if n_points == 0 {
        return Ok(Injection {
            dataset: ds.clone(),
            manifest: Vec::new(),
        });
    }
    let eligible = eligible_victims(points, clean_pred, trigger.port);
    let n = if eligible.len() < n_points {
        log::warn!("only {} eligible victim points for {n_points} requested", eligible.len());
        eligible.len()
    } else {
        n_points
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = sample(&mut rng, eligible.len(), n).into_vec();
    chosen.sort_unstable();
    let targets: Vec<(AggregationKey, Label)> = chosen
        .into_iter()
        .map(|i| (points[eligible[i]].key, Label::NonTarget))
        .collect();
    Ok(apply_injections(ds, trigger, &targets, params))
}

/// Writes one JSON object per line.
pub fn write_manifest<W: Write>(entries: &[ManifestEntry], mut out: W) -> Result<()> {
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_manifest<R: BufRead>(source: R) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for line in source.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
