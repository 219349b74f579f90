use std::collections::{BTreeMap, HashSet};
use std::net::IpAddr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Label};
use crate::error::{Error, Result};

/// Ground truth: a connection is malicious iff it touches an infected host.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelRule {
    pub infected_hosts: HashSet<IpAddr>,
}

impl LabelRule {
    pub fn new(hosts: impl IntoIterator<Item = IpAddr>) -> Self {
        LabelRule {
            infected_hosts: hosts.into_iter().collect(),
        }
    }

    pub fn label_of(&self, orig: &IpAddr, resp: &IpAddr) -> Label {
        if self.infected_hosts.contains(orig) || self.infected_hosts.contains(resp) {
            Label::NonTarget
        } else {
            Label::Target
        }
    }
}

pub fn apply_labels(mut ds: Dataset, rule: &LabelRule) -> Dataset {
    for r in &mut ds.records {
        r.label = rule.label_of(&r.orig_ip, &r.resp_ip);
    }
    ds
}

/// Half-open capture period `[start, end)` in epoch seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Period {
    pub start: f64,
    pub end: f64,
}

impl Period {
    pub fn contains(&self, ts: f64) -> bool {
        ts >= self.start && ts < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Records inside any of these periods train the victim; everything else
    /// belongs to the test period.
    pub train_periods: Vec<Period>,
    /// Share of test-period window groups handed to the adversary.
    pub adversary_fraction: f64,
    pub window_seconds: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_periods: Vec::new(),
            adversary_fraction: 0.15,
            window_seconds: super::WINDOW_SECONDS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub train: Dataset,
    pub test: Dataset,
    pub adversary: Dataset,
}

/// Splits a dataset into train, test and adversary sets.
///
/// The unit moved into the adversary set is a window group: every record of
/// one `(window, internal host)` pair, so distinct-count features of the
/// adversary's points are computed over complete groups. Records without an
/// internal endpoint form one group per window.
pub fn partition_dataset(ds: &Dataset, spec: &SplitSpec, seed: u64) -> Result<Partition> {
    if !(spec.adversary_fraction > 0.0 && spec.adversary_fraction < 1.0) {
        return Err(Error::Config(format!(
            "adversary fraction must lie in (0, 1), got {}",
            spec.adversary_fraction
        )));
    }
    if !(spec.window_seconds > 0.0) {
        return Err(Error::Config("window_seconds must be positive".into()));
    }

    let mut train_idx = Vec::new();
    let mut groups: BTreeMap<(i64, Option<IpAddr>), Vec<usize>> = BTreeMap::new();
    for (i, r) in ds.records.iter().enumerate() {
        if spec.train_periods.iter().any(|p| p.contains(r.ts)) {
            train_idx.push(i);
        } else {
            let key = (r.window_index(spec.window_seconds), ds.key_endpoint(r));
            groups.entry(key).or_default().push(i);
        }
    }

    let mut keys: Vec<_> = groups.keys().copied().collect();
    let n_adv = (spec.adversary_fraction * keys.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    keys.shuffle(&mut rng);
    let adv_keys: HashSet<_> = keys[..n_adv].iter().copied().collect();

    let mut test_idx = Vec::new();
    let mut adv_idx = Vec::new();
    for (key, idx) in groups {
        if adv_keys.contains(&key) {
            adv_idx.extend(idx);
        } else {
            test_idx.extend(idx);
        }
    }
    test_idx.sort_unstable();
    adv_idx.sort_unstable();

    let take = |idx: &[usize]| ds.with_records(idx.iter().map(|&i| ds.records[i].clone()).collect());
    Ok(Partition {
        train: take(&train_idx),
        test: take(&test_idx),
        adversary: take(&adv_idx),
    })
}
