//! Contiguous trigger search over the attacker's nontarget host streams.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::net::IpAddr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Normalizer, Trigger, TriggerProto, TriggerVariant};
use crate::error::{Error, Result};
use crate::featurize::{Aggregator, KeyAccumulator};
use crate::flowlog::{ConnRecord, Label};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchParams {
    /// Longest candidate run.
    pub l_max: usize,
}

/// Twice the prototype's record count, kept within `[10, 500]`.
pub fn default_l_max(proto_records: usize) -> usize {
    (2 * proto_records).clamp(10, 500)
}

/// Nontarget records grouped by internal host, oldest first, hosts in
/// address order. Values are indices into `records`.
pub(crate) fn host_streams(records: &[ConnRecord], agg: &Aggregator) -> Vec<(IpAddr, Vec<usize>)> {
    let mut streams: BTreeMap<IpAddr, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        if r.label != Label::NonTarget {
            continue;
        }
        if let Some(h) = agg.key_endpoint(r) {
            streams.entry(h).or_default().push(i);
        }
    }
    streams.into_iter().collect()
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    distance: f64,
    len: usize,
    first: usize,
    stream: usize,
    start: usize,
}

impl Candidate {
    fn cmp_key(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.len.cmp(&other.len))
            .then(self.first.cmp(&other.first))
    }
}

/// Scans every contiguous run of at most `l_max` records in each host
/// stream, featurises it as one window keyed on the prototype's port, and
/// returns the run nearest the prototype. Ties prefer the shorter run, then
/// the one starting earliest in `records`.
pub fn extract_full_trigger(
    records: &[ConnRecord],
    agg: &Aggregator,
    proto: &TriggerProto,
    norm: &Normalizer,
    params: SearchParams,
) -> Result<Trigger> {
    let port = proto
        .key
        .ok_or_else(|| Error::Attack("window trigger needs a keyed prototype".into()))?
        .resp_p;
    if params.l_max == 0 {
        return Err(Error::Config("l_max must be positive".into()));
    }
    let features = &norm.features;
    let target = proto.selected(features);
    let streams = host_streams(records, agg);
    let jobs: Vec<(usize, usize)> = streams
        .iter()
        .enumerate()
        .flat_map(|(s, (_, idx))| (0..idx.len()).map(move |start| (s, start)))
        .collect();
    let best = jobs
        .into_par_iter()
        .map(|(s, start)| {
            let (host, idx) = &streams[s];
            let mut acc = KeyAccumulator::new(*host, port);
            let mut sel = vec![0.0; features.len()];
            let mut best: Option<Candidate> = None;
            for (off, &i) in idx[start..].iter().take(params.l_max).enumerate() {
                acc.push(&records[i]);
                for (k, &f) in features.iter().enumerate() {
                    sel[k] = acc.value(f);
                }
                let c = Candidate {
                    distance: norm.distance(&sel, &target),
                    len: off + 1,
                    first: idx[start],
                    stream: s,
                    start,
                };
                if best.map_or(true, |b| c.cmp_key(&b) == Ordering::Less) {
                    best = Some(c);
                }
            }
            best
        })
        .reduce(
            || None,
            |a, b| match (a, b) {
                (Some(a), Some(b)) => Some(if b.cmp_key(&a) == Ordering::Less { b } else { a }),
                (a, None) => a,
                (None, b) => b,
            },
        )
        .ok_or_else(|| Error::Attack("adversary data holds no nontarget records".into()))?;

    let (host, idx) = &streams[best.stream];
    let source_indices: Vec<usize> = idx[best.start..best.start + best.len].to_vec();
    let trigger_records: Vec<ConnRecord> = source_indices.iter().map(|&i| records[i].clone()).collect();
    let mut acc = KeyAccumulator::new(*host, port);
    for r in &trigger_records {
        acc.push(r);
    }
    Ok(Trigger {
        variant: TriggerVariant::Full,
        records: trigger_records,
        host: *host,
        port,
        features: features.clone(),
        achieved: features.iter().map(|&f| acc.value(f)).collect(),
        distance: best.distance,
        source_indices,
    })
}
