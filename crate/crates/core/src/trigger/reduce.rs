//! Trigger footprint reduction.

use std::collections::HashSet;

use super::{Normalizer, Trigger, TriggerProto, TriggerVariant};
use crate::error::{Error, Result};
use crate::featurize::{FeatureKind, KeyAccumulator, DISTINCT_DST_PORTS, DISTINCT_EXTERNAL_IPS};
use crate::flowlog::{ConnRecord, Proto};

const SLACK: f64 = 1e-12;

/// Records of `t` that can influence a selected feature: key-port records
/// when any port-keyed feature is selected, plus other records only when
/// they add a peer or port a selected distinct-count feature would miss.
fn contributing(t: &Trigger) -> Vec<usize> {
    let port_keyed = t.features.iter().any(|&f| FeatureKind::of(f).is_port_keyed());
    let want_ips = t.features.contains(&DISTINCT_EXTERNAL_IPS);
    let want_ports = t.features.contains(&DISTINCT_DST_PORTS);
    let peer = |r: &ConnRecord| if r.orig_ip == t.host { r.resp_ip } else { r.orig_ip };
    let mut keep = vec![false; t.records.len()];
    let mut peers = HashSet::new();
    let mut ports = HashSet::new();
    let mut take = |i: usize, r: &ConnRecord, peers: &mut HashSet<_>, ports: &mut HashSet<u16>| {
        keep[i] = true;
        peers.insert(peer(r));
        if r.proto != Proto::Icmp {
            ports.insert(r.resp_p);
        }
    };
    if port_keyed {
        for (i, r) in t.records.iter().enumerate() {
            if r.resp_p == t.port {
                take(i, r, &mut peers, &mut ports);
            }
        }
    }
    for (i, r) in t.records.iter().enumerate() {
        if port_keyed && r.resp_p == t.port {
            continue;
        }
        let new_peer = want_ips && !peers.contains(&peer(r));
        let new_port = want_ports && r.proto != Proto::Icmp && !ports.contains(&r.resp_p);
        if new_peer || new_port {
            take(i, r, &mut peers, &mut ports);
        }
    }
    drop(take);
    (0..t.records.len()).filter(|&i| keep[i]).collect()
}

fn selected_values(t: &Trigger, idx: &[usize]) -> Vec<f64> {
    let mut acc = KeyAccumulator::new(t.host, t.port);
    for &i in idx {
        acc.push(&t.records[i]);
    }
    t.features.iter().map(|&f| acc.value(f)).collect()
}

/// Drops non-contributing connections, then keeps the shortest contiguous
/// run of the rest whose count and sum features are each at least as close
/// to the prototype as the full trigger's. With no count or sum feature
/// selected, the run's total distance must not exceed the full trigger's.
/// Ties go to the earliest run.
pub fn reduce_trigger(full: &Trigger, proto: &TriggerProto, norm: &Normalizer) -> Result<Trigger> {
    if full.variant != TriggerVariant::Full {
        return Err(Error::Attack("only full triggers can be reduced".into()));
    }
    let target = proto.selected(&full.features);
    let guarded: Vec<usize> = (0..full.features.len())
        .filter(|&k| FeatureKind::of(full.features[k]).is_count_or_sum())
        .collect();
    let dev = |vals: &[f64], k: usize| (norm.scale(k, vals[k]) - norm.scale(k, target[k])).abs();
    let full_dev: Vec<f64> = (0..full.features.len()).map(|k| dev(&full.achieved, k)).collect();
    let acceptable = |vals: &[f64]| {
        if guarded.is_empty() {
            norm.distance(vals, &target) <= full.distance + SLACK
        } else {
            guarded.iter().all(|&k| dev(vals, k) <= full_dev[k] + SLACK)
        }
    };

    let kept = contributing(full);
    if kept.is_empty() {
        log::warn!("no trigger connection feeds a selected feature; keeping the full trigger");
        return Ok(full.clone());
    }
    let mut best: Option<(usize, usize)> = None;
    'len: for len in 1..=kept.len() {
        for start in 0..=kept.len() - len {
            if acceptable(&selected_values(full, &kept[start..start + len])) {
                best = Some((start, len));
                break 'len;
            }
        }
    }
    let Some((start, len)) = best else {
        log::warn!("trigger cannot be reduced without moving away from the prototype");
        return Ok(full.clone());
    };
    let idx = &kept[start..start + len];
    let achieved = selected_values(full, idx);
    Ok(Trigger {
        variant: TriggerVariant::Reduced,
        records: idx.iter().map(|&i| full.records[i].clone()).collect(),
        host: full.host,
        port: full.port,
        features: full.features.clone(),
        distance: norm.distance(&achieved, &target),
        achieved,
        source_indices: idx
            .iter()
            .map(|&i| full.source_indices.get(i).copied().unwrap_or(i))
            .collect(),
    })
}
