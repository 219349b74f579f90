//! Problem space to feature space.
//!
//! Two representations are produced from labelled connection records:
//!
//! * window points: statistical features per `(30 s window, internal IP,
//!   destination port)`, with the two distinct-count features computed per
//!   `(window, internal IP)` and replicated onto each of that pair's points;
//! * blocks: fixed-length runs of consecutive connections per internal host,
//!   flattened into one vector (see [`blocks`]).
//!
//! Every point keeps the indices of the records it was built from so that
//! trigger injection can operate on raw connections and re-aggregate.

pub mod blocks;
mod io;

use std::collections::{BTreeMap, HashSet};
use std::net::IpAddr;
use std::sync::Arc;

use ipnet::IpNet;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowlog::{self, ConnRecord, ConnState, Dataset, Label, Proto};
use crate::scalar::Scalar;

pub use blocks::{blockize, BlockEncoder, BlockPoint};
pub use io::{read_feature_table, write_blocks, write_points, FeatureTable};

pub const N_FEATURES: usize = 33;

const PROTO_BASE: usize = 0;
const STATE_BASE: usize = 3;
const TRIPLE_BASE: usize = 16;
pub const DISTINCT_EXTERNAL_IPS: usize = 31;
pub const DISTINCT_DST_PORTS: usize = 32;

/// Numeric log fields summarized by a `{sum, min, max}` triple, in feature order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NumericField {
    OrigPkts,
    RespPkts,
    OrigBytes,
    RespBytes,
    Duration,
}

impl NumericField {
    pub const ALL: [NumericField; 5] = [
        NumericField::OrigPkts,
        NumericField::RespPkts,
        NumericField::OrigBytes,
        NumericField::RespBytes,
        NumericField::Duration,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NumericField::OrigPkts => "orig_pkts",
            NumericField::RespPkts => "resp_pkts",
            NumericField::OrigBytes => "orig_bytes",
            NumericField::RespBytes => "resp_bytes",
            NumericField::Duration => "duration",
        }
    }

    /// Value of this field on a record; `None` when the log left it unset.
    pub fn value(self, r: &ConnRecord) -> Option<f64> {
        match self {
            NumericField::OrigPkts => Some(r.orig_pkts as f64),
            NumericField::RespPkts => Some(r.resp_pkts as f64),
            NumericField::OrigBytes => r.orig_bytes.map(|v| v as f64),
            NumericField::RespBytes => r.resp_bytes.map(|v| v as f64),
            NumericField::Duration => r.duration,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    ProtoCount(Proto),
    StateCount(ConnState),
    Sum(NumericField),
    Min(NumericField),
    Max(NumericField),
    DistinctExternalIps,
    DistinctDstPorts,
}

impl FeatureKind {
    pub fn of(index: usize) -> FeatureKind {
        match index {
            i if i < STATE_BASE => FeatureKind::ProtoCount(Proto::ALL[i - PROTO_BASE]),
            i if i < TRIPLE_BASE => FeatureKind::StateCount(ConnState::ALL[i - STATE_BASE]),
            i if i < DISTINCT_EXTERNAL_IPS => {
                let field = NumericField::ALL[(i - TRIPLE_BASE) / 3];
                match (i - TRIPLE_BASE) % 3 {
                    0 => FeatureKind::Sum(field),
                    1 => FeatureKind::Min(field),
                    _ => FeatureKind::Max(field),
                }
            }
            DISTINCT_EXTERNAL_IPS => FeatureKind::DistinctExternalIps,
            DISTINCT_DST_PORTS => FeatureKind::DistinctDstPorts,
            _ => panic!("feature index {index} out of range"),
        }
    }

    /// Counts and sums only grow when connections are added.
    pub fn is_count_or_sum(self) -> bool {
        !matches!(self, FeatureKind::Min(_) | FeatureKind::Max(_))
    }

    /// Whether the feature is computed over the destination-port bucket
    /// rather than the whole `(window, host)` group.
    pub fn is_port_keyed(self) -> bool {
        !matches!(
            self,
            FeatureKind::DistinctExternalIps | FeatureKind::DistinctDstPorts
        )
    }
}

/// Names of the 33 window features, in vector order.
pub fn feature_names() -> Vec<String> {
    let mut names = Vec::with_capacity(N_FEATURES);
    for p in Proto::ALL {
        names.push(format!("proto_{}_count", p.as_str()));
    }
    for s in ConnState::ALL {
        names.push(format!("state_{}_count", s.as_str()));
    }
    for f in NumericField::ALL {
        for stat in ["sum", "min", "max"] {
            names.push(format!("{}_{stat}", f.name()));
        }
    }
    names.push("distinct_external_ips".into());
    names.push("distinct_dst_ports".into());
    names
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AggregationKey {
    pub window_index: i64,
    pub internal_ip: IpAddr,
    pub resp_p: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePoint {
    pub key: AggregationKey,
    pub values: Vec<f64>,
    pub label: Label,
    /// Records sharing this exact key.
    pub provenance: Vec<usize>,
    /// Every record of the `(window, internal IP)` group; recomputing over
    /// these records reproduces `values`.
    pub group: Arc<[usize]>,
}

impl FeaturePoint {
    pub fn value(&self, feature: usize) -> f64 {
        self.values[feature]
    }

    pub fn selected(&self, features: &[usize]) -> Vec<f64> {
        features.iter().map(|&f| self.values[f]).collect()
    }
}

/// Running `{sum, min, max}` and counts for one destination-port bucket.
#[derive(Debug, Clone)]
struct PortStats {
    proto: [u64; 3],
    state: [u64; 13],
    sum: [f64; 5],
    min: [f64; 5],
    max: [f64; 5],
    seen: [bool; 5],
    nontarget: bool,
}

impl Default for PortStats {
    fn default() -> Self {
        PortStats {
            proto: [0; 3],
            state: [0; 13],
            sum: [0.0; 5],
            min: [0.0; 5],
            max: [0.0; 5],
            seen: [false; 5],
            nontarget: false,
        }
    }
}

impl PortStats {
    fn push(&mut self, r: &ConnRecord) {
        self.proto[r.proto.index()] += 1;
        self.state[r.conn_state.index()] += 1;
        for (j, f) in NumericField::ALL.iter().enumerate() {
            if let Some(v) = f.value(r) {
                self.sum[j] += v;
                if self.seen[j] {
                    self.min[j] = self.min[j].min(v);
                    self.max[j] = self.max[j].max(v);
                } else {
                    self.min[j] = v;
                    self.max[j] = v;
                    self.seen[j] = true;
                }
            }
        }
        self.nontarget |= r.label == Label::NonTarget;
    }

    fn value(&self, feature: usize) -> f64 {
        match feature {
            f if f < STATE_BASE => self.proto[f - PROTO_BASE] as f64,
            f if f < TRIPLE_BASE => self.state[f - STATE_BASE] as f64,
            f => {
                let j = (f - TRIPLE_BASE) / 3;
                match (f - TRIPLE_BASE) % 3 {
                    0 => self.sum[j],
                    1 => self.min[j],
                    _ => self.max[j],
                }
            }
        }
    }

    fn write_into(&self, out: &mut [f64]) {
        for (i, c) in self.proto.iter().enumerate() {
            out[PROTO_BASE + i] = *c as f64;
        }
        for (i, c) in self.state.iter().enumerate() {
            out[STATE_BASE + i] = *c as f64;
        }
        for j in 0..5 {
            out[TRIPLE_BASE + 3 * j] = self.sum[j];
            out[TRIPLE_BASE + 3 * j + 1] = self.min[j];
            out[TRIPLE_BASE + 3 * j + 2] = self.max[j];
        }
    }
}

/// Distinct-count state for one `(window, internal IP)` group.
#[derive(Debug, Clone, Default)]
struct GroupStats {
    peers: HashSet<IpAddr>,
    ports: HashSet<u16>,
}

impl GroupStats {
    fn push(&mut self, host: IpAddr, r: &ConnRecord) {
        let peer = if r.orig_ip == host { r.resp_ip } else { r.orig_ip };
        self.peers.insert(peer);
        if r.proto != Proto::Icmp {
            self.ports.insert(r.resp_p);
        }
    }

    fn write_into(&self, out: &mut [f64]) {
        out[DISTINCT_EXTERNAL_IPS] = self.peers.len() as f64;
        out[DISTINCT_DST_PORTS] = self.ports.len() as f64;
    }
}

/// Incremental feature computation for a single key port, used by the
/// contiguous trigger search where a candidate grows one record at a time.
#[derive(Debug, Clone)]
pub struct KeyAccumulator {
    host: IpAddr,
    port: u16,
    stats: PortStats,
    group: GroupStats,
    len: usize,
}

impl KeyAccumulator {
    pub fn new(host: IpAddr, port: u16) -> Self {
        KeyAccumulator {
            host,
            port,
            stats: PortStats::default(),
            group: GroupStats::default(),
            len: 0,
        }
    }

    /// Adds a record whose key endpoint is the accumulator's host.
    pub fn push(&mut self, r: &ConnRecord) {
        if r.resp_p == self.port {
            self.stats.push(r);
        }
        self.group.push(self.host, r);
        self.len += 1;
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn values(&self) -> Vec<f64> {
        let mut v = vec![0.0; N_FEATURES];
        self.stats.write_into(&mut v);
        self.group.write_into(&mut v);
        v
    }

    pub fn value(&self, feature: usize) -> f64 {
        match FeatureKind::of(feature) {
            FeatureKind::DistinctExternalIps => self.group.peers.len() as f64,
            FeatureKind::DistinctDstPorts => self.group.ports.len() as f64,
            _ => self.stats.value(feature),
        }
    }

    pub fn host(&self) -> IpAddr {
        self.host
    }

    pub fn port(&self) -> u16 {
        self.port
    }
}

/// Window aggregation for one network layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregator {
    pub internal_subnets: Vec<IpNet>,
    pub window_seconds: f64,
}

impl Aggregator {
    pub fn new(internal_subnets: Vec<IpNet>, window_seconds: f64) -> Self {
        Aggregator {
            internal_subnets,
            window_seconds,
        }
    }

    pub fn for_dataset(ds: &Dataset) -> Self {
        Aggregator::new(ds.internal_subnets.clone(), flowlog::WINDOW_SECONDS)
    }

    pub fn key_endpoint(&self, r: &ConnRecord) -> Option<IpAddr> {
        flowlog::key_endpoint(&self.internal_subnets, r)
    }

    fn check(&self) -> Result<()> {
        if self.internal_subnets.is_empty() {
            return Err(Error::Config(
                "internal_subnets must be set before aggregation".into(),
            ));
        }
        if !(self.window_seconds > 0.0) {
            return Err(Error::Config("window_seconds must be positive".into()));
        }
        Ok(())
    }

    /// One point per `(window, internal IP, resp_p)` with at least one
    /// connection, ordered by key.
    pub fn aggregate(&self, records: &[ConnRecord]) -> Result<Vec<FeaturePoint>> {
        self.check()?;
        let mut groups: BTreeMap<(i64, IpAddr), Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if let Some(host) = self.key_endpoint(r) {
                groups
                    .entry((r.window_index(self.window_seconds), host))
                    .or_default()
                    .push(i);
            }
        }
        let groups: Vec<_> = groups.into_iter().collect();
        let points: Vec<Vec<FeaturePoint>> = groups
            .into_par_iter()
            .map(|((window, host), idx)| group_points(records, window, host, idx.into()))
            .collect();
        Ok(points.into_iter().flatten().collect())
    }

    /// Features of `key` computed from `records` alone, as if they all fell in
    /// the key's window. Records whose key endpoint is not `key.internal_ip`
    /// are ignored. Indices in the result refer to `records`.
    pub fn recompute_point(&self, records: &[ConnRecord], key: AggregationKey) -> FeaturePoint {
        let idx: Vec<usize> = records
            .iter()
            .enumerate()
            .filter(|(_, r)| self.key_endpoint(r) == Some(key.internal_ip))
            .map(|(i, _)| i)
            .collect();
        let mut stats = PortStats::default();
        let mut group = GroupStats::default();
        let mut provenance = Vec::new();
        for &i in &idx {
            let r = &records[i];
            group.push(key.internal_ip, r);
            if r.resp_p == key.resp_p {
                stats.push(r);
                provenance.push(i);
            }
        }
        let mut values = vec![0.0; N_FEATURES];
        stats.write_into(&mut values);
        group.write_into(&mut values);
        FeaturePoint {
            key,
            values,
            label: if stats.nontarget {
                Label::NonTarget
            } else {
                Label::Target
            },
            provenance,
            group: idx.into(),
        }
    }
}

fn group_points(
    records: &[ConnRecord],
    window: i64,
    host: IpAddr,
    group: Arc<[usize]>,
) -> Vec<FeaturePoint> {
    let mut ports: BTreeMap<u16, (PortStats, Vec<usize>)> = BTreeMap::new();
    let mut gstats = GroupStats::default();
    for &i in group.iter() {
        let r = &records[i];
        gstats.push(host, r);
        let e = ports.entry(r.resp_p).or_default();
        e.0.push(r);
        e.1.push(i);
    }
    ports
        .into_iter()
        .map(|(port, (stats, provenance))| {
            let mut values = vec![0.0; N_FEATURES];
            stats.write_into(&mut values);
            gstats.write_into(&mut values);
            FeaturePoint {
                key: AggregationKey {
                    window_index: window,
                    internal_ip: host,
                    resp_p: port,
                },
                values,
                label: if stats.nontarget {
                    Label::NonTarget
                } else {
                    Label::Target
                },
                provenance,
                group: group.clone(),
            }
        })
        .collect()
}

/// Aggregates a labelled dataset into window points.
pub fn aggregate_windows(ds: &Dataset, window_seconds: f64) -> Result<Vec<FeaturePoint>> {
    Aggregator::new(ds.internal_subnets.clone(), window_seconds).aggregate(&ds.records)
}

/// Feature matrix and binary labels (1 = nontarget) of a set of points.
pub fn points_to_matrix<S: Scalar>(points: &[FeaturePoint]) -> (Array2<S>, Vec<u8>) {
    let mut x = Array2::<S>::zeros((points.len(), N_FEATURES));
    for (i, p) in points.iter().enumerate() {
        for (j, v) in p.values.iter().enumerate() {
            x[[i, j]] = S::of(*v);
        }
    }
    let y = points
        .iter()
        .map(|p| u8::from(p.label == Label::NonTarget))
        .collect();
    (x, y)
}
