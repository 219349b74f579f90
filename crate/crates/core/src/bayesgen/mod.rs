//! Trigger synthesis from a fixed-structure Bayesian network over
//! `conn.log` fields.
//!
//! Structure (parent -> child):
//!
//! ```text
//! proto -> resp_p -> service -> conn_state <- proto
//!          resp_p -> orig_p
//! orig_pkts -> resp_pkts,  orig_pkts -> orig_bytes,  resp_pkts -> resp_bytes
//! ```
//!
//! Categorical nodes carry conditional tables estimated from target-class
//! records with add-one smoothing over the values seen in each parent
//! context, so sampling never leaves the observed support. `orig_pkts` is a
//! KDE, `resp_pkts` a KDE per equal-frequency `orig_pkts` bucket, and byte
//! counts are sums of per-packet draws from bytes-per-packet KDEs. Duration
//! and the responder address are resampled from the empirical records.

pub mod deps;
pub mod kde;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::net::{IpAddr, Ipv4Addr};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::{FeatureKind, KeyAccumulator, NumericField};
use crate::flowlog::{ConnRecord, ConnState, Label, Proto};
use crate::trigger::{Normalizer, Trigger, TriggerProto, TriggerVariant};

pub use deps::{dependency_matrices, DependencyReport};
pub use kde::Kde;

pub const FORMAT: &str = "flowpoison-bayesnet";
pub const NODES: [&str; 9] = [
    "proto",
    "resp_p",
    "service",
    "conn_state",
    "orig_p",
    "orig_pkts",
    "resp_pkts",
    "orig_bytes",
    "resp_bytes",
];
pub const EDGES: [(&str, &str); 8] = [
    ("proto", "resp_p"),
    ("resp_p", "service"),
    ("proto", "conn_state"),
    ("service", "conn_state"),
    ("resp_p", "orig_p"),
    ("orig_pkts", "resp_pkts"),
    ("orig_pkts", "orig_bytes"),
    ("resp_pkts", "resp_bytes"),
];
/// Categorical nodes in sampling order.
pub const CATEGORICAL: [&str; 5] = ["proto", "resp_p", "service", "conn_state", "orig_p"];
pub const RESP_PKTS_BUCKETS: usize = 10;
/// Upper bound on connections added while chasing sum targets.
pub const MAX_GENERATED: usize = 10_000;

fn cat_value(r: &ConnRecord, node: &str) -> String {
    match node {
        "proto" => r.proto.as_str().to_string(),
        "resp_p" => r.resp_p.to_string(),
        "service" => r.service_str().to_string(),
        "conn_state" => r.conn_state.as_str().to_string(),
        "orig_p" => r.orig_p.to_string(),
        _ => unreachable!("{node} is not categorical"),
    }
}

fn parents_of(node: &str) -> Vec<&'static str> {
    EDGES.iter().filter(|(_, c)| *c == node).map(|(p, _)| *p).collect()
}

/// Checks the edge list is a DAG over `nodes` and returns a topological
/// order (Kahn's algorithm, ties in node-list order).
pub fn topological_order(nodes: &[String], edges: &[(String, String)]) -> Result<Vec<String>> {
    let idx = |n: &str| {
        nodes
            .iter()
            .position(|x| x == n)
            .ok_or_else(|| Error::Format(format!("edge mentions unknown node `{n}`")))
    };
    let mut indeg = vec![0usize; nodes.len()];
    let mut children = vec![Vec::new(); nodes.len()];
    for (p, c) in edges {
        let (p, c) = (idx(p)?, idx(c)?);
        indeg[c] += 1;
        children[p].push(c);
    }
    let mut done = vec![false; nodes.len()];
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(i) = (0..nodes.len()).find(|&i| !done[i] && indeg[i] == 0) {
        done[i] = true;
        order.push(nodes[i].clone());
        for &c in &children[i] {
            indeg[c] -= 1;
        }
    }
    if order.len() != nodes.len() {
        return Err(Error::Format("bayesian network structure has a cycle".into()));
    }
    Ok(order)
}

/// `(count + 1) / (total + support)` over the observed values only.
fn smoothed(counts: &BTreeMap<String, usize>) -> Vec<(String, f64)> {
    let total: usize = counts.values().sum::<usize>() + counts.len();
    counts
        .iter()
        .map(|(v, &c)| (v.clone(), (c + 1) as f64 / total as f64))
        .collect()
}

/// Conditional table of one categorical node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cpt {
    pub node: String,
    pub parents: Vec<String>,
    /// Parent values joined by `,` to `(value, probability)` rows.
    pub rows: BTreeMap<String, Vec<(String, f64)>>,
    pub marginal: Vec<(String, f64)>,
}

impl Cpt {
    fn fit(records: &[ConnRecord], node: &str) -> Cpt {
        let parents = parents_of(node);
        let mut ctx_counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
        let mut marginal: BTreeMap<String, usize> = BTreeMap::new();
        for r in records {
            let v = cat_value(r, node);
            let ctx = parents.iter().map(|p| cat_value(r, p)).collect::<Vec<_>>().join(",");
            *ctx_counts.entry(ctx).or_default().entry(v.clone()).or_default() += 1;
            *marginal.entry(v).or_default() += 1;
        }
        Cpt {
            node: node.to_string(),
            parents: parents.iter().map(|s| s.to_string()).collect(),
            rows: ctx_counts.iter().map(|(k, c)| (k.clone(), smoothed(c))).collect(),
            marginal: smoothed(&marginal),
        }
    }

    fn context(&self, assigned: &BTreeMap<String, String>) -> String {
        self.parents
            .iter()
            .map(|p| assigned.get(p).map(String::as_str).unwrap_or("?"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn draw<'a, R: Rng + ?Sized>(dist: &'a [(String, f64)], rng: &mut R) -> &'a str {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (v, p) in dist {
        acc += p;
        if u < acc {
            return v;
        }
    }
    &dist.last().expect("non-empty distribution").0
}

/// Field values held fixed while sampling, e.g. `proto=tcp,resp_p=80`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Fixed(pub BTreeMap<String, String>);

impl Fixed {
    pub fn parse(spec: &str) -> Result<Fixed> {
        let mut f = Fixed::default();
        for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected field=value, got `{part}`")))?;
            f.set(k.trim(), v.trim())?;
        }
        Ok(f)
    }

    pub fn set(&mut self, field: &str, value: impl Into<String>) -> Result<()> {
        let value = value.into();
        let ok = match field {
            "proto" => value.parse::<Proto>().is_ok(),
            "conn_state" => value.parse::<ConnState>().is_ok(),
            "resp_p" | "orig_p" => value.parse::<u16>().is_ok(),
            "service" => !value.is_empty(),
            "orig_pkts" | "resp_pkts" | "orig_bytes" | "resp_bytes" => value.parse::<u64>().is_ok(),
            _ => return Err(Error::Config(format!("`{field}` is not a network node"))),
        };
        if !ok {
            return Err(Error::Config(format!("bad value `{value}` for {field}")));
        }
        self.0.insert(field.to_string(), value);
        Ok(())
    }

    fn num(&self, field: &str) -> Option<u64> {
        self.0.get(field).map(|v| v.parse().expect("validated on insert"))
    }
}

/// A sampled connection and the nodes that had to fall back to their
/// unconditional distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub record: ConnRecord,
    pub fallbacks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesNet {
    pub format: String,
    pub version: u32,
    pub nodes: Vec<String>,
    pub edges: Vec<(String, String)>,
    pub n_records: usize,
    pub cpts: Vec<Cpt>,
    pub orig_pkts: Kde<f64>,
    /// Equal-frequency `orig_pkts` cut points; bucket `b` holds values with
    /// `b` cuts at or below them.
    pub resp_pkts_cuts: Vec<f64>,
    pub resp_pkts_given: Vec<Option<Kde<f64>>>,
    pub resp_pkts: Kde<f64>,
    pub orig_bytes_per_pkt: Option<Kde<f64>>,
    pub resp_bytes_per_pkt: Option<Kde<f64>>,
    pub durations: Vec<Option<f64>>,
    pub resp_ips: Vec<IpAddr>,
    /// What fitting had to back off on.
    pub fit_notes: Vec<String>,
}

fn bucket(cuts: &[f64], v: f64) -> usize {
    cuts.partition_point(|&c| c <= v)
}

fn bytes_per_packet(records: &[ConnRecord], bytes: fn(&ConnRecord) -> Option<u64>, pkts: fn(&ConnRecord) -> u64) -> Vec<f64> {
    records
        .iter()
        .filter_map(|r| match (bytes(r), pkts(r)) {
            (Some(b), p) if p > 0 => Some(b as f64 / p as f64),
            _ => None,
        })
        .collect()
}

/// Fits the network on target-class records; other labels are ignored.
pub fn fit_bayes_net(records: &[ConnRecord]) -> Result<BayesNet> {
    let recs: Vec<ConnRecord> = records.iter().filter(|r| r.label == Label::Target).cloned().collect();
    if recs.is_empty() {
        return Err(Error::Config("bayesian network needs target-class records".into()));
    }
    let mut notes = Vec::new();
    let cpts = CATEGORICAL.iter().map(|n| Cpt::fit(&recs, n)).collect();
    let opk: Vec<f64> = recs.iter().map(|r| r.orig_pkts as f64).collect();
    let rpk: Vec<f64> = recs.iter().map(|r| r.resp_pkts as f64).collect();

    let mut sorted = opk.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut cuts: Vec<f64> = (1..RESP_PKTS_BUCKETS).map(|i| sorted[i * n / RESP_PKTS_BUCKETS]).collect();
    cuts.dedup();
    let mut per_bucket: Vec<Vec<f64>> = vec![Vec::new(); cuts.len() + 1];
    for (o, r) in opk.iter().zip(&rpk) {
        per_bucket[bucket(&cuts, *o)].push(*r);
    }
    let resp_pkts_given = per_bucket
        .iter()
        .enumerate()
        .map(|(b, vals)| {
            if vals.is_empty() {
                notes.push(format!("resp_pkts: orig_pkts bucket {b} is empty; uses the unconditional KDE"));
                Ok(None)
            } else {
                Kde::fit(vals).map(Some)
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let obpp = bytes_per_packet(&recs, |r| r.orig_bytes, |r| r.orig_pkts);
    let rbpp = bytes_per_packet(&recs, |r| r.resp_bytes, |r| r.resp_pkts);
    let fit_opt = |v: &[f64], name: &str, notes: &mut Vec<String>| -> Result<Option<Kde<f64>>> {
        if v.is_empty() {
            notes.push(format!("{name}: no records with packets and bytes; byte counts sample as 0"));
            Ok(None)
        } else {
            Kde::fit(v).map(Some)
        }
    };
    let orig_bytes_per_pkt = fit_opt(&obpp, "orig_bytes", &mut notes)?;
    let resp_bytes_per_pkt = fit_opt(&rbpp, "resp_bytes", &mut notes)?;
    for note in &notes {
        log::info!("bayesian network fit: {note}");
    }
    Ok(BayesNet {
        format: FORMAT.into(),
        version: 1,
        nodes: NODES.iter().map(|s| s.to_string()).collect(),
        edges: EDGES.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
        n_records: recs.len(),
        cpts,
        orig_pkts: Kde::fit(&opk)?,
        resp_pkts_cuts: cuts,
        resp_pkts_given,
        resp_pkts: Kde::fit(&rpk)?,
        orig_bytes_per_pkt,
        resp_bytes_per_pkt,
        durations: recs.iter().map(|r| r.duration).collect(),
        resp_ips: recs.iter().map(|r| r.resp_ip).collect(),
        fit_notes: notes,
    })
}

fn sum_of_draws<R: Rng + ?Sized>(kde: Option<&Kde<f64>>, packets: u64, rng: &mut R) -> u64 {
    match kde {
        Some(k) => (0..packets).map(|_| k.sample_clipped(rng)).sum::<f64>().round() as u64,
        None => 0,
    }
}

impl BayesNet {
    fn cpt(&self, node: &str) -> &Cpt {
        self.cpts.iter().find(|c| c.node == node).expect("every categorical node has a table")
    }

    /// Samples one connection, fixed fields taken as given. `ts` is 0 and
    /// `orig_ip` unspecified; both are set at injection.
    pub fn sample_connection<R: Rng + ?Sized>(&self, fixed: &Fixed, rng: &mut R) -> Sampled {
        let mut assigned: BTreeMap<String, String> = BTreeMap::new();
        let mut fallbacks = Vec::new();
        for node in CATEGORICAL {
            if let Some(v) = fixed.0.get(node) {
                let cpt = self.cpt(node);
                if !cpt.marginal.iter().any(|(m, _)| m == v) {
                    fallbacks.push(node.to_string());
                }
                assigned.insert(node.to_string(), v.clone());
                continue;
            }
            let cpt = self.cpt(node);
            let ctx = cpt.context(&assigned);
            let dist = match cpt.rows.get(&ctx) {
                Some(row) => row.as_slice(),
                None => {
                    log::debug!("{node}: parent context `{ctx}` unseen; using the marginal");
                    fallbacks.push(node.to_string());
                    cpt.marginal.as_slice()
                }
            };
            assigned.insert(node.to_string(), draw(dist, rng).to_string());
        }
        let orig_pkts = fixed
            .num("orig_pkts")
            .unwrap_or_else(|| self.orig_pkts.sample_clipped(rng).round() as u64);
        let resp_pkts = fixed.num("resp_pkts").unwrap_or_else(|| {
            let b = bucket(&self.resp_pkts_cuts, orig_pkts as f64);
            let kde = match self.resp_pkts_given.get(b).and_then(Option::as_ref) {
                Some(k) => k,
                None => {
                    fallbacks.push("resp_pkts".into());
                    &self.resp_pkts
                }
            };
            kde.sample_clipped(rng).round() as u64
        });
        let orig_bytes = fixed
            .num("orig_bytes")
            .unwrap_or_else(|| sum_of_draws(self.orig_bytes_per_pkt.as_ref(), orig_pkts, rng));
        let resp_bytes = fixed
            .num("resp_bytes")
            .unwrap_or_else(|| sum_of_draws(self.resp_bytes_per_pkt.as_ref(), resp_pkts, rng));
        let e = rng.gen_range(0..self.durations.len());
        let service = assigned["service"].clone();
        Sampled {
            record: ConnRecord {
                ts: 0.0,
                orig_ip: IpAddr::V4(Ipv4Addr::UNSPECIFIED),
                orig_p: assigned["orig_p"].parse().expect("ports are stored as u16"),
                resp_ip: self.resp_ips[e],
                resp_p: assigned["resp_p"].parse().expect("ports are stored as u16"),
                proto: assigned["proto"].parse().expect("protos are stored by name"),
                service: (service != "-").then_some(service),
                duration: self.durations[rng.gen_range(0..self.durations.len())],
                orig_bytes: Some(orig_bytes),
                resp_bytes: Some(resp_bytes),
                conn_state: assigned["conn_state"].parse().expect("states are stored by name"),
                orig_pkts,
                resp_pkts,
                label: Label::Target,
            },
            fallbacks,
        }
    }

    pub fn sample_seeded(&self, fixed: &Fixed, n: usize, seed: u64) -> Vec<Sampled> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sample_connection(fixed, &mut rng)).collect()
    }

    /// Categorical nodes of `r` whose value was never seen under its parent
    /// context (or at all, when the context itself is unseen).
    pub fn support_violations(&self, r: &ConnRecord) -> Vec<String> {
        let mut assigned = BTreeMap::new();
        for node in CATEGORICAL {
            assigned.insert(node.to_string(), cat_value(r, node));
        }
        CATEGORICAL
            .iter()
            .filter(|node| {
                let cpt = self.cpt(node);
                let v = &assigned[**node];
                let dist = cpt.rows.get(&cpt.context(&assigned)).unwrap_or(&cpt.marginal);
                !dist.iter().any(|(x, _)| x == v)
            })
            .map(|s| s.to_string())
            .collect()
    }

    /// Checks structure and table invariants of a loaded network.
    pub fn validate(&self) -> Result<()> {
        if self.format != FORMAT || self.version != 1 {
            return Err(Error::Format(format!("not a {FORMAT} v1 file")));
        }
        topological_order(&self.nodes, &self.edges)?;
        for c in &self.cpts {
            for row in c.rows.values().chain(std::iter::once(&c.marginal)) {
                let s: f64 = row.iter().map(|(_, p)| p).sum();
                if row.is_empty() || (s - 1.0).abs() > 1e-9 {
                    return Err(Error::Format(format!("{}: table row sums to {s}", c.node)));
                }
            }
        }
        let kdes = [Some(&self.orig_pkts), Some(&self.resp_pkts), self.orig_bytes_per_pkt.as_ref(), self.resp_bytes_per_pkt.as_ref()];
        let all = kdes.into_iter().flatten().chain(self.resp_pkts_given.iter().flatten());
        for k in all {
            if !(k.bandwidth > 0.0) || k.points.is_empty() {
                return Err(Error::Format("KDE with empty support or non-positive bandwidth".into()));
            }
        }
        if CATEGORICAL.iter().any(|n| !self.cpts.iter().any(|c| c.node == *n)) || self.durations.is_empty() {
            return Err(Error::Format("bayesian network is missing a node".into()));
        }
        Ok(())
    }

    pub fn to_writer<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    pub fn from_reader<R: Read>(source: R) -> Result<BayesNet> {
        let bn: BayesNet = serde_json::from_reader(source)?;
        bn.validate()?;
        Ok(bn)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.to_writer(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<BayesNet> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(std::io::BufReader::new(f))
    }
}

/// Adds `extra` to a numeric field; extra packets get their own bytes.
fn bump<R: Rng + ?Sized>(bn: &BayesNet, r: &mut ConnRecord, f: NumericField, extra: f64, rng: &mut R) {
    let whole = extra.ceil().max(0.0) as u64;
    match f {
        NumericField::OrigPkts => {
            r.orig_pkts += whole;
            let b = sum_of_draws(bn.orig_bytes_per_pkt.as_ref(), whole, rng);
            r.orig_bytes = Some(r.orig_bytes.unwrap_or(0) + b);
        }
        NumericField::RespPkts => {
            r.resp_pkts += whole;
            let b = sum_of_draws(bn.resp_bytes_per_pkt.as_ref(), whole, rng);
            r.resp_bytes = Some(r.resp_bytes.unwrap_or(0) + b);
        }
        NumericField::OrigBytes => r.orig_bytes = Some(r.orig_bytes.unwrap_or(0) + whole),
        NumericField::RespBytes => r.resp_bytes = Some(r.resp_bytes.unwrap_or(0) + whole),
        NumericField::Duration => r.duration = Some(r.duration.unwrap_or(0.0) + extra.max(0.0)),
    }
}

/// Synthesizes the smallest set of connections whose selected count and sum
/// features reach the prototype's values on its key port.
///
/// Count features fix the number of connections carrying each protocol or
/// state exactly. Without count features, connections are added until every
/// sum target is met; with them, remaining sum deficits are spread over the
/// generated connections. Min, max and distinct-count features cannot be
/// steered by insertion alone and are left out of the check.
pub fn generate_trigger(bn: &BayesNet, proto: &TriggerProto, norm: &Normalizer, seed: u64) -> Result<Trigger> {
    let port = proto
        .key
        .ok_or_else(|| Error::Attack("generated triggers need a keyed prototype".into()))?
        .resp_p;
    let features = &norm.features;
    let mut proto_plan: Vec<Proto> = Vec::new();
    let mut state_plan: Vec<ConnState> = Vec::new();
    let mut counted_protos = BTreeSet::new();
    let mut counted_states = BTreeSet::new();
    let mut sums: Vec<(NumericField, f64)> = Vec::new();
    let mut excluded = Vec::new();
    for &f in features {
        let target = proto.values[f];
        match FeatureKind::of(f) {
            FeatureKind::ProtoCount(p) => {
                counted_protos.insert(p.index());
                proto_plan.extend(std::iter::repeat(p).take(target.round().max(0.0) as usize));
            }
            FeatureKind::StateCount(s) => {
                counted_states.insert(s.index());
                state_plan.extend(std::iter::repeat(s).take(target.round().max(0.0) as usize));
            }
            FeatureKind::Sum(field) => sums.push((field, target)),
            _ => excluded.push(f),
        }
    }
    sums.sort_by_key(|(f, _)| NumericField::ALL.iter().position(|x| x == f));
    if !excluded.is_empty() {
        log::warn!("features {excluded:?} cannot be reached by inserting connections; not checked");
    }
    let free_proto = Proto::ALL.into_iter().find(|p| !counted_protos.contains(&p.index()));
    let free_state = ConnState::ALL.into_iter().find(|s| !counted_states.contains(&s.index()));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fallbacks = 0usize;
    let mut records: Vec<ConnRecord> = Vec::new();
    let mut sample = |i: usize, rng: &mut ChaCha8Rng| -> Option<ConnRecord> {
        let mut fx = Fixed::default();
        fx.0.insert("resp_p".into(), port.to_string());
        match proto_plan.get(i) {
            Some(p) => {
                fx.0.insert("proto".into(), p.as_str().into());
            }
            None if !counted_protos.is_empty() => {
                fx.0.insert("proto".into(), free_proto?.as_str().into());
            }
            None => {}
        }
        match state_plan.get(i) {
            Some(s) => {
                fx.0.insert("conn_state".into(), s.as_str().into());
            }
            None if !counted_states.is_empty() => {
                fx.0.insert("conn_state".into(), free_state?.as_str().into());
            }
            None => {}
        }
        let s = bn.sample_connection(&fx, rng);
        fallbacks += usize::from(!s.fallbacks.is_empty());
        Some(s.record)
    };

    let n_base = proto_plan.len().max(state_plan.len());
    for i in 0..n_base {
        match sample(i, &mut rng) {
            Some(r) => records.push(r),
            None => {
                log::warn!("every protocol or state is counted; stopping at {i} connections");
                break;
            }
        }
    }
    let deficit = |records: &[ConnRecord], field: NumericField, target: f64| {
        let have: f64 = records.iter().filter_map(|r| field.value(r)).sum();
        target - have
    };
    let cardinality_fixed = !counted_protos.is_empty() || !counted_states.is_empty();
    if !cardinality_fixed {
        while records.len() < MAX_GENERATED
            && (records.is_empty() || sums.iter().any(|&(f, t)| deficit(&records, f, t) > 1e-9))
        {
            let r = sample(records.len(), &mut rng).expect("nothing is counted");
            records.push(r);
        }
    }
    if records.is_empty() {
        match sample(usize::MAX, &mut rng) {
            Some(r) => records.push(r),
            None => return Err(Error::Attack("generated trigger would be empty".into())),
        }
    }
    for &(field, target) in &sums {
        let d = deficit(&records, field, target);
        if d > 1e-9 {
            let n = records.len() as f64;
            for r in records.iter_mut() {
                bump(bn, r, field, d / n, &mut rng);
            }
        }
    }
    if fallbacks > 0 {
        log::warn!("{fallbacks} generated connections used unconditional distributions");
    }
    for (i, r) in records.iter_mut().enumerate() {
        r.ts = i as f64;
    }
    let host = IpAddr::V4(Ipv4Addr::UNSPECIFIED);
    let mut acc = KeyAccumulator::new(host, port);
    for r in &records {
        acc.push(r);
    }
    let achieved: Vec<f64> = features.iter().map(|&f| acc.value(f)).collect();
    Ok(Trigger {
        variant: TriggerVariant::Generated,
        distance: norm.distance(&achieved, &proto.selected(features)),
        records,
        host,
        port,
        features: features.clone(),
        achieved,
        source_indices: Vec::new(),
    })
}
