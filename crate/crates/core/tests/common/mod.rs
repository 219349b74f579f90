//! Random fixtures and independent reference implementations shared by the
//! integration tests and the acceptance report.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::net::{IpAddr, Ipv4Addr};
use std::sync::Arc;

use ipnet::IpNet;
use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flowpoison::bayesgen::{self, dependency_matrices, fit_bayes_net, generate_trigger, Fixed};
use flowpoison::explain::{importance_proxy_tree, select_top_k, shapley_exact_oracle, shapley_sampled_point};
use flowpoison::featurize::{aggregate_windows, points_to_matrix, AggregationKey, FeaturePoint, N_FEATURES};
use flowpoison::flowlog::{partition_dataset, ConnRecord, ConnState, Dataset, Label, Proto};
use flowpoison::models::nn::{loss_and_grad, Loss, Network};
use flowpoison::models::{AutoEncoder, AutoEncoderParams, Criterion, Mlp, MlpParams};
use flowpoison::stealth::{js_distance, js_fields};
use flowpoison::synth::{neris_like, SynthParams};
use flowpoison::trigger::{
    compute_assignment, find_prototype, inject_test_points, inject_training, InjectParams, Normalizer, Trigger, TriggerVariant,
};

pub const W: f64 = 30.0;

/// Outcome of one criterion.
#[derive(Debug, Clone)]
pub struct Check {
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Check {
            passed,
            detail: detail.into(),
        }
    }

    pub fn assert(&self) {
        assert!(self.passed, "{}", self.detail);
    }
}

// ---------------------------------------------------------------- fixtures

pub fn subnet() -> IpNet {
    "10.0.0.0/24".parse().unwrap()
}

fn internal_host(i: u8) -> IpAddr {
    IpAddr::V4(Ipv4Addr::new(10, 0, 0, i))
}

const EXTERNAL: [[u8; 4]; 5] = [[8, 8, 8, 8], [93, 184, 216, 34], [10, 0, 1, 7], [192, 168, 0, 9], [1, 1, 1, 1]];
const PORTS: [u16; 5] = [22, 53, 80, 443, 0];

pub fn random_record(rng: &mut ChaCha8Rng, windows: std::ops::Range<i64>) -> ConnRecord {
    let mut pool: Vec<IpAddr> = (1..=5).map(internal_host).collect();
    pool.extend(EXTERNAL.iter().map(|o| IpAddr::V4(Ipv4Addr::from(*o))));
    let orig_ip = *pool.choose(rng).unwrap();
    let resp_ip = *pool.choose(rng).unwrap();
    let proto = [Proto::Tcp, Proto::Udp, Proto::Icmp][rng.gen_range(0..3)];
    let resp_p = if proto == Proto::Icmp { 0 } else { *PORTS.choose(rng).unwrap() };
    let win = rng.gen_range(windows);
    // Boundary offsets show up often so floor behaviour gets exercised.
    let off = match rng.gen_range(0..5) {
        0 => 0.0,
        1 => W - 1e-6,
        2 => W / 2.0,
        _ => rng.gen_range(0.0..W),
    };
    let maybe = |rng: &mut ChaCha8Rng, v: u64| if rng.gen_bool(0.2) { None } else { Some(v) };
    let orig_bytes = rng.gen_range(0..100_000);
    let resp_bytes = rng.gen_range(0..1_000_000);
    ConnRecord {
        ts: win as f64 * W + off,
        orig_ip,
        orig_p: rng.gen_range(1..=65535),
        resp_ip,
        resp_p,
        proto,
        service: if rng.gen_bool(0.5) { Some("http".into()) } else { None },
        duration: if rng.gen_bool(0.2) { None } else { Some(rng.gen_range(0.0..120.0)) },
        orig_bytes: maybe(rng, orig_bytes),
        resp_bytes: maybe(rng, resp_bytes),
        conn_state: ConnState::ALL[rng.gen_range(0..ConnState::ALL.len())],
        orig_pkts: rng.gen_range(0..200),
        resp_pkts: rng.gen_range(0..200),
        label: if rng.gen_bool(0.25) { Label::NonTarget } else { Label::Target },
    }
}

/// Up to `max_len` random records over a handful of windows around zero.
pub fn random_dataset(seed: u64, max_len: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(0..=max_len);
    let records = (0..n).map(|_| random_record(&mut rng, -2..5)).collect();
    Dataset::new(records, vec![subnet()], "fuzz")
}

// ------------------------------------------------------ reference aggregator

#[derive(Debug, Clone, PartialEq)]
pub struct RefPoint {
    pub key: (i64, IpAddr, u16),
    pub values: Vec<f64>,
    pub label: Label,
    pub provenance: Vec<usize>,
}

fn ref_internal(ip: &IpAddr) -> bool {
    match ip {
        IpAddr::V4(v4) => {
            let o = v4.octets();
            o[0] == 10 && o[1] == 0 && o[2] == 0
        }
        IpAddr::V6(_) => false,
    }
}

fn ref_host(r: &ConnRecord) -> Option<IpAddr> {
    if ref_internal(&r.orig_ip) {
        Some(r.orig_ip)
    } else if ref_internal(&r.resp_ip) {
        Some(r.resp_ip)
    } else {
        None
    }
}

fn ref_proto_slot(p: Proto) -> usize {
    match p {
        Proto::Tcp => 0,
        Proto::Udp => 1,
        Proto::Icmp => 2,
    }
}

fn ref_state_slot(s: ConnState) -> usize {
    let names = [
        "S0", "S1", "SF", "REJ", "S2", "S3", "RSTO", "RSTR", "RSTOS0", "RSTRH", "SH", "SHR", "OTH",
    ];
    3 + names.iter().position(|n| *n == s.as_str()).unwrap()
}

fn ref_numeric(r: &ConnRecord) -> [Option<f64>; 5] {
    [
        Some(r.orig_pkts as f64),
        Some(r.resp_pkts as f64),
        r.orig_bytes.map(|v| v as f64),
        r.resp_bytes.map(|v| v as f64),
        r.duration,
    ]
}

/// Brute-force window aggregation for the 10.0.0.0/24 fixtures: one full
/// scan of the records per key.
pub fn reference_aggregate(records: &[ConnRecord], w: f64) -> Vec<RefPoint> {
    let win = |r: &ConnRecord| (r.ts / w).floor() as i64;
    let mut keys: Vec<(i64, IpAddr, u16)> = records
        .iter()
        .filter_map(|r| ref_host(r).map(|h| (win(r), h, r.resp_p)))
        .collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(wi, host, port)| {
            let mut v = vec![0.0; 33];
            let mut cols: [Vec<f64>; 5] = Default::default();
            let mut peers = HashSet::new();
            let mut ports = HashSet::new();
            let mut provenance = Vec::new();
            let mut label = Label::Target;
            for (i, r) in records.iter().enumerate() {
                if win(r) != wi || ref_host(r) != Some(host) {
                    continue;
                }
                peers.insert(if r.orig_ip == host { r.resp_ip } else { r.orig_ip });
                if r.proto != Proto::Icmp {
                    ports.insert(r.resp_p);
                }
                if r.resp_p != port {
                    continue;
                }
                provenance.push(i);
                v[ref_proto_slot(r.proto)] += 1.0;
                v[ref_state_slot(r.conn_state)] += 1.0;
                for (c, x) in cols.iter_mut().zip(ref_numeric(r)) {
                    if let Some(x) = x {
                        c.push(x);
                    }
                }
                if r.label == Label::NonTarget {
                    label = Label::NonTarget;
                }
            }
            for (j, c) in cols.iter().enumerate() {
                let base = 16 + 3 * j;
                v[base] = c.iter().fold(0.0, |a, b| a + b);
                if !c.is_empty() {
                    v[base + 1] = c.iter().copied().fold(f64::INFINITY, f64::min);
                    v[base + 2] = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                }
            }
            v[31] = peers.len() as f64;
            v[32] = ports.len() as f64;
            RefPoint {
                key: (wi, host, port),
                values: v,
                label,
                provenance,
            }
        })
        .collect()
}

/// First difference between the library aggregation and the reference, if any.
pub fn aggregation_mismatch(ds: &Dataset) -> Option<String> {
    let got = match aggregate_windows(ds, W) {
        Ok(p) => p,
        Err(e) => return Some(format!("aggregation failed: {e}")),
    };
    let want = reference_aggregate(&ds.records, W);
    if got.len() != want.len() {
        return Some(format!("{} points, reference has {}", got.len(), want.len()));
    }
    for (g, r) in got.iter().zip(&want) {
        let key = (g.key.window_index, g.key.internal_ip, g.key.resp_p);
        if key != r.key {
            return Some(format!("key {key:?} vs reference {:?}", r.key));
        }
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        if bits(&g.values) != bits(&r.values) {
            return Some(format!("values differ at {key:?}: {:?} vs {:?}", g.values, r.values));
        }
        if g.label != r.label || g.provenance != r.provenance {
            return Some(format!("label or provenance differ at {key:?}"));
        }
    }
    None
}

/// `, first: ...` for the first entry of a failure list, empty otherwise.
pub fn first_note<T: std::fmt::Display>(items: &[T]) -> String {
    items.first().map_or(String::new(), |f| format!(", first: {f}"))
}

pub fn check_aggregation(n: u64) -> Check {
    let mut bad = Vec::new();
    let mut points = 0;
    for seed in 0..n {
        let ds = random_dataset(seed, 80);
        points += reference_aggregate(&ds.records, W).len();
        if let Some(m) = aggregation_mismatch(&ds) {
            bad.push(format!("seed {seed}: {m}"));
        }
    }
    Check::new(
        bad.is_empty(),
        format!("{n} datasets, {points} points, {} mismatches{}", bad.len(), first_note(&bad)),
    )
}

// -------------------------------------------------- percentile / prototype

fn point(values: Vec<f64>, label: Label, i: usize) -> FeaturePoint {
    FeaturePoint {
        key: AggregationKey {
            window_index: i as i64,
            internal_ip: internal_host(1),
            resp_p: 80,
        },
        values,
        label,
        provenance: vec![i],
        group: Arc::from(vec![i]),
    }
}

/// Random labelled points; small integer grids make ties common.
pub fn random_points(rng: &mut ChaCha8Rng) -> Vec<FeaturePoint> {
    let n = rng.gen_range(1..40);
    let grid = rng.gen_bool(0.5);
    let mut pts: Vec<FeaturePoint> = (0..n)
        .map(|i| {
            let values = (0..N_FEATURES)
                .map(|_| if grid { rng.gen_range(0..4) as f64 } else { rng.gen_range(-5.0..50.0) })
                .collect();
            let label = if rng.gen_bool(0.6) { Label::NonTarget } else { Label::Target };
            point(values, label, i)
        })
        .collect();
    if !pts.iter().any(|p| p.label == Label::NonTarget) {
        pts[0].label = Label::NonTarget;
    }
    pts
}

/// Smallest rank `i` (from 1) with `i / n >= t / 100`, on the sorted column.
pub fn oracle_percentile(mut col: Vec<f64>, t: f64) -> f64 {
    col.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = col.len();
    for i in 1..=n {
        if i as f64 * 100.0 >= t * n as f64 {
            return col[i - 1];
        }
    }
    col[n - 1]
}

/// Linear scan over nontarget points with min-max scaling fit on the same
/// points; the first strictly smaller distance wins.
pub fn oracle_prototype(points: &[FeaturePoint], features: &[usize], target: &[f64]) -> (usize, f64) {
    let nt: Vec<usize> = (0..points.len()).filter(|&i| points[i].label == Label::NonTarget).collect();
    let scale = |k: usize, v: f64| {
        let f = features[k];
        let lo = nt.iter().map(|&i| points[i].values[f]).fold(f64::INFINITY, f64::min);
        let hi = nt.iter().map(|&i| points[i].values[f]).fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            (v - lo) / (hi - lo)
        } else {
            0.0
        }
    };
    let mut best = (usize::MAX, f64::INFINITY);
    for &i in &nt {
        let mut s = 0.0;
        for (k, &f) in features.iter().enumerate() {
            s += (scale(k, points[i].values[f]) - scale(k, target[k])).powi(2);
        }
        let d = s.sqrt();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

pub fn percentile_prototype_mismatch(seed: u64) -> Option<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = random_points(&mut rng);
    let k = rng.gen_range(1..=6);
    let mut features: Vec<usize> = (0..N_FEATURES).collect();
    features.shuffle(&mut rng);
    features.truncate(k);
    // Integer and half-integer percentiles.
    let t = rng.gen_range(1..=200) as f64 / 2.0;
    let a = compute_assignment(&points, &features, t).ok()?;
    for (j, &f) in features.iter().enumerate() {
        let col: Vec<f64> = points
            .iter()
            .filter(|p| p.label == Label::NonTarget)
            .map(|p| p.values[f])
            .collect();
        let want = oracle_percentile(col, t);
        if a.values[j].to_bits() != want.to_bits() {
            return Some(format!("seed {seed}: percentile t={t} feature {f}: {} vs {want}", a.values[j]));
        }
    }
    let norm = Normalizer::fit_nontarget(&points, &features);
    let proto = find_prototype(&points, &a, &norm).ok()?;
    let (idx, dist) = oracle_prototype(&points, &features, &a.values);
    if proto.index != idx || proto.distance.to_bits() != dist.to_bits() {
        return Some(format!(
            "seed {seed}: prototype {} at {} vs oracle {idx} at {dist}",
            proto.index, proto.distance
        ));
    }
    None
}

pub fn check_percentile_prototype(n: u64) -> Check {
    let bad: Vec<String> = (0..n).filter_map(percentile_prototype_mismatch).collect();
    Check::new(
        bad.is_empty(),
        format!("{n} instances, {} mismatches{}", bad.len(), first_note(&bad)),
    )
}

// ------------------------------------------------------------------ Shapley

/// A smooth random model with pairwise interactions and a hinge term.
pub struct RandomModel {
    w: Vec<f64>,
    pairs: Vec<(usize, usize, f64)>,
    hinge: (usize, usize, f64),
    bias: f64,
}

impl RandomModel {
    pub fn new(d: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let pairs = (0..3)
            .map(|_| (rng.gen_range(0..d), rng.gen_range(0..d), rng.gen_range(-1.0..1.0)))
            .collect();
        RandomModel {
            w,
            pairs,
            hinge: (rng.gen_range(0..d), rng.gen_range(0..d), rng.gen_range(0.5..2.0)),
            bias: rng.gen_range(-0.5..0.5),
        }
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        let mut s = self.bias;
        for (wj, zj) in self.w.iter().zip(z) {
            s += wj * zj;
        }
        for &(a, b, u) in &self.pairs {
            s += u * z[a] * z[b];
        }
        let (p, q, c) = self.hinge;
        s += c * (z[p] - z[q]).max(0.0);
        1.0 / (1.0 + (-s).exp())
    }

    pub fn batch(&self, x: ArrayView2<f64>) -> Vec<f64> {
        x.rows().into_iter().map(|r| self.eval(&r.to_vec())).collect()
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Exact interventional Shapley values from the subset formula
/// `phi_j = sum_S |S|!(d-|S|-1)!/d! [v(S+j) - v(S)]`, written with binomials.
pub fn oracle_shapley(model: &RandomModel, x: &[f64], bg: &Array2<f64>) -> Vec<f64> {
    let d = x.len();
    let value = |mask: usize| {
        let mut total = 0.0;
        for row in bg.rows() {
            let z: Vec<f64> = (0..d).map(|j| if mask & (1 << j) != 0 { x[j] } else { row[j] }).collect();
            total += model.eval(&z);
        }
        total / bg.nrows() as f64
    };
    let v: Vec<f64> = (0..1usize << d).map(value).collect();
    (0..d)
        .map(|j| {
            let mut phi = 0.0;
            for mask in 0..1usize << d {
                if mask & (1 << j) == 0 {
                    let s = mask.count_ones() as usize;
                    phi += (v[mask | 1 << j] - v[mask]) / (d as f64 * binomial(d - 1, s));
                }
            }
            phi
        })
        .collect()
}

pub struct ShapleyCase {
    pub d: usize,
    pub mae: f64,
    pub range: f64,
    pub efficiency: f64,
    pub library_exact_gap: f64,
}

pub fn shapley_case(seed: u64, d: usize, n_perm: usize) -> ShapleyCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = RandomModel::new(d, &mut rng);
    let bg = Array2::from_shape_fn((8, d), |_| rng.gen_range(-1.5..1.5));
    let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let f = |z: ArrayView2<f64>| model.batch(z);
    let exact = oracle_shapley(&model, &x, &bg);
    let xa = Array1::from(x.clone());
    let mut srng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let sampled = shapley_sampled_point(&f, xa.view(), bg.view(), n_perm, &mut srng);
    let lib_exact = shapley_exact_oracle(&f, xa.view(), bg.view()).unwrap();
    let range = exact.iter().copied().fold(f64::NEG_INFINITY, f64::max) - exact.iter().copied().fold(f64::INFINITY, f64::min);
    let mae = exact.iter().zip(&sampled).map(|(a, b)| (a - b).abs()).sum::<f64>() / d as f64;
    let fx = model.eval(&x);
    let ef = bg.rows().into_iter().map(|r| model.eval(&r.to_vec())).sum::<f64>() / bg.nrows() as f64;
    let efficiency = (sampled.iter().sum::<f64>() - (fx - ef)).abs();
    let library_exact_gap = exact.iter().zip(&lib_exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ShapleyCase {
        d,
        mae,
        range,
        efficiency,
        library_exact_gap,
    }
}

pub fn check_shapley(cases: u64, n_perm: usize) -> Check {
    let mut worst_ratio: f64 = 0.0;
    let mut worst_eff: f64 = 0.0;
    let mut bad = Vec::new();
    for seed in 0..cases {
        let d = 2 + (seed as usize % 9);
        let c = shapley_case(seed, d, n_perm);
        let tol = 0.05 * c.range.max(1e-12);
        worst_ratio = worst_ratio.max(c.mae / c.range.max(1e-12));
        worst_eff = worst_eff.max(c.efficiency / c.range.max(1e-12));
        if !(c.mae < tol && c.efficiency < tol && c.library_exact_gap < 1e-9) {
            bad.push(format!(
                "seed {seed} d={}: mae {:.3e} eff {:.3e} range {:.3e} exact gap {:.1e}",
                c.d, c.mae, c.efficiency, c.range, c.library_exact_gap
            ));
        }
    }
    Check::new(
        bad.is_empty(),
        format!(
            "{cases} models, d in 2..=10, {n_perm} permutations, worst MAE/range {worst_ratio:.4}, worst efficiency/range {worst_eff:.1e}, {} failures{}",
            bad.len(),
            first_note(&bad)
        ),
    )
}

// ---------------------------------------------------------------- injection

/// A trigger cut from a random dataset: a few records of one internal host.
pub fn random_trigger(ds: &Dataset, rng: &mut ChaCha8Rng) -> Option<Trigger> {
    let hosted: Vec<&ConnRecord> = ds.records.iter().filter(|r| ref_internal(&r.orig_ip)).collect();
    let first = *hosted.choose(rng)?;
    let host = first.orig_ip;
    let mut records: Vec<ConnRecord> = hosted.iter().filter(|r| r.orig_ip == host).map(|r| (*r).clone()).collect();
    records.truncate(rng.gen_range(1..=6));
    Some(Trigger {
        variant: TriggerVariant::Full,
        port: records[0].resp_p,
        host,
        features: vec![0, 1, 18, 31],
        achieved: Vec::new(),
        distance: 0.0,
        source_indices: Vec::new(),
        records,
    })
}

/// Checks one randomized training and test injection; returns violations.
pub fn injection_violations(seed: u64, rate: f64) -> Result<Vec<String>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ds = random_dataset(rng.gen(), 120);
    let Some(trigger) = random_trigger(&ds, &mut rng) else {
        return Err("no trigger".into());
    };
    let points = aggregate_windows(&ds, W).map_err(|e| e.to_string())?;
    let params = InjectParams::default();
    let inj_seed: u64 = rng.gen();
    let run = || inject_training(&ds, &points, &trigger, rate, inj_seed, &params);
    let out = match run() {
        Ok(o) => o,
        Err(e) => return Err(e.to_string()),
    };
    let mut v = Vec::new();

    // Insertion only: dropping the injected positions gives back the input.
    let injected: BTreeSet<usize> = out.manifest.iter().flat_map(|m| m.record_indices.iter().copied()).collect();
    let rest: Vec<&ConnRecord> = out
        .dataset
        .records
        .iter()
        .enumerate()
        .filter(|(i, _)| !injected.contains(i))
        .map(|(_, r)| r)
        .collect();
    if rest.len() != ds.len() || rest.iter().zip(&ds.records).any(|(a, b)| *a != b) {
        v.push("original records were altered or dropped".into());
    }
    if out.dataset.len() != ds.len() + out.manifest.len() * trigger.len() {
        v.push("unexpected number of injected records".into());
    }
    // Multiset view of the same property.
    let mut before: BTreeMap<String, i64> = BTreeMap::new();
    for r in &ds.records {
        *before.entry(format!("{r:?}")).or_default() += 1;
    }
    for r in &out.dataset.records {
        if let Some(c) = before.get_mut(&format!("{r:?}")) {
            *c -= 1;
        }
    }
    if before.values().any(|&c| c > 0) {
        v.push("output is not a multiset superset of the input".into());
    }

    // Clean label: injected records and poisoned points stay target-class.
    if injected.iter().any(|&i| out.dataset.records[i].label != Label::Target) {
        v.push("injected record with a non-target label".into());
    }
    let after = aggregate_windows(&out.dataset, W).map_err(|e| e.to_string())?;
    let by_key: BTreeMap<AggregationKey, &FeaturePoint> = after.iter().map(|p| (p.key, p)).collect();
    for m in &out.manifest {
        match by_key.get(&m.key) {
            Some(p) if p.label == Label::Target && m.label == Label::Target => {
                if p.values != m.values {
                    v.push(format!("manifest values disagree with re-aggregation at {:?}", m.key));
                }
            }
            _ => v.push(format!("poisoned point {:?} is missing or relabelled", m.key)),
        }
    }
    let nt_before = points.iter().filter(|p| p.label == Label::NonTarget).count();
    let nt_after = after.iter().filter(|p| p.label == Label::NonTarget).count();
    if nt_before != nt_after {
        v.push(format!("nontarget points changed from {nt_before} to {nt_after}"));
    }

    // Determinism under seed.
    let again = run().map_err(|e| e.to_string())?;
    if again.dataset != out.dataset || again.manifest != out.manifest {
        v.push("same seed gave a different injection".into());
    }

    // Test-time injection keeps the victim label.
    let preds = vec![1u8; points.len()];
    let tst = inject_test_points(&ds, &points, &preds, &trigger, 3, inj_seed, &params).map_err(|e| e.to_string())?;
    let tst_idx: Vec<usize> = tst.manifest.iter().flat_map(|m| m.record_indices.iter().copied()).collect();
    if tst_idx.iter().any(|&i| tst.dataset.records[i].label != Label::NonTarget) {
        v.push("test injection changed a victim label".into());
    }
    if tst.dataset.len() != ds.len() + tst_idx.len() {
        v.push("test injection dropped records".into());
    }
    Ok(v)
}

pub fn check_injection(runs: u64) -> Check {
    let mut applied = 0;
    let mut violations = Vec::new();
    for seed in 0..runs {
        let rate = [1.0, 5.0, 20.0, 50.0][seed as usize % 4];
        match injection_violations(seed, rate) {
            Ok(v) => {
                applied += 1;
                violations.extend(v.into_iter().map(|s| format!("seed {seed}: {s}")));
            }
            Err(_) => {}
        }
    }
    Check::new(
        violations.is_empty() && applied * 2 > runs,
        format!(
            "{applied} of {runs} randomized injections applied, {} violations{}",
            violations.len(),
            first_note(&violations)
        ),
    )
}

// ----------------------------------------------------------- bayesian net

fn cat(r: &ConnRecord, node: &str) -> String {
    match node {
        "proto" => r.proto.as_str().to_string(),
        "resp_p" => r.resp_p.to_string(),
        "service" => r.service.clone().unwrap_or_else(|| "-".into()),
        "conn_state" => r.conn_state.as_str().to_string(),
        "orig_p" => r.orig_p.to_string(),
        _ => unreachable!(),
    }
}

/// Observed `(parent values, value)` pairs for every categorical node.
pub fn observed_support(records: &[ConnRecord]) -> BTreeMap<&'static str, HashSet<(Vec<String>, String)>> {
    let mut out = BTreeMap::new();
    for node in bayesgen::CATEGORICAL {
        let parents: Vec<&str> = bayesgen::EDGES.iter().filter(|(_, c)| *c == node).map(|(p, _)| *p).collect();
        let set: HashSet<(Vec<String>, String)> = records
            .iter()
            .filter(|r| r.label == Label::Target)
            .map(|r| (parents.iter().map(|p| cat(r, p)).collect(), cat(r, node)))
            .collect();
        out.insert(node, set);
    }
    out
}

pub struct SynthSplit {
    pub train: Dataset,
    pub adversary: Dataset,
}

pub fn synth_split(seed: u64, duration: f64) -> SynthSplit {
    let params = SynthParams {
        duration_seconds: duration,
        ..SynthParams::default()
    };
    let s = neris_like(&params, seed).unwrap();
    let part = partition_dataset(&s.dataset, &s.config.split_spec(), seed).unwrap();
    SynthSplit {
        train: part.train,
        adversary: part.adversary,
    }
}

pub fn check_bn_support(n_samples: usize) -> Check {
    let split = synth_split(11, 3600.0);
    let recs = &split.adversary.records;
    let bn = match fit_bayes_net(recs) {
        Ok(bn) => bn,
        Err(e) => return Check::new(false, format!("fit failed: {e}")),
    };
    let support = observed_support(recs);
    let fixed_sets = [Fixed::default(), Fixed::parse("resp_p=443").unwrap(), Fixed::parse("proto=udp").unwrap()];
    let mut violations = 0;
    let mut fallbacks = 0;
    let mut first = None;
    for (k, fixed) in fixed_sets.iter().enumerate() {
        for s in bn.sample_seeded(fixed, n_samples, 100 + k as u64) {
            if !s.fallbacks.is_empty() {
                fallbacks += 1;
            }
            for node in bayesgen::CATEGORICAL {
                // Fixed fields are given, not drawn.
                if fixed.0.contains_key(node) || s.fallbacks.iter().any(|f| f == node) {
                    continue;
                }
                let parents: Vec<String> = bayesgen::EDGES
                    .iter()
                    .filter(|(_, c)| *c == node)
                    .map(|(p, _)| cat(&s.record, p))
                    .collect();
                if !support[node].contains(&(parents, cat(&s.record, node))) {
                    violations += 1;
                    first.get_or_insert_with(|| format!("{node} = {}", cat(&s.record, node)));
                }
            }
        }
    }
    Check::new(
        violations == 0,
        format!(
            "{} samples over {} fixings, {violations} support violations{}, {fallbacks} samples with logged fallbacks",
            n_samples * fixed_sets.len(),
            fixed_sets.len(),
            first_note(&first.into_iter().collect::<Vec<_>>())
        ),
    )
}

/// Top-5 NMI pairs of the clean training records against the same records
/// poisoned at 1% with a generated trigger.
pub fn check_nmi_preserved() -> Check {
    let split = synth_split(12, 3600.0);
    let adv_pts = aggregate_windows(&split.adversary, W).unwrap();
    let (x, y) = points_to_matrix::<f64>(&adv_pts);
    let scores = importance_proxy_tree(x.view(), &y, Criterion::Entropy).unwrap();
    let features = select_top_k(&scores.scores, 8);
    let a = compute_assignment(&adv_pts, &features, 95.0).unwrap();
    let norm = Normalizer::fit_nontarget(&adv_pts, &features);
    let proto = find_prototype(&adv_pts, &a, &norm).unwrap();
    let bn = fit_bayes_net(&split.adversary.records).unwrap();
    let trigger = match generate_trigger(&bn, &proto, &norm, 5) {
        Ok(t) => t,
        Err(e) => return Check::new(false, format!("generation failed: {e}")),
    };
    let train_pts = aggregate_windows(&split.train, W).unwrap();
    let poisoned = inject_training(&split.train, &train_pts, &trigger, 1.0, 6, &InjectParams::default()).unwrap();
    let top = |recs: &[ConnRecord]| -> BTreeSet<(usize, usize)> {
        dependency_matrices(recs)
            .unwrap()
            .top_pairs(5)
            .into_iter()
            .map(|(i, j, _)| (i, j))
            .collect()
    };
    let clean = top(&split.train.records);
    let dirty = top(&poisoned.dataset.records);
    Check::new(
        clean == dirty,
        format!(
            "trigger of {} records on port {}, {} poisoned points; clean {clean:?}, poisoned {dirty:?}",
            trigger.len(),
            trigger.port,
            poisoned.manifest.len()
        ),
    )
}

// ------------------------------------------------------------ gradients

/// Worst relative error between analytic and central-difference gradients
/// over every parameter. Parameters are jittered first: fresh nets have zero
/// biases, which puts dead ReLU units exactly on the kink.
pub fn gradient_error(net: &mut Network<f64>, x: &Array2<f64>, t: &Array2<f64>, loss: Loss, weights: Option<&[f64]>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(x.len() as u64);
    let jittered: Vec<f64> = net.flat_params().iter().map(|p| p + rng.gen_range(-0.2..0.2)).collect();
    net.set_flat_params(&jittered);
    let (_, g) = loss_and_grad(net, x.view(), t.view(), loss, weights);
    let analytic = g.flat();
    let base = net.flat_params();
    let mut worst: f64 = 0.0;
    for k in 0..base.len() {
        // A ReLU kink inside [p - h, p + h] spoils one step size but rarely both.
        let err = [1e-5, 1e-7]
            .iter()
            .map(|&h| {
                let mut p = base.clone();
                p[k] = base[k] + h;
                net.set_flat_params(&p);
                let (up, _) = loss_and_grad(net, x.view(), t.view(), loss, weights);
                p[k] = base[k] - h;
                net.set_flat_params(&p);
                let (down, _) = loss_and_grad(net, x.view(), t.view(), loss, weights);
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[k];
                (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6)
            })
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(err);
    }
    net.set_flat_params(&base);
    worst
}

pub fn ffnn_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.gen_range(2..7);
    let params = MlpParams {
        hidden: (0..rng.gen_range(1..3)).map(|_| rng.gen_range(2..7)).collect(),
        ..MlpParams::default()
    };
    let mut mlp = Mlp::<f64>::untrained(d, &params, seed);
    let n = rng.gen_range(3..12);
    let x = Array2::from_shape_fn((n, d), |_| rng.gen_range(-2.0..2.0));
    let t = Array2::from_shape_fn((n, 1), |_| f64::from(rng.gen_bool(0.5) as u8));
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..3.0)).collect();
    gradient_error(&mut mlp.net, &x, &t, Loss::BceWithLogits, Some(&w))
}

pub fn ae_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.gen_range(3..9);
    let params = AutoEncoderParams {
        hidden: rng.gen_range(3..8),
        bottleneck: rng.gen_range(1..4),
        ..AutoEncoderParams::default()
    };
    let mut ae = AutoEncoder::<f64>::untrained(d, &params, seed);
    let n = rng.gen_range(3..10);
    let x = Array2::from_shape_fn((n, d), |_| rng.gen_range(0.0..1.0));
    gradient_error(&mut ae.net, &x, &x.clone(), Loss::Mse, None)
}

pub fn check_gradients(nets: u64) -> Check {
    let ffnn = (0..nets).map(ffnn_gradient_error).fold(0.0, f64::max);
    let ae = (0..nets).map(ae_gradient_error).fold(0.0, f64::max);
    Check::new(
        ffnn < 1e-4 && ae < 1e-4,
        format!("{nets} random nets each, worst relative error FFNN {ffnn:.2e}, auto-encoder {ae:.2e}"),
    )
}

// ------------------------------------------------------------------- JS

/// Base-2 JS distance written from the definition, natural logs.
pub fn oracle_js(p: &[f64], q: &[f64]) -> f64 {
    let sp: f64 = p.iter().sum();
    let sq: f64 = q.iter().sum();
    let kl = |a: &[f64], sa: f64, m: &[f64]| -> f64 {
        a.iter()
            .zip(m)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, mm)| (x / sa) * ((x / sa) / mm).ln())
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a / sp + b / sq)).collect();
    let jsd = 0.5 * kl(p, sp, &m) + 0.5 * kl(q, sq, &m);
    (jsd / std::f64::consts::LN_2).max(0.0).sqrt()
}

pub fn js_violations(seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..30);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut v: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.0..100.0) }).collect();
        v[rng.gen_range(0..n)] += 1.0;
        v
    };
    let p = draw(&mut rng);
    let q = draw(&mut rng);
    let mut v = Vec::new();
    if js_distance(&p, &q) != js_distance(&q, &p) {
        v.push("asymmetric".to_string());
    }
    if js_distance(&p, &p) != 0.0 {
        v.push(format!("identity gives {}", js_distance(&p, &p)));
    }
    if (js_distance(&p, &q) - oracle_js(&p, &q)).abs() > 1e-9 {
        v.push(format!("value {} vs oracle {}", js_distance(&p, &q), oracle_js(&p, &q)));
    }
    // Disjoint support: p on even bins, q on odd bins.
    let mut pe = vec![0.0; 2 * n];
    let mut qo = vec![0.0; 2 * n];
    for i in 0..n {
        pe[2 * i] = p[i];
        qo[2 * i + 1] = q[i];
    }
    if (js_distance(&pe, &qo) - 1.0).abs() > 1e-12 {
        v.push(format!("disjoint support gives {}", js_distance(&pe, &qo)));
    }

    // The same properties on connection records.
    let ds = random_dataset(seed, 40);
    if ds.len() >= 2 {
        let a = &ds.records;
        let mut b: Vec<ConnRecord> = a.iter().take(a.len() / 2 + 1).cloned().collect();
        let fa = js_fields(a, &b).unwrap();
        b.reverse();
        let fb = js_fields(a, &b).unwrap();
        if fa != fb {
            v.push("record order changed a distance".into());
        }
        if js_fields(a, a).unwrap().iter().any(|(_, d)| *d != 0.0) {
            v.push("identical record sets have nonzero distance".into());
        }
        // Categorical fields are binned on shared keys, so swapping sides is exact.
        let ab = js_fields(a, &b).unwrap();
        let ba = js_fields(&b, a).unwrap();
        for ((f, x), (_, y)) in ab.iter().zip(&ba) {
            if ["proto", "service", "conn_state", "resp_p"].contains(&f.as_str()) && x != y {
                v.push(format!("{f}: asymmetric on records"));
            }
        }
        let tcp: Vec<ConnRecord> = a.iter().cloned().map(|mut r| {
            r.proto = Proto::Tcp;
            r
        }).collect();
        let udp: Vec<ConnRecord> = a.iter().cloned().map(|mut r| {
            r.proto = Proto::Udp;
            r
        }).collect();
        let d = js_fields(&tcp, &udp).unwrap();
        if (d[0].1 - 1.0).abs() > 1e-12 {
            v.push(format!("disjoint protocols give {}", d[0].1));
        }
    }
    v
}

pub fn check_js(n: u64) -> Check {
    let bad: Vec<String> = (0..n)
        .flat_map(|s| js_violations(s).into_iter().map(move |m| format!("seed {s}: {m}")))
        .collect();
    Check::new(
        bad.is_empty(),
        format!("{n} randomized fixtures, {} violations{}", bad.len(), first_note(&bad)),
    )
}
