//! Pairwise field associations: normalized mutual information and Pearson
//! correlation.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowlog::ConnRecord;

pub const NMI_BINS: usize = 20;

/// Fields examined, categorical first.
pub const FIELDS: [&str; 10] = [
    "proto",
    "resp_p",
    "service",
    "conn_state",
    "orig_p",
    "duration",
    "orig_bytes",
    "resp_bytes",
    "orig_pkts",
    "resp_pkts",
];
const N_CATEGORICAL: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyReport {
    pub fields: Vec<String>,
    pub nmi: Vec<Vec<f64>>,
    /// `None` for pairs involving a categorical or constant field.
    pub pearson: Vec<Vec<Option<f64>>>,
}

fn numeric(r: &ConnRecord, j: usize) -> f64 {
    match j {
        4 => r.orig_p as f64,
        5 => r.duration.unwrap_or(0.0),
        6 => r.orig_bytes.unwrap_or(0) as f64,
        7 => r.resp_bytes.unwrap_or(0) as f64,
        8 => r.orig_pkts as f64,
        9 => r.resp_pkts as f64,
        _ => unreachable!("field {j} is categorical"),
    }
}

fn categorical(records: &[ConnRecord], j: usize) -> Vec<u32> {
    let mut codes: HashMap<String, u32> = HashMap::new();
    records
        .iter()
        .map(|r| {
            let key = match j {
                0 => r.proto.as_str().to_string(),
                1 => r.resp_p.to_string(),
                2 => r.service_str().to_string(),
                3 => r.conn_state.as_str().to_string(),
                _ => unreachable!(),
            };
            let next = codes.len() as u32;
            *codes.entry(key).or_insert(next)
        })
        .collect()
}

/// Equal-frequency bins: cut points at the `i / bins` order statistics,
/// deduplicated, so tied values always share a bin.
pub fn equal_frequency_bins(values: &[f64], bins: usize) -> Vec<u32> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut cuts: Vec<f64> = (1..bins).map(|i| sorted[i * n / bins]).collect();
    cuts.dedup();
    values
        .iter()
        .map(|v| cuts.partition_point(|c| c <= v) as u32)
        .collect()
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `I(X; Y) / sqrt(H(X) H(Y))`, 0 when either side is constant.
pub fn normalized_mutual_information(x: &[u32], y: &[u32]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mut cx: HashMap<u32, usize> = HashMap::new();
    let mut cy: HashMap<u32, usize> = HashMap::new();
    let mut cxy: HashMap<(u32, u32), usize> = HashMap::new();
    for (&a, &b) in x.iter().zip(y) {
        *cx.entry(a).or_default() += 1;
        *cy.entry(b).or_default() += 1;
        *cxy.entry((a, b)).or_default() += 1;
    }
    let hx = entropy(cx.values().copied(), n);
    let hy = entropy(cy.values().copied(), n);
    if hx <= 0.0 || hy <= 0.0 {
        return 0.0;
    }
    let hxy = entropy(cxy.values().copied(), n);
    ((hx + hy - hxy) / (hx * hy).sqrt()).clamp(0.0, 1.0)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// NMI and correlation matrices over [`FIELDS`].
pub fn dependency_matrices(records: &[ConnRecord]) -> Result<DependencyReport> {
    if records.len() < 10 {
        return Err(Error::Config(format!(
            "dependency analysis needs at least 10 records, got {}",
            records.len()
        )));
    }
    let d = FIELDS.len();
    let raw: Vec<Option<Vec<f64>>> = (0..d)
        .map(|j| (j >= N_CATEGORICAL).then(|| records.iter().map(|r| numeric(r, j)).collect()))
        .collect();
    let codes: Vec<Vec<u32>> = (0..d)
        .map(|j| match &raw[j] {
            Some(v) => equal_frequency_bins(v, NMI_BINS),
            None => categorical(records, j),
        })
        .collect();
    let mut nmi = vec![vec![0.0; d]; d];
    let mut corr = vec![vec![None; d]; d];
    for a in 0..d {
        for b in a..d {
            let v = normalized_mutual_information(&codes[a], &codes[b]);
            nmi[a][b] = v;
            nmi[b][a] = v;
            if let (Some(x), Some(y)) = (&raw[a], &raw[b]) {
                let c = pearson(x, y);
                corr[a][b] = c;
                corr[b][a] = c;
            }
        }
    }
    Ok(DependencyReport {
        fields: FIELDS.iter().map(|s| s.to_string()).collect(),
        nmi,
        pearson: corr,
    })
}

impl DependencyReport {
    /// The `k` off-diagonal pairs with the highest NMI, `(i, j, nmi)` with
    /// `i < j`. Ties go to the lexicographically smaller pair.
    pub fn top_pairs(&self, k: usize) -> Vec<(usize, usize, f64)> {
        let d = self.fields.len();
        let mut pairs: Vec<(usize, usize, f64)> = (0..d)
            .flat_map(|i| ((i + 1)..d).map(move |j| (i, j)))
            .map(|(i, j)| (i, j, self.nmi[i][j]))
            .collect();
        pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
        pairs.truncate(k);
        pairs
    }
}
