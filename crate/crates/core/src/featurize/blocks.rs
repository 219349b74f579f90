//! Fixed-size connection blocks for the auto-encoder representation.
//!
//! Each connection becomes [`CONN_WIDTH`] numbers:
//!
//! | offset | width | content                                                   |
//! |--------|-------|-----------------------------------------------------------|
//! | 0      | 6     | duration, orig_bytes, resp_bytes, orig_pkts, resp_pkts, resp_p; `log1p`, then min-max scaled to `[0, 1]` with constants fit on training data |
//! | 6      | 3     | one-hot proto                                             |
//! | 9      | 13    | one-hot conn_state                                        |
//! | 22     | 11    | one-hot service: top-10 training services, then "other"  |
//!
//! A block concatenates `block_len` consecutive connections of one internal
//! host, oldest first.

use std::collections::{BTreeMap, HashMap};
use std::net::IpAddr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowlog::{ConnRecord, ConnState, Dataset, Label, Proto};

pub const N_NUMERIC: usize = 6;
pub const N_SERVICES: usize = 10;
pub const CONN_WIDTH: usize = N_NUMERIC + 3 + 13 + N_SERVICES + 1;
pub const DEFAULT_BLOCK_LEN: usize = 100;

const PROTO_OFF: usize = N_NUMERIC;
const STATE_OFF: usize = PROTO_OFF + 3;
const SERVICE_OFF: usize = STATE_OFF + 13;

fn raw_numerics(r: &ConnRecord) -> [f64; N_NUMERIC] {
    [
        r.duration.unwrap_or(0.0),
        r.orig_bytes.unwrap_or(0) as f64,
        r.resp_bytes.unwrap_or(0) as f64,
        r.orig_pkts as f64,
        r.resp_pkts as f64,
        r.resp_p as f64,
    ]
    .map(f64::ln_1p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEncoder {
    pub lo: [f64; N_NUMERIC],
    pub hi: [f64; N_NUMERIC],
    /// Most frequent training services, most frequent first; `-` stands for
    /// an unset service.
    pub services: Vec<String>,
}

impl BlockEncoder {
    /// Fits scaling constants and the service vocabulary on training records.
    pub fn fit(train: &[ConnRecord]) -> Self {
        let mut lo = [f64::INFINITY; N_NUMERIC];
        let mut hi = [f64::NEG_INFINITY; N_NUMERIC];
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for r in train {
            for (j, v) in raw_numerics(r).into_iter().enumerate() {
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
            *counts.entry(r.service_str()).or_default() += 1;
        }
        if train.is_empty() {
            lo = [0.0; N_NUMERIC];
            hi = [0.0; N_NUMERIC];
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        BlockEncoder {
            lo,
            hi,
            services: ranked
                .into_iter()
                .take(N_SERVICES)
                .map(|(s, _)| s.to_string())
                .collect(),
        }
    }

    pub fn service_bucket(&self, r: &ConnRecord) -> usize {
        let s = r.service_str();
        self.services
            .iter()
            .position(|x| x == s)
            .unwrap_or(N_SERVICES)
    }

    pub fn encode_conn(&self, r: &ConnRecord, out: &mut [f64]) {
        debug_assert_eq!(out.len(), CONN_WIDTH);
        out.fill(0.0);
        for (j, v) in raw_numerics(r).into_iter().enumerate() {
            let range = self.hi[j] - self.lo[j];
            out[j] = if range > 0.0 {
                ((v - self.lo[j]) / range).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
        out[PROTO_OFF + r.proto.index()] = 1.0;
        out[STATE_OFF + r.conn_state.index()] = 1.0;
        out[SERVICE_OFF + self.service_bucket(r)] = 1.0;
    }

    pub fn encode(&self, records: &[ConnRecord]) -> Vec<f64> {
        let mut v = vec![0.0; records.len() * CONN_WIDTH];
        for (r, chunk) in records.iter().zip(v.chunks_mut(CONN_WIDTH)) {
            self.encode_conn(r, chunk);
        }
        v
    }

    /// Recovers `(proto, conn_state, service bucket)` per connection.
    pub fn decode_categoricals(&self, values: &[f64]) -> Vec<(Proto, ConnState, usize)> {
        let argmax = |s: &[f64]| {
            s.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        };
        values
            .chunks(CONN_WIDTH)
            .map(|c| {
                (
                    Proto::ALL[argmax(&c[PROTO_OFF..STATE_OFF])],
                    ConnState::ALL[argmax(&c[STATE_OFF..SERVICE_OFF])],
                    argmax(&c[SERVICE_OFF..CONN_WIDTH]),
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockPoint {
    pub host: IpAddr,
    pub values: Vec<f64>,
    pub label: Label,
    /// Indices of the block's records, oldest first.
    pub provenance: Vec<usize>,
}

/// Label of a run of records: nontarget iff any record is.
pub fn block_label(records: &[ConnRecord]) -> Label {
    if records.iter().any(|r| r.label == Label::NonTarget) {
        Label::NonTarget
    } else {
        Label::Target
    }
}

/// Cuts each internal host's time-ordered stream into consecutive,
/// non-overlapping blocks of `block_len` records; a trailing partial block is
/// dropped. Hosts are visited in address order.
pub fn blockize(ds: &Dataset, block_len: usize, encoder: &BlockEncoder) -> Result<Vec<BlockPoint>> {
    if block_len < 1 {
        return Err(Error::Config("block length must be at least 1".into()));
    }
    let mut streams: BTreeMap<IpAddr, Vec<usize>> = BTreeMap::new();
    for (i, r) in ds.records.iter().enumerate() {
        if let Some(host) = ds.key_endpoint(r) {
            streams.entry(host).or_default().push(i);
        }
    }
    let mut out = Vec::new();
    for (host, idx) in streams {
        for chunk in idx.chunks_exact(block_len) {
            let recs: Vec<ConnRecord> = chunk.iter().map(|&i| ds.records[i].clone()).collect();
            out.push(BlockPoint {
                host,
                values: encoder.encode(&recs),
                label: block_label(&recs),
                provenance: chunk.to_vec(),
            });
        }
    }
    Ok(out)
}
