//! Zeek connection-log records, labelling and dataset partitioning.

mod parse;
mod scenario;
mod split;

use std::fmt;
use std::net::IpAddr;
use std::str::FromStr;

use ipnet::IpNet;
use serde::{Deserialize, Serialize};

pub use parse::{parse_conn_log, parse_conn_log_str, write_conn_log, ParseReport, RowError};
pub use scenario::ScenarioConfig;
pub use split::{apply_labels, partition_dataset, LabelRule, Partition, Period, SplitSpec};

/// Default aggregation window, in seconds.
pub const WINDOW_SECONDS: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Proto {
    Tcp,
    Udp,
    Icmp,
}

impl Proto {
    pub const ALL: [Proto; 3] = [Proto::Tcp, Proto::Udp, Proto::Icmp];

    pub fn as_str(self) -> &'static str {
        match self {
            Proto::Tcp => "tcp",
            Proto::Udp => "udp",
            Proto::Icmp => "icmp",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for Proto {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tcp" => Ok(Proto::Tcp),
            "udp" => Ok(Proto::Udp),
            "icmp" => Ok(Proto::Icmp),
            other => Err(format!("unknown transport protocol `{other}`")),
        }
    }
}

impl fmt::Display for Proto {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The closed set of Zeek connection states.
#[allow(clippy::upper_case_acronyms)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConnState {
    S0,
    S1,
    SF,
    REJ,
    S2,
    S3,
    RSTO,
    RSTR,
    RSTOS0,
    RSTRH,
    SH,
    SHR,
    OTH,
}

impl ConnState {
    pub const ALL: [ConnState; 13] = [
        ConnState::S0,
        ConnState::S1,
        ConnState::SF,
        ConnState::REJ,
        ConnState::S2,
        ConnState::S3,
        ConnState::RSTO,
        ConnState::RSTR,
        ConnState::RSTOS0,
        ConnState::RSTRH,
        ConnState::SH,
        ConnState::SHR,
        ConnState::OTH,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConnState::S0 => "S0",
            ConnState::S1 => "S1",
            ConnState::SF => "SF",
            ConnState::REJ => "REJ",
            ConnState::S2 => "S2",
            ConnState::S3 => "S3",
            ConnState::RSTO => "RSTO",
            ConnState::RSTR => "RSTR",
            ConnState::RSTOS0 => "RSTOS0",
            ConnState::RSTRH => "RSTRH",
            ConnState::SH => "SH",
            ConnState::SHR => "SHR",
            ConnState::OTH => "OTH",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for ConnState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ConnState::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown conn_state `{s}`"))
    }
}

impl fmt::Display for ConnState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Ground-truth class of a record or point. `Target` is the class the attacker
/// wants predicted (benign); `NonTarget` is the victim class (malicious).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Target,
    NonTarget,
    Unlabeled,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Target => "target",
            Label::NonTarget => "nontarget",
            Label::Unlabeled => "unlabeled",
        }
    }

    /// Binary encoding used by the classifiers: 1 = nontarget.
    pub fn as_binary(self) -> Option<u8> {
        match self {
            Label::Target => Some(0),
            Label::NonTarget => Some(1),
            Label::Unlabeled => None,
        }
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "target" => Ok(Label::Target),
            "nontarget" => Ok(Label::NonTarget),
            "unlabeled" | "-" => Ok(Label::Unlabeled),
            other => Err(format!("unknown label `{other}`")),
        }
    }
}

/// One `conn.log` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnRecord {
    pub ts: f64,
    pub orig_ip: IpAddr,
    pub orig_p: u16,
    pub resp_ip: IpAddr,
    pub resp_p: u16,
    pub proto: Proto,
    pub service: Option<String>,
    pub duration: Option<f64>,
    pub orig_bytes: Option<u64>,
    pub resp_bytes: Option<u64>,
    pub conn_state: ConnState,
    pub orig_pkts: u64,
    pub resp_pkts: u64,
    pub label: Label,
}

impl ConnRecord {
    /// Window index of this record for a given window length.
    pub fn window_index(&self, window_seconds: f64) -> i64 {
        window_index(self.ts, window_seconds)
    }

    /// Service name, with the unset value mapped to `-`.
    pub fn service_str(&self) -> &str {
        self.service.as_deref().unwrap_or("-")
    }
}

pub fn window_index(ts: f64, window_seconds: f64) -> i64 {
    (ts / window_seconds).floor() as i64
}

/// A time-ordered collection of records plus the scenario's network layout.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<ConnRecord>,
    pub internal_subnets: Vec<IpNet>,
    pub scenario_name: String,
}

impl Dataset {
    /// Builds a dataset, stably sorting the records by timestamp.
    pub fn new(
        mut records: Vec<ConnRecord>,
        internal_subnets: Vec<IpNet>,
        scenario_name: impl Into<String>,
    ) -> Self {
        sort_by_ts(&mut records);
        Dataset {
            records,
            internal_subnets,
            scenario_name: scenario_name.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_internal(&self, ip: &IpAddr) -> bool {
        is_internal(&self.internal_subnets, ip)
    }

    /// The internal endpoint a record is keyed on: the originator when it is
    /// internal, otherwise the responder when that is internal.
    pub fn key_endpoint(&self, rec: &ConnRecord) -> Option<IpAddr> {
        key_endpoint(&self.internal_subnets, rec)
    }

    /// A dataset with the same layout holding a subset of records.
    pub fn with_records(&self, records: Vec<ConnRecord>) -> Dataset {
        Dataset::new(
            records,
            self.internal_subnets.clone(),
            self.scenario_name.clone(),
        )
    }
}

pub fn is_internal(subnets: &[IpNet], ip: &IpAddr) -> bool {
    subnets.iter().any(|n| n.contains(ip))
}

pub fn key_endpoint(subnets: &[IpNet], rec: &ConnRecord) -> Option<IpAddr> {
    if is_internal(subnets, &rec.orig_ip) {
        Some(rec.orig_ip)
    } else if is_internal(subnets, &rec.resp_ip) {
        Some(rec.resp_ip)
    } else {
        None
    }
}

/// Stable sort by timestamp. NaN never reaches here (the parser rejects it).
pub fn sort_by_ts(records: &mut [ConnRecord]) {
    records.sort_by(|a, b| a.ts.total_cmp(&b.ts));
}
