//! Zeek TSV reader and writer.
//!
//! The reader understands the standard Zeek ASCII header (`#separator`,
//! `#set_separator`, `#empty_field`, `#unset_field`, `#fields`, `#types`) and
//! two extra headers written by [`write_conn_log`]: `#scenario` and
//! `#internal_subnets`. Columns not listed below are ignored.
//!
//! | column                      | record field  | required |
//! |-----------------------------|---------------|----------|
//! | `ts`                        | `ts`          | yes      |
//! | `id.orig_h` / `orig_ip`     | `orig_ip`     | yes      |
//! | `id.orig_p` / `orig_p`      | `orig_p`      | yes      |
//! | `id.resp_h` / `resp_ip`     | `resp_ip`     | yes      |
//! | `id.resp_p` / `resp_p`      | `resp_p`      | yes      |
//! | `proto`                     | `proto`       | yes      |
//! | `conn_state`                | `conn_state`  | yes      |
//! | `orig_pkts`                 | `orig_pkts`   | yes      |
//! | `resp_pkts`                 | `resp_pkts`   | yes      |
//! | `service`                   | `service`     | no       |
//! | `duration`                  | `duration`    | no       |
//! | `orig_bytes`                | `orig_bytes`  | no       |
//! | `resp_bytes`                | `resp_bytes`  | no       |
//! | `label`                     | `label`       | no       |
//!
//! Data rows are parsed in parallel; row order is preserved before the final
//! stable sort on `ts`.

use std::io::{BufRead, Write};
use std::net::IpAddr;

use ipnet::IpNet;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ConnRecord, ConnState, Dataset, Label, Proto};
use crate::error::{Error, Result};

/// Outcome of a parse: how many rows were seen and which were dropped.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParseReport {
    pub data_rows: usize,
    pub parsed: usize,
    pub errors: Vec<RowError>,
}

impl ParseReport {
    pub fn error_count(&self) -> usize {
        self.errors.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowError {
    /// 1-based line number in the source.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
struct Schema {
    separator: String,
    empty_field: String,
    unset_field: String,
    ts: usize,
    orig_ip: usize,
    orig_p: usize,
    resp_ip: usize,
    resp_p: usize,
    proto: usize,
    conn_state: usize,
    orig_pkts: usize,
    resp_pkts: usize,
    service: Option<usize>,
    duration: Option<usize>,
    orig_bytes: Option<usize>,
    resp_bytes: Option<usize>,
    label: Option<usize>,
    width: usize,
}

impl Schema {
    fn from_fields(fields: &[&str], sep: &HeaderState) -> Result<Schema> {
        let find = |names: &[&str]| fields.iter().position(|f| names.contains(f));
        let need = |names: &[&str]| {
            find(names).ok_or_else(|| {
                Error::Format(format!("`#fields` header lacks required column `{}`", names[0]))
            })
        };
        Ok(Schema {
            separator: sep.separator.clone(),
            empty_field: sep.empty_field.clone(),
            unset_field: sep.unset_field.clone(),
            ts: need(&["ts"])?,
            orig_ip: need(&["id.orig_h", "orig_ip", "orig_h"])?,
            orig_p: need(&["id.orig_p", "orig_p"])?,
            resp_ip: need(&["id.resp_h", "resp_ip", "resp_h"])?,
            resp_p: need(&["id.resp_p", "resp_p"])?,
            proto: need(&["proto"])?,
            conn_state: need(&["conn_state"])?,
            orig_pkts: need(&["orig_pkts"])?,
            resp_pkts: need(&["resp_pkts"])?,
            service: find(&["service"]),
            duration: find(&["duration"]),
            orig_bytes: find(&["orig_bytes"]),
            resp_bytes: find(&["resp_bytes"]),
            label: find(&["label"]),
            width: fields.len(),
        })
    }

    fn is_unset(&self, v: &str) -> bool {
        v == self.unset_field || v == self.empty_field || v.is_empty()
    }

    fn parse_row(&self, line: &str) -> std::result::Result<ConnRecord, String> {
        let cols: Vec<&str> = line.split(self.separator.as_str()).collect();
        if cols.len() != self.width {
            return Err(format!(
                "expected {} columns, found {}",
                self.width,
                cols.len()
            ));
        }
        let num = |idx: usize, name: &str| -> std::result::Result<u64, String> {
            cols[idx]
                .parse::<u64>()
                .map_err(|_| format!("non-numeric value `{}` in `{name}`", cols[idx]))
        };
        let opt_num = |idx: Option<usize>, name: &str| -> std::result::Result<Option<u64>, String> {
            match idx {
                Some(i) if !self.is_unset(cols[i]) => num(i, name).map(Some),
                _ => Ok(None),
            }
        };
        let float = |idx: usize, name: &str| -> std::result::Result<f64, String> {
            let v = cols[idx]
                .parse::<f64>()
                .map_err(|_| format!("non-numeric value `{}` in `{name}`", cols[idx]))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(format!("non-finite value `{}` in `{name}`", cols[idx]))
            }
        };
        let port = |idx: usize, name: &str| -> std::result::Result<u16, String> {
            cols[idx]
                .parse::<u16>()
                .map_err(|_| format!("invalid port `{}` in `{name}`", cols[idx]))
        };
        let ip = |idx: usize, name: &str| -> std::result::Result<IpAddr, String> {
            cols[idx]
                .parse::<IpAddr>()
                .map_err(|_| format!("invalid address `{}` in `{name}`", cols[idx]))
        };

        let proto: Proto = cols[self.proto].parse()?;
        let duration = match self.duration {
            Some(i) if !self.is_unset(cols[i]) => {
                let d = float(i, "duration")?;
                if d < 0.0 {
                    return Err(format!("negative duration `{}`", cols[i]));
                }
                Some(d)
            }
            _ => None,
        };
        let label = match self.label {
            Some(i) if !self.is_unset(cols[i]) => cols[i].parse()?,
            _ => Label::Unlabeled,
        };
        let resp_p = port(self.resp_p, "resp_p")?;
        Ok(ConnRecord {
            ts: float(self.ts, "ts")?,
            orig_ip: ip(self.orig_ip, "orig_ip")?,
            orig_p: port(self.orig_p, "orig_p")?,
            resp_ip: ip(self.resp_ip, "resp_ip")?,
            // ICMP carries type/code in the port columns; they are not ports.
            resp_p: if proto == Proto::Icmp { 0 } else { resp_p },
            proto,
            service: self
                .service
                .filter(|&i| !self.is_unset(cols[i]))
                .map(|i| cols[i].to_string()),
            duration,
            orig_bytes: opt_num(self.orig_bytes, "orig_bytes")?,
            resp_bytes: opt_num(self.resp_bytes, "resp_bytes")?,
            conn_state: cols[self.conn_state].parse::<ConnState>()?,
            orig_pkts: num(self.orig_pkts, "orig_pkts")?,
            resp_pkts: num(self.resp_pkts, "resp_pkts")?,
            label,
        })
    }
}

#[derive(Debug, Clone)]
struct HeaderState {
    separator: String,
    empty_field: String,
    unset_field: String,
}

impl Default for HeaderState {
    fn default() -> Self {
        HeaderState {
            separator: "\t".into(),
            empty_field: "(empty)".into(),
            unset_field: "-".into(),
        }
    }
}

/// Decodes `\x09`-style escapes used in the `#separator` header.
fn unescape(s: &str) -> String {
    let mut out = String::new();
    let mut rest = s;
    while let Some(pos) = rest.find("\\x") {
        out.push_str(&rest[..pos]);
        let hex = rest.get(pos + 2..pos + 4);
        match hex.and_then(|h| u8::from_str_radix(h, 16).ok()) {
            Some(b) => {
                out.push(b as char);
                rest = &rest[pos + 4..];
            }
            None => {
                out.push_str("\\x");
                rest = &rest[pos + 2..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// Parses a Zeek `conn.log` stream into a [`Dataset`].
///
/// Malformed data rows are skipped and reported; a stream without a
/// `#fields` header is a format error.
pub fn parse_conn_log<R: BufRead>(mut source: R) -> Result<(Dataset, ParseReport)> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    parse_conn_log_str(&text)
}

pub fn parse_conn_log_str(text: &str) -> Result<(Dataset, ParseReport)> {
    let mut header = HeaderState::default();
    let mut schemas: Vec<Schema> = Vec::new();
    let mut scenario = String::new();
    let mut subnets: Vec<IpNet> = Vec::new();
    // (line number, schema index, line)
    let mut rows: Vec<(usize, usize, &str)> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.is_empty() {
            continue;
        }
        if let Some(h) = line.strip_prefix('#') {
            if let Some(rest) = h.strip_prefix("separator") {
                header.separator = unescape(rest.trim_start_matches([' ', '\t']));
                continue;
            }
            let (key, value) = match h.split_once(header.separator.as_str()) {
                Some(kv) => kv,
                None => (h, ""),
            };
            match key {
                "empty_field" => header.empty_field = value.to_string(),
                "unset_field" => header.unset_field = value.to_string(),
                "scenario" => scenario = value.to_string(),
                "internal_subnets" => {
                    subnets = value
                        .split(',')
                        .filter(|s| !s.is_empty() && *s != "-")
                        .map(|s| {
                            s.parse::<IpNet>().map_err(|_| {
                                Error::Format(format!("invalid subnet `{s}` on line {}", i + 1))
                            })
                        })
                        .collect::<Result<_>>()?;
                }
                "fields" => {
                    let fields: Vec<&str> = value.split(header.separator.as_str()).collect();
                    schemas.push(Schema::from_fields(&fields, &header)?);
                }
                _ => {}
            }
            continue;
        }
        if schemas.is_empty() {
            return Err(Error::Format(format!(
                "data on line {} precedes any `#fields` header",
                i + 1
            )));
        }
        rows.push((i + 1, schemas.len() - 1, line));
    }
    if schemas.is_empty() {
        return Err(Error::Format("missing `#fields` header".into()));
    }

    let parsed: Vec<std::result::Result<ConnRecord, RowError>> = rows
        .par_iter()
        .map(|&(line, schema, text)| {
            schemas[schema]
                .parse_row(text)
                .map_err(|message| RowError { line, message })
        })
        .collect();

    let mut report = ParseReport {
        data_rows: rows.len(),
        ..Default::default()
    };
    let mut records = Vec::with_capacity(parsed.len());
    for r in parsed {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => {
                log::debug!("skipping line {}: {}", e.line, e.message);
                report.errors.push(e);
            }
        }
    }
    report.parsed = records.len();
    Ok((Dataset::new(records, subnets, scenario), report))
}

const FIELDS: [&str; 14] = [
    "ts",
    "id.orig_h",
    "id.orig_p",
    "id.resp_h",
    "id.resp_p",
    "proto",
    "service",
    "duration",
    "orig_bytes",
    "resp_bytes",
    "conn_state",
    "orig_pkts",
    "resp_pkts",
    "label",
];

const TYPES: [&str; 14] = [
    "time", "addr", "port", "addr", "port", "enum", "string", "interval", "count", "count",
    "string", "count", "count", "string",
];

/// Writes a dataset as Zeek TSV, which [`parse_conn_log`] reads back into
/// field-equal records. This is also the canonical record dump format
/// (`#format flowpoison-records`, `#version 1`).
pub fn write_conn_log<W: Write>(ds: &Dataset, mut out: W) -> Result<()> {
    writeln!(out, "#separator \\x09")?;
    writeln!(out, "#set_separator\t,")?;
    writeln!(out, "#empty_field\t(empty)")?;
    writeln!(out, "#unset_field\t-")?;
    writeln!(out, "#path\tconn")?;
    writeln!(out, "#format\tflowpoison-records")?;
    writeln!(out, "#version\t1")?;
    let scenario = if ds.scenario_name.is_empty() {
        "-"
    } else {
        ds.scenario_name.as_str()
    };
    writeln!(out, "#scenario\t{scenario}")?;
    let subnets: Vec<String> = ds.internal_subnets.iter().map(|n| n.to_string()).collect();
    let subnets = if subnets.is_empty() {
        "-".to_string()
    } else {
        subnets.join(",")
    };
    writeln!(out, "#internal_subnets\t{subnets}")?;
    writeln!(out, "#fields\t{}", FIELDS.join("\t"))?;
    writeln!(out, "#types\t{}", TYPES.join("\t"))?;
    for r in &ds.records {
        let opt_u = |v: Option<u64>| v.map_or_else(|| "-".to_string(), |x| x.to_string());
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.ts,
            r.orig_ip,
            r.orig_p,
            r.resp_ip,
            r.resp_p,
            r.proto,
            match r.service.as_deref() {
                None => "-",
                Some("") => "(empty)",
                Some(s) => s,
            },
            r.duration.map_or_else(|| "-".to_string(), |d| d.to_string()),
            opt_u(r.orig_bytes),
            opt_u(r.resp_bytes),
            r.conn_state,
            r.orig_pkts,
            r.resp_pkts,
            r.label.as_str(),
        )?;
    }
    Ok(())
}
