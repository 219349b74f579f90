//! Feature matrices as tab-separated text.
//!
//! ```text
//! #format    flowpoison-features
//! #version   1
//! #mode      windows | blocks
//! #fields    <key columns...>  label  <feature names...>  provenance [group]
//! ```
//!
//! Window files use key columns `window internal_ip resp_p` and carry both
//! `provenance` (records with the exact key) and `group` (all records of the
//! `(window, internal IP)` pair) as comma-separated record indices. Block
//! files use the key column `host` and name features `c<conn>_<slot>`.

use std::io::{BufRead, Write};

use ndarray::Array2;

use super::blocks::{BlockPoint, CONN_WIDTH};
use super::{feature_names, FeaturePoint};
use crate::error::{Error, Result};
use crate::flowlog::Label;
use crate::scalar::Scalar;

fn join_idx(idx: &[usize]) -> String {
    if idx.is_empty() {
        return "-".into();
    }
    idx.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

pub fn write_points<W: Write>(points: &[FeaturePoint], mut out: W) -> Result<()> {
    writeln!(out, "#format\tflowpoison-features")?;
    writeln!(out, "#version\t1")?;
    writeln!(out, "#mode\twindows")?;
    writeln!(
        out,
        "#fields\twindow\tinternal_ip\tresp_p\tlabel\t{}\tprovenance\tgroup",
        feature_names().join("\t")
    )?;
    for p in points {
        write!(
            out,
            "{}\t{}\t{}\t{}",
            p.key.window_index,
            p.key.internal_ip,
            p.key.resp_p,
            p.label.as_str()
        )?;
        for v in &p.values {
            write!(out, "\t{v}")?;
        }
        writeln!(out, "\t{}\t{}", join_idx(&p.provenance), join_idx(&p.group))?;
    }
    Ok(())
}

pub fn write_blocks<W: Write>(blocks: &[BlockPoint], block_len: usize, mut out: W) -> Result<()> {
    writeln!(out, "#format\tflowpoison-features")?;
    writeln!(out, "#version\t1")?;
    writeln!(out, "#mode\tblocks")?;
    let names: Vec<String> = (0..block_len)
        .flat_map(|c| (0..CONN_WIDTH).map(move |s| format!("c{c}_{s}")))
        .collect();
    writeln!(out, "#fields\thost\tlabel\t{}\tprovenance", names.join("\t"))?;
    for b in blocks {
        write!(out, "{}\t{}", b.host, b.label.as_str())?;
        for v in &b.values {
            write!(out, "\t{v}")?;
        }
        writeln!(out, "\t{}", join_idx(&b.provenance))?;
    }
    Ok(())
}

/// A feature file read back: enough to train or explain.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub mode: String,
    pub names: Vec<String>,
    /// Key columns joined with `/` for display.
    pub keys: Vec<String>,
    pub labels: Vec<Label>,
    pub rows: Vec<Vec<f64>>,
}

impl FeatureTable {
    pub fn matrix<S: Scalar>(&self) -> Array2<S> {
        let mut x = Array2::zeros((self.rows.len(), self.names.len()));
        for (i, row) in self.rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                x[[i, j]] = S::of(*v);
            }
        }
        x
    }

    pub fn binary_labels(&self) -> Vec<u8> {
        self.labels
            .iter()
            .map(|l| u8::from(*l == Label::NonTarget))
            .collect()
    }
}

pub fn read_feature_table<R: BufRead>(source: R) -> Result<FeatureTable> {
    let mut mode = String::new();
    let mut fields: Option<Vec<String>> = None;
    let mut table = FeatureTable {
        mode: String::new(),
        names: Vec::new(),
        keys: Vec::new(),
        labels: Vec::new(),
        rows: Vec::new(),
    };
    let mut key_cols = 0;
    for (n, line) in source.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        if let Some(h) = line.strip_prefix('#') {
            let (k, v) = h.split_once('\t').unwrap_or((h, ""));
            match k {
                "mode" => mode = v.to_string(),
                "fields" => {
                    let f: Vec<String> = v.split('\t').map(String::from).collect();
                    key_cols = f
                        .iter()
                        .position(|c| c == "label")
                        .ok_or_else(|| Error::Format("feature header lacks `label`".into()))?;
                    let tail = f.iter().rev().take_while(|c| *c == "provenance" || *c == "group").count();
                    table.names = f[key_cols + 1..f.len() - tail].to_vec();
                    fields = Some(f);
                }
                _ => {}
            }
            continue;
        }
        let f = fields
            .as_ref()
            .ok_or_else(|| Error::Format("missing `#fields` header".into()))?;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != f.len() {
            return Err(Error::Format(format!(
                "line {}: expected {} columns, found {}",
                n + 1,
                f.len(),
                cols.len()
            )));
        }
        table.keys.push(cols[..key_cols].join("/"));
        table.labels.push(
            cols[key_cols]
                .parse()
                .map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?,
        );
        let row = cols[key_cols + 1..key_cols + 1 + table.names.len()]
            .iter()
            .map(|c| {
                c.parse::<f64>()
                    .map_err(|_| Error::Format(format!("line {}: bad number `{c}`", n + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        table.rows.push(row);
    }
    if fields.is_none() {
        return Err(Error::Format("missing `#fields` header".into()));
    }
    table.mode = mode;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurize::aggregate_windows;
    use crate::flowlog::testutil::rec;
    use crate::flowlog::{Dataset, Proto};

    #[test]
    fn window_file_reads_back() {
        let recs = vec![
            rec(1.0, "10.0.0.1", "1.1.1.1", 80, Proto::Tcp),
            rec(2.0, "10.0.0.1", "1.1.1.2", 443, Proto::Udp),
        ];
        let ds = Dataset::new(recs, vec!["10.0.0.0/8".parse().unwrap()], "t");
        let pts = aggregate_windows(&ds, 30.0).unwrap();
        let mut buf = Vec::new();
        write_points(&pts, &mut buf).unwrap();
        let t = read_feature_table(&buf[..]).unwrap();
        assert_eq!(t.mode, "windows");
        assert_eq!(t.names, feature_names());
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[0], pts[0].values);
        assert_eq!(t.keys[1], "0/10.0.0.1/443");
    }
}
