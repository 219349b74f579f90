//! Triggers for the connection-block representation.
//!
//! A block trigger is `trigger_len` consecutive nontarget connections of one
//! host. Candidates are scored by placing them in the last `trigger_len`
//! slots of the prototype block and comparing the selected block features
//! with the prototype. Injection splices the trigger into a block so it
//! occupies slots `[o, o + trigger_len)`, with `o` drawn per block, and the
//! block is re-read as the `block_len` records around it.

use std::net::IpAddr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::extract::host_streams;
use super::{Normalizer, Trigger, TriggerProto, TriggerVariant};
use crate::error::{Error, Result};
use crate::featurize::blocks::CONN_WIDTH;
use crate::featurize::{Aggregator, BlockEncoder, BlockPoint};
use crate::flowlog::{ConnRecord, Label};

pub const DEFAULT_TRIGGER_LEN: usize = 50;

/// Finds the nontarget run of `trigger_len` records that, in the tail of the
/// prototype block, lands nearest the prototype on the selected features.
/// Ties go to the run starting earliest in `records`.
pub fn extract_block_trigger(
    records: &[ConnRecord],
    agg: &Aggregator,
    proto: &TriggerProto,
    encoder: &BlockEncoder,
    norm: &Normalizer,
    trigger_len: usize,
) -> Result<Trigger> {
    let block_len = proto.values.len() / CONN_WIDTH;
    if trigger_len == 0 || trigger_len > block_len {
        return Err(Error::Config(format!(
            "block trigger length {trigger_len} outside [1, {block_len}]"
        )));
    }
    let head = block_len - trigger_len;
    let features = &norm.features;
    let target = proto.selected(features);
    let streams = host_streams(records, agg);
    let jobs: Vec<(usize, usize)> = streams
        .iter()
        .enumerate()
        .flat_map(|(s, (_, idx))| (0..(idx.len() + 1).saturating_sub(trigger_len)).map(move |st| (s, st)))
        .collect();
    let score = |s: usize, start: usize| {
        let idx = &streams[s].1;
        let mut conn = [0.0; CONN_WIDTH];
        let mut sel = Vec::with_capacity(features.len());
        for &f in features {
            let slot = f / CONN_WIDTH;
            if slot < head {
                sel.push(proto.values[f]);
            } else {
                encoder.encode_conn(&records[idx[start + slot - head]], &mut conn);
                sel.push(conn[f % CONN_WIDTH]);
            }
        }
        let d = norm.distance(&sel, &target);
        (d, idx[start], s, start, sel)
    };
    let best = jobs
        .into_par_iter()
        .map(|(s, st)| score(s, st))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .ok_or_else(|| {
            Error::Attack(format!("no host has {trigger_len} consecutive nontarget records"))
        })?;
    let (distance, _, s, start, achieved) = best;
    let (host, idx) = &streams[s];
    let source_indices = idx[start..start + trigger_len].to_vec();
    Ok(Trigger {
        variant: TriggerVariant::Full,
        records: source_indices.iter().map(|&i| records[i].clone()).collect(),
        host: *host,
        port: 0,
        features: features.clone(),
        achieved,
        distance,
        source_indices,
    })
}

/// Block records with `trigger` spliced in at slot `offset`: the `offset`
/// records before the block's split point, the trigger, then the records
/// after it. The split point sits `trigger.len()` slots before the end.
pub fn splice_block(block: &[ConnRecord], host: IpAddr, trigger: &Trigger, offset: usize) -> Result<Vec<ConnRecord>> {
    let (l, t) = (block.len(), trigger.len());
    if t == 0 || t > l {
        return Err(Error::Attack(format!("trigger of {t} records does not fit a block of {l}")));
    }
    let k = l - t;
    let lo_off = l.saturating_sub(2 * t);
    if offset < lo_off || offset > k {
        return Err(Error::Attack(format!("splice offset {offset} outside [{lo_off}, {k}]")));
    }
    let label = crate::featurize::blocks::block_label(block);
    let t_lo = if k > 0 { block[k - 1].ts } else { block[0].ts };
    let t_hi = if k < l { block[k].ts } else { t_lo };
    let mut out = Vec::with_capacity(l);
    out.extend_from_slice(&block[k - offset..k]);
    for (j, r) in trigger.records.iter().enumerate() {
        let mut c = r.clone();
        if c.orig_ip == trigger.host {
            c.orig_ip = host;
        } else if c.resp_ip == trigger.host {
            c.resp_ip = host;
        } else {
            c.orig_ip = host;
        }
        c.ts = t_lo + (t_hi - t_lo) * (j + 1) as f64 / (t + 1) as f64;
        c.label = label;
        out.push(c);
    }
    out.extend_from_slice(&block[k..k + (l - t - offset)]);
    Ok(out)
}

/// One block carrying the trigger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInjection {
    /// Index into the block list.
    pub block: usize,
    pub offset: usize,
    pub records: Vec<ConnRecord>,
    pub values: Vec<f64>,
}

fn splice_many(
    records: &[ConnRecord],
    blocks: &[BlockPoint],
    chosen: &[usize],
    trigger: &Trigger,
    encoder: &BlockEncoder,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<BlockInjection>> {
    chosen
        .iter()
        .map(|&b| {
            let recs: Vec<ConnRecord> = blocks[b].provenance.iter().map(|&i| records[i].clone()).collect();
            let (l, t) = (recs.len(), trigger.len());
            let offset = rng.gen_range(l.saturating_sub(2 * t)..=l.saturating_sub(t));
            let spliced = splice_block(&recs, blocks[b].host, trigger, offset)?;
            Ok(BlockInjection {
                block: b,
                offset,
                values: encoder.encode(&spliced),
                records: spliced,
            })
        })
        .collect()
}

/// Poisons `p_percent` percent of the training blocks, drawn from the
/// target-class ones.
pub fn poison_blocks(
    records: &[ConnRecord],
    blocks: &[BlockPoint],
    trigger: &Trigger,
    encoder: &BlockEncoder,
    p_percent: f64,
    seed: u64,
) -> Result<Vec<BlockInjection>> {
    if !(0.0..=100.0).contains(&p_percent) {
        return Err(Error::Config(format!("poison rate {p_percent}% outside [0, 100]")));
    }
    if p_percent == 0.0 {
        return Ok(Vec::new());
    }
    let eligible: Vec<usize> = (0..blocks.len()).filter(|&i| blocks[i].label == Label::Target).collect();
    if eligible.is_empty() {
        return Err(Error::Attack("no target-class blocks to poison".into()));
    }
    let mut n = (p_percent / 100.0 * blocks.len() as f64).round() as usize;
    if n == 0 {
        log::warn!("{p_percent}% of {} blocks rounds to zero; poisoning one block", blocks.len());
        n = 1;
    }
    n = n.min(eligible.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = sample(&mut rng, eligible.len(), n).into_iter().map(|i| eligible[i]).collect();
    chosen.sort_unstable();
    splice_many(records, blocks, &chosen, trigger, encoder, &mut rng)
}

/// Splices the trigger into up to `n` nontarget test blocks the clean model
/// gets right.
pub fn trigger_test_blocks(
    records: &[ConnRecord],
    blocks: &[BlockPoint],
    clean_pred: &[u8],
    trigger: &Trigger,
    encoder: &BlockEncoder,
    n: usize,
    seed: u64,
) -> Result<Vec<BlockInjection>> {
    let eligible: Vec<usize> = (0..blocks.len())
        .filter(|&i| blocks[i].label == Label::NonTarget && clean_pred[i] == 1)
        .collect();
    if eligible.len() < n {
        log::warn!("only {} eligible victim blocks for {n} requested", eligible.len());
    }
    let n = n.min(eligible.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = sample(&mut rng, eligible.len(), n).into_iter().map(|i| eligible[i]).collect();
    chosen.sort_unstable();
    splice_many(records, blocks, &chosen, trigger, encoder, &mut rng)
}
