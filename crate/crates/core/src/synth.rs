//! Synthetic botnet capture shaped like a Neris infection: a campus network
//! of benign hosts browsing, resolving names and syncing clocks, plus a few
//! infected hosts that additionally run an IRC control channel, send spam
//! over SMTP to many distinct servers and fetch click-fraud pages.
//!
//! Useful for demos and tests when no real capture is at hand. The output is
//! labelled with the scenario's infected-host rule.

use std::collections::BTreeSet;
use std::net::{IpAddr, Ipv4Addr};
use std::path::Path;

use ipnet::IpNet;
use rand::distributions::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowlog::{apply_labels, write_conn_log, ConnRecord, ConnState, Dataset, Label, Period, Proto, ScenarioConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub benign_hosts: usize,
    pub infected_hosts: usize,
    pub duration_seconds: f64,
    /// Leading share of the capture used for training.
    pub train_fraction: f64,
    /// Mean benign connections per host per window.
    pub benign_rate: f64,
    /// Mean bot connections per infected host per window.
    pub bot_rate: f64,
    pub start_ts: f64,
    pub window_seconds: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            benign_hosts: 24,
            infected_hosts: 2,
            duration_seconds: 3600.0,
            train_fraction: 0.6,
            benign_rate: 2.0,
            bot_rate: 6.0,
            start_ts: 1_313_000_010.0,
            window_seconds: crate::flowlog::WINDOW_SECONDS,
        }
    }
}

pub struct SynthScenario {
    pub dataset: Dataset,
    pub config: ScenarioConfig,
}

const N_SERVERS: usize = 300;

struct Gen {
    rng: ChaCha8Rng,
    servers: Vec<IpAddr>,
    popularity: WeightedIndex<f64>,
}

fn external(i: u32) -> IpAddr {
    IpAddr::V4(Ipv4Addr::from(0x5000_0000u32 + i * 7919))
}

impl Gen {
    fn server(&mut self) -> IpAddr {
        self.servers[self.popularity.sample(&mut self.rng)]
    }

    fn lognormal(&mut self, median: f64, sigma: f64) -> f64 {
        LogNormal::new(median.ln(), sigma).expect("valid lognormal").sample(&mut self.rng)
    }

    #[allow(clippy::too_many_arguments)]
    fn conn(
        &mut self,
        ts: f64,
        host: IpAddr,
        peer: IpAddr,
        port: u16,
        proto: Proto,
        service: Option<&str>,
        state: ConnState,
        pkts: (f64, f64),
        bpp: (f64, f64),
    ) -> ConnRecord {
        let answered = !matches!(state, ConnState::S0 | ConnState::REJ | ConnState::OTH);
        let op = self.lognormal(pkts.0, 0.5).round().max(1.0) as u64;
        let rp = if answered { self.lognormal(pkts.1, 0.5).round().max(1.0) as u64 } else { 0 };
        let ob = (op as f64 * self.lognormal(bpp.0, 0.3)).round() as u64;
        let rb = (rp as f64 * self.lognormal(bpp.1.max(1.0), 0.3)).round() as u64;
        let duration = if answered { self.lognormal(0.4 * op as f64, 0.8) } else { self.lognormal(2.0, 0.3) };
        ConnRecord {
            ts,
            orig_ip: host,
            orig_p: self.rng.gen_range(1024..=65535),
            resp_ip: peer,
            resp_p: port,
            proto,
            service: service.map(String::from),
            duration: Some((duration * 1e6).round() / 1e6),
            orig_bytes: Some(if proto == Proto::Udp || answered { ob } else { 0 }),
            resp_bytes: Some(rb),
            conn_state: state,
            orig_pkts: op,
            resp_pkts: rp,
            label: Label::Unlabeled,
        }
    }

    fn benign(&mut self, ts: f64, host: IpAddr) -> ConnRecord {
        let u: f64 = self.rng.gen();
        let server = self.server();
        if u < 0.42 {
            let state = if self.rng.gen_bool(0.05) { ConnState::RSTO } else { ConnState::SF };
            self.conn(ts, host, server, 443, Proto::Tcp, Some("ssl"), state, (14.0, 18.0), (90.0, 900.0))
        } else if u < 0.62 {
            let state = if self.rng.gen_bool(0.04) { ConnState::S0 } else { ConnState::SF };
            self.conn(ts, host, server, 80, Proto::Tcp, Some("http"), state, (8.0, 10.0), (120.0, 700.0))
        } else if u < 0.90 {
            let dns = self.servers[0];
            self.conn(ts, host, dns, 53, Proto::Udp, Some("dns"), ConnState::SF, (1.0, 1.0), (40.0, 120.0))
        } else if u < 0.94 {
            let ntp = self.servers[1];
            self.conn(ts, host, ntp, 123, Proto::Udp, None, ConnState::SF, (1.0, 1.0), (48.0, 48.0))
        } else if u < 0.97 {
            self.conn(ts, host, server, 22, Proto::Tcp, Some("ssh"), ConnState::SF, (30.0, 28.0), (70.0, 90.0))
        } else {
            let mut c = self.conn(ts, host, server, 0, Proto::Icmp, None, ConnState::OTH, (2.0, 2.0), (64.0, 64.0));
            c.resp_p = 0;
            c.orig_p = 8;
            c
        }
    }

    fn bot(&mut self, ts: f64, host: IpAddr, cnc: IpAddr) -> ConnRecord {
        let u: f64 = self.rng.gen();
        if u < 0.55 {
            let target = external(10_000 + self.rng.gen_range(0..50_000));
            let v: f64 = self.rng.gen();
            let (state, svc) = if v < 0.4 {
                (ConnState::S0, None)
            } else if v < 0.6 {
                (ConnState::REJ, None)
            } else {
                (ConnState::SF, Some("smtp"))
            };
            self.conn(ts, host, target, 25, Proto::Tcp, svc, state, (9.0, 8.0), (60.0, 70.0))
        } else if u < 0.70 {
            let server = self.server();
            self.conn(ts, host, server, 80, Proto::Tcp, Some("http"), ConnState::SF, (5.0, 4.0), (300.0, 150.0))
        } else if u < 0.80 {
            self.conn(ts, host, cnc, 6667, Proto::Tcp, Some("irc"), ConnState::SF, (6.0, 5.0), (70.0, 110.0))
        } else {
            let dns = self.servers[0];
            self.conn(ts, host, dns, 53, Proto::Udp, Some("dns"), ConnState::SF, (1.0, 1.0), (36.0, 200.0))
        }
    }
}

/// Generates a labelled capture and the scenario describing it.
pub fn neris_like(params: &SynthParams, seed: u64) -> Result<SynthScenario> {
    if params.benign_hosts == 0 || params.infected_hosts == 0 {
        return Err(Error::Config("need at least one benign and one infected host".into()));
    }
    if !(params.duration_seconds > 0.0 && params.window_seconds > 0.0) {
        return Err(Error::Config("duration and window must be positive".into()));
    }
    if !(params.train_fraction > 0.0 && params.train_fraction < 1.0) {
        return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
    }
    let weights: Vec<f64> = (1..=N_SERVERS).map(|r| 1.0 / r as f64).collect();
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(seed),
        servers: (0..N_SERVERS as u32).map(external).collect(),
        popularity: WeightedIndex::new(weights).expect("positive weights"),
    };
    let host = |i: usize| IpAddr::V4(Ipv4Addr::new(147, 32, 84, (10 + i) as u8));
    let n_hosts = params.benign_hosts + params.infected_hosts;
    if n_hosts > 240 {
        return Err(Error::Config("at most 240 hosts".into()));
    }
    let infected: BTreeSet<IpAddr> = (params.benign_hosts..n_hosts).map(host).collect();
    let cnc = IpAddr::V4(Ipv4Addr::new(91, 121, 1, 6));
    let n_windows = (params.duration_seconds / params.window_seconds).ceil() as usize;
    let w = params.window_seconds;
    let start = (params.start_ts / w).floor() * w;
    let benign_n = Poisson::new(params.benign_rate).map_err(|e| Error::Config(e.to_string()))?;
    let bot_n = Poisson::new(params.bot_rate).map_err(|e| Error::Config(e.to_string()))?;

    let mut records = Vec::new();
    for win in 0..n_windows {
        let t0 = start + win as f64 * w;
        for h in 0..n_hosts {
            let ip = host(h);
            let k = benign_n.sample(&mut g.rng) as usize;
            for _ in 0..k {
                let ts = t0 + g.rng.gen::<f64>() * w * 0.999;
                records.push(g.benign(ts, ip));
            }
            if infected.contains(&ip) {
                let k = bot_n.sample(&mut g.rng) as usize;
                for _ in 0..k {
                    let ts = t0 + g.rng.gen::<f64>() * w * 0.999;
                    records.push(g.bot(ts, ip, cnc));
                }
            }
        }
    }
    for r in &mut records {
        r.ts = (r.ts * 1e6).round() / 1e6;
    }
    let split = start + (n_windows as f64 * params.train_fraction).round() * w;
    let config = ScenarioConfig {
        scenario_name: "synthetic-neris".into(),
        internal_subnets: vec!["147.32.0.0/16".parse::<IpNet>().expect("literal subnet")],
        infected_hosts: infected,
        train_periods: vec![Period { start, end: split }],
        adversary_fraction: 0.15,
        window_seconds: w,
    };
    let ds = Dataset::new(records, config.internal_subnets.clone(), config.scenario_name.clone());
    Ok(SynthScenario {
        dataset: apply_labels(ds, &config.label_rule()),
        config,
    })
}

impl SynthScenario {
    /// Writes `conn.log` and `scenario.json` into `dir`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log = dir.join("conn.log");
        let f = std::fs::File::create(&log).map_err(|e| Error::io(&log, e))?;
        write_conn_log(&self.dataset, std::io::BufWriter::new(f))?;
        let cfg = dir.join("scenario.json");
        let text = serde_json::to_string_pretty(&self.config)?;
        std::fs::write(&cfg, text).map_err(|e| Error::io(&cfg, e))?;
        Ok(())
    }
}
