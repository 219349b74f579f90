//! One PASS/FAIL line per acceptance criterion.
//!
//! Criteria 8-14 run on synthetic fixtures. Criteria 1-7 need the CTU-13
//! Neris capture: point FLOWPOISON_CTU13 at a directory holding `conn.log`
//! and `scenario.json`, otherwise they print NOT RUN.

mod common;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use common::Check;
use flowpoison::explain::Strategy;
use flowpoison::harness::{run_on, DataConfig, ExperimentConfig, ExperimentReport, LoadedData, Representation, BLOCK_RATES};
use flowpoison::models::ModelKind;
use flowpoison::synth::SynthParams;
use flowpoison::trigger::TriggerVariant;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, id: u32, name: &str, check: &Check) {
        let tag = if check.passed { "PASS" } else { "FAIL" };
        if !check.passed {
            self.failed += 1;
        }
        println!("[{tag}] criterion {id:>2} {name}: {}", check.detail);
    }

    fn not_run(&self, id: u32, name: &str, why: &str) {
        println!("[NOT RUN] criterion {id:>2} {name}: {why}");
    }
}

fn timed(f: impl FnOnce() -> Check) -> Check {
    let t = Instant::now();
    let mut c = f();
    c.detail = format!("{} ({:.1}s)", c.detail, t.elapsed().as_secs_f64());
    c
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-seed values of one metric for one cell.
fn per_seed(r: &ExperimentReport, s: Strategy, v: TriggerVariant, rate: f64, f: impl Fn(&flowpoison::harness::CellResult) -> Option<f64>) -> Vec<f64> {
    r.seeds
        .iter()
        .flat_map(|seed| seed.cells.iter())
        .filter(|c| c.strategy == s && c.variant == v && c.rate == rate && c.error.is_none())
        .filter_map(f)
        .collect()
}

fn asr(c: &flowpoison::harness::CellResult) -> Option<f64> {
    c.metrics.as_ref()?.asr
}

fn delta_f1(c: &flowpoison::harness::CellResult) -> Option<f64> {
    Some(c.metrics.as_ref()?.delta_f1)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.3}"))
}

fn real_data(dir: &Path) -> Option<LoadedData> {
    let data = DataConfig {
        conn_log: Some(dir.join("conn.log")),
        scenario: Some(dir.join("scenario.json")),
        ..DataConfig::default()
    };
    match data.load() {
        Ok(d) => Some(d),
        Err(e) => {
            println!("could not load {}: {e}", dir.display());
            None
        }
    }
}

fn window_config(model: ModelKind, strategies: Vec<Strategy>, triggers: Vec<TriggerVariant>, rates: Vec<f64>) -> ExperimentConfig {
    ExperimentConfig {
        model,
        representation: Representation::Windows,
        strategies,
        triggers,
        poison_rates: rates,
        ..ExperimentConfig::default()
    }
}

fn ctu13(rep: &mut Report, dir: &Path) {
    let Some(data) = real_data(dir) else {
        for id in 1..=7 {
            rep.line(id, "real-data criterion", &Check::new(false, "capture failed to load"));
        }
        return;
    };
    let run = |cfg: &ExperimentConfig| {
        let t = Instant::now();
        let r = run_on(cfg, &data).expect("experiment runs");
        (r, t.elapsed().as_secs_f64())
    };

    // 1: baseline fidelity.
    let mut f1 = Vec::new();
    let mut secs = 0.0;
    for model in [ModelKind::Gb, ModelKind::Ffnn] {
        let mut cfg = window_config(model, vec![Strategy::Entropy], vec![TriggerVariant::Full], vec![0.0]);
        cfg.seeds = vec![0];
        cfg.stealth = false;
        let (r, s) = run(&cfg);
        secs += s;
        f1.push(r.seeds[0].f1_clean);
    }
    rep.line(
        1,
        "baseline fidelity",
        &Check::new(
            f1[0].is_some_and(|v| v >= 0.90) && f1[1].is_some_and(|v| v >= 0.85) && secs <= 1800.0,
            format!("GB F1 {} (>= 0.90), FFNN F1 {} (>= 0.85), {secs:.0}s (<= 1800s)", fmt_opt(f1[0]), fmt_opt(f1[1])),
        ),
    );

    // 2-6 share one grid over strategies, variants and window rates.
    let all = vec![TriggerVariant::Full, TriggerVariant::Reduced, TriggerVariant::Generated];
    let cfg = window_config(ModelKind::Gb, Strategy::ALL.to_vec(), all.clone(), vec![0.1, 0.25, 0.5, 1.0]);
    let (r, _) = run(&cfg);
    let e = Strategy::Entropy;
    let full = TriggerVariant::Full;

    let a2 = mean(&per_seed(&r, e, full, 1.0, asr));
    rep.line(2, "headline attack", &Check::new(a2.is_some_and(|v| v >= 0.85), format!("mean ASR {} over 5 seeds (>= 0.85)", fmt_opt(a2))));

    let low = per_seed(&r, e, full, 0.1, asr);
    let best = low.iter().copied().fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
    rep.line(
        3,
        "low-budget attack",
        &Check::new(
            mean(&low).is_some_and(|v| v >= 0.3) && best.is_some_and(|v| v >= 0.5),
            format!("mean ASR {} (>= 0.3), best seed {} (>= 0.5)", fmt_opt(mean(&low)), fmt_opt(best)),
        ),
    );

    let mut deltas = Vec::new();
    for s in Strategy::ALL {
        for p in [0.1, 0.25, 0.5, 1.0] {
            deltas.extend(per_seed(&r, s, full, p, delta_f1));
        }
    }
    let d4 = mean(&deltas);
    rep.line(4, "side-effect bound", &Check::new(d4.is_some_and(|v| v <= 0.05), format!("mean dF1 {} over {} runs (<= 0.05)", fmt_opt(d4), deltas.len())));

    let mut ok5 = true;
    let mut ok6 = true;
    let mut parts5 = Vec::new();
    let mut parts6 = Vec::new();
    let d_ref = mean(&r.seeds.iter().filter_map(|s| s.d_ref).collect::<Vec<_>>());
    let mut js_means = Vec::new();
    for &v in &all {
        let st = |c: &flowpoison::harness::CellResult| c.stealth.clone();
        let pr = mean(&per_seed(&r, e, v, 1.0, |c| st(c)?.anomaly.map(|a| a.pr_auc)));
        let af1 = mean(&per_seed(&r, e, v, 1.0, |c| st(c)?.anomaly.map(|a| a.f1)));
        let js = mean(&per_seed(&r, e, v, 1.0, |c| st(c)?.js.map(|j| j.average)));
        ok5 &= pr.is_some_and(|x| x <= 0.15) && af1.is_some_and(|x| x <= 0.05);
        ok6 &= js.zip(d_ref).is_some_and(|(j, d)| j < d);
        parts5.push(format!("{v}: PR AUC {} F1 {}", fmt_opt(pr), fmt_opt(af1)));
        parts6.push(format!("{v}: {}", fmt_opt(js)));
        js_means.push(js);
    }
    let generated_smallest = match (js_means[0], js_means[1], js_means[2]) {
        (Some(f), Some(rd), Some(g)) => g <= f && g <= rd,
        _ => false,
    };
    rep.line(5, "feature-space stealth", &Check::new(ok5, format!("{} (PR AUC <= 0.15, F1 <= 0.05)", parts5.join(", "))));
    rep.line(
        6,
        "problem-space stealth",
        &Check::new(
            ok6 && generated_smallest,
            format!("avg JS {} vs D_ref {}; generated smallest: {generated_smallest}", parts6.join(", "), fmt_opt(d_ref)),
        ),
    );

    // 7: auto-encoder path.
    let mut cfg = window_config(ModelKind::Ffnn, vec![e], vec![full], BLOCK_RATES.to_vec());
    cfg.representation = Representation::Blocks;
    cfg.stealth = false;
    let (r, _) = run(&cfg);
    let stats: Vec<(f64, Option<f64>, f64, f64)> = BLOCK_RATES
        .iter()
        .map(|&p| {
            let a = per_seed(&r, e, full, p, asr);
            let m = mean(&a);
            let sd = m.map_or(0.0, |m| {
                if a.len() > 1 {
                    (a.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (a.len() - 1) as f64).sqrt()
                } else {
                    0.0
                }
            });
            let d = per_seed(&r, e, full, p, delta_f1).into_iter().fold(0.0, f64::max);
            (p, m, sd, d)
        })
        .collect();
    let mut ok7 = stats.iter().all(|s| s.1.is_some() && s.3 <= 0.02);
    for w in stats.windows(2) {
        let pooled = ((w[0].2.powi(2) + w[1].2.powi(2)) / 2.0).sqrt();
        ok7 &= w[1].1.unwrap_or(f64::NAN) >= w[0].1.unwrap_or(f64::NAN) - pooled;
    }
    ok7 &= stats.last().and_then(|s| s.1).is_some_and(|v| v >= 0.5);
    let desc: Vec<String> = stats.iter().map(|(p, m, sd, d)| format!("{p}%: {}±{sd:.3} dF1 {d:.3}", fmt_opt(*m))).collect();
    rep.line(7, "auto-encoder path", &Check::new(ok7, desc.join(", ")));
}

/// Informational end-to-end run on the bundled synthetic capture; its
/// numbers are not compared against any target.
fn synthetic_smoke() {
    let cfg = ExperimentConfig {
        data: DataConfig {
            synthetic: Some(SynthParams {
                duration_seconds: 2400.0,
                ..SynthParams::default()
            }),
            synthetic_seed: 3,
            ..DataConfig::default()
        },
        strategies: vec![Strategy::Entropy],
        triggers: vec![TriggerVariant::Full, TriggerVariant::Reduced, TriggerVariant::Generated],
        poison_rates: vec![1.0],
        seeds: vec![0, 1],
        test_points: 50,
        ..ExperimentConfig::default()
    };
    let data = match cfg.data.load() {
        Ok(d) => d,
        Err(e) => {
            println!("[INFO] synthetic smoke run skipped: {e}");
            return;
        }
    };
    let t = Instant::now();
    match run_on(&cfg, &data) {
        Ok(r) => {
            for c in &r.summary {
                println!(
                    "[INFO] synthetic {} {} p={}%: ASR {} dF1 {} PR AUC {} avg JS {} ({} seeds ok)",
                    c.strategy,
                    c.variant,
                    c.rate,
                    fmt_opt(c.asr.map(|s| s.mean)),
                    fmt_opt(c.delta_f1.map(|s| s.mean)),
                    fmt_opt(c.pr_auc.map(|s| s.mean)),
                    fmt_opt(c.js_average.map(|s| s.mean)),
                    c.n_ok
                );
            }
            println!("[INFO] synthetic smoke run took {:.1}s", t.elapsed().as_secs_f64());
        }
        Err(e) => println!("[INFO] synthetic smoke run failed: {e}"),
    }
}

fn main() -> ExitCode {
    // `cargo test -- --list` and friends probe harness-less targets.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut rep = Report { failed: 0 };
    match std::env::var_os("FLOWPOISON_CTU13").map(PathBuf::from) {
        Some(dir) => ctu13(&mut rep, &dir),
        None => {
            let why = "needs the CTU-13 Neris capture; set FLOWPOISON_CTU13 to a directory with conn.log and scenario.json";
            for (id, name) in [
                (1, "baseline fidelity"),
                (2, "headline attack"),
                (3, "low-budget attack"),
                (4, "side-effect bound"),
                (5, "feature-space stealth"),
                (6, "problem-space stealth"),
                (7, "auto-encoder path"),
            ] {
                rep.not_run(id, name, why);
            }
        }
    }
    rep.line(8, "aggregation oracle", &timed(|| common::check_aggregation(1000)));
    rep.line(9, "Shapley oracle", &timed(|| common::check_shapley(36, 2000)));
    rep.line(10, "percentile/prototype oracles", &timed(|| common::check_percentile_prototype(1000)));
    rep.line(11, "injection invariants", &timed(|| common::check_injection(500)));
    let support = timed(|| common::check_bn_support(10_000));
    let nmi = timed(common::check_nmi_preserved);
    rep.line(
        12,
        "Bayesian-net support closure",
        &Check::new(support.passed && nmi.passed, format!("{}; top-5 NMI: {}", support.detail, nmi.detail)),
    );
    rep.line(13, "gradient checks", &timed(|| common::check_gradients(40)));
    rep.line(14, "JS metric properties", &timed(|| common::check_js(500)));
    synthetic_smoke();
    if rep.failed == 0 {
        println!("acceptance: all run criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} criteria failed", rep.failed);
        ExitCode::FAILURE
    }
}
