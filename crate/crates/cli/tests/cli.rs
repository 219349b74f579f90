use std::path::Path;
use std::process::{Command, Output};

fn flowpoison(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowpoison"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = flowpoison(args);
    assert!(
        out.status.success(),
        "flowpoison {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn pipeline_on_synthetic_capture() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    ok(&["synth", "--out", p(&data), "--seed", "2", "--duration", "1800"]);
    let log = data.join("conn.log");
    let scn = data.join("scenario.json");
    assert!(log.exists() && scn.exists());

    let labelled = d.join("labelled.log");
    ok(&["ingest", "--conn-log", p(&log), "--labels", p(&scn), "--out", p(&labelled)]);
    let feats = d.join("windows.tsv");
    ok(&["featurize", "--in", p(&labelled), "--scenario", p(&scn), "--out", p(&feats)]);
    let blocks = d.join("blocks.tsv");
    ok(&["featurize", "--in", p(&labelled), "--scenario", p(&scn), "--mode", "blocks", "--block-len", "20", "--out", p(&blocks)]);
    assert!(std::fs::metadata(&blocks).unwrap().len() > 0);

    let model = d.join("gb.json");
    ok(&["train", "--model", "gb", "--features", p(&feats), "--out", p(&model)]);
    let ranking = d.join("ranking.json");
    ok(&["explain", "--strategy", "entropy", "--adv", p(&feats), "--k", "5", "--out", p(&ranking)]);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&ranking).unwrap()).unwrap();
    assert!(r.to_string().contains("entropy"));

    let attack = d.join("attack");
    ok(&[
        "attack", "--conn-log", p(&labelled), "--scenario", p(&scn), "--strategy", "entropy", "--trigger", "reduced",
        "--poison-pct", "1", "--seed", "3", "--out", p(&attack),
    ]);
    for f in ["conn.log", "clean_train.log", "clean_test.log", "manifest.jsonl", "trigger.json", "scenario.json"] {
        assert!(attack.join(f).exists(), "attack did not write {f}");
    }
    let manifest = std::fs::read_to_string(attack.join("manifest.jsonl")).unwrap();
    assert!(manifest.lines().count() > 0);

    let stealth = d.join("stealth.json");
    ok(&[
        "stealth", "--poisoned", p(&attack), "--clean", p(&attack.join("clean_train.log")), "--reference",
        p(&attack.join("clean_test.log")), "--out", p(&stealth),
    ]);
    let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&stealth).unwrap()).unwrap();
    assert!(s.get("js").is_some() && s.get("anomaly").is_some(), "{s}");

    let bn = d.join("bn.json");
    ok(&["bayesgen", "fit", "--adv", p(&attack.join("clean_train.log")), "--out", p(&bn)]);
    let sampled = d.join("sampled.log");
    ok(&["bayesgen", "sample", "--bn", p(&bn), "--fixed", "resp_p=443", "-n", "25", "--seed", "1", "--out", p(&sampled)]);
    let text = std::fs::read_to_string(&sampled).unwrap();
    assert!(text.lines().filter(|l| !l.starts_with('#')).count() >= 25);

    // Same seed, same poisoned log.
    let again = d.join("attack2");
    ok(&[
        "attack", "--conn-log", p(&labelled), "--scenario", p(&scn), "--strategy", "entropy", "--trigger", "reduced",
        "--poison-pct", "1", "--seed", "3", "--out", p(&again),
    ]);
    assert_eq!(std::fs::read(attack.join("conn.log")).unwrap(), std::fs::read(again.join("conn.log")).unwrap());
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let cfg = dir.join("exp.json");
    let text = format!(
        r#"{{
  "data": {{ "synthetic": {{ "duration_seconds": 1800 }}, "synthetic_seed": 1 }},
  "strategies": ["entropy"],
  "triggers": ["full"],
  "poison_rates": [0, 1],
  "seeds": [0, 1],
  "test_points": 30{extra}
}}"#
    );
    std::fs::write(&cfg, text).unwrap();
    cfg
}

#[test]
fn run_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("results");
    ok(&["run", "--config", p(&cfg), "--out", p(&out)]);
    for f in ["report.json", "results.csv", "stages.log"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let csv = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
}

#[test]
fn run_fails_when_every_seed_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), ",\n  \"l_max\": 0");
    let out = flowpoison(&["run", "--config", p(&cfg), "--out", p(&dir.path().join("results"))]);
    assert!(!out.status.success());
}

#[test]
fn bad_arguments_are_rejected() {
    assert!(!flowpoison(&["attack", "--poison-pct", "1"]).status.success());
    assert!(!flowpoison(&["train", "--model", "svm", "--features", "x", "--out", "y"]).status.success());
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["ctu13_neris.json", "ctu13_neris_blocks.json", "synthetic.json"] {
        let cfg = flowpoison::harness::ExperimentConfig::load(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(!cfg.seeds.is_empty());
    }
    let scn = flowpoison::flowlog::ScenarioConfig::load(dir.join("ctu13_neris_scenario.json")).unwrap();
    assert_eq!(scn.internal_subnets.len(), 1);
}
