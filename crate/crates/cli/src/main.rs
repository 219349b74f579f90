use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use flowpoison::bayesgen::{fit_bayes_net, BayesNet, Fixed};
use flowpoison::explain::{compute_importance, AdversaryView, ShapConfig, Strategy, DEFAULT_TOP_K};
use flowpoison::featurize::blocks::DEFAULT_BLOCK_LEN;
use flowpoison::featurize::{
    blockize, points_to_matrix, read_feature_table, write_blocks, write_points, AggregationKey, Aggregator,
    BlockEncoder,
};
use flowpoison::flowlog::{apply_labels, parse_conn_log, partition_dataset, write_conn_log, Dataset, Label, ScenarioConfig};
use flowpoison::harness::{emit_report, run_experiment, ExperimentConfig, ReportFormat};
use flowpoison::models::{
    load_model, save_model, AutoEncoderParams, BinaryClassifier, Classifier, GbdtParams, MlpParams, ModelKind,
    StoredModel,
};
use flowpoison::stealth::{evaluate_anomaly_detection, jensen_shannon_report, EvalSet, StealthReport};
use flowpoison::synth::{neris_like, SynthParams};
use flowpoison::trigger::{
    compute_assignment, default_l_max, extract_full_trigger, find_prototype, inject_training, read_manifest,
    reduce_trigger, write_manifest, InjectParams, Normalizer, SearchParams, TriggerVariant, DEFAULT_PERCENTILE,
};

#[derive(Parser)]
#[command(name = "flowpoison", version, about = "Clean-label backdoor poisoning of flow classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Windows,
    Blocks,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainKind {
    Gb,
    Ffnn,
    Ae,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and label a Zeek conn.log into the canonical dump.
    Ingest {
        #[arg(long)]
        conn_log: PathBuf,
        /// Scenario file naming internal subnets and infected hosts.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn a labelled log into feature points.
    Featurize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum, default_value = "windows")]
        mode: Mode,
        #[arg(long, default_value_t = DEFAULT_BLOCK_LEN)]
        block_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a classifier on a feature file.
    Train {
        #[arg(long, value_enum)]
        model: TrainKind,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Rank features on the adversary's feature file.
    Explain {
        #[arg(long)]
        strategy: Strategy,
        #[arg(long)]
        adv: PathBuf,
        /// Victim model, required by the shap strategy.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TOP_K)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Craft a trigger and poison the training split.
    Attack {
        /// Labelled log covering train, test and adversary periods.
        #[arg(long)]
        conn_log: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "entropy")]
        strategy: Strategy,
        #[arg(long, default_value = "full")]
        trigger: TriggerVariant,
        #[arg(long)]
        poison_pct: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_PERCENTILE)]
        percentile: f64,
        #[arg(long, default_value_t = DEFAULT_TOP_K)]
        k: usize,
        /// Victim model, required by the shap strategy.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit or sample the connection generator.
    Bayesgen {
        #[command(subcommand)]
        action: BayesAction,
    },
    /// Measure how visible a poisoning is.
    Stealth {
        /// Output directory of `attack`.
        #[arg(long)]
        poisoned: PathBuf,
        /// Clean training log.
        #[arg(long)]
        clean: PathBuf,
        /// Clean test log, for the reference distance.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a full experiment from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Write a synthetic labelled capture and its scenario.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        duration: Option<f64>,
    },
}

#[derive(Subcommand)]
enum BayesAction {
    Fit {
        #[arg(long)]
        adv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Sample {
        #[arg(long)]
        bn: PathBuf,
        #[arg(long, default_value = "")]
        fixed: String,
        #[arg(short = 'n', default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn load_log(path: &Path, scenario: Option<&ScenarioConfig>) -> Result<Dataset> {
    let (ds, report) = parse_conn_log(open(path)?).with_context(|| format!("parsing {}", path.display()))?;
    if report.error_count() > 0 {
        log::warn!("{}: skipped {} malformed rows", path.display(), report.error_count());
    }
    Ok(match scenario {
        Some(s) => Dataset::new(ds.records, s.internal_subnets.clone(), s.scenario_name.clone()),
        None => ds,
    })
}

fn write_log(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    write_conn_log(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn load_classifier(path: &Path) -> Result<Classifier<f64>> {
    match load_model::<f64, _>(open(path)?)? {
        StoredModel::Classifier(c) => Ok(c),
        StoredModel::AutoEncoder(_) => bail!("{} holds a bare auto-encoder, not a classifier", path.display()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Ingest { conn_log, labels, out } => {
            let scenario = ScenarioConfig::load(&labels)?;
            let ds = apply_labels(load_log(&conn_log, Some(&scenario))?, &scenario.label_rule());
            let nt = ds.records.iter().filter(|r| r.label == Label::NonTarget).count();
            write_log(&ds, &out)?;
            log::info!("{} records, {nt} malicious, written to {}", ds.len(), out.display());
        }
        Command::Featurize {
            input,
            scenario,
            mode,
            block_len,
            out,
        } => {
            let scenario = ScenarioConfig::load(&scenario)?;
            let ds = load_log(&input, Some(&scenario))?;
            let mut w = create(&out)?;
            match mode {
                Mode::Windows => {
                    let points = Aggregator::new(scenario.internal_subnets.clone(), scenario.window_seconds)
                        .aggregate(&ds.records)?;
                    write_points(&points, &mut w)?;
                    log::info!("{} feature points", points.len());
                }
                Mode::Blocks => {
                    let blocks = blockize(&ds, block_len, &BlockEncoder::fit(&ds.records))?;
                    write_blocks(&blocks, block_len, &mut w)?;
                    log::info!("{} blocks", blocks.len());
                }
            }
            w.flush()?;
        }
        Command::Train {
            model,
            features,
            out,
            seed,
        } => {
            let table = read_feature_table(open(&features)?)?;
            let (x, y) = (table.matrix::<f64>(), table.binary_labels());
            let (gb, mlp) = (GbdtParams::default(), MlpParams::default());
            let clf = match model {
                TrainKind::Gb => Classifier::train(ModelKind::Gb, x.view(), &y, &gb, &mlp, seed)?,
                TrainKind::Ffnn => Classifier::train(ModelKind::Ffnn, x.view(), &y, &gb, &mlp, seed)?,
                TrainKind::Ae => Classifier::train_encoded(x.view(), &y, &AutoEncoderParams::default(), &mlp, seed)?,
            };
            let f1 = flowpoison::models::metrics::f1_score(&y, &clf.predict(x.view()));
            log::info!("training F1 {f1}");
            let mut w = create(&out)?;
            save_model(&StoredModel::Classifier(clf), &mut w)?;
            w.flush()?;
        }
        Command::Explain {
            strategy,
            adv,
            model,
            k,
            seed,
            out,
        } => {
            let table = read_feature_table(open(&adv)?)?;
            let (x, y) = (table.matrix::<f64>(), table.binary_labels());
            let victim = model.as_deref().map(load_classifier).transpose()?;
            let victim_ref = victim.as_ref().map(|c| c as &(dyn BinaryClassifier<f64> + Sync));
            let (scores, selected) = compute_importance(
                strategy,
                &AdversaryView { x: x.view(), y: &y },
                victim_ref,
                &ShapConfig::default(),
                k,
                seed,
            )?;
            let names: Vec<&str> = selected.iter().map(|&i| table.names[i].as_str()).collect();
            let doc = serde_json::json!({
                "strategy": strategy,
                "scores": scores.scores,
                "model_queries": scores.model_queries,
                "selected": selected,
                "selected_names": names,
            });
            write_json(&doc, &out)?;
        }
        Command::Attack {
            conn_log,
            scenario,
            strategy,
            trigger,
            poison_pct,
            seed,
            percentile,
            k,
            model,
            out,
        } => {
            let scn = ScenarioConfig::load(&scenario)?;
            let ds = apply_labels(load_log(&conn_log, Some(&scn))?, &scn.label_rule());
            let part = partition_dataset(&ds, &scn.split_spec(), seed)?;
            let agg = Aggregator::new(scn.internal_subnets.clone(), scn.window_seconds);
            let train_pts = agg.aggregate(&part.train.records)?;
            let adv_pts = agg.aggregate(&part.adversary.records)?;
            let (x_adv, y_adv) = points_to_matrix::<f64>(&adv_pts);
            let victim = model.as_deref().map(load_classifier).transpose()?;
            let victim_ref = victim.as_ref().map(|c| c as &(dyn BinaryClassifier<f64> + Sync));
            let (_, features) = compute_importance(
                strategy,
                &AdversaryView { x: x_adv.view(), y: &y_adv },
                victim_ref,
                &ShapConfig::default(),
                k,
                seed,
            )?;
            let assignment = compute_assignment(&adv_pts, &features, percentile)?;
            let norm = Normalizer::fit_nontarget(&adv_pts, &features);
            let proto = find_prototype(&adv_pts, &assignment, &norm)?;
            let trig = match trigger {
                TriggerVariant::Generated => {
                    let bn = fit_bayes_net(&part.adversary.records)?;
                    flowpoison::bayesgen::generate_trigger(&bn, &proto, &norm, seed)?
                }
                v => {
                    let params = SearchParams {
                        l_max: default_l_max(proto.n_records),
                    };
                    let full = extract_full_trigger(&part.adversary.records, &agg, &proto, &norm, params)?;
                    if v == TriggerVariant::Reduced {
                        reduce_trigger(&full, &proto, &norm)?
                    } else {
                        full
                    }
                }
            };
            log::info!("{trigger} trigger: {} records on port {}", trig.len(), trig.port);
            let inject = InjectParams {
                window_seconds: scn.window_seconds,
                ..InjectParams::default()
            };
            let inj = inject_training(&part.train, &train_pts, &trig, poison_pct, seed, &inject)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_log(&inj.dataset, &out.join("conn.log"))?;
            write_log(&part.train, &out.join("clean_train.log"))?;
            write_log(&part.test, &out.join("clean_test.log"))?;
            let mut w = create(&out.join("manifest.jsonl"))?;
            write_manifest(&inj.manifest, &mut w)?;
            w.flush()?;
            write_json(&trig, &out.join("trigger.json"))?;
            write_json(&scn, &out.join("scenario.json"))?;
            log::info!("{} points poisoned, output in {}", inj.manifest.len(), out.display());
        }
        Command::Bayesgen { action } => match action {
            BayesAction::Fit { adv, out } => {
                let ds = load_log(&adv, None)?;
                let bn = fit_bayes_net(&ds.records)?;
                bn.save(&out)?;
                log::info!("fit on {} benign records", bn.n_records);
            }
            BayesAction::Sample {
                bn,
                fixed,
                n,
                seed,
                out,
            } => {
                let bn = BayesNet::load(&bn)?;
                let fixed = Fixed::parse(&fixed)?;
                let samples = bn.sample_seeded(&fixed, n, seed);
                for s in samples.iter().filter(|s| !s.fallbacks.is_empty()) {
                    log::warn!("fallback to marginal for {:?}", s.fallbacks);
                }
                let ds = Dataset::new(samples.into_iter().map(|s| s.record).collect(), Vec::new(), "sampled");
                match out {
                    Some(p) => write_log(&ds, &p)?,
                    None => {
                        let stdout = std::io::stdout();
                        let mut lock = stdout.lock();
                        write_conn_log(&ds, &mut lock)?;
                    }
                }
            }
        },
        Command::Stealth {
            poisoned,
            clean,
            reference,
            seed,
            out,
        } => {
            let scn = ScenarioConfig::load(poisoned.join("scenario.json"))?;
            let ds = load_log(&poisoned.join("conn.log"), Some(&scn))?;
            let manifest = read_manifest(open(&poisoned.join("manifest.jsonl"))?)?;
            let keys: HashSet<AggregationKey> = manifest.iter().map(|m| m.key).collect();
            let points = Aggregator::new(scn.internal_subnets.clone(), scn.window_seconds).aggregate(&ds.records)?;
            let (x, _) = points_to_matrix::<f64>(&points);
            let flags: Vec<bool> = points.iter().map(|p| keys.contains(&p.key)).collect();
            let anomaly = evaluate_anomaly_detection(x.view(), &flags, EvalSet::Remaining, seed)?;
            let target = |d: &Dataset| d.records.iter().filter(|r| r.label == Label::Target).cloned().collect::<Vec<_>>();
            let clean_ds = load_log(&clean, Some(&scn))?;
            let ref_target = reference.as_deref().map(|p| load_log(p, Some(&scn))).transpose()?.map(|d| target(&d));
            let js = jensen_shannon_report(&target(&ds), &target(&clean_ds), ref_target.as_deref())?;
            write_json(&StealthReport { anomaly, js: Some(js) }, &out)?;
        }
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = run_experiment(&cfg)?;
            for path in emit_report(&report, &out, &ReportFormat::ALL)? {
                log::info!("wrote {}", path.display());
            }
            for c in &report.summary {
                let asr = c.asr.map_or("-".to_string(), |s| format!("{:.3} ± {:.3}", s.mean, s.std));
                let df1 = c.delta_f1.map_or("-".to_string(), |s| format!("{:.4}", s.mean));
                println!("{}/{}/{}%: ASR {asr}, ΔF1 {df1} ({} seeds ok)", c.strategy, c.variant, c.rate, c.n_ok);
            }
            if report.all_seeds_failed() {
                eprintln!("every seed failed");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Synth { out, seed, duration } => {
            let mut params = SynthParams::default();
            if let Some(d) = duration {
                params.duration_seconds = d;
            }
            let s = neris_like(&params, seed)?;
            s.write_to_dir(&out)?;
            log::info!("{} records written to {}", s.dataset.len(), out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}
