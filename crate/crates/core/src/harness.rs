//! End-to-end experiments: clean baseline, trigger crafting, poisoning,
//! retraining and evaluation over a grid of strategies, trigger variants and
//! poison rates, repeated per seed.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayesgen::{fit_bayes_net, generate_trigger, BayesNet};
use crate::error::{Error, Result};
use crate::explain::{compute_importance, AdversaryView, ShapConfig, Strategy};
use crate::featurize::{blockize, points_to_matrix, AggregationKey, Aggregator, BlockEncoder, BlockPoint, FeaturePoint};
use crate::flowlog::{apply_labels, parse_conn_log, ConnRecord, Dataset, Label, ScenarioConfig};
use crate::models::metrics::f1_score;
use crate::models::{AutoEncoderParams, BinaryClassifier, Classifier, GbdtParams, MlpParams, ModelKind};
use crate::stealth::{evaluate_anomaly_detection, js_fields, rows_to_matrix, EvalSet, JsReport, StealthReport};
use crate::synth::{neris_like, SynthParams};
use crate::trigger::blocks::{extract_block_trigger, poison_blocks, trigger_test_blocks, DEFAULT_TRIGGER_LEN};
use crate::trigger::{
    assignment_from_rows, compute_assignment, default_l_max, extract_full_trigger, find_prototype, inject_test_points,
    inject_training, prototype_from_rows, reduce_trigger, InjectParams, Normalizer, SearchParams, Trigger,
    TriggerProto, TriggerVariant, DEFAULT_PERCENTILE,
};

pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const DEFAULT_TEST_POINTS: usize = 200;
pub const WINDOW_RATES: [f64; 4] = [0.1, 0.25, 0.5, 1.0];
pub const BLOCK_RATES: [f64; 6] = [0.5, 1.0, 2.0, 4.0, 5.0, 10.0];
pub const REPORT_FORMAT: &str = "flowpoison-report";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    #[default]
    Windows,
    Blocks,
}

impl Representation {
    pub fn as_str(self) -> &'static str {
        match self {
            Representation::Windows => "windows",
            Representation::Blocks => "blocks",
        }
    }

    pub fn default_rates(self) -> Vec<f64> {
        match self {
            Representation::Windows => WINDOW_RATES.to_vec(),
            Representation::Blocks => BLOCK_RATES.to_vec(),
        }
    }
}

/// Where the connections come from: a labelled `conn.log` plus its scenario,
/// or the built-in synthetic capture.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub conn_log: Option<PathBuf>,
    pub scenario: Option<PathBuf>,
    pub synthetic: Option<SynthParams>,
    pub synthetic_seed: u64,
}

pub struct LoadedData {
    pub dataset: Dataset,
    pub scenario: ScenarioConfig,
}

impl DataConfig {
    pub fn load(&self) -> Result<LoadedData> {
        match (&self.conn_log, &self.scenario, &self.synthetic) {
            (Some(log), Some(scn), None) => {
                let scenario = ScenarioConfig::load(scn)?;
                let f = std::fs::File::open(log).map_err(|e| Error::io(log, e))?;
                let (parsed, report) = parse_conn_log(std::io::BufReader::new(f))?;
                if report.error_count() > 0 {
                    log::warn!("{}: skipped {} malformed rows", log.display(), report.error_count());
                }
                let ds = Dataset::new(parsed.records, scenario.internal_subnets.clone(), scenario.scenario_name.clone());
                Ok(LoadedData {
                    dataset: apply_labels(ds, &scenario.label_rule()),
                    scenario,
                })
            }
            (None, None, Some(p)) => {
                let s = neris_like(p, self.synthetic_seed)?;
                Ok(LoadedData {
                    dataset: s.dataset,
                    scenario: s.config,
                })
            }
            _ => Err(Error::Config(
                "data needs either `conn_log` and `scenario`, or `synthetic`".into(),
            )),
        }
    }

    fn resolve(&mut self, base: &Path) {
        for p in [&mut self.conn_log, &mut self.scenario].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelKind,
    pub representation: Representation,
    pub strategies: Vec<Strategy>,
    pub triggers: Vec<TriggerVariant>,
    /// Percent of training points poisoned; empty picks the
    /// representation's default grid.
    pub poison_rates: Vec<f64>,
    pub percentile: f64,
    pub k: usize,
    /// Victim test points carrying the trigger.
    pub test_points: usize,
    pub seeds: Vec<u64>,
    /// Longest candidate run in the trigger search; unset derives it from the
    /// prototype.
    pub l_max: Option<usize>,
    pub block_len: usize,
    pub block_trigger_len: usize,
    /// Placement of injected records. The window length always follows the
    /// scenario.
    pub inject: InjectParams,
    pub gbdt: GbdtParams,
    pub mlp: MlpParams,
    pub autoencoder: AutoEncoderParams,
    pub shap: ShapConfig,
    pub stealth: bool,
    pub eval_set: EvalSet,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            model: ModelKind::Gb,
            representation: Representation::Windows,
            strategies: vec![Strategy::Entropy],
            triggers: vec![TriggerVariant::Full],
            poison_rates: Vec::new(),
            percentile: DEFAULT_PERCENTILE,
            k: crate::explain::DEFAULT_TOP_K,
            test_points: DEFAULT_TEST_POINTS,
            seeds: DEFAULT_SEEDS.to_vec(),
            l_max: None,
            block_len: crate::featurize::blocks::DEFAULT_BLOCK_LEN,
            block_trigger_len: DEFAULT_TRIGGER_LEN,
            inject: InjectParams::default(),
            gbdt: GbdtParams::default(),
            mlp: MlpParams::default(),
            autoencoder: AutoEncoderParams::default(),
            shap: ShapConfig::default(),
            stealth: true,
            eval_set: EvalSet::Remaining,
        }
    }
}

impl ExperimentConfig {
    /// Reads a JSON config. Relative data paths are taken from the config
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)?;
        if let Some(base) = path.parent() {
            cfg.data.resolve(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn rates(&self) -> Vec<f64> {
        if self.poison_rates.is_empty() {
            self.representation.default_rates()
        } else {
            self.poison_rates.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.strategies.is_empty() || self.triggers.is_empty() {
            return bad("strategies and triggers must be nonempty".into());
        }
        if let Some(p) = self.rates().iter().find(|p| !(0.0..=100.0).contains(*p)) {
            return bad(format!("poison rate {p}% outside [0, 100]"));
        }
        if !(self.percentile > 0.0 && self.percentile <= 100.0) {
            return bad(format!("percentile {} outside (0, 100]", self.percentile));
        }
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        if self.representation == Representation::Blocks {
            if self.block_trigger_len == 0 || self.block_trigger_len > self.block_len {
                return bad("block_trigger_len must lie in [1, block_len]".into());
            }
            if let Some(v) = self.triggers.iter().find(|v| **v != TriggerVariant::Full) {
                return bad(format!("the blocks representation only supports the full trigger, not `{v}`"));
            }
        }
        Ok(())
    }
}

/// Headline numbers for one poisoned model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Share of triggered victim points the poisoned model calls target.
    /// Absent without victims.
    pub asr: Option<f64>,
    /// The same share under the clean model.
    pub asr_clean_model: Option<f64>,
    pub f1_clean: f64,
    pub f1_poisoned: f64,
    pub delta_f1: f64,
}

/// ASR of both models on `triggered`, and F1 of both on the clean test set.
pub fn compute_metrics(
    clean: &dyn BinaryClassifier<f64>,
    poisoned: &dyn BinaryClassifier<f64>,
    x_test: ArrayView2<f64>,
    y_test: &[u8],
    triggered: ArrayView2<f64>,
) -> Metrics {
    let flip_rate = |m: &dyn BinaryClassifier<f64>| {
        (triggered.nrows() > 0).then(|| {
            let pred = m.predict(triggered);
            pred.iter().filter(|&&p| p == 0).count() as f64 / pred.len() as f64
        })
    };
    let f1_clean = f1_score(y_test, &clean.predict(x_test));
    let f1_poisoned = f1_score(y_test, &poisoned.predict(x_test));
    Metrics {
        asr: flip_rate(poisoned),
        asr_clean_model: flip_rate(clean),
        f1_clean,
        f1_poisoned,
        delta_f1: (f1_poisoned - f1_clean).abs(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub stage: String,
    pub detail: String,
}

/// One `(strategy, variant, rate)` cell for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub strategy: Strategy,
    pub variant: TriggerVariant,
    pub rate: f64,
    pub features: Vec<usize>,
    pub trigger_size: Option<usize>,
    pub trigger_distance: Option<f64>,
    pub n_poisoned: usize,
    pub n_victims: usize,
    pub metrics: Option<Metrics>,
    pub stealth: Option<StealthReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Set when a stage shared by every cell failed.
    pub error: Option<String>,
    pub f1_clean: Option<f64>,
    /// JS distance between clean training and test target-class records.
    pub d_ref: Option<f64>,
    pub cells: Vec<CellResult>,
    pub log: Vec<StageEntry>,
}

impl SeedResult {
    pub fn failed(&self) -> bool {
        self.error.is_some() || self.cells.iter().all(|c| c.error.is_some())
    }

    fn note(&mut self, stage: &str, detail: impl Into<String>) {
        let detail = detail.into();
        log::info!("seed {} {stage}: {detail}", self.seed);
        self.log.push(StageEntry {
            stage: stage.into(),
            detail,
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, std, n })
    }
}

/// Across-seed aggregate of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub strategy: Strategy,
    pub variant: TriggerVariant,
    pub rate: f64,
    pub n_ok: usize,
    pub asr: Option<Stat>,
    pub asr_clean_model: Option<Stat>,
    pub f1_clean: Option<Stat>,
    pub f1_poisoned: Option<Stat>,
    pub delta_f1: Option<Stat>,
    pub trigger_size: Option<Stat>,
    pub pr_auc: Option<Stat>,
    pub anomaly_f1: Option<Stat>,
    pub js_average: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub format: String,
    pub version: String,
    pub scenario: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedResult>,
    pub summary: Vec<CellSummary>,
}

impl ExperimentReport {
    pub fn all_seeds_failed(&self) -> bool {
        self.seeds.iter().all(SeedResult::failed)
    }

    pub fn cell(&self, strategy: Strategy, variant: TriggerVariant, rate: f64) -> Option<&CellSummary> {
        self.summary
            .iter()
            .find(|c| c.strategy == strategy && c.variant == variant && c.rate == rate)
    }
}

/// Loads the data and runs every seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let data = cfg.data.load()?;
    run_on(cfg, &data)
}

/// Runs every seed on already loaded data. Seeds run in parallel; results
/// are merged in seed order.
pub fn run_on(cfg: &ExperimentConfig, data: &LoadedData) -> Result<ExperimentReport> {
    cfg.validate()?;
    let seeds: Vec<SeedResult> = cfg.seeds.par_iter().map(|&s| run_seed(cfg, data, s)).collect();
    let summary = summarize(cfg, &seeds);
    Ok(ExperimentReport {
        format: REPORT_FORMAT.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        scenario: data.scenario.scenario_name.clone(),
        config: cfg.clone(),
        seeds,
        summary,
    })
}

fn summarize(cfg: &ExperimentConfig, seeds: &[SeedResult]) -> Vec<CellSummary> {
    let mut out = Vec::new();
    for &strategy in &cfg.strategies {
        for &variant in &cfg.triggers {
            for rate in cfg.rates() {
                let cells: Vec<&CellResult> = seeds
                    .iter()
                    .flat_map(|s| &s.cells)
                    .filter(|c| c.strategy == strategy && c.variant == variant && c.rate == rate && c.error.is_none())
                    .collect();
                let stat = |f: &dyn Fn(&CellResult) -> Option<f64>| {
                    Stat::of(&cells.iter().filter_map(|c| f(c)).collect::<Vec<_>>())
                };
                out.push(CellSummary {
                    strategy,
                    variant,
                    rate,
                    n_ok: cells.len(),
                    asr: stat(&|c| c.metrics.as_ref()?.asr),
                    asr_clean_model: stat(&|c| c.metrics.as_ref()?.asr_clean_model),
                    f1_clean: stat(&|c| Some(c.metrics.as_ref()?.f1_clean)),
                    f1_poisoned: stat(&|c| Some(c.metrics.as_ref()?.f1_poisoned)),
                    delta_f1: stat(&|c| Some(c.metrics.as_ref()?.delta_f1)),
                    trigger_size: stat(&|c| c.trigger_size.map(|n| n as f64)),
                    pr_auc: stat(&|c| Some(c.stealth.as_ref()?.anomaly.as_ref()?.pr_auc)),
                    anomaly_f1: stat(&|c| Some(c.stealth.as_ref()?.anomaly.as_ref()?.f1)),
                    js_average: stat(&|c| Some(c.stealth.as_ref()?.js.as_ref()?.average)),
                });
            }
        }
    }
    out
}

/// Independent stream for each stage of a seed.
fn sub_seed(seed: u64, stage: u64) -> u64 {
    let mut z = seed ^ stage.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STAGE_MODEL: u64 = 1;
const STAGE_EXPLAIN: u64 = 2;
const STAGE_GENERATE: u64 = 3;
const STAGE_VICTIMS: u64 = 4;
const STAGE_POISON: u64 = 5;
const STAGE_DETECTOR: u64 = 6;

pub fn run_seed(cfg: &ExperimentConfig, data: &LoadedData, seed: u64) -> SeedResult {
    let mut out = SeedResult {
        seed,
        error: None,
        f1_clean: None,
        d_ref: None,
        cells: Vec::new(),
        log: Vec::new(),
    };
    let res = match cfg.representation {
        Representation::Windows => windows_seed(cfg, data, &mut out),
        Representation::Blocks => blocks_seed(cfg, data, &mut out),
    };
    if let Err(e) = res {
        out.note("abort", e.to_string());
        out.error = Some(e.to_string());
    }
    out
}

fn target_records(records: &[ConnRecord]) -> Vec<ConnRecord> {
    records.iter().filter(|r| r.label == Label::Target).cloned().collect()
}

fn failed_cells(cfg: &ExperimentConfig, strategy: Strategy, variant: TriggerVariant, features: &[usize], e: &Error) -> Vec<CellResult> {
    cfg.rates()
        .into_iter()
        .map(|rate| CellResult {
            strategy,
            variant,
            rate,
            features: features.to_vec(),
            trigger_size: None,
            trigger_distance: None,
            n_poisoned: 0,
            n_victims: 0,
            metrics: None,
            stealth: None,
            error: Some(e.to_string()),
        })
        .collect()
}

/// Shared per-seed state for the windowed representation.
struct WindowSeed<'a> {
    cfg: &'a ExperimentConfig,
    seed: u64,
    train: &'a Dataset,
    train_pts: Vec<FeaturePoint>,
    test: &'a Dataset,
    test_pts: Vec<FeaturePoint>,
    x_test: Array2<f64>,
    y_test: Vec<u8>,
    clean: Classifier<f64>,
    clean_pred: Vec<u8>,
    agg: Aggregator,
    inject: InjectParams,
    clean_target: Vec<ConnRecord>,
    d_ref: Option<f64>,
}

fn windows_seed(cfg: &ExperimentConfig, data: &LoadedData, out: &mut SeedResult) -> Result<()> {
    let seed = out.seed;
    let scn = &data.scenario;
    let part = crate::flowlog::partition_dataset(&data.dataset, &scn.split_spec(), seed)?;
    out.note(
        "partition",
        format!(
            "train {} / test {} / adversary {} records",
            part.train.len(),
            part.test.len(),
            part.adversary.len()
        ),
    );
    let agg = Aggregator::new(scn.internal_subnets.clone(), scn.window_seconds);
    let train_pts = agg.aggregate(&part.train.records)?;
    let test_pts = agg.aggregate(&part.test.records)?;
    let adv_pts = agg.aggregate(&part.adversary.records)?;
    out.note(
        "featurize",
        format!("train {} / test {} / adversary {} points", train_pts.len(), test_pts.len(), adv_pts.len()),
    );
    let (x_train, y_train) = points_to_matrix::<f64>(&train_pts);
    let (x_test, y_test) = points_to_matrix::<f64>(&test_pts);
    let clean = Classifier::train(cfg.model, x_train.view(), &y_train, &cfg.gbdt, &cfg.mlp, sub_seed(seed, STAGE_MODEL))?;
    let clean_pred = clean.predict(x_test.view());
    let f1 = f1_score(&y_test, &clean_pred);
    out.f1_clean = Some(f1);
    out.note("train-clean", format!("{} model, test F1 {f1}", cfg.model.as_str()));

    let clean_target = target_records(&part.train.records);
    let d_ref = if cfg.stealth {
        let test_target = target_records(&part.test.records);
        match js_fields(&test_target, &clean_target) {
            Ok(f) => Some(f.iter().map(|(_, d)| d).sum::<f64>() / f.len() as f64),
            Err(e) => {
                out.note("js-reference", format!("skipped: {e}"));
                None
            }
        }
    } else {
        None
    };
    if let Some(d) = d_ref {
        out.note("js-reference", format!("D_ref {d}"));
    }
    out.d_ref = d_ref;

    let mut ws = WindowSeed {
        cfg,
        seed,
        train: &part.train,
        train_pts,
        test: &part.test,
        test_pts,
        x_test,
        y_test,
        clean,
        clean_pred,
        agg,
        inject: InjectParams {
            window_seconds: scn.window_seconds,
            ..cfg.inject
        },
        clean_target,
        d_ref,
    };
    let (x_adv, y_adv) = points_to_matrix::<f64>(&adv_pts);
    let mut bn: Option<std::result::Result<BayesNet, String>> = None;
    for &strategy in &cfg.strategies {
        let crafted = craft_window(&ws, strategy, &adv_pts, x_adv.view(), &y_adv, &part.adversary, out);
        let (features, proto, norm, full) = match crafted {
            Ok(c) => c,
            Err(e) => {
                out.note("craft", format!("{strategy}: {e}"));
                for &v in &cfg.triggers {
                    out.cells.extend(failed_cells(cfg, strategy, v, &[], &e));
                }
                continue;
            }
        };
        for &variant in &cfg.triggers {
            let trigger = match variant {
                TriggerVariant::Full => full.as_ref().map(Trigger::clone).map_err(|e| Error::Attack(e.to_string())),
                TriggerVariant::Reduced => match &full {
                    Ok(f) => reduce_trigger(f, &proto, &norm),
                    Err(e) => Err(Error::Attack(e.to_string())),
                },
                TriggerVariant::Generated => {
                    let net = bn.get_or_insert_with(|| fit_bayes_net(&part.adversary.records).map_err(|e| e.to_string()));
                    match net {
                        Ok(net) => generate_trigger(net, &proto, &norm, sub_seed(seed, STAGE_GENERATE)),
                        Err(e) => Err(Error::Attack(format!("bayesian network fit failed: {e}"))),
                    }
                }
            };
            match trigger {
                Ok(t) => {
                    out.note(
                        "trigger",
                        format!("{strategy}/{variant}: {} records on port {}, distance {}", t.len(), t.port, t.distance),
                    );
                    let cells = evaluate_window_trigger(&mut ws, strategy, &features, &t, out);
                    out.cells.extend(cells);
                }
                Err(e) => {
                    out.note("trigger", format!("{strategy}/{variant}: {e}"));
                    out.cells.extend(failed_cells(cfg, strategy, variant, &features, &e));
                }
            }
        }
    }
    Ok(())
}

type Crafted = (Vec<usize>, TriggerProto, Normalizer, Result<Trigger>);

fn craft_window<'a>(
    ws: &WindowSeed,
    strategy: Strategy,
    adv_pts: &[FeaturePoint],
    x_adv: ArrayView2<'a, f64>,
    y_adv: &'a [u8],
    adversary: &Dataset,
    out: &mut SeedResult,
) -> Result<Crafted> {
    let cfg = ws.cfg;
    let model: &(dyn BinaryClassifier<f64> + Sync) = &ws.clean;
    let (scores, features) = compute_importance(
        strategy,
        &AdversaryView { x: x_adv, y: y_adv },
        Some(model),
        &cfg.shap,
        cfg.k,
        sub_seed(ws.seed, STAGE_EXPLAIN),
    )?;
    out.note(
        "explain",
        format!("{strategy}: features {features:?}, {} model queries", scores.model_queries),
    );
    let assignment = compute_assignment(adv_pts, &features, cfg.percentile)?;
    let norm = Normalizer::fit_nontarget(adv_pts, &features);
    let proto = find_prototype(adv_pts, &assignment, &norm)?;
    out.note(
        "prototype",
        format!("{strategy}: {:?}, distance {}, {} records", proto.key, proto.distance, proto.n_records),
    );
    let l_max = cfg.l_max.unwrap_or_else(|| default_l_max(proto.n_records));
    let full = extract_full_trigger(&adversary.records, &ws.agg, &proto, &norm, SearchParams { l_max });
    Ok((features, proto, norm, full))
}

fn evaluate_window_trigger(
    ws: &mut WindowSeed,
    strategy: Strategy,
    features: &[usize],
    trigger: &Trigger,
    out: &mut SeedResult,
) -> Vec<CellResult> {
    let cfg = ws.cfg;
    let variant = trigger.variant;
    let victims = inject_test_points(
        ws.test,
        &ws.test_pts,
        &ws.clean_pred,
        trigger,
        cfg.test_points,
        sub_seed(ws.seed, STAGE_VICTIMS),
        &ws.inject,
    );
    let victims = match victims {
        Ok(v) => v,
        Err(e) => return failed_cells(cfg, strategy, variant, features, &e),
    };
    let triggered = rows_to_matrix::<f64>(&victims.manifest.iter().map(|m| m.values.clone()).collect::<Vec<_>>());
    let triggered = if victims.manifest.is_empty() {
        Array2::zeros((0, ws.x_test.ncols()))
    } else {
        triggered
    };
    out.note("victims", format!("{strategy}/{variant}: {} triggered test points", victims.manifest.len()));
    cfg.rates()
        .into_iter()
        .map(|rate| {
            let base = CellResult {
                strategy,
                variant,
                rate,
                features: features.to_vec(),
                trigger_size: Some(trigger.len()),
                trigger_distance: Some(trigger.distance),
                n_poisoned: 0,
                n_victims: victims.manifest.len(),
                metrics: None,
                stealth: None,
                error: None,
            };
            match window_cell(ws, trigger, rate, triggered.view(), base.clone(), out) {
                Ok(c) => c,
                Err(e) => {
                    out.note("poison", format!("{strategy}/{variant}/{rate}%: {e}"));
                    CellResult {
                        error: Some(e.to_string()),
                        ..base
                    }
                }
            }
        })
        .collect()
}

fn window_cell(
    ws: &WindowSeed,
    trigger: &Trigger,
    rate: f64,
    triggered: ArrayView2<f64>,
    mut cell: CellResult,
    out: &mut SeedResult,
) -> Result<CellResult> {
    let cfg = ws.cfg;
    let tag = format!("{}/{}/{rate}%", cell.strategy, cell.variant);
    if rate == 0.0 {
        // Same data and seed as the clean model, so the clean model is reused.
        cell.metrics = Some(compute_metrics(&ws.clean, &ws.clean, ws.x_test.view(), &ws.y_test, triggered));
        out.note("evaluate", format!("{tag}: no poisoning"));
        return Ok(cell);
    }
    let inj = inject_training(ws.train, &ws.train_pts, trigger, rate, sub_seed(ws.seed, STAGE_POISON), &ws.inject)?;
    cell.n_poisoned = inj.manifest.len();
    let pts = ws.agg.aggregate(&inj.dataset.records)?;
    let (x_p, y_p) = points_to_matrix::<f64>(&pts);
    let poisoned = Classifier::train(cfg.model, x_p.view(), &y_p, &cfg.gbdt, &cfg.mlp, sub_seed(ws.seed, STAGE_MODEL))?;
    let m = compute_metrics(&ws.clean, &poisoned, ws.x_test.view(), &ws.y_test, triggered);
    out.note(
        "evaluate",
        format!(
            "{tag}: {} poisoned points, ASR {:?}, F1 {} -> {}",
            cell.n_poisoned, m.asr, m.f1_clean, m.f1_poisoned
        ),
    );
    cell.metrics = Some(m);
    if cfg.stealth {
        let keys: HashSet<AggregationKey> = inj.manifest.iter().map(|m| m.key).collect();
        let flags: Vec<bool> = pts.iter().map(|p| keys.contains(&p.key)).collect();
        let anomaly = evaluate_anomaly_detection(x_p.view(), &flags, cfg.eval_set, sub_seed(ws.seed, STAGE_DETECTOR))?;
        let fields = js_fields(&target_records(&inj.dataset.records), &ws.clean_target)?;
        let js = JsReport {
            average: fields.iter().map(|(_, d)| d).sum::<f64>() / fields.len() as f64,
            fields,
            d_ref: ws.d_ref,
        };
        out.note(
            "stealth",
            format!(
                "{tag}: PR AUC {:?}, F1 {:?}, JS {}",
                anomaly.as_ref().map(|a| a.pr_auc),
                anomaly.as_ref().map(|a| a.f1),
                js.average
            ),
        );
        cell.stealth = Some(StealthReport { anomaly, js: Some(js) });
    }
    Ok(cell)
}

fn block_matrix(blocks: &[BlockPoint], width: usize) -> (Array2<f64>, Vec<u8>) {
    let mut x = Array2::zeros((blocks.len(), width));
    for (i, b) in blocks.iter().enumerate() {
        x.row_mut(i).assign(&ndarray::ArrayView1::from(&b.values[..]));
    }
    let y = blocks.iter().map(|b| u8::from(b.label == Label::NonTarget)).collect();
    (x, y)
}

fn blocks_seed(cfg: &ExperimentConfig, data: &LoadedData, out: &mut SeedResult) -> Result<()> {
    let seed = out.seed;
    let scn = &data.scenario;
    let part = crate::flowlog::partition_dataset(&data.dataset, &scn.split_spec(), seed)?;
    let encoder = BlockEncoder::fit(&part.train.records);
    let train_b = blockize(&part.train, cfg.block_len, &encoder)?;
    let test_b = blockize(&part.test, cfg.block_len, &encoder)?;
    let adv_b = blockize(&part.adversary, cfg.block_len, &encoder)?;
    out.note(
        "featurize",
        format!("train {} / test {} / adversary {} blocks", train_b.len(), test_b.len(), adv_b.len()),
    );
    let width = cfg.block_len * crate::featurize::blocks::CONN_WIDTH;
    let (x_train, y_train) = block_matrix(&train_b, width);
    let (x_test, y_test) = block_matrix(&test_b, width);
    let (x_adv, y_adv) = block_matrix(&adv_b, width);
    let model_seed = sub_seed(seed, STAGE_MODEL);
    let clean = Classifier::train_encoded(x_train.view(), &y_train, &cfg.autoencoder, &cfg.mlp, model_seed)?;
    let clean_pred = clean.predict(x_test.view());
    let f1 = f1_score(&y_test, &clean_pred);
    out.f1_clean = Some(f1);
    out.note("train-clean", format!("auto-encoder model, test F1 {f1}"));
    let agg = Aggregator::new(scn.internal_subnets.clone(), scn.window_seconds);
    let variant = TriggerVariant::Full;

    for &strategy in &cfg.strategies {
        let crafted = (|| -> Result<(Vec<usize>, Trigger)> {
            let model: &(dyn BinaryClassifier<f64> + Sync) = &clean;
            let (_, features) = compute_importance(
                strategy,
                &AdversaryView { x: x_adv.view(), y: &y_adv },
                Some(model),
                &cfg.shap,
                cfg.k,
                sub_seed(seed, STAGE_EXPLAIN),
            )?;
            let candidates: Vec<usize> = (0..adv_b.len()).filter(|&i| adv_b[i].label == Label::NonTarget).collect();
            let rows = || candidates.iter().map(|&i| adv_b[i].values.as_slice());
            let assignment = assignment_from_rows(rows(), &features, cfg.percentile)?;
            let norm = Normalizer::fit(rows(), &features);
            let (k, distance) = prototype_from_rows(rows(), &assignment, &norm)?;
            let proto = TriggerProto {
                index: candidates[k],
                key: None,
                values: adv_b[candidates[k]].values.clone(),
                distance,
                n_records: cfg.block_len,
            };
            let t = extract_block_trigger(&part.adversary.records, &agg, &proto, &encoder, &norm, cfg.block_trigger_len)?;
            Ok((features, t))
        })();
        let (features, trigger) = match crafted {
            Ok(c) => c,
            Err(e) => {
                out.note("craft", format!("{strategy}: {e}"));
                out.cells.extend(failed_cells(cfg, strategy, variant, &[], &e));
                continue;
            }
        };
        out.note(
            "trigger",
            format!("{strategy}/{variant}: {} records, distance {}", trigger.len(), trigger.distance),
        );
        let victims = match trigger_test_blocks(
            &part.test.records,
            &test_b,
            &clean_pred,
            &trigger,
            &encoder,
            cfg.test_points,
            sub_seed(seed, STAGE_VICTIMS),
        ) {
            Ok(v) => v,
            Err(e) => {
                out.cells.extend(failed_cells(cfg, strategy, variant, &features, &e));
                continue;
            }
        };
        let mut triggered = Array2::zeros((victims.len(), width));
        for (i, v) in victims.iter().enumerate() {
            triggered.row_mut(i).assign(&ndarray::ArrayView1::from(&v.values[..]));
        }
        out.note("victims", format!("{strategy}/{variant}: {} triggered test blocks", victims.len()));
        for rate in cfg.rates() {
            let mut cell = CellResult {
                strategy,
                variant,
                rate,
                features: features.clone(),
                trigger_size: Some(trigger.len()),
                trigger_distance: Some(trigger.distance),
                n_poisoned: 0,
                n_victims: victims.len(),
                metrics: None,
                stealth: None,
                error: None,
            };
            let tag = format!("{strategy}/{variant}/{rate}%");
            let res = (|| -> Result<()> {
                if rate == 0.0 {
                    cell.metrics = Some(compute_metrics(&clean, &clean, x_test.view(), &y_test, triggered.view()));
                    return Ok(());
                }
                let injected = poison_blocks(&part.train.records, &train_b, &trigger, &encoder, rate, sub_seed(seed, STAGE_POISON))?;
                cell.n_poisoned = injected.len();
                let mut x_p = x_train.clone();
                let mut flags = vec![false; train_b.len()];
                for b in &injected {
                    x_p.row_mut(b.block).assign(&ndarray::ArrayView1::from(&b.values[..]));
                    flags[b.block] = true;
                }
                let poisoned = Classifier::train_encoded(x_p.view(), &y_train, &cfg.autoencoder, &cfg.mlp, model_seed)?;
                let m = compute_metrics(&clean, &poisoned, x_test.view(), &y_test, triggered.view());
                out.note(
                    "evaluate",
                    format!("{tag}: {} poisoned blocks, ASR {:?}, F1 {} -> {}", cell.n_poisoned, m.asr, m.f1_clean, m.f1_poisoned),
                );
                cell.metrics = Some(m);
                if cfg.stealth {
                    let anomaly = evaluate_anomaly_detection(x_p.view(), &flags, cfg.eval_set, sub_seed(seed, STAGE_DETECTOR))?;
                    cell.stealth = Some(StealthReport { anomaly, js: None });
                }
                Ok(())
            })();
            if let Err(e) = res {
                out.note("poison", format!("{tag}: {e}"));
                cell.error = Some(e.to_string());
            }
            out.cells.push(cell);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Log,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Log];

    pub fn file_name(self) -> &'static str {
        match self {
            ReportFormat::Json => "report.json",
            ReportFormat::Csv => "results.csv",
            ReportFormat::Log => "stages.log",
        }
    }
}

pub const CSV_HEADER: &str = "seed,strategy,variant,rate,model,representation,asr,asr_clean_model,f1_clean,f1_poisoned,delta_f1,\
trigger_size,trigger_distance,n_poisoned,n_victims,pr_auc,anomaly_f1,js_average,d_ref,error";

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn csv_text(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One row per seed and cell, in seed then cell order.
pub fn results_csv(report: &ExperimentReport) -> String {
    let cfg = &report.config;
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for seed in &report.seeds {
        for c in &seed.cells {
            let m = c.metrics.as_ref();
            let anomaly = c.stealth.as_ref().and_then(|s| s.anomaly.as_ref());
            let js = c.stealth.as_ref().and_then(|s| s.js.as_ref());
            let model = match cfg.representation {
                Representation::Windows => cfg.model.as_str(),
                Representation::Blocks => "autoencoder",
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                seed.seed,
                c.strategy,
                c.variant,
                c.rate,
                model,
                cfg.representation.as_str(),
                opt(m.and_then(|m| m.asr)),
                opt(m.and_then(|m| m.asr_clean_model)),
                opt(m.map(|m| m.f1_clean)),
                opt(m.map(|m| m.f1_poisoned)),
                opt(m.map(|m| m.delta_f1)),
                opt(c.trigger_size),
                opt(c.trigger_distance),
                c.n_poisoned,
                c.n_victims,
                opt(anomaly.map(|a| a.pr_auc)),
                opt(anomaly.map(|a| a.f1)),
                opt(js.map(|j| j.average)),
                opt(seed.d_ref),
                csv_text(c.error.as_deref().or(seed.error.as_deref()).unwrap_or("")),
            );
        }
        if seed.cells.is_empty() {
            let _ = writeln!(s, "{},,,,,,,,,,,,,,,,,,,{}", seed.seed, csv_text(seed.error.as_deref().unwrap_or("")));
        }
    }
    s
}

pub fn stage_log(report: &ExperimentReport) -> String {
    let mut s = String::new();
    for seed in &report.seeds {
        for e in &seed.log {
            let _ = writeln!(s, "seed={} stage={} {}", seed.seed, e.stage, e.detail);
        }
    }
    s
}

/// Writes the requested files into `dir` and returns their paths. The output
/// depends only on `report`.
pub fn emit_report(report: &ExperimentReport, dir: impl AsRef<Path>, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for &f in formats {
        let text = match f {
            ReportFormat::Json => {
                let mut t = serde_json::to_string_pretty(report)?;
                t.push('\n');
                t
            }
            ReportFormat::Csv => results_csv(report),
            ReportFormat::Log => stage_log(report),
        };
        let path = dir.join(f.file_name());
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    struct Fixed(Vec<u8>);

    impl BinaryClassifier<f64> for Fixed {
        fn n_features(&self) -> usize {
            1
        }

        fn predict_proba(&self, x: ArrayView2<f64>) -> Vec<f64> {
            (0..x.nrows()).map(|i| f64::from(self.0[i % self.0.len()])).collect()
        }
    }

    #[test]
    fn asr_is_the_flipped_share() {
        let mut flips = vec![0u8; 150];
        flips.extend(vec![1u8; 50]);
        let trig = Array2::zeros((200, 1));
        let x = array![[0.0], [0.0]];
        let m = compute_metrics(&Fixed(vec![1]), &Fixed(flips), x.view(), &[1, 1], trig.view());
        assert_eq!(m.asr, Some(0.75));
        assert_eq!(m.asr_clean_model, Some(0.0));
        let empty = Array2::zeros((0, 1));
        assert_eq!(compute_metrics(&Fixed(vec![1]), &Fixed(vec![1]), x.view(), &[1, 1], empty.view()).asr, None);
    }

    #[test]
    fn same_model_means_no_f1_change() {
        let x = array![[0.0], [1.0], [2.0], [3.0]];
        let m = compute_metrics(&Fixed(vec![1, 0]), &Fixed(vec![1, 0]), x.view(), &[1, 1, 0, 0], x.view());
        assert_eq!(m.delta_f1, 0.0);
        assert_eq!(m.asr, m.asr_clean_model);
    }

    #[test]
    fn stat_uses_sample_std() {
        let s = Stat::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.std, s.n), (2.0, 1.0, 3));
        assert_eq!(Stat::of(&[4.0]).unwrap().std, 0.0);
        assert!(Stat::of(&[]).is_none());
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::default().validate().is_ok());
        let bad = |f: fn(&mut ExperimentConfig)| {
            let mut c = ExperimentConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.seeds.clear()));
        assert!(bad(|c| c.poison_rates = vec![101.0]));
        assert!(bad(|c| c.poison_rates = vec![-1.0]));
        assert!(bad(|c| {
            c.representation = Representation::Blocks;
            c.triggers = vec![TriggerVariant::Reduced];
        }));
        assert_eq!(ExperimentConfig::default().rates(), WINDOW_RATES.to_vec());
    }

    #[test]
    fn config_parses_with_defaults() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"strategies": ["gini"], "poison_rates": [1.0]}"#).unwrap();
        assert_eq!(c.strategies, vec![Strategy::Gini]);
        assert_eq!(c.seeds.len(), 5);
        assert_eq!(c.test_points, 200);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn sub_seeds_differ() {
        assert_ne!(sub_seed(1, STAGE_MODEL), sub_seed(1, STAGE_POISON));
        assert_ne!(sub_seed(1, STAGE_MODEL), sub_seed(2, STAGE_MODEL));
    }

    fn small_config(seeds: Vec<u64>) -> ExperimentConfig {
        ExperimentConfig {
            data: DataConfig {
                synthetic: Some(SynthParams {
                    duration_seconds: 1800.0,
                    benign_hosts: 12,
                    ..SynthParams::default()
                }),
                synthetic_seed: 3,
                ..DataConfig::default()
            },
            poison_rates: vec![0.0, 1.0],
            seeds,
            test_points: 50,
            gbdt: GbdtParams {
                n_trees: 20,
                ..GbdtParams::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn synthetic_run_end_to_end() {
        let cfg = small_config(vec![7, 8]);
        let data = cfg.data.load().unwrap();
        let report = run_on(&cfg, &data).unwrap();
        assert!(!report.all_seeds_failed());
        for seed in &report.seeds {
            assert!(seed.error.is_none(), "{:?}", seed.error);
            assert_eq!(seed.cells.len(), 2);
            let zero = &seed.cells[0];
            let m = zero.metrics.as_ref().unwrap();
            assert_eq!(m.delta_f1, 0.0);
            assert_eq!(m.asr, m.asr_clean_model);
            let one = &seed.cells[1];
            assert!(one.n_poisoned > 0, "{:?}", one.error);
            let m = one.metrics.as_ref().unwrap();
            assert!(m.delta_f1 >= 0.0);
            assert!(m.asr.map_or(true, |a| (0.0..=1.0).contains(&a)));
        }
        assert_eq!(report.summary.len(), 2);
        assert_eq!(report.summary[1].n_ok, 2);

        // Seed isolation: a lone run of one seed matches its entry above.
        let solo = run_on(&small_config(vec![8]), &data).unwrap();
        assert_eq!(solo.seeds[0], report.seeds[1]);

        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&report, dir.path(), &ReportFormat::ALL).unwrap();
        let first: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();
        emit_report(&report, dir.path(), &ReportFormat::ALL).unwrap();
        let again: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();
        assert_eq!(first, again);
        let csv = String::from_utf8(first[1].clone()).unwrap();
        assert_eq!(csv.lines().count(), 1 + 2 * 2);
        let back: ExperimentReport = serde_json::from_slice(&first[0]).unwrap();
        assert_eq!(back.seeds.len(), 2);
    }
}
