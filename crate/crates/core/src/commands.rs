//! Operator commands behind the `beliefplan` binary. Every artifact carries
//! the config hash and seed of the run that wrote it.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{CollisionMode, RunConfig};
use crate::error::{Error, Result};
use crate::learner::{expert_snapshots, offline_train, online_train, OfflineReport, OnlineReport};
use crate::model::Model;
use crate::runner::{format_mean_std, mean_std, run_suite, EpisodeRun, PolicySettings, SeedMetrics, TraceRow};
use crate::simulator::{generate_scenario, load_dir, GeneratorParams, Scenario, ScenarioKind};

/// Scenario seed offsets of the generated suites, far enough apart that the
/// pools never overlap.
pub const OFFLINE_BASE: u64 = 0;
pub const ONLINE_BASE: u64 = 100_000;
pub const ONLINE_EVAL_BASE: u64 = 200_000;
pub const EVAL_BASE: u64 = 1_000_000;

/// Defaults when `path` is `None`; otherwise loads it, writing the defaults
/// there first if it does not exist.
pub fn resolve_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load_or_init(p),
        None => Ok(RunConfig::default()),
    }
}

pub fn generator_params(cfg: &RunConfig) -> GeneratorParams {
    GeneratorParams { duration: cfg.simulator.duration, dt: cfg.simulator.dt, ..GeneratorParams::default() }
}

/// `count` scenarios with seeds `base + seed·count + i`; kinds cycle through
/// every kind unless one is given.
pub fn scenario_suite(
    cfg: &RunConfig,
    kind: Option<ScenarioKind>,
    base: u64,
    seed: u64,
    count: usize,
) -> Result<Vec<Scenario>> {
    let params = generator_params(cfg);
    (0..count)
        .map(|i| {
            let k = kind.unwrap_or(ScenarioKind::ALL[i % ScenarioKind::ALL.len()]);
            generate_scenario(k, base + seed * count as u64 + i as u64, &params)
        })
        .collect()
}

fn scenarios_or_suite(
    dir: Option<&Path>,
    cfg: &RunConfig,
    base: u64,
    seed: u64,
    count: usize,
) -> Result<Vec<Scenario>> {
    match dir {
        Some(d) => {
            if !d.is_dir() {
                return Err(Error::Config(format!("scenario directory {} does not exist", d.display())));
            }
            load_dir(d)
        }
        None => scenario_suite(cfg, None, base, seed, count),
    }
}

fn create_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

fn write_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(csv_error)
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Format(format!("{other:?}")),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

struct JsonLines(BufWriter<File>);

impl JsonLines {
    fn create(path: &Path) -> Result<Self> {
        Ok(JsonLines(BufWriter::new(File::create(path)?)))
    }

    fn write<T: Serialize>(&mut self, value: &T) -> Result<()> {
        serde_json::to_writer(&mut self.0, value)?;
        self.0.write_all(b"\n")?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.0.flush()?;
        Ok(())
    }
}

/// Writes `count` scenario files named `<id>.json`. Returns their paths.
pub fn cmd_generate(
    cfg: &RunConfig,
    kind: Option<ScenarioKind>,
    count: usize,
    seed: u64,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    create_dir(out)?;
    let mut paths = Vec::with_capacity(count);
    for sc in scenario_suite(cfg, kind, OFFLINE_BASE, seed, count)? {
        let p = out.join(format!("{}.json", sc.id));
        sc.save(&p)?;
        paths.push(p);
    }
    Ok(paths)
}

#[derive(Serialize)]
struct OfflineRow<'a> {
    epoch: usize,
    loss: f64,
    learning_rate: f64,
    seed: u64,
    config_hash: &'a str,
}

/// Offline training from expert replays. Writes `offline.ckpt`,
/// `offline_log.csv` and `config.toml`.
pub fn cmd_train_offline(cfg: &RunConfig, seed: u64, scenarios: Option<&Path>, out: &Path) -> Result<OfflineReport> {
    let pool = scenarios_or_suite(scenarios, cfg, OFFLINE_BASE, seed, cfg.offline.scenarios)?;
    let mut snapshots = Vec::new();
    for sc in &pool {
        snapshots.extend(expert_snapshots(cfg, sc)?);
    }
    log::info!("offline: {} snapshots from {} scenarios", snapshots.len(), pool.len());
    let mut model = Model::new(cfg, seed)?;
    let report = offline_train(cfg, &mut model, &snapshots, seed)?;
    create_dir(out)?;
    write_config(cfg, out)?;
    let hash = cfg.hash();
    let mut w = csv_writer(&out.join("offline_log.csv"))?;
    for (i, (&loss, &learning_rate)) in report.epoch_losses.iter().zip(&report.learning_rates).enumerate() {
        w.serialize(OfflineRow { epoch: i + 1, loss, learning_rate, seed, config_hash: &hash }).map_err(csv_error)?;
    }
    w.flush()?;
    model.save(&out.join("offline.ckpt"), cfg, "offline", seed)?;
    Ok(report)
}

#[derive(Serialize)]
struct MetricRow<'a> {
    step: usize,
    lambda: f64,
    reward: Option<f64>,
    success_rate: Option<f64>,
    consistency: Option<f64>,
    min_ade: Option<f64>,
    score_accuracy: Option<f64>,
    seed: u64,
    config_hash: &'a str,
}

/// Online training from an offline checkpoint. Writes `online.ckpt`, one
/// `online_step<N>.ckpt` and one `training_log.csv` row per evaluation
/// interval, and `config.toml`.
pub fn cmd_train_online(
    cfg: &RunConfig,
    seed: u64,
    checkpoint: &Path,
    scenarios: Option<&Path>,
    out: &Path,
) -> Result<OnlineReport> {
    let (mut model, _) = Model::load(checkpoint, cfg)?;
    let pool = scenarios_or_suite(scenarios, cfg, ONLINE_BASE, seed, cfg.online.scenarios)?;
    let held = scenario_suite(cfg, None, ONLINE_EVAL_BASE, 0, cfg.online.eval_scenarios)?;
    create_dir(out)?;
    write_config(cfg, out)?;
    let hash = cfg.hash();
    let mut w = csv_writer(&out.join("training_log.csv"))?;
    let report = online_train(cfg, &mut model, &pool, &held, seed, |m, row| {
        w.serialize(MetricRow {
            step: row.step,
            lambda: row.lambda,
            reward: row.metrics.reward,
            success_rate: row.metrics.success_rate,
            consistency: row.metrics.consistency,
            min_ade: row.metrics.min_ade,
            score_accuracy: row.metrics.score_accuracy,
            seed,
            config_hash: &hash,
        })
        .map_err(csv_error)?;
        w.flush()?;
        m.save(&out.join(format!("online_step{}.ckpt", row.step)), cfg, "online", seed)
    })?;
    model.save(&out.join("online.ckpt"), cfg, "online", seed)?;
    Ok(report)
}

/// Loads each checkpoint; the seed recorded in it pairs it with an
/// evaluation seed.
pub fn load_models(cfg: &RunConfig, checkpoints: &[PathBuf]) -> Result<Vec<(u64, Model)>> {
    if checkpoints.is_empty() {
        return Err(Error::Config("at least one --checkpoint is required".into()));
    }
    checkpoints.iter().map(|p| Model::load(p, cfg).map(|(m, meta)| (meta.seed, m))).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Dumps {
    pub trees: bool,
    pub predictions: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub scenarios: Vec<String>,
    pub per_seed: Vec<SeedMetrics>,
    /// `mean±std` across seeds per metric.
    pub mean_std: BTreeMap<String, String>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub summary: EvaluationSummary,
    pub runs: Vec<(u64, Vec<EpisodeRun>)>,
}

impl Evaluation {
    /// Mean planner wall-clock per seed, milliseconds.
    pub fn planner_ms(&self) -> Vec<f64> {
        self.runs
            .iter()
            .filter_map(|(_, runs)| {
                let ms: Vec<f64> = runs.iter().flat_map(|r| r.planner_ms.iter().copied()).collect();
                mean_std(&ms).map(|(m, _)| m)
            })
            .collect()
    }
}

/// Closed-loop episodes of every model on every scenario, paired by index.
pub fn evaluate(
    cfg: &RunConfig,
    models: &[(u64, Model)],
    scenarios: &[Scenario],
    settings: &PolicySettings,
) -> Result<Evaluation> {
    let mut runs = Vec::with_capacity(models.len());
    let mut per_seed = Vec::with_capacity(models.len());
    for (seed, model) in models {
        let r = run_suite(cfg, model, scenarios, settings, *seed)?;
        let summaries: Vec<_> = r.iter().map(|e| e.summary.clone()).collect();
        per_seed.push(SeedMetrics::from_summaries(*seed, &summaries));
        runs.push((*seed, r));
    }
    let mean_std = SeedMetrics::columns()
        .iter()
        .map(|(name, get)| {
            let v: Vec<f64> = per_seed.iter().filter_map(get).collect();
            (name.to_string(), format_mean_std(&v))
        })
        .collect();
    Ok(Evaluation {
        summary: EvaluationSummary {
            config_hash: cfg.hash(),
            seeds: models.iter().map(|(s, _)| *s).collect(),
            scenarios: scenarios.iter().map(|s| s.id.clone()).collect(),
            per_seed,
            mean_std,
        },
        runs,
    })
}

#[derive(Serialize)]
struct EpisodeRow<'a> {
    seed: u64,
    scenario: &'a str,
    kind: &'a str,
    success: bool,
    termination: &'a str,
    reward: f64,
    task_time: usize,
    log_divergence: f64,
    min_ade: Option<f64>,
    consistency: Option<f64>,
    score_accuracy: Option<f64>,
    decisions: usize,
    config_hash: &'a str,
}

#[derive(Serialize)]
struct SeedRow<'a> {
    seed: u64,
    episodes: usize,
    success_rate: Option<f64>,
    reward: Option<f64>,
    task_time: Option<f64>,
    log_divergence: Option<f64>,
    min_ade: Option<f64>,
    consistency: Option<f64>,
    score_accuracy: Option<f64>,
    config_hash: &'a str,
}

/// One line of `traces.jsonl`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceRecord {
    pub seed: u64,
    pub scenario: String,
    pub trace: Vec<TraceRow>,
}

/// Planner wall-clock, kept apart from the metric files because it is not
/// reproducible.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Timing {
    pub seeds: Vec<u64>,
    pub planner_ms: Vec<f64>,
}

/// Writes `episodes.csv`, `metrics.csv`, `summary.json`, `traces.jsonl`,
/// `timing.json` and the requested dumps.
pub fn write_evaluation(ev: &Evaluation, cfg: &RunConfig, out: &Path, dumps: Dumps) -> Result<()> {
    create_dir(out)?;
    write_config(cfg, out)?;
    let hash = &ev.summary.config_hash;
    let mut episodes = csv_writer(&out.join("episodes.csv"))?;
    let mut traces = JsonLines::create(&out.join("traces.jsonl"))?;
    let mut preds = dumps.predictions.then(|| JsonLines::create(&out.join("predictions.jsonl"))).transpose()?;
    let mut trees = dumps.trees.then(|| JsonLines::create(&out.join("trees.jsonl"))).transpose()?;
    for (seed, runs) in &ev.runs {
        for r in runs {
            let s = &r.summary;
            episodes
                .serialize(EpisodeRow {
                    seed: *seed,
                    scenario: &s.scenario,
                    kind: &s.kind,
                    success: s.success,
                    termination: &s.termination,
                    reward: s.reward,
                    task_time: s.task_time,
                    log_divergence: s.log_divergence,
                    min_ade: s.min_ade,
                    consistency: s.consistency,
                    score_accuracy: s.score_accuracy,
                    decisions: s.decisions,
                    config_hash: hash,
                })
                .map_err(csv_error)?;
            traces.write(&TraceRecord { seed: *seed, scenario: s.scenario.clone(), trace: r.trace.clone() })?;
            if let Some(w) = preds.as_mut() {
                for p in &r.predictions {
                    w.write(&serde_json::json!({
                        "seed": seed, "scenario": s.scenario, "config_hash": hash,
                        "t": p.t, "predictions": p.predictions,
                    }))?;
                }
            }
            if let Some(w) = trees.as_mut() {
                for (t, tree) in &r.trees {
                    w.write(&serde_json::json!({
                        "seed": seed, "scenario": s.scenario, "config_hash": hash, "t": t, "tree": tree,
                    }))?;
                }
            }
        }
    }
    episodes.flush()?;
    traces.finish()?;
    for w in [preds, trees].into_iter().flatten() {
        w.finish()?;
    }
    let mut metrics = csv_writer(&out.join("metrics.csv"))?;
    for m in &ev.summary.per_seed {
        metrics
            .serialize(SeedRow {
                seed: m.seed,
                episodes: m.episodes,
                success_rate: m.success_rate,
                reward: m.reward,
                task_time: m.task_time,
                log_divergence: m.log_divergence,
                min_ade: m.min_ade,
                consistency: m.consistency,
                score_accuracy: m.score_accuracy,
                config_hash: hash,
            })
            .map_err(csv_error)?;
    }
    metrics.flush()?;
    write_json(&out.join("summary.json"), &ev.summary)?;
    write_json(&out.join("timing.json"), &Timing { seeds: ev.summary.seeds.clone(), planner_ms: ev.planner_ms() })?;
    Ok(())
}

/// Evaluates checkpoints on the given scenarios (or the held-out suite) and
/// writes the report files.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    checkpoints: &[PathBuf],
    scenarios: Option<&Path>,
    out: &Path,
    dumps: Dumps,
) -> Result<EvaluationSummary> {
    let models = load_models(cfg, checkpoints)?;
    let suite = scenarios_or_suite(scenarios, cfg, EVAL_BASE, 0, cfg.evaluation.scenarios)?;
    let settings = PolicySettings {
        keep_predictions: dumps.predictions,
        keep_trees: dumps.trees,
        ..PolicySettings::evaluation(cfg)
    };
    let ev = evaluate(cfg, &models, &suite, &settings)?;
    write_evaluation(&ev, cfg, out, dumps)?;
    Ok(ev.summary)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    OptionLength,
    Threshold,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "option-length" => Ok(AblationAxis::OptionLength),
            "threshold" | "p-th" => Ok(AblationAxis::Threshold),
            _ => Err(Error::Config(format!("unknown ablation axis `{s}` (option-length, threshold)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::OptionLength => "option-length",
            AblationAxis::Threshold => "threshold",
        }
    }

    /// Setting labels with the configuration each one runs.
    pub fn settings(self, cfg: &RunConfig) -> Vec<(String, RunConfig)> {
        match self {
            AblationAxis::OptionLength => [1usize, 5, 10, 20, 40]
                .into_iter()
                .map(|len| {
                    let mut c = cfg.clone();
                    c.planner.option_length = len;
                    (len.to_string(), c)
                })
                .collect(),
            AblationAxis::Threshold => {
                let with = |p: f64, mode: CollisionMode| {
                    let mut c = cfg.clone();
                    c.planner.p_threshold = p;
                    c.planner.collision_mode = mode;
                    c
                };
                vec![
                    ("0".into(), with(0.0, CollisionMode::Threshold)),
                    ("0.15".into(), with(0.15, CollisionMode::Threshold)),
                    ("argmax".into(), with(cfg.planner.p_threshold, CollisionMode::ArgmaxOnly)),
                ]
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub config_hash: String,
    pub scenarios: Vec<String>,
    pub per_seed: Vec<SeedMetrics>,
    /// Mean planner wall-clock per seed, milliseconds.
    #[serde(skip)]
    pub planner_ms: Vec<f64>,
}

impl AblationRow {
    pub fn success(&self) -> Vec<f64> {
        self.per_seed.iter().filter_map(|m| m.success_rate).collect()
    }

    pub fn mean_success(&self) -> f64 {
        mean_std(&self.success()).map_or(0.0, |(m, _)| m)
    }

    pub fn mean_planner_ms(&self) -> f64 {
        mean_std(&self.planner_ms).map_or(0.0, |(m, _)| m)
    }
}

/// Evaluates every setting of `axis` on one shared scenario list and seed set.
pub fn ablate(
    cfg: &RunConfig,
    axis: AblationAxis,
    models: &[(u64, Model)],
    scenarios: &[Scenario],
) -> Result<Vec<AblationRow>> {
    axis.settings(cfg)
        .into_iter()
        .map(|(setting, c)| {
            c.validate()?;
            log::info!("ablation {} = {setting}", axis.name());
            let ev = evaluate(&c, models, scenarios, &PolicySettings::evaluation(&c))?;
            Ok(AblationRow {
                setting,
                config_hash: ev.summary.config_hash.clone(),
                planner_ms: ev.planner_ms(),
                scenarios: ev.summary.scenarios,
                per_seed: ev.summary.per_seed,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct AblationCsv<'a> {
    axis: &'a str,
    setting: &'a str,
    seed: u64,
    success_rate: Option<f64>,
    reward: Option<f64>,
    log_divergence: Option<f64>,
    config_hash: &'a str,
}

#[derive(Serialize)]
struct TimingCsv<'a> {
    axis: &'a str,
    setting: &'a str,
    seed: u64,
    planner_ms: f64,
}

/// Writes `ablation.csv` (per seed), `ablation_timing.md` (mean±std table with
/// runtime), `ablation_timing.csv` and `ablation.json`.
pub fn write_ablation(axis: AblationAxis, rows: &[AblationRow], out: &Path) -> Result<()> {
    create_dir(out)?;
    let mut w = csv_writer(&out.join("ablation.csv"))?;
    let mut tw = csv_writer(&out.join("ablation_timing.csv"))?;
    let mut md =
        format!("| {} | success | reward | log divergence | planner ms |\n|---|---|---|---|---|\n", axis.name());
    for r in rows {
        for (m, ms) in r.per_seed.iter().zip(r.planner_ms.iter().chain(std::iter::repeat(&f64::NAN))) {
            w.serialize(AblationCsv {
                axis: axis.name(),
                setting: &r.setting,
                seed: m.seed,
                success_rate: m.success_rate,
                reward: m.reward,
                log_divergence: m.log_divergence,
                config_hash: &r.config_hash,
            })
            .map_err(csv_error)?;
            tw.serialize(TimingCsv { axis: axis.name(), setting: &r.setting, seed: m.seed, planner_ms: *ms })
                .map_err(csv_error)?;
        }
        let col =
            |f: fn(&SeedMetrics) -> Option<f64>| format_mean_std(&r.per_seed.iter().filter_map(f).collect::<Vec<_>>());
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            r.setting,
            col(|m| m.success_rate),
            col(|m| m.reward),
            col(|m| m.log_divergence),
            format_mean_std(&r.planner_ms),
        ));
    }
    w.flush()?;
    tw.flush()?;
    fs::write(out.join("ablation_timing.md"), md)?;
    write_json(&out.join("ablation.json"), &rows)?;
    Ok(())
}

pub fn cmd_ablate(
    cfg: &RunConfig,
    axis: AblationAxis,
    checkpoints: &[PathBuf],
    scenarios: Option<&Path>,
    out: &Path,
) -> Result<Vec<AblationRow>> {
    let models = load_models(cfg, checkpoints)?;
    let suite = scenarios_or_suite(scenarios, cfg, EVAL_BASE, 0, cfg.evaluation.scenarios)?;
    let rows = ablate(cfg, axis, &models, &suite)?;
    write_ablation(axis, &rows, out)?;
    write_config(cfg, out)?;
    Ok(rows)
}

/// Collects the `summary.json` of each evaluation directory into one
/// table: `report.md` and `report.csv`.
pub fn cmd_report(inputs: &[PathBuf], out: &Path) -> Result<()> {
    let mut rows = Vec::new();
    for dir in inputs {
        let path = dir.join("summary.json");
        if !path.exists() {
            return Err(Error::Config(format!("{} has no summary.json", dir.display())));
        }
        let s: EvaluationSummary = serde_json::from_str(&fs::read_to_string(&path)?)?;
        let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        rows.push((name, s));
    }
    create_dir(out)?;
    let names: Vec<&str> = SeedMetrics::columns().iter().map(|(n, _)| *n).collect();
    let mut md = format!("| run | {} |\n|---|{}\n", names.join(" | "), "---|".repeat(names.len()));
    let mut w = csv_writer(&out.join("report.csv"))?;
    let mut header = vec!["run".to_string()];
    header.extend(names.iter().map(|n| n.to_string()));
    header.extend(["seeds".into(), "config_hash".into()]);
    w.write_record(&header).map_err(csv_error)?;
    for (name, s) in &rows {
        let cells: Vec<String> =
            names.iter().map(|n| s.mean_std.get(*n).cloned().unwrap_or_else(|| "-".into())).collect();
        md.push_str(&format!("| {name} | {} |\n", cells.join(" | ")));
        let seeds: Vec<String> = s.seeds.iter().map(u64::to_string).collect();
        let mut rec = vec![name.clone()];
        rec.extend(cells);
        rec.extend([seeds.join(" "), s.config_hash.clone()]);
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush()?;
    fs::write(out.join("report.md"), md)?;
    Ok(())
}
