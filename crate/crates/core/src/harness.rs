//! Experiment pipeline behind the command-line tool: data generation,
//! training, evaluation, analysis and seeded sweeps.
//!
//! Every output is a pure function of (config, seed). Directories are written
//! under a private temporary name and renamed into place when complete.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{kl_policy_divergence, scenario_report, spi_bound, BoundReport, RunSummary, ScenarioReport, KL_SMOOTHING};
use crate::config::{Environment, ExperimentConfig, KlOccupancy, Recipe, SplitKind};
use crate::datagen::{make_medium_replay, make_stage_dataset, play_trajectories, rollout_episode, split_directed, split_undirected, Stage};
use crate::dataset::{format_float, DatasetManifest, TaskDataset};
use crate::error::{CdsError, Result};
use crate::learner::{estimate_behavior_policy, log_to_csv, ProblemDims, TrainOutput};
use crate::mdp::{exact_policy_evaluation, state_occupancy, value_iteration, TabularPolicy};
use crate::rng::{child_seed, rng_from, substream_seed, DATAGEN, EVAL, TRAIN};
use crate::sharing::{admissions_to_csv, SharingStrategy, TEMPERATURE_DECAY, TEMPERATURE_INIT};

pub const SCENARIO_MANIFEST: &str = "scenario.json";
pub const RUN_MANIFEST: &str = "run_manifest.json";

pub fn dataset_file_name(task: usize) -> String {
    format!("task_{task}.data")
}

/// File-system-safe name of a strategy.
pub fn strategy_slug(strategy: &SharingStrategy) -> String {
    slug_of(&strategy.to_string())
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CdsError::Format(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Runs `fill` on a fresh sibling directory of `out`, then swaps it into place.
pub fn write_dir_atomically(out: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let name = out
        .file_name()
        .ok_or_else(|| CdsError::config("out", format!("{} has no file name", out.display())))?
        .to_string_lossy()
        .into_owned();
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(".{name}.partial-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    if let Err(e) = fill(&tmp) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if out.exists() {
        fs::remove_dir_all(out)?;
    }
    fs::rename(&tmp, out)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioManifest {
    pub name: String,
    pub seed: u64,
    pub task_names: Vec<String>,
    pub files: Vec<String>,
    pub datasets: Vec<DatasetManifest>,
}

/// Builds every task's dataset for `seed`.
pub fn generate_datasets(cfg: &ExperimentConfig, env: &Environment, seed: u64) -> Result<Vec<TaskDataset>> {
    let root = substream_seed(seed, DATAGEN);
    let mdp = &env.mdp;
    if let Some(play) = &cfg.play {
        let layout = env
            .layout
            .as_ref()
            .ok_or_else(|| CdsError::config("play", "play data needs a grid environment"))?;
        let trajs = play_trajectories(mdp, layout, play.trajectories, play.horizon, play.noise, child_seed(root, 0))?;
        return match play.split {
            SplitKind::Undirected => split_undirected(&trajs, mdp, child_seed(root, 1)),
            SplitKind::Directed => {
                let goals = match &cfg.environment {
                    crate::config::EnvironmentSpec::MultiGoalGrid(spec) => spec.goals.clone(),
                    _ => return Err(CdsError::config("play", "directed splits need grid goals")),
                };
                split_directed(&trajs, mdp, layout, &goals)
            }
        };
    }
    let mut out: Vec<Option<TaskDataset>> = vec![None; mdp.num_tasks];
    for recipe in &cfg.datasets {
        let s = child_seed(root, recipe.task as u64 ^ recipe.seed.rotate_left(17));
        let ds = match recipe.recipe {
            Recipe::MediumReplay => make_medium_replay(mdp, recipe.task, s, recipe.size, &cfg.behavior)?,
            Recipe::Medium => make_stage_dataset(mdp, recipe.task, Stage::Medium, recipe.size, s, &cfg.behavior)?,
            Recipe::Expert => make_stage_dataset(mdp, recipe.task, Stage::Expert, recipe.size, s, &cfg.behavior)?,
        };
        out[recipe.task] = Some(ds);
    }
    out.into_iter()
        .enumerate()
        .map(|(t, d)| d.ok_or_else(|| CdsError::config("datasets", format!("no dataset for task {t}"))))
        .collect()
}

fn write_datasets(dir: &Path, cfg: &ExperimentConfig, env: &Environment, seed: u64, data: &[TaskDataset]) -> Result<ScenarioManifest> {
    let mut files = Vec::new();
    for d in data {
        let name = dataset_file_name(d.task);
        fs::write(dir.join(&name), d.to_bytes()?)?;
        files.push(name);
    }
    let manifest = ScenarioManifest {
        name: cfg.name.clone(),
        seed,
        task_names: env.task_names.clone(),
        files,
        datasets: data.iter().map(|d| d.manifest.clone()).collect(),
    };
    fs::write(dir.join(SCENARIO_MANIFEST), to_json(&manifest)?)?;
    Ok(manifest)
}

pub fn cmd_generate_data(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<ScenarioManifest> {
    let env = cfg.environment.build()?;
    let data = generate_datasets(cfg, &env, seed)?;
    let mut manifest = None;
    write_dir_atomically(out, |dir| {
        manifest = Some(write_datasets(dir, cfg, &env, seed, &data)?);
        Ok(())
    })?;
    Ok(manifest.expect("written"))
}

pub fn load_datasets(dir: &Path) -> Result<Vec<TaskDataset>> {
    let manifest: ScenarioManifest = read_json(&dir.join(SCENARIO_MANIFEST))?;
    manifest
        .files
        .iter()
        .map(|f| {
            let file = fs::File::open(dir.join(f)).map_err(|e| CdsError::Format(format!("{f}: {e}")))?;
            TaskDataset::read_from(BufReader::new(file))
        })
        .collect()
}

/// Defaults and derived settings a run actually used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunDecisions {
    pub percentile: String,
    pub admission_ties: String,
    pub tau_init: f64,
    pub tau_decay: f64,
    pub tau_bounds: Option<(f64, f64)>,
    pub kl_smoothing: f64,
    pub kl_max: f64,
    pub kl_occupancy: KlOccupancy,
    pub q_cap: f64,
    pub q_floor: f64,
    pub cds_basic_table: String,
    pub rebuild_every_sweeps: usize,
    pub warmup_sweeps: usize,
    pub hipi_ties: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub strategy: String,
    pub strategy_tag: String,
    pub seed: u64,
    pub train_seed: u64,
    pub decisions: RunDecisions,
    pub config: ExperimentConfig,
}

/// Policies and counts needed to recompute bounds from a saved run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorArtifacts {
    /// Behavior policy of the original datasets.
    pub original: TabularPolicy,
    /// Behavior policy of the final effective datasets.
    pub effective: TabularPolicy,
    /// `|D_i^eff(s)|`, `[task][s]`.
    pub counts: Vec<Vec<f64>>,
}

/// Everything one (config, data, strategy, seed) cell produces.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub manifest: RunManifest,
    pub summary: RunSummary,
    pub j_star: Vec<f64>,
    pub bounds: Vec<BoundReport>,
    pub behavior: BehaviorArtifacts,
    pub output: TrainOutput,
}

fn decisions(cfg: &ExperimentConfig, strategy: &SharingStrategy, dims: &ProblemDims) -> RunDecisions {
    let tau_bounds = match strategy {
        SharingStrategy::CdsWeighted { tau_min, tau_max, .. } => Some((*tau_min, *tau_max)),
        _ => None,
    };
    RunDecisions {
        percentile: "nearest-rank".into(),
        admission_ties: "delta >= 0 admits".into(),
        tau_init: TEMPERATURE_INIT,
        tau_decay: TEMPERATURE_DECAY,
        tau_bounds,
        kl_smoothing: KL_SMOOTHING,
        kl_max: cfg.learner.kl_max,
        kl_occupancy: cfg.evaluation.kl_occupancy,
        q_cap: dims.q_cap(),
        q_floor: dims.q_floor(),
        cds_basic_table: "conservative".into(),
        rebuild_every_sweeps: cfg.learner.inner_sweeps,
        warmup_sweeps: cfg.learner.warmup_sweeps,
        hipi_ties: "lowest task id".into(),
    }
}

/// Computes every bound report of a run.
pub fn bound_reports(
    env: &Environment,
    policy: &TabularPolicy,
    behavior: &BehaviorArtifacts,
    cfg: &ExperimentConfig,
) -> Result<Vec<BoundReport>> {
    (0..env.mdp.num_tasks)
        .map(|task| {
            spi_bound(
                &env.mdp,
                policy,
                &behavior.original,
                &behavior.effective,
                &behavior.counts[task],
                task,
                &cfg.constants,
            )
        })
        .collect()
}

/// Trains one cell in memory.
pub fn run_training(cfg: &ExperimentConfig, env: &Environment, raw: &[TaskDataset], strategy: &SharingStrategy, seed: u64) -> Result<RunResult> {
    let mdp = &env.mdp;
    let dims = ProblemDims::from_mdp(mdp);
    let train_seed = substream_seed(seed, TRAIN);
    let output = crate::learner::train_multitask(mdp, raw, strategy, &cfg.learner, train_seed)?;
    let original = estimate_behavior_policy(raw, mdp.num_states, mdp.num_actions)?;
    let behavior = BehaviorArtifacts {
        original: original.to_policy(),
        effective: output.behavior.to_policy(),
        counts: output.effective.iter().map(|d| d.state_counts(mdp.num_states)).collect(),
    };
    let mut j = Vec::with_capacity(mdp.num_tasks);
    let mut kl = Vec::with_capacity(mdp.num_tasks);
    let mut j_star = Vec::with_capacity(mdp.num_tasks);
    for task in 0..mdp.num_tasks {
        j.push(exact_policy_evaluation(mdp, &output.policy, task)?);
        j_star.push(value_iteration(mdp, task, 1e-12)?.j_star(mdp));
        kl.push(match cfg.evaluation.kl_occupancy {
            KlOccupancy::Dataset => output.divergence[task].average,
            KlOccupancy::Policy => {
                let occ = state_occupancy(mdp, &output.policy, task)?;
                kl_policy_divergence(&output.policy, &output.behavior, &occ, task)?.average
            }
        });
    }
    let bounds = bound_reports(env, &output.policy, &behavior, cfg)?;
    let manifest = RunManifest {
        strategy: strategy.to_string(),
        strategy_tag: strategy.tag().to_string(),
        seed,
        train_seed,
        decisions: decisions(cfg, strategy, &dims),
        config: cfg.clone(),
    };
    Ok(RunResult {
        manifest,
        summary: RunSummary {
            strategy: strategy.to_string(),
            seed,
            j,
            kl,
        },
        j_star,
        bounds,
        behavior,
        output,
    })
}

fn write_run(dir: &Path, run: &RunResult) -> Result<()> {
    fs::write(dir.join(RUN_MANIFEST), to_json(&run.manifest)?)?;
    fs::write(dir.join("summary.json"), to_json(&run.summary)?)?;
    fs::write(dir.join("q_table.json"), to_json(&run.output.table)?)?;
    fs::write(dir.join("policy.json"), to_json(&run.output.policy)?)?;
    fs::write(dir.join("behavior.json"), to_json(&run.behavior)?)?;
    fs::write(dir.join("train_log.csv"), log_to_csv(&run.output.log))?;
    fs::write(dir.join("admissions.csv"), admissions_to_csv(&run.output.admissions))?;
    fs::write(dir.join("divergence.json"), to_json(&run.output.divergence)?)?;
    fs::write(dir.join("bounds.json"), to_json(&run.bounds)?)?;
    if let Some(t) = &run.output.temperature {
        fs::write(dir.join("temperature.json"), to_json(t)?)?;
    }
    Ok(())
}

pub fn cmd_train(cfg: &ExperimentConfig, data_dir: &Path, strategy: &SharingStrategy, seed: u64, out: &Path) -> Result<RunResult> {
    strategy
        .validate(cfg.environment.num_tasks())
        .map_err(|e| CdsError::config("strategy", e.to_string()))?;
    let env = cfg.environment.build()?;
    let raw = load_datasets(data_dir)?;
    let run = run_training(cfg, &env, &raw, strategy, seed)?;
    write_dir_atomically(out, |dir| write_run(dir, &run))?;
    Ok(run)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEvaluation {
    pub task: usize,
    pub name: String,
    pub j: f64,
    pub j_star: f64,
    pub normalized: f64,
    /// Mean discounted return of sampled episodes.
    pub sampled_return: f64,
    pub episodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub strategy: String,
    pub seed: u64,
    pub tasks: Vec<TaskEvaluation>,
    pub mean_j: f64,
}

/// Exact and sampled returns of a saved run's policy.
pub fn cmd_evaluate(run_dir: &Path) -> Result<EvaluationReport> {
    let manifest: RunManifest = read_json(&run_dir.join(RUN_MANIFEST))?;
    let policy: TabularPolicy = read_json(&run_dir.join("policy.json"))?;
    let cfg = &manifest.config;
    let env = cfg.environment.build()?;
    let mdp = &env.mdp;
    let mut rng = rng_from(substream_seed(manifest.seed, EVAL));
    let mut tasks = Vec::new();
    for task in 0..mdp.num_tasks {
        let j = exact_policy_evaluation(mdp, &policy, task)?;
        let j_star = value_iteration(mdp, task, 1e-12)?.j_star(mdp);
        let mut total = 0.0;
        for _ in 0..cfg.evaluation.episodes {
            let ep = rollout_episode(mdp, &policy, task, cfg.evaluation.horizon, &mut rng);
            total += ep.iter().rev().fold(0.0, |acc, t| t.r + mdp.discount * acc);
        }
        let episodes = cfg.evaluation.episodes;
        tasks.push(TaskEvaluation {
            task,
            name: env.task_names[task].clone(),
            j,
            j_star,
            normalized: if j_star != 0.0 { j / j_star } else { 0.0 },
            sampled_return: if episodes > 0 { total / episodes as f64 } else { 0.0 },
            episodes,
        });
    }
    let mean_j = tasks.iter().map(|t| t.j).sum::<f64>() / tasks.len() as f64;
    let report = EvaluationReport {
        strategy: manifest.strategy.clone(),
        seed: manifest.seed,
        tasks,
        mean_j,
    };
    fs::write(run_dir.join("evaluation.json"), to_json(&report)?)?;
    Ok(report)
}

/// Cross-run comparison plus per-run bound reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOutput {
    pub scenario: ScenarioReport,
    /// Tasks on which every share-all run's mean D_KL exceeds no-share's.
    pub kl_ordering_flags: Vec<KlFlag>,
    pub bounds: BTreeMap<String, Vec<BoundReport>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlFlag {
    pub task: usize,
    pub share_all_kl: f64,
    pub no_share_kl: f64,
    pub share_all_larger: bool,
}

fn kl_flags(scenario: &ScenarioReport) -> Vec<KlFlag> {
    let (all, none) = ("share-all", "no-share");
    (0..scenario.num_tasks)
        .filter_map(|task| {
            let a = scenario.row(all, Some(task))?;
            let n = scenario.row(none, Some(task))?;
            Some(KlFlag {
                task,
                share_all_kl: a.kl,
                no_share_kl: n.kl,
                share_all_larger: a.kl > n.kl,
            })
        })
        .collect()
}

pub fn cmd_analyze(run_dirs: &[PathBuf], out: &Path) -> Result<AnalysisOutput> {
    if run_dirs.is_empty() {
        return Err(CdsError::config("runs", "need at least one run directory"));
    }
    let mut summaries = Vec::new();
    let mut bounds = BTreeMap::new();
    for dir in run_dirs {
        let manifest: RunManifest = read_json(&dir.join(RUN_MANIFEST))?;
        let summary: RunSummary = read_json(&dir.join("summary.json"))?;
        let policy: TabularPolicy = read_json(&dir.join("policy.json"))?;
        let behavior: BehaviorArtifacts = read_json(&dir.join("behavior.json"))?;
        let env = manifest.config.environment.build()?;
        let reports = bound_reports(&env, &policy, &behavior, &manifest.config)?;
        bounds.insert(format!("{}/seed-{}", manifest.strategy, manifest.seed), reports);
        summaries.push(summary);
    }
    let scenario = scenario_report(&summaries)?;
    let output = AnalysisOutput {
        kl_ordering_flags: kl_flags(&scenario),
        scenario,
        bounds,
    };
    write_dir_atomically(out, |dir| {
        fs::write(dir.join("scenario.csv"), output.scenario.to_csv())?;
        fs::write(dir.join("scenario.json"), to_json(&output.scenario)?)?;
        fs::write(dir.join("bounds.json"), to_json(&output.bounds)?)?;
        fs::write(dir.join("kl_flags.json"), to_json(&output.kl_ordering_flags)?)?;
        Ok(())
    })?;
    Ok(output)
}

/// Mean and 95% half-width `1.96 sd / √n` (sample standard deviation; 0 for n = 1).
pub fn mean_and_half_width(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub strategy: String,
    pub task: Option<usize>,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub half_width: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub strategy: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub runs: Vec<RunResult>,
    pub aggregate: Vec<AggregateRow>,
    pub failures: Vec<CellFailure>,
}

pub const AGGREGATE_HEADER: &str = "strategy,task,metric,n,mean,half_width";

pub fn aggregate_to_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from(AGGREGATE_HEADER);
    out.push('\n');
    for r in rows {
        let task = r.task.map_or_else(|| "mean".to_string(), |t| t.to_string());
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.strategy,
            task,
            r.metric,
            r.n,
            format_float(r.mean),
            format_float(r.half_width)
        ));
    }
    out
}

pub fn aggregate(runs: &[RunResult], strategies: &[SharingStrategy], num_tasks: usize) -> Vec<AggregateRow> {
    let mut rows = Vec::new();
    for strategy in strategies {
        let name = strategy.to_string();
        let group: Vec<&RunResult> = runs.iter().filter(|r| r.summary.strategy == name).collect();
        if group.is_empty() {
            continue;
        }
        for task in (0..num_tasks).map(Some).chain([None]) {
            for metric in ["J", "D_KL"] {
                let pick = |r: &RunResult| -> f64 {
                    let v = if metric == "J" { &r.summary.j } else { &r.summary.kl };
                    match task {
                        Some(t) => v[t],
                        None => v.iter().sum::<f64>() / v.len() as f64,
                    }
                };
                let values: Vec<f64> = group.iter().map(|r| pick(r)).collect();
                let (mean, half_width) = mean_and_half_width(&values);
                rows.push(AggregateRow {
                    strategy: name.clone(),
                    task,
                    metric: metric.to_string(),
                    n: values.len(),
                    mean,
                    half_width,
                });
            }
        }
    }
    rows
}

/// Runs every (seed, strategy) cell in memory on a pool of `jobs` threads.
pub fn run_sweep(cfg: &ExperimentConfig, seeds: &[u64], strategies: &[SharingStrategy], jobs: usize) -> Result<SweepReport> {
    let env = cfg.environment.build()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CdsError::InvalidSpec(e.to_string()))?;
    pool.install(|| {
        let data: Vec<Result<Vec<TaskDataset>>> = seeds.par_iter().map(|&s| generate_datasets(cfg, &env, s)).collect();
        let cells: Vec<(usize, &SharingStrategy)> = (0..seeds.len())
            .flat_map(|k| strategies.iter().map(move |st| (k, st)))
            .collect();
        let results: Vec<std::result::Result<RunResult, CellFailure>> = cells
            .par_iter()
            .map(|&(k, strategy)| {
                let fail = |e: CdsError| CellFailure {
                    strategy: strategy.to_string(),
                    seed: seeds[k],
                    error: e.to_string(),
                };
                let raw = data[k].as_ref().map_err(|e| fail(CdsError::InvalidSpec(format!("data generation: {e}"))))?;
                run_training(cfg, &env, raw, strategy, seeds[k]).map_err(fail)
            })
            .collect();
        let mut runs = Vec::new();
        let mut failures = Vec::new();
        for r in results {
            match r {
                Ok(run) => runs.push(run),
                Err(f) => failures.push(f),
            }
        }
        let aggregate = aggregate(&runs, strategies, env.mdp.num_tasks);
        Ok(SweepReport { runs, aggregate, failures })
    })
}

/// Sweep with on-disk outputs: one directory per cell plus the aggregate.
pub fn cmd_sweep(cfg: &ExperimentConfig, seeds: &[u64], strategies: &[SharingStrategy], jobs: usize, out: &Path) -> Result<SweepReport> {
    if seeds.is_empty() {
        return Err(CdsError::config("seeds", "must not be empty"));
    }
    if strategies.is_empty() {
        return Err(CdsError::config("strategies", "must not be empty"));
    }
    for s in strategies {
        s.validate(cfg.environment.num_tasks())
            .map_err(|e| CdsError::config("strategies", e.to_string()))?;
    }
    let report = run_sweep(cfg, seeds, strategies, jobs)?;
    write_dir_atomically(out, |dir| {
        for run in &report.runs {
            let cell = dir
                .join(format!("seed-{}", run.manifest.seed))
                .join(slug_of(&run.manifest.strategy));
            fs::create_dir_all(&cell)?;
            write_run(&cell, run)?;
        }
        fs::write(dir.join("aggregate.csv"), aggregate_to_csv(&report.aggregate))?;
        let summaries: Vec<&RunSummary> = report.runs.iter().map(|r| &r.summary).collect();
        fs::write(dir.join("runs.json"), to_json(&summaries)?)?;
        fs::write(dir.join("failures.json"), to_json(&report.failures)?)?;
        Ok(())
    })?;
    Ok(report)
}

fn slug_of(name: &str) -> String {
    name.replace([':', '.'], "_")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ExperimentConfig {
        let text = include_str!("../../../configs/corridor.toml")
            .replace("size = 10000", "size = 600")
            .replace("size = 3000", "size = 200")
            .replace("strategies = [\"no-share\", \"share-all\", \"cds-quantile:50\"]", "strategies = [\"no-share\", \"cds-weighted\"]");
        ExperimentConfig::from_toml(&text).unwrap()
    }

    #[test]
    fn half_width_convention() {
        let (m, h) = mean_and_half_width(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        let sd = (5.0f64 / 3.0).sqrt();
        assert!((h - 1.96 * sd / 2.0).abs() < 1e-15);
        assert_eq!(mean_and_half_width(&[7.0]), (7.0, 0.0));
        assert!(mean_and_half_width(&[]).0.is_nan());
    }

    #[test]
    fn slugs_are_path_safe() {
        let s: SharingStrategy = "cds-weighted:50:1:50".parse().unwrap();
        assert!(!strategy_slug(&s).contains([':', '.', '/']));
        assert_eq!(slug_of("cds-quantile:12.5"), "cds-quantile_12_5");
    }

    #[test]
    fn atomic_write_replaces_and_cleans_up() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("run");
        write_dir_atomically(&out, |d| Ok(fs::write(d.join("a"), "1")?)).unwrap();
        write_dir_atomically(&out, |d| Ok(fs::write(d.join("b"), "2")?)).unwrap();
        assert!(!out.join("a").exists() && out.join("b").exists());
        let err = write_dir_atomically(&out, |_| Err(CdsError::Format("boom".into())));
        assert!(err.is_err());
        // failed fills leave the previous output alone and no partial directory behind
        assert!(out.join("b").exists());
        assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 1);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let cfg = small_cfg();
        let env = cfg.environment.build().unwrap();
        let strategies = cfg.strategies().unwrap();
        let a = run_sweep(&cfg, &[3], &strategies, 1).unwrap();
        let b = run_sweep(&cfg, &[3], &strategies, 2).unwrap();
        assert!(a.failures.is_empty());
        assert_eq!(aggregate_to_csv(&a.aggregate), aggregate_to_csv(&b.aggregate));
        for (x, y) in a.runs.iter().zip(&b.runs) {
            assert_eq!(x.summary, y.summary);
            assert_eq!(x.output.table, y.output.table);
        }
        let raw = generate_datasets(&cfg, &env, 3).unwrap();
        let other = generate_datasets(&cfg, &env, 4).unwrap();
        assert_ne!(raw[0].transitions, other[0].transitions);
        let weighted = &a.runs[1];
        assert_eq!(weighted.manifest.decisions.tau_bounds, Some((1.0, 50.0)));
        assert!(weighted.output.temperature.is_some());
    }

    #[test]
    fn aggregate_has_a_row_per_cell_metric() {
        let cfg = small_cfg();
        let strategies = cfg.strategies().unwrap();
        let report = run_sweep(&cfg, &[0, 1], &strategies, 2).unwrap();
        assert_eq!(report.runs.len(), 4);
        assert_eq!(report.aggregate.len(), 2 * 4 * 2);
        assert!(report.aggregate.iter().all(|r| r.n == 2));
    }
}
