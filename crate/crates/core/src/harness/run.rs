//! Whole lifelong runs, their run directories and reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{compute_metrics, eval_seeds, Finalization, Learner, Metrics, SuccessMatrix, TaskDemos};
use crate::autodiff::ParamStore;
use crate::checkpoint::save_policy;
use crate::config::{Method, RunConfig};
use crate::error::{Error, Result};
use crate::library::Submodule;
use crate::policy::{Episode, Policy, RouteAudit};
use crate::rng::SeedTree;
use crate::router::raw_index;
use crate::world::{collect_demonstrations, generate_pretrain_suite, generate_suite, read_suite, write_demos, write_suite, TaskSpec};

/// The lifelong suite named by the config: read from `suite` or generated.
pub fn lifelong_suite(config: &RunConfig) -> Result<Vec<TaskSpec>> {
    match &config.suite {
        Some(path) => read_suite(path),
        None => generate_suite(config.suite_seed, config.family, config.num_tasks),
    }
}

pub fn pretrain_suite(config: &RunConfig, lifelong: &[TaskSpec]) -> Result<Vec<TaskSpec>> {
    generate_pretrain_suite(config.suite_seed, config.pretrain.tasks, lifelong)
}

/// Scripted demonstrations for every task, seeded from the suite seed so
/// that every run seed and method sees the same data.
pub fn collect_suite(tasks: &[TaskSpec], per_task: usize, suite_seed: u64, grid: usize) -> Result<Vec<TaskDemos>> {
    let seed = SeedTree::new(suite_seed).child("demos").seed;
    tasks
        .iter()
        .map(|t| TaskDemos::new(t.clone(), collect_demonstrations(t, per_task, seed, grid)?))
        .collect()
}

/// Pretrains a base policy on the mixed suite that excludes `lifelong`.
/// Returns the policy, its parameters and the pretraining demonstrations.
pub fn pretrain_base(config: &RunConfig, lifelong: &[TaskSpec]) -> Result<(Policy, ParamStore<f32>, Vec<TaskDemos>)> {
    let tasks = pretrain_suite(config, lifelong)?;
    let demos = collect_suite(&tasks, config.pretrain.demos_per_task, config.suite_seed, config.policy.grid)?;
    let (policy, store, log) = super::pretrain(config, &demos, config.suite_seed)?;
    log::info!("pretrained for {} steps, final loss {:?}", log.steps, log.epoch_loss.last());
    Ok((policy, store, demos))
}

/// Base-policy success rate on each task over seeded episodes.
pub fn base_success(policy: &Policy, store: &ParamStore<f32>, tasks: &[TaskSpec], episodes: usize, seed: u64) -> Result<Vec<f64>> {
    tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let seeds = eval_seeds(seed, i, 0, episodes);
            Ok(crate::policy::evaluate(policy, store, t, &crate::policy::Routing::Base, &seeds, 1)?.success_rate)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub cr_entries: usize,
    pub cr_bytes: usize,
    /// Bytes of every learned task's demonstrations, observations plus actions.
    pub demo_bytes: usize,
    /// Bytes held by the experience replay buffer.
    pub replay_bytes: usize,
    pub cr_to_demo_ratio: f64,
    pub trainable_params: usize,
}

/// `task_k, submodule, expert_j, mean_coefficient`, one-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub task_k: usize,
    pub submodule: String,
    pub expert_j: usize,
    pub mean_coefficient: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub seed: u64,
    pub suite: String,
    pub fwt: f64,
    pub nbt: f64,
    pub auc: f64,
    pub trainable_params: usize,
    pub cr_bytes: usize,
    pub demo_bytes: usize,
}

pub struct RunResult {
    pub matrix: SuccessMatrix,
    pub metrics: Metrics,
    pub coefficients: Vec<CoefficientRow>,
    pub storage: StorageReport,
    /// Every frozen expert kept its checksum through the whole run.
    pub frozen_intact: bool,
    /// Every coefficient vector routed during evaluation.
    pub routes: RouteAudit,
    pub finalizations: Vec<Finalization>,
    pub learner: Learner,
}

impl RunResult {
    pub fn metrics_row(&self) -> MetricsRow {
        let c = &self.learner.config;
        MetricsRow {
            method: c.method.name().into(),
            seed: c.seed,
            suite: suite_label(c),
            fwt: self.metrics.fwt,
            nbt: self.metrics.nbt,
            auc: self.metrics.auc,
            trainable_params: self.storage.trainable_params,
            cr_bytes: self.storage.cr_bytes,
            demo_bytes: self.storage.demo_bytes,
        }
    }
}

pub fn suite_label(config: &RunConfig) -> String {
    match &config.suite {
        Some(p) => p.file_stem().map_or("suite".into(), |s| s.to_string_lossy().into_owned()),
        None => format!("{}-{}", config.family.name(), config.num_tasks),
    }
}

/// Mean coefficient per `(submodule, expert)` over every step of `episodes`,
/// raw layout for `k` experts.
fn mean_coefficients(episodes: &[Episode], k: usize) -> Vec<f64> {
    let steps: usize = episodes.iter().map(|e| e.steps).sum();
    let mut sum = vec![0.0; 6 * k];
    for e in episodes {
        for (s, v) in sum.iter_mut().zip(&e.coeff_sum) {
            *s += v;
        }
    }
    if steps > 0 {
        sum.iter_mut().for_each(|s| *s /= steps as f64);
    }
    sum
}

/// Trains and evaluates `suite` task by task from a pretrained policy,
/// writing artefacts into `out` when given.
pub fn run_lifelong(
    config: RunConfig,
    base: (Policy, ParamStore<f32>),
    suite: &[TaskDemos],
    out: Option<&Path>,
) -> Result<RunResult> {
    if suite.is_empty() {
        return Err(Error::contract("empty lifelong suite"));
    }
    let epochs = config.checkpoint_epochs();
    if epochs.is_empty() {
        return Err(Error::Config {
            key: "epochs_per_task".into(),
            message: format!("{} epochs with eval_every {} leave no checkpoint", config.epochs_per_task, config.eval_every),
        });
    }
    let kk = suite.len();
    let mut learner = Learner::new(config, base.0, base.1)?;
    let c = learner.config.clone();
    let mut matrix = SuccessMatrix::new(kk, epochs.clone());
    let mut coeff_means: Vec<Vec<f64>> = Vec::new();
    let mut finalizations = Vec::new();
    let mut frozen_intact = true;
    let mut frozen = Vec::new();
    let mut routes = RouteAudit::default();
    let mut audit = |r: &crate::policy::EvalResult| r.episodes.iter().for_each(|e| routes.merge(&e.routes));
    for (k, demos) in suite.iter().enumerate() {
        learner.begin_task(k)?;
        let training = learner.train_on_task(k, demos)?;
        let mut rates = Vec::with_capacity(training.checkpoints.len());
        let mut evals = Vec::with_capacity(training.checkpoints.len());
        for (ci, (_, snap)) in training.checkpoints.iter().enumerate() {
            learner.store.restore(snap);
            let r = learner.evaluate_task(demos, k, &eval_seeds(c.seed, k, ci, c.eval_episodes))?;
            rates.push(r.success_rate);
            audit(&r);
            evals.push(r);
        }
        let best = matrix.record_checkpoints(k, &rates)?;
        learner.store.restore(&training.checkpoints[best.index].1);
        log::info!(
            "{} seed {} task {}: checkpoint rates {:?}, best epoch {}",
            c.method.name(),
            c.seed,
            k + 1,
            rates,
            epochs[best.index]
        );
        if c.method == Method::Dmpel {
            coeff_means.push(mean_coefficients(&evals[best.index].episodes, learner.policy.library.k()));
        }
        finalizations.push(learner.finalize_task(k, demos)?);
        for j in 0..k {
            let seeds = eval_seeds(c.seed, j, matrix.best_checkpoint[j].expect("recorded"), c.eval_episodes);
            let r = learner.evaluate_task(&suite[j], j, &seeds)?;
            audit(&r);
            matrix.record_final(k, j, r.success_rate)?;
        }
        let now = learner.policy.library.frozen_checksums(&learner.store);
        frozen_intact &= frozen.iter().all(|f| now.contains(f));
        frozen = now;
        if let Some(dir) = out {
            save_policy(&dir.join("checkpoints").join(format!("task{}.ckpt", k + 1)), &learner.policy, &learner.store, c.seed)?;
        }
    }
    let metrics = compute_metrics(&matrix)?;
    let coefficients = coefficient_rows(&coeff_means, kk);
    let demo_bytes = suite.iter().map(|d| d.bytes()).sum();
    let storage = StorageReport {
        cr_entries: learner.cr.len(),
        cr_bytes: learner.cr.bytes(),
        demo_bytes,
        replay_bytes: learner.replay.bytes(),
        cr_to_demo_ratio: learner.cr.bytes() as f64 / demo_bytes as f64,
        trainable_params: learner.lifelong_parameter_count(),
    };
    let result = RunResult {
        matrix,
        metrics,
        coefficients,
        storage,
        frozen_intact,
        routes,
        finalizations,
        learner,
    };
    if let Some(dir) = out {
        write_results(dir, &result)?;
    }
    Ok(result)
}

/// `6·K·K` rows for a routed run; experts not yet created average 0.
fn coefficient_rows(means: &[Vec<f64>], kk: usize) -> Vec<CoefficientRow> {
    let mut rows = Vec::new();
    for (k, m) in means.iter().enumerate() {
        let k_lib = m.len() / 6;
        for sub in Submodule::ALL {
            for j in 0..kk {
                rows.push(CoefficientRow {
                    task_k: k + 1,
                    submodule: sub.name().into(),
                    expert_j: j + 1,
                    mean_coefficient: if j < k_lib { m[raw_index(sub, j)] } else { 0.0 },
                });
            }
        }
    }
    rows
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        offset: e.position().map_or(0, |p| p.byte() as usize),
        message: format!("{}: {e}", path.display()),
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    io(path, w.flush())
}

pub const METRICS_HEADER: [&str; 9] = [
    "method",
    "seed",
    "suite",
    "fwt",
    "nbt",
    "auc",
    "trainable_params",
    "cr_bytes",
    "demo_bytes",
];

pub const COEFFICIENTS_HEADER: [&str; 4] = ["task_k", "submodule", "expert_j", "mean_coefficient"];

/// Creates a fresh run directory; an existing one is never reused.
pub fn create_run_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        return Err(Error::contract(format!(
            "run directory {} already exists; runs are never overwritten",
            dir.display()
        )));
    }
    io(dir, std::fs::create_dir_all(dir.join("checkpoints")))?;
    io(dir, std::fs::create_dir_all(dir.join("demos")))
}

/// Echoes the effective config, the suite and its demonstrations.
pub fn write_inputs(dir: &Path, config: &RunConfig, suite: &[TaskDemos]) -> Result<()> {
    let path = dir.join("config.json");
    io(&path, std::fs::write(&path, serde_json::to_string_pretty(config)?))?;
    let tasks: Vec<TaskSpec> = suite.iter().map(|d| d.task.clone()).collect();
    write_suite(&dir.join("suite.json"), &tasks)?;
    for (k, d) in suite.iter().enumerate() {
        write_demos(&dir.join("demos").join(format!("task{}.bin", k + 1)), &d.demos)?;
    }
    Ok(())
}

fn write_results(dir: &Path, r: &RunResult) -> Result<()> {
    r.matrix.write(&dir.join("success_matrix.json"))?;
    write_csv(&dir.join("metrics.csv"), &[r.metrics_row()], &METRICS_HEADER)?;
    write_csv(&dir.join("coefficients.csv"), &r.coefficients, &COEFFICIENTS_HEADER)?;
    let path = dir.join("storage.json");
    io(&path, std::fs::write(&path, serde_json::to_string_pretty(&r.storage)?))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    rd.deserialize().map(|r| r.map_err(|e| csv_err(path, e))).collect()
}

/// Mean and sample standard deviation of each metric per `(method, suite)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub suite: String,
    pub runs: usize,
    pub fwt_mean: f64,
    pub fwt_std: f64,
    pub nbt_mean: f64,
    pub nbt_std: f64,
    pub auc_mean: f64,
    pub auc_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(rows: &[MetricsRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, String), Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.method.clone(), r.suite.clone())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((method, suite), g)| {
            let col = |f: fn(&MetricsRow) -> f64| mean_std(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (fwt_mean, fwt_std) = col(|r| r.fwt);
            let (nbt_mean, nbt_std) = col(|r| r.nbt);
            let (auc_mean, auc_std) = col(|r| r.auc);
            SummaryRow {
                method,
                suite,
                runs: g.len(),
                fwt_mean,
                fwt_std,
                nbt_mean,
                nbt_std,
                auc_mean,
                auc_std,
            }
        })
        .collect()
}

/// Reads `metrics.csv` of every run directory and writes the summary.
pub fn report(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::new();
    for d in run_dirs {
        rows.extend(read_metrics(&d.join("metrics.csv"))?);
    }
    if rows.is_empty() {
        return Err(Error::contract("no runs to report"));
    }
    let summary = summarize(&rows);
    let mut w = csv::Writer::from_path(out).map_err(|e| csv_err(out, e))?;
    for r in &summary {
        w.serialize(r).map_err(|e| csv_err(out, e))?;
    }
    io(out, w.flush())?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, seed: u64, nbt: f64) -> MetricsRow {
        MetricsRow {
            method: method.into(),
            seed,
            suite: "goal-5".into(),
            fwt: 0.5,
            nbt,
            auc: 0.4,
            trainable_params: 10,
            cr_bytes: 0,
            demo_bytes: 0,
        }
    }

    #[test]
    fn summary_groups_by_method() {
        let rows = [row("dmpel", 0, 0.1), row("dmpel", 1, 0.3), row("dmpel", 2, 0.2), row("er", 0, 0.5)];
        let s = summarize(&rows);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].runs, 3);
        assert!((s[0].nbt_mean - 0.2).abs() < 1e-12);
        assert!((s[0].nbt_std - 0.1).abs() < 1e-12);
        assert_eq!((s[1].runs, s[1].nbt_std), (1, 0.0));
    }

    #[test]
    fn coefficient_rows_cover_every_pair() {
        let means = vec![vec![1.0; 6], vec![0.5; 12], vec![0.25; 18]];
        let rows = coefficient_rows(&means, 3);
        assert_eq!(rows.len(), 6 * 3 * 3);
        let first = rows.iter().find(|r| r.task_k == 1 && r.expert_j == 1).unwrap();
        assert_eq!(first.mean_coefficient, 1.0);
        assert!(rows.iter().filter(|r| r.task_k == 1 && r.expert_j > 1).all(|r| r.mean_coefficient == 0.0));
    }

    #[test]
    fn metrics_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.csv");
        let rows = [row("dmpel", 3, 0.125)];
        write_csv(&p, &rows, &METRICS_HEADER).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("method,seed,suite,fwt,nbt,auc,trainable_params,cr_bytes,demo_bytes\n"));
        assert_eq!(read_metrics(&p).unwrap(), rows);
        let out = dir.path().join("summary.csv");
        assert!(report(&[dir.path().to_path_buf()], &out).unwrap()[0].nbt_mean == 0.125);
    }

    #[test]
    fn run_directories_are_never_reused() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("run");
        create_run_dir(&run).unwrap();
        assert!(create_run_dir(&run).is_err());
    }
}
