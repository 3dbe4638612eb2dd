//! Run orchestration: one output directory per (config, seed), written by the
//! worker that owns it, and one manifest per invocation.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dts_core::trainer::{train_dts_iteration, StepInfo, TrainObserver, TrainState};
use dts_core::{EpochRecord, EvalResult, MismatchSplit, TrainedModels};

use crate::config::{ExperimentConfig, Override};
use crate::error::{CliError, CliResult};
use crate::manifest::{artifact_version, RunEntry, RunManifest, RunStatus};

pub const OUT_DIR_ENV: &str = "DTS_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "runs";

pub const SUMMARY_FILE: &str = "summary.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const AUROC_FILE: &str = "auroc_vs_epoch.csv";

/// Final figures of one completed run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis_value: Option<String>,
    pub config_hash: String,
    pub ablation: String,
    pub accuracy: f64,
    pub auroc: f64,
    pub epochs: usize,
    pub unlabeled_forwards: u64,
    pub final_eval: EvalResult,
}

/// Line of the metrics stream, tagged by `kind`.
#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum MetricLine<'a> {
    Step {
        iteration: usize,
        epoch: usize,
        step: usize,
        unlabeled_forwards: u64,
        #[serde(flatten)]
        losses: &'a dts_core::LossReport,
    },
    Epoch(&'a EpochRecord),
    Final(&'a EvalResult),
}

#[derive(Clone, Debug)]
pub struct Job {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub axis_value: Option<String>,
}

impl Job {
    pub fn dir_name(&self) -> String {
        format!("{}-seed{}", &self.config.hash()[..12], self.seed)
    }
}

pub fn out_root(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

pub fn dataset_id(config: &ExperimentConfig) -> String {
    match &config.dataset.path {
        Some(p) => format!("{:?}:{}", config.dataset.source, p.display()).to_lowercase(),
        None => "synthetic".into(),
    }
}

fn jobs_for(config: &ExperimentConfig, axis_value: Option<String>) -> Vec<Job> {
    config
        .seeds
        .iter()
        .map(|&seed| Job {
            config: config.for_seed(seed),
            seed,
            axis_value: axis_value.clone(),
        })
        .collect()
}

pub fn run_experiment(config: &ExperimentConfig, root: &Path, jobs: usize) -> CliResult<RunManifest> {
    let hash = config.hash();
    let out_dir = root.join(format!("run-{}", &hash[..12]));
    execute(jobs_for(config, None), &out_dir, config, hash, None, jobs)
}

/// Every sweep value is validated by building its full configuration before
/// any run starts.
pub fn sweep(
    base: &ExperimentConfig,
    build: impl Fn(&Override) -> CliResult<ExperimentConfig>,
    axis: &str,
    values: &[String],
    root: &Path,
    jobs: usize,
) -> CliResult<RunManifest> {
    let values: Vec<String> = values
        .iter()
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(CliError::Validation(format!("sweep over {axis}: values list is empty")));
    }
    let mut all = Vec::new();
    for v in &values {
        let o = Override { key: axis.to_string(), value: v.clone() };
        let config = build(&o).map_err(|e| match e {
            CliError::Validation(msg) => CliError::Validation(format!("sweep value {v:?} for {axis}: {msg}")),
            other => other,
        })?;
        all.extend(jobs_for(&config, Some(v.clone())));
    }
    let mut h = Sha256::new();
    h.update(base.hash());
    h.update(axis);
    for v in &values {
        h.update([0]);
        h.update(v);
    }
    let hash = hex::encode(h.finalize());
    let out_dir = root.join(format!("sweep-{}-{}", axis.replace('.', "_"), &hash[..12]));
    execute(all, &out_dir, base, base.hash(), Some(axis.to_string()), jobs)
}

fn execute(
    jobs: Vec<Job>,
    out_dir: &Path,
    base: &ExperimentConfig,
    config_hash: String,
    axis: Option<String>,
    threads: usize,
) -> CliResult<RunManifest> {
    fs::create_dir_all(out_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let runs: Vec<RunEntry> = pool.install(|| {
        use rayon::prelude::*;
        jobs.par_iter()
            .map(|job| {
                let dir = PathBuf::from(job.dir_name());
                let status = match run_one(job, &out_dir.join(&dir)) {
                    Ok(s) => {
                        eprintln!(
                            "{}: accuracy {:.4} auroc {:.4}",
                            dir.display(),
                            s.accuracy,
                            s.auroc
                        );
                        RunStatus::Completed
                    }
                    Err(e) => {
                        eprintln!("{}: failed: {e}", dir.display());
                        RunStatus::Failed { error: e.to_string() }
                    }
                };
                RunEntry {
                    seed: job.seed,
                    axis_value: job.axis_value.clone(),
                    config_hash: job.config.hash(),
                    dir,
                    status,
                }
            })
            .collect()
    });
    let manifest = RunManifest {
        config_hash,
        seeds: base.seeds.clone(),
        dataset: dataset_id(base),
        version: artifact_version(),
        out_dir: out_dir.to_path_buf(),
        axis,
        runs,
    };
    manifest.write()?;
    Ok(manifest)
}

struct RunObserver {
    dir: PathBuf,
    metrics: BufWriter<File>,
    io_error: Option<std::io::Error>,
}

impl RunObserver {
    fn line(&mut self, line: &MetricLine) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.metrics, line)?;
        self.metrics.write_all(b"\n")
    }

    fn take_error(&mut self) -> dts_core::Result<()> {
        match self.io_error.take() {
            Some(e) => Err(e.into()),
            None => Ok(()),
        }
    }
}

impl TrainObserver for RunObserver {
    fn on_step(&mut self, info: &StepInfo, _models: &TrainedModels) {
        if self.io_error.is_none() {
            let line = MetricLine::Step {
                iteration: info.iteration,
                epoch: info.epoch,
                step: info.step,
                unlabeled_forwards: info.unlabeled_forwards,
                losses: &info.report,
            };
            if let Err(e) = self.line(&line) {
                self.io_error = Some(e);
            }
        }
    }

    fn on_epoch(&mut self, record: &EpochRecord, _models: &TrainedModels) -> dts_core::Result<()> {
        self.take_error()?;
        self.line(&MetricLine::Epoch(record))?;
        self.metrics.flush()?;
        Ok(())
    }

    fn on_iteration_end(&mut self, iteration: usize, models: &TrainedModels) -> dts_core::Result<()> {
        save_checkpoints(models, &self.dir.join("checkpoints").join(format!("iter{iteration}")))
    }
}

/// One file per network: `<pair kind>_<teacher|student>.json`.
pub fn save_checkpoints(models: &TrainedModels, dir: &Path) -> dts_core::Result<()> {
    fs::create_dir_all(dir)?;
    for pair in models.pairs() {
        let kind = serde_json::to_value(pair.kind)?;
        let kind = kind.as_str().unwrap_or("pair");
        pair.teacher.save(&dir.join(format!("{kind}_teacher.json")))?;
        pair.student.save(&dir.join(format!("{kind}_student.json")))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn write_auroc_series(path: &Path, history: &[EpochRecord]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "iteration", "test_accuracy", "auroc"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.iteration.to_string(),
            r.test_accuracy.to_string(),
            r.auroc.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn build_split(job: &Job, dir: &Path) -> CliResult<MismatchSplit> {
    let split = job.config.build_split(job.seed)?;
    write_json(&dir.join("split_manifest.json"), split.manifest())?;
    Ok(split)
}

/// Trains and evaluates one seed. A failure after the teacher exists leaves
/// the current networks under `checkpoints/failed`.
pub fn run_one(job: &Job, dir: &Path) -> CliResult<RunSummary> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("effective_config.toml"), job.config.to_toml())?;
    let split = build_split(job, dir)?;

    let train = job.config.train.clone();
    let mut state = TrainState::new(train.clone(), &split)?;
    {
        let mut w = BufWriter::new(File::create(dir.join("pretrain.jsonl"))?);
        for r in &state.pretrain_history {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    let mut observer = RunObserver {
        dir: dir.to_path_buf(),
        metrics: BufWriter::new(File::create(dir.join(METRICS_FILE))?),
        io_error: None,
    };
    while state.iteration < train.iterations {
        if let Err(e) = train_dts_iteration(&mut state, &split, &mut observer) {
            let _ = observer.metrics.flush();
            save_checkpoints(&state.models, &dir.join("checkpoints").join("failed"))?;
            return Err(e.into());
        }
    }
    save_checkpoints(&state.models, &dir.join("checkpoints").join("final"))?;
    let outcome = state.finish(&split)?;
    observer.line(&MetricLine::Final(&outcome.final_eval))?;
    observer.metrics.flush()?;

    write_auroc_series(&dir.join(AUROC_FILE), &outcome.history)?;
    outcome.final_eval.score_histogram.write_csv(&dir.join("score_histogram.csv"))?;

    let summary = RunSummary {
        seed: job.seed,
        axis_value: job.axis_value.clone(),
        config_hash: job.config.hash(),
        ablation: train.ablation.name().to_string(),
        accuracy: outcome.final_eval.accuracy,
        auroc: outcome.final_eval.auroc,
        epochs: outcome.history.len(),
        unlabeled_forwards: outcome.history.last().map_or(0, |r| r.unlabeled_forwards),
        final_eval: outcome.final_eval,
    };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}
