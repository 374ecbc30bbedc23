//! Experiment matrix: (method × seed) runs, result files and metric recomputation.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::NetworkShape;
use crate::drift::ProbeSettings;
use crate::error::{Error, Result};
use crate::metrics::{AccuracyMatrix, Summary};
use crate::pca::PcaParams;
use crate::task::{TaskSpec, DEFAULT_NOISE};
use crate::trainer::{reference_accuracies, run_stream, Method, RunConfig, RunRecord, StepLog};

/// Environment variable capping the number of runs executed in parallel.
pub const THREADS_ENV: &str = "DOC_TUNER_THREADS";

/// Everything a `run` needs. Every field has a default, so `{}` is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub tasks: usize,
    pub steps_per_task: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub network: NetworkShape,
    pub pca: PcaParams,
    pub cap_increment: usize,
    pub ablation_init_fraction: f64,
    pub literal_cut_mode: bool,
    pub historical_only: bool,
    pub samples_train: usize,
    pub samples_eval: usize,
    pub noise: f64,
    /// Train isolated per-task references so FWT can be reported.
    pub reference: bool,
    pub probe: ProbeSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let run = RunConfig::default();
        Self {
            methods: vec![Method::Doc, Method::SeqLora, Method::DocAblation],
            seeds: vec![0, 1, 2],
            tasks: 5,
            steps_per_task: run.steps_per_task,
            lr: run.lr,
            batch_size: run.batch_size,
            network: run.network,
            pca: run.pca,
            cap_increment: run.cap_increment,
            ablation_init_fraction: run.ablation_init_fraction,
            literal_cut_mode: run.literal_cut_mode,
            historical_only: run.historical_only,
            samples_train: 2000,
            samples_eval: 1000,
            noise: DEFAULT_NOISE,
            reference: true,
            probe: ProbeSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Validation(format!("config {}: {e}", path.display())))
    }

    pub fn run_config(&self, method: Method, seed: u64) -> RunConfig {
        RunConfig {
            method,
            lr: self.lr,
            batch_size: self.batch_size,
            steps_per_task: self.steps_per_task,
            network: self.network,
            pca: self.pca,
            cap_increment: self.cap_increment,
            ablation_init_fraction: self.ablation_init_fraction,
            seed,
            literal_cut_mode: self.literal_cut_mode,
            historical_only: self.historical_only,
        }
    }

    /// The task stream for one seed.
    pub fn task_specs(&self, seed: u64) -> Vec<TaskSpec> {
        (0..self.tasks as u32)
            .map(|i| TaskSpec {
                samples_train: self.samples_train,
                samples_eval: self.samples_eval,
                noise: self.noise,
                ..TaskSpec::for_stream(seed, i, self.network.input_dim, self.network.class_count)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.seeds.is_empty() {
            return Err(Error::Validation("config needs at least one method and one seed".into()));
        }
        if self.tasks == 0 {
            return Err(Error::Validation("config needs at least one task".into()));
        }
        if self.probe.interval == 0 || self.probe.anchors == 0 {
            return Err(Error::Validation("probe interval and anchor count must be >= 1".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for &m in &self.methods {
            if !seen.insert(m) {
                return Err(Error::Validation(format!("method {m} listed twice")));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for &s in &self.seeds {
            if !seen.insert(s) {
                return Err(Error::Validation(format!("seed {s} listed twice")));
            }
        }
        self.run_config(self.methods[0], self.seeds[0]).validate()?;
        for spec in self.task_specs(self.seeds[0]) {
            spec.validate()?;
        }
        Ok(())
    }
}

/// Metrics of one run as written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub seed: u64,
    pub aa: f64,
    pub bwt: Option<f64>,
    pub fwt: Option<f64>,
    pub final_components: usize,
    pub mean_step_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodMedians {
    pub aa: f64,
    pub bwt: Option<f64>,
    pub fwt: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub runs: Vec<RunSummary>,
    pub medians: BTreeMap<String, MethodMedians>,
}

/// Median of the values; `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn medians_of(runs: &[RunSummary]) -> BTreeMap<String, MethodMedians> {
    let mut by_method: BTreeMap<String, Vec<&RunSummary>> = BTreeMap::new();
    for r in runs {
        by_method.entry(r.method.name().to_string()).or_default().push(r);
    }
    by_method
        .into_iter()
        .map(|(name, rs)| {
            let pick = |f: fn(&RunSummary) -> Option<f64>| {
                let vals: Vec<f64> = rs.iter().filter_map(|r| f(r)).collect();
                if vals.len() == rs.len() {
                    median(&vals)
                } else {
                    None
                }
            };
            let aa = pick(|r| Some(r.aa)).unwrap_or(f64::NAN);
            (
                name,
                MethodMedians {
                    aa,
                    bwt: pick(|r| r.bwt),
                    fwt: pick(|r| r.fwt),
                },
            )
        })
        .collect()
}

impl ExperimentSummary {
    pub fn from_runs(runs: Vec<RunSummary>) -> Self {
        let medians = medians_of(&runs);
        Self { runs, medians }
    }

    pub fn run(&self, method: Method, seed: u64) -> Option<&RunSummary> {
        self.runs.iter().find(|r| r.method == method && r.seed == seed)
    }
}

/// Directory name of one run inside the output directory.
pub fn run_dir_name(method: Method, seed: u64) -> String {
    format!("{}-seed{seed}", method.name())
}

/// A finished run together with its record.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub record: RunRecord,
}

/// Runs every (method, seed) pair and returns outcomes in config order.
pub fn run_matrix(cfg: &ExperimentConfig) -> Result<Vec<RunOutcome>> {
    cfg.validate()?;
    let threads = thread_cap()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;

    let references: Vec<Option<Vec<f64>>> = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                if cfg.reference {
                    let rc = cfg.run_config(Method::SeqLora, seed);
                    reference_accuracies(&rc, &cfg.task_specs(seed)).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_>>()
    })?;

    let jobs: Vec<(Method, usize)> = cfg
        .methods
        .iter()
        .flat_map(|&m| (0..cfg.seeds.len()).map(move |s| (m, s)))
        .collect();
    pool.install(|| {
        jobs.par_iter()
            .map(|&(method, si)| {
                let seed = cfg.seeds[si];
                let mut record = run_stream(&cfg.run_config(method, seed), &cfg.task_specs(seed))?;
                if let Some(reference) = &references[si] {
                    record.accuracy_matrix.set_reference(reference.clone())?;
                }
                let Summary { aa, bwt, fwt } = record.accuracy_matrix.summary()?;
                let summary = RunSummary {
                    method,
                    seed,
                    aa,
                    bwt,
                    fwt,
                    final_components: record.logs.last().map_or(0, |l| l.component_count),
                    mean_step_seconds: record.mean_step_seconds(),
                };
                Ok(RunOutcome { summary, record })
            })
            .collect()
    })
}

fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::Validation(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

pub fn write_logs_csv<W: Write>(logs: &[StepLog], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["step", "task", "loss", "residual_rate", "component_count", "epsilon"])?;
    for l in logs {
        w.write_record([
            l.step.to_string(),
            l.task.to_string(),
            l.loss.to_string(),
            l.residual_rate.map_or(String::new(), |r| r.to_string()),
            l.component_count.to_string(),
            l.epsilon.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("logs.csv", e))?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_run_files(dir: &Path, record: &RunRecord) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    record.accuracy_matrix.write_csv(create(&dir.join("accuracy_matrix.csv"))?)?;
    if record.accuracy_matrix.reference().is_some() {
        record.accuracy_matrix.write_reference_csv(create(&dir.join("reference.csv"))?)?;
    }
    write_logs_csv(&record.logs, create(&dir.join("logs.csv"))?)?;
    if let Some(last) = record.checkpoints.last() {
        let path = dir.join("checkpoint.bin");
        fs::write(&path, last).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Writes per-run directories, `summary.json`, and copies of the first run's files at the top level.
pub fn write_outputs(out: &Path, outcomes: &[RunOutcome]) -> Result<ExperimentSummary> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for o in outcomes {
        write_run_files(&out.join(run_dir_name(o.summary.method, o.summary.seed)), &o.record)?;
    }
    if let Some(first) = outcomes.first() {
        write_run_files(out, &first.record)?;
    }
    let summary = ExperimentSummary::from_runs(outcomes.iter().map(|o| o.summary.clone()).collect());
    let path = out.join("summary.json");
    let mut w = create(&path)?;
    serde_json::to_writer_pretty(&mut w, &summary)?;
    w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

/// Result of recomputing metrics from stored CSVs.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportCheck {
    pub recomputed: ExperimentSummary,
    /// Runs whose stored AA/BWT/FWT differ from the recomputed ones.
    pub mismatches: Vec<String>,
}

/// Re-reads every run's accuracy matrix and compares metrics with `summary.json`.
pub fn report(out: &Path) -> Result<ReportCheck> {
    let path = out.join("summary.json");
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let stored: ExperimentSummary = serde_json::from_reader(BufReader::new(file))?;
    let mut runs = Vec::with_capacity(stored.runs.len());
    let mut mismatches = Vec::new();
    for r in &stored.runs {
        let dir = out.join(run_dir_name(r.method, r.seed));
        let matrix_path = dir.join("accuracy_matrix.csv");
        let file = File::open(&matrix_path).map_err(|e| Error::io(&matrix_path, e))?;
        let mut matrix = AccuracyMatrix::read_csv(BufReader::new(file))?;
        let ref_path = dir.join("reference.csv");
        if ref_path.exists() {
            let file = File::open(&ref_path).map_err(|e| Error::io(&ref_path, e))?;
            matrix.set_reference(AccuracyMatrix::read_reference_csv(BufReader::new(file))?)?;
        }
        let Summary { aa, bwt, fwt } = matrix.summary()?;
        if aa != r.aa || bwt != r.bwt || fwt != r.fwt {
            mismatches.push(run_dir_name(r.method, r.seed));
        }
        runs.push(RunSummary { aa, bwt, fwt, ..r.clone() });
    }
    Ok(ReportCheck {
        recomputed: ExperimentSummary::from_runs(runs),
        mismatches,
    })
}
