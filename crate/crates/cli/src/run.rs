//! Run and resume: drive every job to completion in checkpointed chunks, then
//! derive the tables from the batch log.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use percfield_core::estimators::pi_plugin;
use percfield_core::{BatchStats, EstimateRecord, PiPlugin, StreamKey};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Job, PI_REQUEST_ID};
use crate::error::{CliError, CliResult};
use crate::fits::{covariance_rows, fit_all};
use crate::store::{
    read_manifest, write_atomic, write_manifest, BatchLog, JobState, Manifest, CONFIG, COVARIANCE, ESTIMATES, FITS,
    MANIFEST,
};

pub const ENV_OUTPUT_DIR: &str = "PERCFIELD_OUTPUT_DIR";
pub const ENV_WORKERS: &str = "PERCFIELD_WORKERS";

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub workers: Option<usize>,
    pub output_dir: Option<PathBuf>,
    /// Stop (as if killed) after this many checkpoints in this invocation.
    pub stop_after_checkpoints: Option<u64>,
}

impl RunOptions {
    /// Fills unset fields from the environment.
    pub fn with_env(mut self) -> CliResult<Self> {
        if self.output_dir.is_none() {
            self.output_dir = std::env::var_os(ENV_OUTPUT_DIR).map(PathBuf::from);
        }
        if self.workers.is_none() {
            if let Ok(w) = std::env::var(ENV_WORKERS) {
                let n: usize = w.parse().map_err(|_| CliError::Config(format!("{ENV_WORKERS}: {w:?} is not a count")))?;
                if n == 0 {
                    return Err(CliError::Config(format!("{ENV_WORKERS}: must be at least 1")));
                }
                self.workers = Some(n);
            }
        }
        Ok(self)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RunOutcome {
    Complete { dir: PathBuf },
    Interrupted { dir: PathBuf, checkpoints: u64 },
}

/// Row of `estimates.csv`. `normalized_value = raw_mean · normalization`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub request_id: String,
    pub kind: String,
    pub a: f64,
    pub point_json: String,
    pub n: u64,
    pub raw_mean: f64,
    pub std_error: f64,
    pub normalization: f64,
    pub normalized_value: f64,
}

impl EstimateRow {
    pub fn from_record(r: &EstimateRecord) -> Self {
        EstimateRow {
            request_id: r.request_id.clone(),
            kind: r.full_kind(),
            a: r.spacing,
            point_json: serde_json::to_string(&r.points).expect("points serialize"),
            n: r.n,
            raw_mean: r.raw_mean,
            std_error: r.std_error,
            normalization: r.normalization.factor(r.spacing, r.pi.map(|p| p.value)),
            normalized_value: r.normalized_value,
        }
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

pub fn run(config: &ExperimentConfig, opts: &RunOptions) -> CliResult<RunOutcome> {
    let dir = opts
        .output_dir
        .clone()
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| CliError::Config(format!("output_dir: not set (config, --output-dir or {ENV_OUTPUT_DIR})")))?;
    let jobs = config.jobs()?;
    if dir.join(MANIFEST).exists() {
        let m = read_manifest(&dir)?;
        if m.config_hash != config.hash() {
            return Err(CliError::Config(format!("{} holds a different experiment", dir.display())));
        }
        return continue_run(&dir, config, jobs, m, opts);
    }
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    write_atomic(&dir.join(CONFIG), config.canonical().as_bytes())?;
    let log = BatchLog::create(&dir)?;
    let (batch_bytes, batch_sha256) = log.pin();
    let manifest = Manifest {
        config_hash: config.hash(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        started: now(),
        finished: None,
        batch_bytes,
        batch_sha256,
        jobs: jobs.iter().map(|j| JobState { id: j.id.clone(), n_batches: j.compiled.n_batches, completed: 0 }).collect(),
    };
    write_manifest(&dir, &manifest)?;
    drive(&dir, config, &jobs, manifest, log, BTreeMap::new(), opts)
}

pub fn resume(dir: &Path, opts: &RunOptions) -> CliResult<RunOutcome> {
    let m = read_manifest(dir)?;
    let path = dir.join(CONFIG);
    let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::MissingData(format!("no {CONFIG} in {}", dir.display())),
        _ => CliError::io(&path, e),
    })?;
    let config = ExperimentConfig::from_json(&text)
        .map_err(|e| CliError::CorruptCheckpoint(format!("{CONFIG}: {e}")))?;
    if config.hash() != m.config_hash {
        return Err(CliError::CorruptCheckpoint(format!("{CONFIG} does not match the manifest hash")));
    }
    let jobs = config.jobs()?;
    continue_run(dir, &config, jobs, m, opts)
}

fn continue_run(
    dir: &Path,
    config: &ExperimentConfig,
    jobs: Vec<Job>,
    m: Manifest,
    opts: &RunOptions,
) -> CliResult<RunOutcome> {
    if m.is_complete() {
        return Ok(RunOutcome::Complete { dir: dir.to_path_buf() });
    }
    let same_jobs = m.jobs.len() == jobs.len()
        && m.jobs.iter().zip(&jobs).all(|(s, j)| s.id == j.id && s.n_batches == j.compiled.n_batches);
    if !same_jobs {
        return Err(CliError::CorruptCheckpoint("manifest jobs do not match the config".into()));
    }
    let (log, done) = BatchLog::reopen(dir, &m)?;
    for s in &m.jobs {
        let have = done.get(&s.id).map_or(0, |v| v.len() as u64);
        if have != s.completed {
            return Err(CliError::CorruptCheckpoint(format!(
                "job {} has {have} logged batches, the manifest says {}",
                s.id, s.completed
            )));
        }
    }
    if done.keys().any(|k| !m.jobs.iter().any(|s| &s.id == k)) {
        return Err(CliError::CorruptCheckpoint("batch log names an unknown job".into()));
    }
    drive(dir, config, &jobs, m, log, done, opts)
}

fn drive(
    dir: &Path,
    config: &ExperimentConfig,
    jobs: &[Job],
    mut manifest: Manifest,
    mut log: BatchLog,
    mut done: BTreeMap<String, Vec<BatchStats>>,
    opts: &RunOptions,
) -> CliResult<RunOutcome> {
    let workers = opts.workers.unwrap_or(config.workers);
    let mut checkpoints = 0;
    for (ji, job) in jobs.iter().enumerate() {
        let key = StreamKey::new(config.master_seed, job.stream);
        let n = job.compiled.n_batches;
        loop {
            let start = done.get(&job.id).map_or(0, |v| v.len() as u64);
            if start >= n {
                break;
            }
            if opts.stop_after_checkpoints.is_some_and(|k| checkpoints >= k) {
                return Ok(RunOutcome::Interrupted { dir: dir.to_path_buf(), checkpoints });
            }
            let end = (start + config.checkpoint_every).min(n);
            let stats = job.compiled.run_batches(key, start..end, workers);
            log.append(&job.id, &stats)?;
            done.entry(job.id.clone()).or_default().extend(stats);
            manifest.jobs[ji].completed = end;
            (manifest.batch_bytes, manifest.batch_sha256) = log.pin();
            write_manifest(dir, &manifest)?;
            checkpoints += 1;
        }
    }
    let records = assemble_all(config, jobs, &done)?;
    write_tables(dir, config, jobs, &records)?;
    manifest.finished = Some(now());
    write_manifest(dir, &manifest)?;
    Ok(RunOutcome::Complete { dir: dir.to_path_buf() })
}

/// Records of every job, in job order.
pub fn assemble_all(
    config: &ExperimentConfig,
    jobs: &[Job],
    done: &BTreeMap<String, Vec<BatchStats>>,
) -> CliResult<Vec<EstimateRecord>> {
    let _ = config;
    let mut pi: BTreeMap<u64, PiPlugin> = BTreeMap::new();
    let mut out = vec![];
    for job in jobs {
        let batches = done
            .get(&job.id)
            .ok_or_else(|| CliError::MissingData(format!("no batches for job {}", job.id)))?;
        let plug = if job.compiled.needs_pi() {
            Some(*pi.get(&job.spacing.to_bits()).ok_or_else(|| {
                CliError::MissingData(format!("no pi plug-in at spacing {}", job.spacing))
            })?)
        } else {
            None
        };
        let recs = job.compiled.assemble(batches, plug)?;
        if job.request_id == PI_REQUEST_ID {
            pi.insert(job.spacing.to_bits(), pi_plugin(&recs[0]));
        }
        out.extend(recs);
    }
    Ok(out)
}

fn write_tables(dir: &Path, config: &ExperimentConfig, jobs: &[Job], records: &[EstimateRecord]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(vec![]);
    for r in records {
        w.serialize(EstimateRow::from_record(r)).map_err(|e| CliError::MissingData(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::MissingData(e.to_string()))?;
    write_atomic(&dir.join(ESTIMATES), &bytes)?;

    let fits = fit_all(config, jobs, records);
    let mut text = serde_json::to_string_pretty(&fits).expect("fits serialize");
    text.push('\n');
    write_atomic(&dir.join(FITS), text.as_bytes())?;

    let mut w = csv::Writer::from_writer(vec![]);
    for row in covariance_rows(config, records) {
        w.serialize(row).map_err(|e| CliError::MissingData(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::MissingData(e.to_string()))?;
    write_atomic(&dir.join(COVARIANCE), &bytes)
}

/// Reads `estimates.csv` back.
pub fn read_estimates(dir: &Path) -> CliResult<Vec<EstimateRow>> {
    let path = dir.join(ESTIMATES);
    let mut r = csv::Reader::from_path(&path).map_err(|e| CliError::MissingData(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<Result<Vec<EstimateRow>, _>>()
        .map_err(|e| CliError::MissingData(format!("{}: {e}", path.display())))
}
