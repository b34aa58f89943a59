//! Experiment files and the job list they expand to.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use percfield_core::estimators::{pi_domain, PI_STREAM_TAG};
use percfield_core::{CompiledRequest, CorrelatorKind, CorrelatorRequest, Domain};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Sample budget of the shared π plug-in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiBudget {
    pub n_samples: u64,
    pub batch_size: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub spacings: Vec<f64>,
    pub domain_radius: f64,
    pub correlators: Vec<CorrelatorRequest>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Batches per checkpoint.
    #[serde(default = "default_checkpoint")]
    pub checkpoint_every: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Needed when any request carries a π normalization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pi: Option<PiBudget>,
}

fn default_workers() -> usize {
    1
}

fn default_checkpoint() -> u64 {
    16
}

/// Request id of the shared π plug-in jobs.
pub const PI_REQUEST_ID: &str = "pi";

/// One request at one spacing.
#[derive(Clone, Debug)]
pub struct Job {
    pub id: String,
    pub request_id: String,
    pub spacing: f64,
    pub compiled: CompiledRequest,
    pub stream: u64,
    /// Radii of arm curves, in component order.
    pub radii: Vec<f64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Canonical serialization; its hash identifies a run. Worker count and
    /// output location do not change results and are left out.
    pub fn canonical(&self) -> String {
        let mut c = self.clone();
        c.workers = 1;
        c.output_dir = None;
        serde_json::to_string_pretty(&c).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    fn check_fields(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.spacings.is_empty() {
            return bad("spacings: at least one spacing is needed".into());
        }
        let mut seen = BTreeSet::new();
        for &a in &self.spacings {
            if !(a.is_finite() && a > 0.0) {
                return bad(format!("spacings: {a} is not positive"));
            }
            if !seen.insert(a.to_bits()) {
                return bad(format!("spacings: {a} appears twice"));
            }
        }
        if !(self.domain_radius.is_finite() && self.domain_radius > 0.0) {
            return bad(format!("domain_radius: {} is not positive", self.domain_radius));
        }
        if self.workers == 0 {
            return bad("workers: must be at least 1".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every: must be at least 1".into());
        }
        if self.correlators.is_empty() {
            return bad("correlators: nothing to estimate".into());
        }
        let mut ids = BTreeSet::new();
        for (i, r) in self.correlators.iter().enumerate() {
            let id = r.label();
            if id == PI_REQUEST_ID {
                return bad(format!("correlators[{i}]: id \"{PI_REQUEST_ID}\" is reserved"));
            }
            if id.contains('@') {
                return bad(format!("correlators[{i}]: id {id:?} may not contain '@'"));
            }
            if !ids.insert(id.clone()) {
                return bad(format!("correlators[{i}]: duplicate id {id:?} (set \"id\" to disambiguate)"));
            }
            if let Some(a) = r.spacing {
                if !self.spacings.iter().any(|&s| s == a) {
                    return bad(format!("correlators[{i}].spacing: {a} is not one of the spacings"));
                }
            }
        }
        Ok(())
    }

    /// Validates everything and compiles every job, before any sampling.
    pub fn jobs(&self) -> CliResult<Vec<Job>> {
        self.check_fields()?;
        let mut jobs = vec![];
        let mut pi_spacings = BTreeSet::new();
        for &a in &self.spacings {
            let domain = Arc::new(
                Domain::disk(a, self.domain_radius).map_err(|e| CliError::Config(format!("domain at spacing {a}: {e}")))?,
            );
            for (i, req) in self.correlators.iter().enumerate() {
                if req.spacing.is_some_and(|s| s != a) {
                    continue;
                }
                let dom = if req.kind == CorrelatorKind::PiA {
                    pi_domain(a).map_err(|e| CliError::Config(e.to_string()))?
                } else {
                    domain.clone()
                };
                let compiled = CompiledRequest::compile(req, dom)
                    .map_err(|e| CliError::Config(format!("correlators[{i}] at spacing {a}: {e}")))?;
                if compiled.needs_pi() {
                    pi_spacings.insert(a.to_bits());
                }
                jobs.push(Job::new(&req.label(), a, compiled, req.radii.clone()));
            }
        }
        if !pi_spacings.is_empty() {
            let budget = self
                .pi
                .ok_or_else(|| CliError::Config("pi: a budget is required for pi-normalized correlators".into()))?;
            let mut pi_jobs = vec![];
            for &a in &self.spacings {
                if !pi_spacings.contains(&a.to_bits()) {
                    continue;
                }
                let mut req = CorrelatorRequest::new(CorrelatorKind::PiA, vec![], budget.n_samples, budget.batch_size);
                req.id = Some(PI_REQUEST_ID.into());
                let dom = pi_domain(a).map_err(|e| CliError::Config(e.to_string()))?;
                let compiled = CompiledRequest::compile(&req, dom).map_err(|e| CliError::Config(format!("pi: {e}")))?;
                pi_jobs.push(Job::new(PI_REQUEST_ID, a, compiled, vec![]));
            }
            // π first, so every later job can be finalized as soon as it ends.
            pi_jobs.extend(jobs);
            jobs = pi_jobs;
        }
        Ok(jobs)
    }
}

impl Job {
    fn new(request_id: &str, spacing: f64, compiled: CompiledRequest, radii: Vec<f64>) -> Self {
        let id = format!("{request_id}@{spacing}");
        let stream = if request_id == PI_REQUEST_ID { stream_id(&id) ^ PI_STREAM_TAG } else { stream_id(&id) };
        Job { id, request_id: request_id.to_string(), spacing, compiled, stream, radii }
    }
}

/// Stream of a job: the first eight bytes of the SHA-256 of its id.
pub fn stream_id(job_id: &str) -> u64 {
    let d = Sha256::digest(job_id.as_bytes());
    u64::from_le_bytes(d[..8].try_into().unwrap())
}
