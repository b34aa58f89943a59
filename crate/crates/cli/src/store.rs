//! On-disk run state: the append-only batch log and the manifest that pins it.
//!
//! `batches.ndjson` is the source of truth. The manifest records how many
//! bytes of it belong to completed checkpoints and their SHA-256, so a crash
//! between appending and updating the manifest only leaves a tail that resume
//! discards, while any edit to the pinned prefix is detected.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use percfield_core::BatchStats;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const BATCHES: &str = "batches.ndjson";
pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.json";
pub const ESTIMATES: &str = "estimates.csv";
pub const FITS: &str = "fits.json";
pub const COVARIANCE: &str = "covariance.csv";
pub const REPORT: &str = "report.json";
pub const ORACLE: &str = "oracle.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobState {
    pub id: String,
    pub n_batches: u64,
    pub completed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub code_version: String,
    pub started: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished: Option<String>,
    pub batch_bytes: u64,
    pub batch_sha256: String,
    pub jobs: Vec<JobState>,
}

impl Manifest {
    pub fn is_complete(&self) -> bool {
        self.finished.is_some() && self.jobs.iter().all(|j| j.completed == j.n_batches)
    }
}

/// One line of the batch log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchLine {
    pub job: String,
    #[serde(flatten)]
    pub stats: BatchStats,
}

/// Writes through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension("tmp");
    let io = |e| CliError::io(path, e);
    let mut f = File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn read_manifest(dir: &Path) -> CliResult<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::MissingData(format!("no {MANIFEST} in {}", dir.display())),
        _ => CliError::io(&path, e),
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::CorruptCheckpoint(format!("{MANIFEST}: {e}")))
}

pub fn write_manifest(dir: &Path, m: &Manifest) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(m).expect("manifest serializes");
    text.push('\n');
    write_atomic(&dir.join(MANIFEST), text.as_bytes())
}

/// Append handle on the batch log that keeps a running hash.
pub struct BatchLog {
    path: PathBuf,
    file: File,
    hasher: Sha256,
    bytes: u64,
}

impl BatchLog {
    pub fn create(dir: &Path) -> CliResult<Self> {
        let path = dir.join(BATCHES);
        let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(BatchLog { path, file, hasher: Sha256::new(), bytes: 0 })
    }

    /// Opens an existing log, checks its pinned prefix against the manifest
    /// and drops anything written after the last checkpoint.
    pub fn reopen(dir: &Path, manifest: &Manifest) -> CliResult<(Self, BTreeMap<String, Vec<BatchStats>>)> {
        let path = dir.join(BATCHES);
        let io = |e| CliError::io(&path, e);
        let file = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(CliError::CorruptCheckpoint(format!("{BATCHES} is missing")))
            }
            Err(e) => return Err(io(e)),
        };
        let len = file.metadata().map_err(io)?.len();
        if len < manifest.batch_bytes {
            return Err(CliError::CorruptCheckpoint(format!(
                "{BATCHES} has {len} bytes, the manifest pins {}",
                manifest.batch_bytes
            )));
        }
        let mut prefix = Vec::with_capacity(manifest.batch_bytes as usize);
        file.take(manifest.batch_bytes).read_to_end(&mut prefix).map_err(io)?;
        let mut hasher = Sha256::new();
        hasher.update(&prefix);
        if hex::encode(hasher.clone().finalize()) != manifest.batch_sha256 {
            return Err(CliError::CorruptCheckpoint(format!("{BATCHES} does not match the manifest hash")));
        }
        let batches = parse_lines(&prefix)?;
        let file = OpenOptions::new().write(true).open(&path).map_err(io)?;
        file.set_len(manifest.batch_bytes).map_err(io)?;
        let mut log = BatchLog { path, file, hasher, bytes: manifest.batch_bytes };
        log.seek_end()?;
        Ok((log, batches))
    }

    fn seek_end(&mut self) -> CliResult<()> {
        use std::io::Seek;
        self.file.seek(std::io::SeekFrom::End(0)).map_err(|e| CliError::io(&self.path, e))?;
        Ok(())
    }

    pub fn append(&mut self, job: &str, stats: &[BatchStats]) -> CliResult<()> {
        let mut buf = Vec::new();
        for s in stats {
            let line = BatchLine { job: job.to_string(), stats: s.clone() };
            serde_json::to_writer(&mut buf, &line).expect("batch serializes");
            buf.push(b'\n');
        }
        let io = |e| CliError::io(&self.path, e);
        self.file.write_all(&buf).map_err(io)?;
        self.file.sync_data().map_err(io)?;
        self.hasher.update(&buf);
        self.bytes += buf.len() as u64;
        Ok(())
    }

    pub fn pin(&self) -> (u64, String) {
        (self.bytes, hex::encode(self.hasher.clone().finalize()))
    }
}

fn parse_lines(bytes: &[u8]) -> CliResult<BTreeMap<String, Vec<BatchStats>>> {
    let mut out: BTreeMap<String, Vec<BatchStats>> = BTreeMap::new();
    for (i, line) in BufReader::new(bytes).lines().enumerate() {
        let line = line.map_err(|e| CliError::CorruptCheckpoint(format!("{BATCHES} line {}: {e}", i + 1)))?;
        let b: BatchLine = serde_json::from_str(&line)
            .map_err(|e| CliError::CorruptCheckpoint(format!("{BATCHES} line {}: {e}", i + 1)))?;
        let v = out.entry(b.job).or_default();
        if b.stats.batch != v.len() as u64 {
            return Err(CliError::CorruptCheckpoint(format!("{BATCHES} line {}: batches out of order", i + 1)));
        }
        v.push(b.stats);
    }
    Ok(out)
}
