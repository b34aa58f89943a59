//! Human and machine summaries of a finished run.

use std::fmt::Write as _;
use std::path::Path;

use percfield_core::oracle::OracleOutcome;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::fits::{CovarianceRow, Fits, VanishingCheck};
use crate::run::read_estimates;
use crate::store::{read_manifest, write_atomic, COVARIANCE, FITS, ORACLE, REPORT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeLine {
    pub name: String,
    pub target: f64,
    pub slope: f64,
    pub std_error: f64,
    /// `|slope - target|`.
    pub deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub request_id: String,
    pub beta: f64,
    pub std_error: f64,
    pub significance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub complete: bool,
    pub estimates: usize,
    pub slopes: Vec<SlopeLine>,
    pub log_corrections: Vec<LogLine>,
    pub energy_vanishing: Vec<VanishingCheck>,
    pub covariance: Vec<CovarianceRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<Vec<OracleOutcome>>,
    pub skipped: Vec<String>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::MissingData(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::MissingData(format!("{}: {e}", path.display())))
}

/// Collects the summary from an output directory.
pub fn build_report(dir: &Path) -> CliResult<Report> {
    let manifest = read_manifest(dir)?;
    let estimates = read_estimates(dir)?;
    let fits: Fits = read_json(&dir.join(FITS))?;
    let path = dir.join(COVARIANCE);
    let covariance = csv::Reader::from_path(&path)
        .and_then(|mut r| r.deserialize().collect::<Result<Vec<CovarianceRow>, _>>())
        .map_err(|e| CliError::MissingData(format!("{}: {e}", path.display())))?;
    let oracle_path = dir.join(ORACLE);
    let oracle = if oracle_path.exists() { Some(read_json(&oracle_path)?) } else { None };
    Ok(Report {
        config_hash: manifest.config_hash.clone(),
        complete: manifest.is_complete(),
        estimates: estimates.len(),
        slopes: fits
            .exponents
            .iter()
            .map(|f| SlopeLine {
                name: f.name.clone(),
                target: f.target,
                slope: f.fit.slope,
                std_error: f.fit.std_errors[0],
                deviation: (f.fit.slope - f.target).abs(),
            })
            .collect(),
        log_corrections: fits
            .log_corrections
            .iter()
            .map(|l| LogLine {
                request_id: l.request_id.clone(),
                beta: l.fit.slope,
                std_error: l.fit.std_errors[0],
                significance: l.significance,
            })
            .collect(),
        energy_vanishing: fits.energy_vanishing,
        covariance,
        oracle,
        skipped: fits.skipped,
    })
}

pub fn render(r: &Report) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "run {} ({} estimates, {})", &r.config_hash[..12.min(r.config_hash.len())], r.estimates,
        if r.complete { "complete" } else { "incomplete" });
    if !r.slopes.is_empty() {
        let _ = writeln!(s, "\nexponent fits");
        let _ = writeln!(s, "  {:<48} {:>9} {:>9} {:>8} {:>8}", "fit", "target", "slope", "± se", "|Δ|");
        for l in &r.slopes {
            let _ = writeln!(s, "  {:<48} {:>9.4} {:>9.4} {:>8.4} {:>8.4}", l.name, l.target, l.slope, l.std_error, l.deviation);
        }
    }
    if !r.log_corrections.is_empty() {
        let _ = writeln!(s, "\nlog corrections (y = α + β ln(1/a))");
        for l in &r.log_corrections {
            let _ = writeln!(s, "  {:<32} β = {:.4} ± {:.4} ({:.1}σ)", l.request_id, l.beta, l.std_error, l.significance);
        }
    }
    for v in &r.energy_vanishing {
        let _ = writeln!(s, "\nenergy two-point {}", v.request_id);
        for i in 0..v.spacings.len() {
            let _ = writeln!(s, "  a={:<10} scaled={:.5}  log1-scaled={:.5}", v.spacings[i], v.scaled[i],
                v.log1_scaled.get(i).copied().unwrap_or(f64::NAN));
        }
        let _ = writeln!(s, "  strictly decreasing: {}  within [{:.5}, {:.5}]: {}", v.strictly_decreasing, v.band[0], v.band[1], v.within_band);
    }
    if !r.covariance.is_empty() {
        let _ = writeln!(s, "\ncovariance ratios");
        for c in &r.covariance {
            let _ = writeln!(s, "  {} -> {} (a={}, scale {:.3}): {:.4} ± {:.4}", c.source, c.image, c.a, c.scale, c.ratio, c.std_error);
        }
    }
    if let Some(o) = &r.oracle {
        let _ = writeln!(s, "\noracle equivalence");
        for c in o {
            let _ = writeln!(s, "  {:<40} exact {:.6}  mc {:.6} ± {:.6}  {}", c.name, c.exact, c.estimate, c.std_error,
                if c.passed { "PASS" } else { "FAIL" });
        }
    }
    for k in &r.skipped {
        let _ = writeln!(s, "skipped: {k}");
    }
    s
}

/// Builds the report, writes `report.json` and returns the text summary.
pub fn report(dir: &Path) -> CliResult<(Report, String)> {
    let r = build_report(dir)?;
    let mut text = serde_json::to_string_pretty(&r).expect("report serializes");
    text.push('\n');
    write_atomic(&dir.join(REPORT), text.as_bytes())?;
    let human = render(&r);
    Ok((r, human))
}
