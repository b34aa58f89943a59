//! Batch sufficient statistics and the estimates derived from them.
//!
//! Every observable is an indicator, so a batch is summarized exactly by its
//! sample count and one integer count per observable. Merging is integer
//! addition, which keeps results independent of how batches were scheduled.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::PointSpec;

/// Minimum number of batches behind any batch-means standard error.
pub const MIN_BATCHES: u64 = 30;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchStats {
    pub batch: u64,
    pub n: u64,
    pub sums: Vec<u64>,
}

impl BatchStats {
    pub fn new(batch: u64, observables: usize) -> Self {
        BatchStats { batch, n: 0, sums: vec![0; observables] }
    }

    pub fn mean(&self, k: usize) -> f64 {
        self.sums[k] as f64 / self.n as f64
    }
}

/// Mean and standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

fn mean_and_se(values: &[f64]) -> Estimate {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)
    } else {
        0.0
    };
    Estimate { mean, std_error: (var / k).sqrt() }
}

fn check_batches(batches: &[BatchStats], min: u64) -> Result<()> {
    if (batches.len() as u64) < min {
        return Err(Error::InvalidRequest(format!(
            "{} batches, at least {min} are needed",
            batches.len()
        )));
    }
    if batches.iter().any(|b| b.n == 0) {
        return Err(Error::InvalidRequest("empty batch".into()));
    }
    Ok(())
}

/// Pooled mean of observable `k` with a batch-means standard error.
pub fn batch_mean(batches: &[BatchStats], k: usize) -> Result<Estimate> {
    check_batches(batches, MIN_BATCHES)?;
    let n: u64 = batches.iter().map(|b| b.n).sum();
    let s: u64 = batches.iter().map(|b| b.sums[k]).sum();
    let means: Vec<f64> = batches.iter().map(|b| b.mean(k)).collect();
    let se = mean_and_se(&means).std_error;
    Ok(Estimate { mean: s as f64 / n as f64, std_error: se })
}

/// Pooled frequency of observable `k` with the binomial standard error.
pub fn binomial_mean(batches: &[BatchStats], k: usize) -> Result<Estimate> {
    check_batches(batches, 1)?;
    let n: u64 = batches.iter().map(|b| b.n).sum();
    let s: u64 = batches.iter().map(|b| b.sums[k]).sum();
    let p = s as f64 / n as f64;
    Ok(Estimate { mean: p, std_error: (p * (1.0 - p) / n as f64).sqrt() })
}

/// Estimates a linear combination of means and products of means.
///
/// Batches are paired `(2j, 2j+1)`. In each pair, linear terms use both
/// batches and every product `E[X]·E[Y]` is estimated by
/// `(X̄₀·Ȳ₁ + X̄₁·Ȳ₀) / 2`, which is unbiased because the two batches are
/// independent. The result is the average over pairs with the standard error
/// of that average.
pub fn split_halves(
    batches: &[BatchStats],
    linear: &[(usize, f64)],
    products: &[(usize, usize, f64)],
) -> Result<Estimate> {
    check_batches(batches, MIN_BATCHES)?;
    if batches.len() % 2 == 1 {
        return Err(Error::InvalidRequest("covariance estimates need an even batch count".into()));
    }
    let values: Vec<f64> = batches
        .chunks(2)
        .map(|pair| {
            let (b0, b1) = (&pair[0], &pair[1]);
            let n = (b0.n + b1.n) as f64;
            let lin: f64 = linear
                .iter()
                .map(|&(k, c)| c * (b0.sums[k] + b1.sums[k]) as f64 / n)
                .sum();
            let prod: f64 = products
                .iter()
                .map(|&(x, y, c)| 0.5 * c * (b0.mean(x) * b1.mean(y) + b1.mean(x) * b0.mean(y)))
                .sum();
            lin + prod
        })
        .collect();
    Ok(mean_and_se(&values))
}

/// π plug-in value used by a normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiPlugin {
    pub value: f64,
    pub std_error: f64,
    pub n: u64,
}

/// Scale factor `a^a_pow · |ln a|^log_pow · π^pi_pow · (2δ)^(-25/24)`, the last
/// factor only when `two_delta` is set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub a_pow: f64,
    pub log_pow: f64,
    pub pi_pow: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub two_delta: Option<f64>,
}

pub const TWO_DELTA_POW: f64 = -25.0 / 24.0;

impl Normalization {
    pub const NONE: Normalization = Normalization { a_pow: 0.0, log_pow: 0.0, pi_pow: 0, two_delta: None };

    pub fn pi_power(k: i32) -> Self {
        Normalization { pi_pow: -k, ..Self::NONE }
    }

    pub fn needs_pi(&self) -> bool {
        self.pi_pow != 0
    }

    /// Multiplicative factor; `pi` is required when `pi_pow != 0`.
    pub fn factor(&self, spacing: f64, pi: Option<f64>) -> f64 {
        let mut f = 1.0;
        if self.a_pow != 0.0 {
            f *= spacing.powf(self.a_pow);
        }
        if self.log_pow != 0.0 {
            f *= spacing.ln().abs().powf(self.log_pow);
        }
        if self.pi_pow != 0 {
            f *= pi.expect("normalization needs a pi plug-in").powi(self.pi_pow);
        }
        if let Some(td) = self.two_delta {
            f *= td.powf(TWO_DELTA_POW);
        }
        f
    }

    pub fn combine(self, other: Normalization) -> Normalization {
        Normalization {
            a_pow: self.a_pow + other.a_pow,
            log_pow: self.log_pow + other.log_pow,
            pi_pow: self.pi_pow + other.pi_pow,
            two_delta: self.two_delta.or(other.two_delta),
        }
    }
}

/// One reported number: a correlator (or a component of it) at one spacing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub request_id: String,
    pub kind: String,
    pub component: String,
    pub spacing: f64,
    pub points: Vec<PointSpec>,
    pub n: u64,
    pub raw_mean: f64,
    pub std_error: f64,
    pub normalization: Normalization,
    pub pi: Option<PiPlugin>,
    pub normalized_value: f64,
    pub normalized_error: f64,
}

impl EstimateRecord {
    /// Builds the record, applying the normalization and propagating the π
    /// plug-in error in quadrature.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        request_id: &str,
        kind: &str,
        component: &str,
        spacing: f64,
        points: Vec<PointSpec>,
        n: u64,
        raw: Estimate,
        normalization: Normalization,
        pi: Option<PiPlugin>,
    ) -> Result<Self> {
        if normalization.needs_pi() && pi.is_none() {
            return Err(Error::InconsistentInputs("normalization needs a pi plug-in".into()));
        }
        let f = normalization.factor(spacing, pi.map(|p| p.value));
        let mut err2 = (f * raw.std_error).powi(2);
        if let Some(p) = pi.filter(|_| normalization.needs_pi()) {
            let rel = normalization.pi_pow as f64 * p.std_error / p.value;
            err2 += (raw.mean * f * rel).powi(2);
        }
        Ok(EstimateRecord {
            request_id: request_id.to_string(),
            kind: kind.to_string(),
            component: component.to_string(),
            spacing,
            points,
            n,
            raw_mean: raw.mean,
            std_error: raw.std_error,
            normalization,
            pi,
            normalized_value: raw.mean * f,
            normalized_error: err2.sqrt(),
        })
    }

    /// Recomputes the normalized value from the stored raw inputs.
    pub fn recompute_normalized(&self) -> f64 {
        self.raw_mean * self.normalization.factor(self.spacing, self.pi.map(|p| p.value))
    }

    /// `kind` or `kind/component` for non-total components.
    pub fn full_kind(&self) -> String {
        if self.component == "total" {
            self.kind.clone()
        } else {
            format!("{}/{}", self.kind, self.component)
        }
    }
}

/// Finds the record for a component.
pub fn component<'a>(records: &'a [EstimateRecord], name: &str) -> Option<&'a EstimateRecord> {
    records.iter().find(|r| r.component == name)
}
