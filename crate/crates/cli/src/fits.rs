//! Analyses derived automatically from a finished run.

use std::collections::BTreeMap;
use std::sync::Arc;

use num_complex::Complex64;
use percfield_core::analysis::{
    fit_constant_ledger, mobius_covariance_check, without_log_factor, Sweeps, ENERGY_WEIGHT, SPIN_WEIGHT,
};
use percfield_core::{
    fit_log_correction, fit_power_law, ConstantLedger, CorrelatorKind, Domain, Estimate, EstimateRecord, FitResult,
    PointRole, Similarity,
};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Job, PI_REQUEST_ID};

pub const ONE_ARM_TARGET: f64 = -5.0 / 48.0;
pub const TWO_POINT_TARGET: f64 = -5.0 / 24.0;
pub const FOUR_ARM_TARGET: f64 = -5.0 / 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentFit {
    pub name: String,
    pub request_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<f64>,
    /// Abscissa of the log-log fit.
    pub variable: String,
    pub target: f64,
    pub fit: FitResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogCorrection {
    pub request_id: String,
    pub spacings: Vec<f64>,
    pub fit: FitResult,
    /// β in units of its standard error.
    pub significance: f64,
}

/// Energy two-point sequences under the two normalizations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VanishingCheck {
    pub request_id: String,
    /// Coarsest first.
    pub spacings: Vec<f64>,
    pub scaled: Vec<f64>,
    pub log1_scaled: Vec<f64>,
    pub strictly_decreasing: bool,
    pub band: [f64; 2],
    pub within_band: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Fits {
    pub exponents: Vec<ExponentFit>,
    pub log_corrections: Vec<LogCorrection>,
    pub energy_vanishing: Vec<VanishingCheck>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constants: Option<ConstantLedger>,
    /// Fits that could not be made, with the reason.
    pub skipped: Vec<String>,
}

fn totals<'a>(records: &'a [EstimateRecord], request_id: &str) -> Vec<&'a EstimateRecord> {
    let mut v: Vec<&EstimateRecord> =
        records.iter().filter(|r| r.request_id == request_id && r.component == "total").collect();
    v.sort_by(|a, b| b.spacing.total_cmp(&a.spacing));
    v
}

fn push_fit(fits: &mut Fits, name: String, result: percfield_core::Result<FitResult>, make: impl FnOnce(FitResult) -> ExponentFit) {
    match result {
        Ok(f) => fits.exponents.push(make(f)),
        Err(e) => fits.skipped.push(format!("{name}: {e}")),
    }
}

/// Every analysis the records support.
pub fn fit_all(config: &ExperimentConfig, jobs: &[Job], records: &[EstimateRecord]) -> Fits {
    let mut fits = Fits::default();
    let mut request_ids: Vec<String> = vec![];
    if jobs.iter().any(|j| j.request_id == PI_REQUEST_ID) {
        request_ids.push(PI_REQUEST_ID.into());
    }
    request_ids.extend(config.correlators.iter().map(|r| r.label()));

    for (id, kind) in request_ids.iter().map(|id| {
        let kind = config.correlators.iter().find(|r| &r.label() == id).map_or(CorrelatorKind::PiA, |r| r.kind);
        (id, kind)
    }) {
        let rs = totals(records, id);
        match kind {
            CorrelatorKind::PiA if rs.len() >= 3 => {
                let xs: Vec<f64> = rs.iter().map(|r| 1.0 / r.spacing).collect();
                let ys: Vec<f64> = rs.iter().map(|r| r.raw_mean).collect();
                let es: Vec<f64> = rs.iter().map(|r| r.std_error).collect();
                let name = format!("{id}: one-arm exponent");
                push_fit(&mut fits, name.clone(), fit_power_law(&xs, &ys, &es), |fit| ExponentFit {
                    name,
                    request_id: id.clone(),
                    spacing: None,
                    variable: "1/a".into(),
                    target: ONE_ARM_TARGET,
                    fit,
                });
            }
            CorrelatorKind::OneArmCurve | CorrelatorKind::FourArmCurve => {
                let target = if kind == CorrelatorKind::OneArmCurve { ONE_ARM_TARGET } else { FOUR_ARM_TARGET };
                for job in jobs.iter().filter(|j| &j.request_id == id) {
                    let curve: Vec<&EstimateRecord> =
                        records.iter().filter(|r| &r.request_id == id && r.spacing == job.spacing).collect();
                    let ys: Vec<f64> = curve.iter().map(|r| r.raw_mean).collect();
                    let es: Vec<f64> = curve.iter().map(|r| r.std_error).collect();
                    let name = format!("{id}@{}: {} exponent", job.spacing, kind.name());
                    push_fit(&mut fits, name.clone(), fit_power_law(&job.radii, &ys, &es), |fit| ExponentFit {
                        name,
                        request_id: id.clone(),
                        spacing: Some(job.spacing),
                        variable: "radius".into(),
                        target,
                        fit,
                    });
                }
            }
            CorrelatorKind::EnergySpinSpin if rs.len() >= 4 => {
                let ys: Vec<Estimate> = rs.iter().map(|r| without_log_factor(r)).collect();
                let spacings: Vec<f64> = rs.iter().map(|r| r.spacing).collect();
                match fit_log_correction(
                    &spacings,
                    &ys.iter().map(|e| e.mean).collect::<Vec<_>>(),
                    &ys.iter().map(|e| e.std_error).collect::<Vec<_>>(),
                ) {
                    Ok(fit) => fits.log_corrections.push(LogCorrection {
                        request_id: id.clone(),
                        spacings,
                        significance: fit.slope_significance(),
                        fit,
                    }),
                    Err(e) => fits.skipped.push(format!("{id}: log correction: {e}")),
                }
            }
            CorrelatorKind::EnergyEnergy if rs.len() >= 2 => {
                let log1: Vec<&EstimateRecord> = {
                    let mut v: Vec<&EstimateRecord> =
                        records.iter().filter(|r| &r.request_id == id && r.component == "total_log1").collect();
                    v.sort_by(|a, b| b.spacing.total_cmp(&a.spacing));
                    v
                };
                fits.energy_vanishing.push(vanishing_check(
                    id,
                    &rs.iter().map(|r| r.spacing).collect::<Vec<_>>(),
                    &rs.iter().map(|r| r.normalized_value).collect::<Vec<_>>(),
                    &log1.iter().map(|r| r.normalized_value).collect::<Vec<_>>(),
                ));
            }
            _ => {}
        }
    }

    // Two-point spin sweeps: one fit per spacing over all separations.
    let mut by_spacing: BTreeMap<u64, Vec<&EstimateRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| {
        r.kind == CorrelatorKind::SpinNPoint.name() && r.points.len() == 2 && r.component == "total"
    }) {
        by_spacing.entry(r.spacing.to_bits()).or_default().push(r);
    }
    for rs in by_spacing.values().filter(|rs| rs.len() >= 3) {
        let a = rs[0].spacing;
        let xs: Vec<f64> = rs.iter().map(|r| (r.points[1].z - r.points[0].z).norm()).collect();
        let ys: Vec<f64> = rs.iter().map(|r| r.normalized_value).collect();
        let es: Vec<f64> = rs.iter().map(|r| r.normalized_error).collect();
        let name = format!("two-point spin exponent at a={a}");
        push_fit(&mut fits, name.clone(), fit_power_law(&xs, &ys, &es), |fit| ExponentFit {
            name,
            request_id: "spin_n_point".into(),
            spacing: Some(a),
            variable: "separation".into(),
            target: TWO_POINT_TARGET,
            fit,
        });
    }

    match fit_constant_ledger(&Sweeps::from_records(records)) {
        Ok(c) => fits.constants = Some(c),
        Err(e) => fits.skipped.push(format!("constants: {e}")),
    }
    fits
}

/// `scaled` must decrease strictly; `log1_scaled` must stay within
/// `[v0/2, 2·v0]`, `v0 > 0` its value at the coarsest spacing.
pub fn vanishing_check(request_id: &str, spacings: &[f64], scaled: &[f64], log1_scaled: &[f64]) -> VanishingCheck {
    let strictly_decreasing = scaled.len() >= 2 && scaled.windows(2).all(|w| w[1] < w[0]);
    let v0 = log1_scaled.first().copied().unwrap_or(f64::NAN);
    let band = [v0 / 2.0, 2.0 * v0];
    let within_band = v0 > 0.0 && log1_scaled.iter().all(|&v| v >= band[0] && v <= band[1]);
    VanishingCheck {
        request_id: request_id.into(),
        spacings: spacings.to_vec(),
        scaled: scaled.to_vec(),
        log1_scaled: log1_scaled.to_vec(),
        strictly_decreasing,
        band,
        within_band,
    }
}

/// Row of `covariance.csv`: a record compared with the image of another one
/// under a similarity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceRow {
    pub kind: String,
    pub a: f64,
    pub source: String,
    pub image: String,
    pub scale: f64,
    pub rotation: f64,
    pub ratio: f64,
    pub std_error: f64,
}

/// Similarity taking `from` onto `to`, if there is one.
pub fn similarity_between(from: &[Complex64], to: &[Complex64]) -> Option<Similarity> {
    if from.len() != to.len() || from.len() < 2 || from[1] == from[0] {
        return None;
    }
    let lambda = (to[1] - to[0]) / (from[1] - from[0]);
    let translation = to[0] - lambda * from[0];
    let tol = 1e-9 * (1.0 + to.iter().map(|z| z.norm()).fold(0.0, f64::max));
    if from.iter().zip(to).any(|(z, w)| (lambda * z + translation - w).norm() > tol) {
        return None;
    }
    Some(Similarity { scale: lambda.norm(), rotation: lambda.arg(), translation })
}

fn weight(role: PointRole) -> f64 {
    match role {
        PointRole::Spin => SPIN_WEIGHT,
        _ => ENERGY_WEIGHT,
    }
}

/// Ratios for consecutive same-kind records (same spacing, same roles) whose
/// point sets are related by a non-trivial similarity.
pub fn covariance_rows(config: &ExperimentConfig, records: &[EstimateRecord]) -> Vec<CovarianceRow> {
    let mut groups: BTreeMap<String, Vec<&EstimateRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| {
        r.component == "total"
            && (r.kind == CorrelatorKind::SpinNPoint.name() || r.kind == CorrelatorKind::EnergySpinSpin.name())
    }) {
        let roles: Vec<PointRole> = r.points.iter().map(|p| p.role).collect();
        groups.entry(format!("{}|{}|{roles:?}", r.kind, r.spacing)).or_default().push(r);
    }
    let mut domains: BTreeMap<u64, Option<Arc<Domain>>> = BTreeMap::new();
    let mut rows = vec![];
    for rs in groups.values() {
        for w in rs.windows(2) {
            let (src, img) = (w[0], w[1]);
            let zs: Vec<Complex64> = src.points.iter().map(|p| p.z).collect();
            let zi: Vec<Complex64> = img.points.iter().map(|p| p.z).collect();
            let Some(phi) = similarity_between(&zs, &zi) else { continue };
            if (phi.scale - 1.0).abs() < 1e-12 && phi.rotation.abs() < 1e-12 && phi.translation.norm() < 1e-12 {
                continue;
            }
            let dom = domains
                .entry(src.spacing.to_bits())
                .or_insert_with(|| Domain::disk(src.spacing, config.domain_radius).ok().map(Arc::new));
            let Some(dom) = dom else { continue };
            let weights: Vec<f64> = src.points.iter().map(|p| weight(p.role)).collect();
            let value = |r: &EstimateRecord| Estimate { mean: r.normalized_value, std_error: r.normalized_error };
            let check = mobius_covariance_check(&zs, &weights, phi, dom, 0.0, |pts| {
                Ok(if pts == zs.as_slice() { value(src) } else { value(img) })
            });
            if let Ok(c) = check {
                rows.push(CovarianceRow {
                    kind: src.kind.clone(),
                    a: src.spacing,
                    source: src.request_id.clone(),
                    image: img.request_id.clone(),
                    scale: phi.scale,
                    rotation: phi.rotation,
                    ratio: c.ratio,
                    std_error: c.std_error,
                });
            }
        }
    }
    rows
}
