//! Fits and identity checks over finished estimate tables.

use std::collections::BTreeMap;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Domain, PointRole};
use crate::stats::{Estimate, EstimateRecord};

/// Scaling weight of the spin field.
pub const SPIN_WEIGHT: f64 = 5.0 / 48.0;
/// Scaling weight of the energy field.
pub const ENERGY_WEIGHT: f64 = 5.0 / 4.0;

/// `|z1-z2|^(-5/4) · |z1-z3|^(-5/4) · |z3-z2|^(25/24)`.
pub fn eval_f(z1: Complex64, z2: Complex64, z3: Complex64) -> Result<f64> {
    let d12 = (z1 - z2).norm();
    let d13 = (z1 - z3).norm();
    let d23 = (z3 - z2).norm();
    if d12 == 0.0 || d13 == 0.0 || d23 == 0.0 {
        return Err(Error::CoincidentPoints(format!("{z1}, {z2}, {z3}")));
    }
    Ok((d12 * d13).powf(-1.25) * d23.powf(25.0 / 24.0))
}

/// Weighted straight-line fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub slope: f64,
    pub intercept: f64,
    /// Standard errors of `[slope, intercept]`.
    pub std_errors: [f64; 2],
    pub chi_square: f64,
    pub dof: usize,
    /// Range of the fitted abscissa, in the caller's units.
    pub x_range: [f64; 2],
}

impl FitResult {
    /// Slope in units of its standard error.
    pub fn slope_significance(&self) -> f64 {
        self.slope / self.std_errors[0]
    }
}

/// Weighted least squares for `y = intercept + slope·x`. Data are shifted by
/// their first point before accumulation so constant inputs give an exactly
/// zero slope.
fn weighted_line(xs: &[f64], ys: &[f64], sigmas: &[f64]) -> Result<(f64, f64, [f64; 2], f64)> {
    if xs.len() != ys.len() || xs.len() != sigmas.len() {
        return Err(Error::DegenerateInput("length mismatch".into()));
    }
    if xs.len() < 3 {
        return Err(Error::DegenerateInput(format!("{} points, need at least 3", xs.len())));
    }
    if xs.iter().chain(ys).chain(sigmas).any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput("non-finite input".into()));
    }
    if sigmas.iter().any(|&s| s <= 0.0) {
        return Err(Error::DegenerateInput("errors must be positive".into()));
    }
    let (x0, y0) = (xs[0], ys[0]);
    let w: Vec<f64> = sigmas.iter().map(|s| 1.0 / (s * s)).collect();
    let sw: f64 = w.iter().sum();
    let xm = x0 + w.iter().zip(xs).map(|(w, x)| w * (x - x0)).sum::<f64>() / sw;
    let ym = y0 + w.iter().zip(ys).map(|(w, y)| w * (y - y0)).sum::<f64>() / sw;
    let sxx: f64 = w.iter().zip(xs).map(|(w, x)| w * (x - xm).powi(2)).sum();
    if sxx <= 0.0 || sxx / sw < 1e-24 * (xm * xm).max(1.0) {
        return Err(Error::DegenerateInput("abscissae do not vary".into()));
    }
    let sxy: f64 = w.iter().zip(xs.iter().zip(ys)).map(|(w, (x, y))| w * (x - xm) * (y - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let se_slope = (1.0 / sxx).sqrt();
    let se_int = (1.0 / sw + xm * xm / sxx).sqrt();
    let chi: f64 = (0..xs.len())
        .map(|i| w[i] * (ys[i] - intercept - slope * xs[i]).powi(2))
        .sum();
    Ok((slope, intercept, [se_slope, se_int], chi))
}

fn range(xs: &[f64]) -> [f64; 2] {
    [xs.iter().cloned().fold(f64::INFINITY, f64::min), xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)]
}

/// Fits `log y = intercept + slope · log x`, with `errs` the absolute errors of `ys`.
pub fn fit_power_law(xs: &[f64], ys: &[f64], errs: &[f64]) -> Result<FitResult> {
    if xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return Err(Error::DegenerateInput("power-law fits need positive data".into()));
    }
    if errs.len() != ys.len() {
        return Err(Error::DegenerateInput("length mismatch".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let ls: Vec<f64> = errs.iter().zip(ys).map(|(e, y)| e / y).collect();
    let (slope, intercept, std_errors, chi_square) = weighted_line(&lx, &ly, &ls)?;
    Ok(FitResult { slope, intercept, std_errors, chi_square, dof: xs.len() - 2, x_range: range(xs) })
}

/// Fits `y = α + β·ln(1/a)` over spacings `a`; `slope` is β, `intercept` α.
///
/// `ys` are the correlator values already multiplied by their power-law
/// normalization (for example `a^(-5/4)·π_a^(-2)`).
pub fn fit_log_correction(spacings: &[f64], ys: &[f64], errs: &[f64]) -> Result<FitResult> {
    if spacings.len() < 4 {
        return Err(Error::DegenerateInput(format!("{} spacings, need at least 4", spacings.len())));
    }
    if spacings.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
        return Err(Error::DegenerateInput("spacings must be positive".into()));
    }
    let [lo, hi] = range(spacings);
    if hi / lo < 8.0 {
        return Err(Error::DegenerateInput(format!("spacings span a factor {}, need 8", hi / lo)));
    }
    let xs: Vec<f64> = spacings.iter().map(|a| -a.ln()).collect();
    let (slope, intercept, std_errors, chi_square) = weighted_line(&xs, ys, errs)?;
    Ok(FitResult { slope, intercept, std_errors, chi_square, dof: xs.len() - 2, x_range: [lo, hi] })
}

/// Value and error of a record with its `|ln a|` factor removed, the input
/// expected by [`fit_log_correction`].
pub fn without_log_factor(r: &EstimateRecord) -> Estimate {
    let f = r.spacing.ln().abs().powf(-r.normalization.log_pow);
    Estimate { mean: r.normalized_value * f, std_error: r.normalized_error * f }
}

/// `z ↦ scale · e^{i·rotation} · z + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: f64,
    #[serde(with = "crate::lattice::complex_pair")]
    pub translation: Complex64,
}

impl Similarity {
    pub const IDENTITY: Similarity = Similarity { scale: 1.0, rotation: 0.0, translation: Complex64::new(0.0, 0.0) };

    pub fn scaling(scale: f64) -> Self {
        Similarity { scale, ..Self::IDENTITY }
    }

    pub fn rotation(theta: f64) -> Self {
        Similarity { rotation: theta, ..Self::IDENTITY }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    pub fn apply(&self, z: Complex64) -> Complex64 {
        if self.is_identity() {
            return z;
        }
        Complex64::from_polar(self.scale, self.rotation) * z + self.translation
    }

    /// `|φ'|`, the same at every point.
    pub fn derivative_modulus(&self) -> f64 {
        self.scale
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceRatio {
    pub ratio: f64,
    pub std_error: f64,
}

/// Ratio of a correlator at transformed points to its covariant prediction
/// `value(z) · ∏ |φ'|^(-weight_i)`; close to 1 when covariance holds.
///
/// Transformed points must stay `margin` inside `domain`.
pub fn mobius_covariance_check(
    points: &[Complex64],
    weights: &[f64],
    transform: Similarity,
    domain: &Domain,
    margin: f64,
    mut correlator: impl FnMut(&[Complex64]) -> Result<Estimate>,
) -> Result<CovarianceRatio> {
    if points.len() != weights.len() {
        return Err(Error::DegenerateInput("one weight per point is needed".into()));
    }
    if !(transform.scale > 0.0 && transform.scale.is_finite()) {
        return Err(Error::DegenerateInput(format!("scale {}", transform.scale)));
    }
    let moved: Vec<Complex64> = points.iter().map(|&z| transform.apply(z)).collect();
    for (z, w) in points.iter().zip(&moved) {
        if !domain.covers_disk(*z, margin) || !domain.covers_disk(*w, margin) {
            return Err(Error::GeometryTooTight(format!("{w} leaves the domain margin")));
        }
    }
    let base = correlator(points)?;
    let image = if transform.is_identity() { base } else { correlator(&moved)? };
    let jac: f64 = weights.iter().map(|w| transform.derivative_modulus().powf(-w)).product();
    let expected = base.mean * jac;
    if expected == 0.0 {
        return Err(Error::DegenerateInput("correlator vanishes at the original points".into()));
    }
    let ratio = image.mean / expected;
    let rel = if transform.is_identity() {
        0.0
    } else {
        ((image.std_error / image.mean).powi(2) + (base.std_error / base.mean).powi(2)).sqrt()
    };
    Ok(CovarianceRatio { ratio, std_error: ratio.abs() * rel })
}

/// A fitted constant and the data it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedConstant {
    pub value: f64,
    pub std_error: f64,
    pub points: usize,
    /// Range of the sweep variable used.
    pub range: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantLedger {
    pub c1: FittedConstant,
    pub c2: Option<FittedConstant>,
    pub c0: Option<FittedConstant>,
    pub cl: Option<FittedConstant>,
}

/// Normalized two-point spin values by separation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoPointSample {
    pub separation: f64,
    pub value: Estimate,
}

/// Normalized energy-spin-spin value at `(z1, z2, z3)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThreePointSample {
    pub points: [Complex64; 3],
    pub value: Estimate,
}

/// Normalized four-point spin value with `z1`, `z2` the merging pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourPointSample {
    pub points: [Complex64; 4],
    pub value: Estimate,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Sweeps {
    pub two_point: Vec<TwoPointSample>,
    pub energy_spin_spin: Vec<ThreePointSample>,
    pub four_point: Vec<FourPointSample>,
}

impl Sweeps {
    /// Collects sweeps from records, keeping the finest spacing for each
    /// geometry.
    pub fn from_records(records: &[EstimateRecord]) -> Sweeps {
        let mut finest: BTreeMap<String, &EstimateRecord> = BTreeMap::new();
        for r in records.iter().filter(|r| r.component == "total") {
            let key = format!("{}|{}", r.kind, serde_json::to_string(&r.points).unwrap_or_default());
            match finest.get(&key) {
                Some(old) if old.spacing <= r.spacing => {}
                _ => {
                    finest.insert(key, r);
                }
            }
        }
        let mut s = Sweeps::default();
        for r in finest.values() {
            let value = Estimate { mean: r.normalized_value, std_error: r.normalized_error };
            let z: Vec<Complex64> = r.points.iter().map(|p| p.z).collect();
            let spins = r.points.iter().all(|p| p.role == PointRole::Spin);
            match (r.kind.as_str(), z.len()) {
                ("spin_n_point", 2) if spins => {
                    s.two_point.push(TwoPointSample { separation: (z[1] - z[0]).norm(), value })
                }
                ("spin_n_point", 4) if spins => {
                    s.four_point.push(FourPointSample { points: [z[0], z[1], z[2], z[3]], value })
                }
                ("energy_spin_spin", 3) => s.energy_spin_spin.push(ThreePointSample { points: [z[0], z[1], z[2]], value }),
                _ => {}
            }
        }
        s
    }
}

/// Weighted mean with its standard error.
fn weighted_mean(vals: &[f64], errs: &[f64]) -> Result<Estimate> {
    if vals.is_empty() || errs.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
        return Err(Error::DegenerateInput("weighted mean needs positive errors".into()));
    }
    let w: Vec<f64> = errs.iter().map(|e| 1.0 / (e * e)).collect();
    let sw: f64 = w.iter().sum();
    let mean = w.iter().zip(vals).map(|(w, v)| w * v).sum::<f64>() / sw;
    Ok(Estimate { mean, std_error: sw.recip().sqrt() })
}

/// Fits the constants of the spin two-point amplitude, the energy-spin-spin
/// amplitude and the near-merging four-point expansion.
///
/// * two-point: `⟨ψψ⟩ = √C1 · d^(-5/24)`
/// * energy-spin-spin: `⟨φψψ⟩ = C2 · F(z1, z2, z3)`
/// * four-point, with `d = |z2-z1|`, `z = (z1+z2)/2`:
///   `⟨ψψψψ⟩ = C1 d^(-5/24) (|z4-z3|^(-5/24) + d^(5/4) F(z,z3,z4) (C0 - CL·L))`,
///   `L = ln |(z2-z1)(z4-z3) / ((z3-z1)(z4-z2))|`.
pub fn fit_constant_ledger(sweeps: &Sweeps) -> Result<ConstantLedger> {
    if sweeps.two_point.is_empty() {
        return Err(Error::MissingSweep("two-point spin sweep is required for C1".into()));
    }
    let seps: Vec<f64> = sweeps.two_point.iter().map(|s| s.separation).collect();
    let scale: Vec<f64> = seps.iter().map(|d| d.powf(5.0 / 24.0)).collect();
    let amp = weighted_mean(
        &sweeps.two_point.iter().zip(&scale).map(|(s, f)| s.value.mean * f).collect::<Vec<_>>(),
        &sweeps.two_point.iter().zip(&scale).map(|(s, f)| s.value.std_error * f).collect::<Vec<_>>(),
    )?;
    let c1 = FittedConstant {
        value: amp.mean * amp.mean,
        std_error: 2.0 * amp.mean.abs() * amp.std_error,
        points: seps.len(),
        range: range(&seps),
    };

    let c2 = if sweeps.energy_spin_spin.is_empty() {
        None
    } else {
        let mut vals = vec![];
        let mut errs = vec![];
        let mut fs = vec![];
        for s in &sweeps.energy_spin_spin {
            let f = eval_f(s.points[0], s.points[1], s.points[2])?;
            vals.push(s.value.mean / f);
            errs.push(s.value.std_error / f);
            fs.push(f);
        }
        let e = weighted_mean(&vals, &errs)?;
        Some(FittedConstant { value: e.mean, std_error: e.std_error, points: vals.len(), range: range(&fs) })
    };

    let (c0, cl) = if sweeps.four_point.is_empty() {
        (None, None)
    } else {
        let mut ls = vec![];
        let mut ys = vec![];
        let mut es = vec![];
        let mut ds = vec![];
        for s in &sweeps.four_point {
            let [z1, z2, z3, z4] = s.points;
            let d = (z2 - z1).norm();
            let f = eval_f((z1 + z2) / 2.0, z3, z4)?;
            let lead = c1.value * d.powf(-5.0 / 24.0);
            let unit = lead * d.powf(1.25) * f;
            if unit == 0.0 {
                return Err(Error::DegenerateInput("vanishing four-point prefactor".into()));
            }
            let cross = ((z2 - z1) * (z4 - z3) / ((z3 - z1) * (z4 - z2))).norm().ln();
            ys.push((s.value.mean - lead * (z4 - z3).norm().powf(-5.0 / 24.0)) / unit);
            es.push(s.value.std_error / unit);
            ls.push(cross);
            ds.push(d);
        }
        let (slope, intercept, se, _) = weighted_line(&ls, &ys, &es)?;
        let r = range(&ds);
        (
            Some(FittedConstant { value: intercept, std_error: se[1], points: ys.len(), range: r }),
            Some(FittedConstant { value: -slope, std_error: se[0], points: ys.len(), range: r }),
        )
    };
    Ok(ConstantLedger { c1, c2, c0, cl })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn c(x: f64, y: f64) -> Complex64 {
        Complex64::new(x, y)
    }

    #[test]
    fn f_closed_form() {
        let v = eval_f(c(0.0, 0.0), c(1.0, 0.0), c(-1.0, 0.0)).unwrap();
        assert!((v - 2f64.powf(25.0 / 24.0)).abs() < 1e-14);
        assert!((v - 2.0587).abs() < 1e-4);
        assert!(matches!(eval_f(c(0.0, 0.0), c(1.0, 0.0), c(1.0, 0.0)), Err(Error::CoincidentPoints(_))));
    }

    #[test]
    fn exact_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0, 16.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-1.25)).collect();
        let errs: Vec<f64> = ys.iter().map(|y| 0.01 * y).collect();
        let f = fit_power_law(&xs, &ys, &errs).unwrap();
        assert!((f.slope + 1.25).abs() < 1e-12);
        assert!((f.intercept - 3f64.ln()).abs() < 1e-12);
        assert!(f.chi_square < 1e-20);
        assert_eq!(f.dof, 3);
        assert!(fit_power_law(&xs[..2], &ys[..2], &errs[..2]).is_err());
        assert!(fit_power_law(&[1.0, 1.0, 1.0], &ys[..3], &errs[..3]).is_err());
    }

    #[test]
    fn noisy_power_law_coverage() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0];
        let mut covered = 0;
        let trials = 400;
        for _ in 0..trials {
            let mut ys = vec![];
            let mut errs = vec![];
            for &x in &xs {
                let y: f64 = 0.7 * f64::powf(x, -0.4);
                let e = 0.02 * y;
                ys.push(y + Normal::new(0.0, e).unwrap().sample(&mut rng));
                errs.push(e);
            }
            let f = fit_power_law(&xs, &ys, &errs).unwrap();
            if (f.slope + 0.4).abs() <= 2.0 * f.std_errors[0] {
                covered += 1;
            }
        }
        assert!(covered as f64 >= 0.93 * trials as f64, "{covered}/{trials}");
    }

    #[test]
    fn log_correction_recovery() {
        let a = [1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0];
        let flat = vec![0.3; 5];
        let errs = vec![0.01; 5];
        let f = fit_log_correction(&a, &flat, &errs).unwrap();
        assert_eq!(f.slope, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noisy: Vec<f64> = a.iter().map(|x: &f64| 0.2 + 0.05 * (1.0 / x).ln() + rng.random_range(-0.01..0.01)).collect();
        let f = fit_log_correction(&a, &noisy, &errs).unwrap();
        assert!((f.slope - 0.05).abs() < 2.0 * f.std_errors[0]);
        assert!(fit_log_correction(&a[..3], &flat[..3], &errs[..3]).is_err());
        assert!(fit_log_correction(&a[..4], &flat[..4], &errs[..4]).is_ok());
        assert!(fit_log_correction(&[0.1, 0.09, 0.08, 0.05], &flat[..4], &errs[..4]).is_err());
    }

    #[test]
    fn covariance_identity_and_exact_model() {
        let d = Domain::disk(0.05, 3.0).unwrap();
        let pts = [c(-0.3, 0.0), c(0.4, 0.1)];
        let w = [SPIN_WEIGHT, SPIN_WEIGHT];
        let model = |z: &[Complex64]| Ok(Estimate { mean: (z[1] - z[0]).norm().powf(-5.0 / 24.0), std_error: 0.01 });
        let id = mobius_covariance_check(&pts, &w, Similarity::IDENTITY, &d, 0.1, model).unwrap();
        assert_eq!(id.ratio, 1.0);
        let sim = Similarity { scale: 2.0, rotation: 0.7, translation: c(0.1, -0.2) };
        let r = mobius_covariance_check(&pts, &w, sim, &d, 0.1, model).unwrap();
        assert!((r.ratio - 1.0).abs() < 1e-12);
        let far = Similarity::scaling(10.0);
        assert!(matches!(
            mobius_covariance_check(&pts, &w, far, &d, 0.1, model),
            Err(Error::GeometryTooTight(_))
        ));
    }

    #[test]
    fn ledger_round_trip() {
        let (c1, c2, c0, cl): (f64, f64, f64, f64) = (0.8, 1.7, -0.3, 0.45);
        let mut s = Sweeps::default();
        for d in [0.1, 0.2, 0.4, 0.8] {
            let v = c1.sqrt() * f64::powf(d, -5.0 / 24.0);
            s.two_point.push(TwoPointSample { separation: d, value: Estimate { mean: v, std_error: 1e-4 * v } });
        }
        for z in [[c(0.0, 0.0), c(1.0, 0.0), c(-1.0, 0.0)], [c(0.0, 0.0), c(0.5, 0.5), c(0.2, -0.9)]] {
            let v = c2 * eval_f(z[0], z[1], z[2]).unwrap();
            s.energy_spin_spin.push(ThreePointSample { points: z, value: Estimate { mean: v, std_error: 1e-4 * v } });
        }
        for d in [0.02, 0.04, 0.08, 0.16] {
            let z = [c(-d / 2.0, 0.0), c(d / 2.0, 0.0), c(0.0, 1.0), c(0.3, -1.0)];
            let f = eval_f(c(0.0, 0.0), z[2], z[3]).unwrap();
            let l = ((z[1] - z[0]) * (z[3] - z[2]) / ((z[2] - z[0]) * (z[3] - z[1]))).norm().ln();
            let v = c1 * d.powf(-5.0 / 24.0) * ((z[3] - z[2]).norm().powf(-5.0 / 24.0) + d.powf(1.25) * f * (c0 - cl * l));
            s.four_point.push(FourPointSample { points: z, value: Estimate { mean: v, std_error: 1e-9 } });
        }
        let led = fit_constant_ledger(&s).unwrap();
        assert!((led.c1.value - c1).abs() < 2.0 * led.c1.std_error.max(1e-12));
        let k2 = led.c2.unwrap();
        assert!((k2.value - c2).abs() < 2.0 * k2.std_error);
        let k0 = led.c0.unwrap();
        let kl = led.cl.unwrap();
        assert!((k0.value - c0).abs() < 1e-6, "{k0:?}");
        assert!((kl.value - cl).abs() < 1e-6, "{kl:?}");
        assert!(matches!(fit_constant_ledger(&Sweeps::default()), Err(Error::MissingSweep(_))));
    }
}
