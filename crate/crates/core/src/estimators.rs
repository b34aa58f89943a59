//! Monte Carlo estimators for field correlators.
//!
//! A [`CorrelatorRequest`] is compiled against a domain into a
//! [`CompiledRequest`]: a per-configuration probe producing a fixed list of
//! indicator observables, plus the formulas that turn observable means into
//! reported components. Sampling runs in batches; batch `b` always covers
//! sample indices `b·batch_size .. (b+1)·batch_size` of its stream, so the
//! counts do not depend on the number of workers.
//!
//! Energy insertions are mean-subtracted products of two spins. For insertion
//! offsets `(u, v)` and a companion pair `(p, q)` (two spins, or the offsets of
//! a second energy insertion) the parity rule gives, per configuration,
//!
//! `S_u S_v S_p S_q = J + R1 + R2`
//!
//! with `J = 1{u↔v, p↔q}`, `R1 = 1{u↔p, v↔q, u↮v}`, `R2 = 1{u↔q, v↔p, u↮v}`.
//! The connected correlator is `E[R1] + E[R2] + (E[J] - E[X]E[Y])` where
//! `X = 1{u↔v}` and `Y = 1{p↔q}`. The product term uses split halves.

use std::ops::Range;
use std::sync::{Arc, OnceLock};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{point_annulus, ArmAnnulus, OneArmProbe};
use crate::lattice::{energy_offsets, nearest_vertex, Domain, LatticePoint, PointRole, PointSpec};
use crate::sampler::{Configuration, Scratch, StreamKey};
use crate::stats::{
    binomial_mean, split_halves, BatchStats, Estimate, EstimateRecord, Normalization, PiPlugin, MIN_BATCHES,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelatorKind {
    SpinNPoint,
    EnergySpinSpin,
    EnergyEnergy,
    EdeltaSpinSpin,
    EdeltaEnergy,
    EdeltaEdelta,
    PiA,
    OneArmCurve,
    FourArmCurve,
    AnnulusTerms,
}

impl CorrelatorKind {
    pub fn name(self) -> &'static str {
        match self {
            CorrelatorKind::SpinNPoint => "spin_n_point",
            CorrelatorKind::EnergySpinSpin => "energy_spin_spin",
            CorrelatorKind::EnergyEnergy => "energy_energy",
            CorrelatorKind::EdeltaSpinSpin => "edelta_spin_spin",
            CorrelatorKind::EdeltaEnergy => "edelta_energy",
            CorrelatorKind::EdeltaEdelta => "edelta_edelta",
            CorrelatorKind::PiA => "pi_a",
            CorrelatorKind::OneArmCurve => "one_arm_curve",
            CorrelatorKind::FourArmCurve => "four_arm_curve",
            CorrelatorKind::AnnulusTerms => "annulus_terms",
        }
    }

    fn is_pair(self) -> bool {
        matches!(
            self,
            CorrelatorKind::EnergySpinSpin
                | CorrelatorKind::EnergyEnergy
                | CorrelatorKind::EdeltaSpinSpin
                | CorrelatorKind::EdeltaEnergy
                | CorrelatorKind::EdeltaEdelta
        )
    }

    /// Kinds whose estimates contain products of means.
    pub fn needs_pairs(self) -> bool {
        self.is_pair() || self == CorrelatorKind::AnnulusTerms
    }
}

/// What to estimate, where, and with how many samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelatorRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub kind: CorrelatorKind,
    #[serde(default)]
    pub points: Vec<PointSpec>,
    /// Restricts the request to one spacing of a sweep.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<f64>,
    pub n_samples: u64,
    pub batch_size: u64,
    /// Radii for the arm curves.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub radii: Vec<f64>,
    /// Outer cutoff of the annulus decomposition.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
}

impl CorrelatorRequest {
    pub fn new(kind: CorrelatorKind, points: Vec<PointSpec>, n_samples: u64, batch_size: u64) -> Self {
        CorrelatorRequest {
            id: None,
            kind,
            points,
            spacing: None,
            n_samples,
            batch_size,
            radii: Vec::new(),
            epsilon: None,
        }
    }

    pub fn with_radii(mut self, radii: Vec<f64>) -> Self {
        self.radii = radii;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = Some(epsilon);
        self
    }

    pub fn label(&self) -> String {
        self.id.clone().unwrap_or_else(|| self.kind.name().to_string())
    }

    pub fn n_batches(&self) -> Result<u64> {
        if self.batch_size == 0 || self.n_samples == 0 {
            return Err(Error::InvalidRequest("n_samples and batch_size must be positive".into()));
        }
        if self.n_samples % self.batch_size != 0 {
            return Err(Error::InvalidRequest(format!(
                "n_samples {} is not a multiple of batch_size {}",
                self.n_samples, self.batch_size
            )));
        }
        let nb = self.n_samples / self.batch_size;
        if nb < MIN_BATCHES {
            return Err(Error::InvalidRequest(format!("{nb} batches, at least {MIN_BATCHES} are needed")));
        }
        if self.kind.needs_pairs() && nb % 2 == 1 {
            return Err(Error::InvalidRequest(format!(
                "{} needs an even number of batches, got {nb}",
                self.kind.name()
            )));
        }
        Ok(nb)
    }
}

/// Per-configuration evaluator.
#[derive(Clone, Debug)]
enum Probe {
    OneArm { probe: OneArmProbe, radii: Vec<f64> },
    FourArm { center: usize, annuli: Vec<ArmAnnulus> },
    Spin { sites: Vec<usize> },
    Chain(Box<ChainProbe>),
}

/// Nested chain of regions `C_1 ⊂ ... ⊂ C_K` (the last one the whole domain)
/// encoded by the index of the first region containing each site.
#[derive(Clone, Debug)]
struct ChainProbe {
    pair1: [usize; 2],
    pair2: [usize; 2],
    /// First region containing each site, 1..=K.
    level: Vec<u8>,
    /// `K + 1 - level`, used for searches in complements.
    co_level: Vec<u8>,
    k: usize,
}

/// One reported component: a linear combination of observable means plus
/// products of observable means.
#[derive(Clone, Debug)]
struct Component {
    name: String,
    linear: Vec<(usize, f64)>,
    products: Vec<(usize, usize, f64)>,
    normalization: Normalization,
    binomial: bool,
}

impl Component {
    fn mean(name: impl Into<String>, k: usize, normalization: Normalization) -> Self {
        Component { name: name.into(), linear: vec![(k, 1.0)], products: vec![], normalization, binomial: false }
    }

    fn exact(&self, means: &[f64]) -> f64 {
        self.linear.iter().map(|&(k, c)| c * means[k]).sum::<f64>()
            + self.products.iter().map(|&(x, y, c)| c * means[x] * means[y]).sum::<f64>()
    }

    fn estimate(&self, batches: &[BatchStats]) -> Result<Estimate> {
        if self.binomial {
            return binomial_mean(batches, self.linear[0].0);
        }
        if self.products.is_empty() {
            return linear_batch_means(batches, &self.linear);
        }
        split_halves(batches, &self.linear, &self.products)
    }
}

fn linear_batch_means(batches: &[BatchStats], linear: &[(usize, f64)]) -> Result<Estimate> {
    if (batches.len() as u64) < MIN_BATCHES {
        return Err(Error::InvalidRequest(format!(
            "{} batches, at least {MIN_BATCHES} are needed",
            batches.len()
        )));
    }
    let n: u64 = batches.iter().map(|b| b.n).sum();
    let pooled: f64 = linear
        .iter()
        .map(|&(k, c)| c * batches.iter().map(|b| b.sums[k]).sum::<u64>() as f64 / n as f64)
        .sum();
    let vals: Vec<f64> = batches
        .iter()
        .map(|b| linear.iter().map(|&(k, c)| c * b.mean(k)).sum())
        .collect();
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
    Ok(Estimate { mean: pooled, std_error: (var / vals.len() as f64).sqrt() })
}

/// Worker-private buffers.
pub struct Workspace {
    scratch: Scratch,
    ids: Vec<Option<u32>>,
    buckets: Vec<Vec<u32>>,
}

impl Workspace {
    pub fn new(domain: &Domain) -> Self {
        Workspace { scratch: Scratch::for_domain(domain), ids: Vec::new(), buckets: Vec::new() }
    }
}

/// Normalization contributed by one insertion.
fn point_normalization(p: &PointSpec) -> Normalization {
    match p.role {
        PointRole::Spin => Normalization::pi_power(1),
        PointRole::EnergyCenter => Normalization { a_pow: -1.25, log_pow: -1.0, pi_pow: 0, two_delta: None },
        PointRole::EnergyDeltaCenter => Normalization::pi_power(2),
    }
}

fn product_normalization(points: &[PointSpec]) -> Normalization {
    points.iter().map(point_normalization).fold(Normalization::NONE, Normalization::combine)
}

fn without_log(n: Normalization) -> Normalization {
    Normalization { log_pow: 0.0, ..n }
}

fn radius_label(r: f64) -> String {
    format!("r={r}")
}

/// `Σ_j (E[IO_j] - E[I_j]·E[O_j])` over chain indices `js` (1-based), with
/// observables laid out as `IO_1..K, I_1..K, O_1..K`.
fn chain_sum(name: &str, k: usize, js: Range<usize>, normalization: Normalization) -> Component {
    let mut linear = vec![];
    let mut products = vec![];
    for j in js {
        linear.push((j - 1, 1.0));
        products.push((k + j - 1, 2 * k + j - 1, -1.0));
    }
    Component { name: name.into(), linear, products, normalization, binomial: false }
}

/// A request bound to a domain, ready to sample.
#[derive(Clone, Debug)]
pub struct CompiledRequest {
    pub request_id: String,
    pub kind: CorrelatorKind,
    pub points: Vec<PointSpec>,
    pub batch_size: u64,
    pub n_batches: u64,
    domain: Arc<Domain>,
    probe: Probe,
    n_obs: usize,
    components: Vec<Component>,
    /// Number of regions in an annulus chain (0 otherwise).
    pub chain_len: usize,
    /// Dyadic scales per disk family in an annulus chain.
    pub scales: usize,
}

impl CompiledRequest {
    pub fn compile(req: &CorrelatorRequest, domain: Arc<Domain>) -> Result<Self> {
        let n_batches = req.n_batches()?;
        let a = domain.spacing();
        if let Some(s) = req.spacing {
            if (s - a).abs() > 1e-12 * a {
                return Err(Error::InconsistentInputs(format!("request spacing {s} but domain spacing {a}")));
            }
        }
        for p in &req.points {
            p.validate(a)?;
        }
        let mut out = CompiledRequest {
            request_id: req.label(),
            kind: req.kind,
            points: req.points.clone(),
            batch_size: req.batch_size,
            n_batches,
            domain: domain.clone(),
            probe: Probe::Spin { sites: vec![] },
            n_obs: 0,
            components: vec![],
            chain_len: 0,
            scales: 0,
        };
        match req.kind {
            CorrelatorKind::PiA => out.compile_pi(req)?,
            CorrelatorKind::OneArmCurve => out.compile_one_arm(req)?,
            CorrelatorKind::FourArmCurve => out.compile_four_arm(req)?,
            CorrelatorKind::SpinNPoint => out.compile_spin(req)?,
            CorrelatorKind::AnnulusTerms => out.compile_chain(req)?,
            _ => out.compile_pair(req)?,
        }
        Ok(out)
    }

    fn site(&self, p: LatticePoint) -> Result<usize> {
        self.domain.rank_of(p).ok_or_else(|| Error::OutOfDomain(p.to_string()))
    }

    fn check_margin(&self, p: &PointSpec) -> Result<()> {
        let a = self.domain.spacing();
        if self.domain.is_disk() && !self.domain.covers_disk(p.z, p.half_width(a) + a) {
            return Err(Error::OutOfDomain(format!("{} lacks one spacing of margin", p.z)));
        }
        Ok(())
    }

    fn compile_pi(&mut self, req: &CorrelatorRequest) -> Result<()> {
        if !req.points.is_empty() {
            return Err(Error::InvalidRequest("pi_a takes no points".into()));
        }
        let a = self.domain.spacing();
        let origin = Complex64::new(0.0, 0.0);
        let fits = if self.domain.is_disk() {
            self.domain.radius() > 1.0 + a
        } else {
            self.domain.covers_disk(origin, 1.0)
        };
        if !fits {
            return Err(Error::DomainTooSmall(format!(
                "radius {} cannot hold the unit ball at spacing {a}",
                self.domain.radius()
            )));
        }
        let probe = OneArmProbe::new(&self.domain, LatticePoint::ORIGIN, 1.0)?;
        self.probe = Probe::OneArm { probe, radii: vec![1.0] };
        self.n_obs = 1;
        self.components = vec![Component {
            binomial: true,
            ..Component::mean("total", 0, Normalization::NONE)
        }];
        Ok(())
    }

    fn single_spin_point(&self, req: &CorrelatorRequest) -> Result<LatticePoint> {
        match req.points.as_slice() {
            [p] if p.role == PointRole::Spin => nearest_vertex(p.z, &self.domain),
            _ => Err(Error::InvalidRequest(format!("{} takes exactly one spin point", req.kind.name()))),
        }
    }

    fn check_radii(req: &CorrelatorRequest) -> Result<()> {
        if req.radii.is_empty() {
            return Err(Error::InvalidRequest(format!("{} needs radii", req.kind.name())));
        }
        if req.radii.iter().any(|r| !(r.is_finite() && *r > 0.0)) || req.radii.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidRequest("radii must be positive and strictly increasing".into()));
        }
        Ok(())
    }

    fn compile_one_arm(&mut self, req: &CorrelatorRequest) -> Result<()> {
        let p = self.single_spin_point(req)?;
        Self::check_radii(req)?;
        let probe = OneArmProbe::new(&self.domain, p, *req.radii.last().unwrap())?;
        self.n_obs = req.radii.len();
        self.components = req
            .radii
            .iter()
            .enumerate()
            .map(|(k, &r)| Component::mean(radius_label(r), k, Normalization::NONE))
            .collect();
        self.probe = Probe::OneArm { probe, radii: req.radii.clone() };
        Ok(())
    }

    fn compile_four_arm(&mut self, req: &CorrelatorRequest) -> Result<()> {
        let p = self.single_spin_point(req)?;
        Self::check_radii(req)?;
        let annuli = req
            .radii
            .iter()
            .map(|&r| point_annulus(&self.domain, p, r))
            .collect::<Result<Vec<_>>>()?;
        self.n_obs = annuli.len();
        self.components = req
            .radii
            .iter()
            .enumerate()
            .map(|(k, &r)| Component::mean(radius_label(r), k, Normalization::NONE))
            .collect();
        self.probe = Probe::FourArm { center: self.site(p)?, annuli };
        Ok(())
    }

    fn compile_spin(&mut self, req: &CorrelatorRequest) -> Result<()> {
        if req.points.iter().any(|p| p.role != PointRole::Spin) {
            return Err(Error::InvalidRequest("spin_n_point takes spin points only".into()));
        }
        if req.points.is_empty() {
            return Err(Error::InvalidRequest("spin_n_point needs points".into()));
        }
        if req.points.len() % 2 == 1 {
            return Err(Error::OddPointCount(req.points.len()));
        }
        let mut verts = Vec::new();
        for p in &req.points {
            self.check_margin(p)?;
            verts.push(nearest_vertex(p.z, &self.domain)?);
        }
        let mut sorted = verts.clone();
        sorted.sort();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::CoincidentPoints("two spin insertions share a vertex".into()));
        }
        let sites = verts.iter().map(|&v| self.site(v)).collect::<Result<Vec<_>>>()?;
        self.probe = Probe::Spin { sites };
        self.n_obs = 1;
        self.components = vec![Component::mean("total", 0, product_normalization(&req.points))];
        Ok(())
    }

    /// Vertices of the two pairs for the covariance-type kinds.
    fn pairs(&self, req: &CorrelatorRequest) -> Result<([LatticePoint; 2], [LatticePoint; 2])> {
        use PointRole::*;
        let roles: Vec<PointRole> = req.points.iter().map(|p| p.role).collect();
        let expected: &[PointRole] = match req.kind {
            CorrelatorKind::EnergySpinSpin => &[EnergyCenter, Spin, Spin],
            CorrelatorKind::EnergyEnergy => &[EnergyCenter, EnergyCenter],
            CorrelatorKind::EdeltaSpinSpin => &[EnergyDeltaCenter, Spin, Spin],
            CorrelatorKind::EdeltaEnergy => &[EnergyDeltaCenter, EnergyCenter],
            CorrelatorKind::EdeltaEdelta => &[EnergyDeltaCenter, EnergyDeltaCenter],
            CorrelatorKind::AnnulusTerms => match roles.as_slice() {
                [EnergyCenter | EnergyDeltaCenter, Spin, Spin] => &roles,
                [EnergyCenter | EnergyDeltaCenter, EnergyCenter | EnergyDeltaCenter] => &roles,
                _ => &[EnergyCenter, Spin, Spin],
            },
            _ => unreachable!(),
        };
        if roles != expected {
            return Err(Error::InvalidRequest(format!(
                "{} expects point roles {:?}, got {:?}",
                req.kind.name(),
                expected,
                roles
            )));
        }
        for p in &req.points {
            self.check_margin(p)?;
        }
        let (u, v) = energy_offsets(&req.points[0], &self.domain)?;
        let second = if req.points.len() == 3 {
            [nearest_vertex(req.points[1].z, &self.domain)?, nearest_vertex(req.points[2].z, &self.domain)?]
        } else {
            let (p, q) = energy_offsets(&req.points[1], &self.domain)?;
            [p, q]
        };
        let all = [u, v, second[0], second[1]];
        for i in 0..4 {
            for j in i + 1..4 {
                if all[i] == all[j] {
                    return Err(Error::GeometryTooTight(format!("vertices {} coincide", all[i])));
                }
            }
        }
        self.check_separations(req)?;
        Ok(([u, v], second))
    }

    fn check_separations(&self, req: &CorrelatorRequest) -> Result<()> {
        let a = self.domain.spacing();
        let pts = &req.points;
        let need = |i: usize, j: usize| -> f64 {
            let (pi, pj) = (&pts[i], &pts[j]);
            match req.kind {
                CorrelatorKind::EnergySpinSpin => 4.0 * a,
                CorrelatorKind::EnergyEnergy => 8.0 * a,
                _ => {
                    let w = |p: &PointSpec| match p.role {
                        PointRole::Spin => 0.0,
                        _ => p.half_width(a),
                    };
                    (2.0 * (w(pi) + w(pj))).max(2.0 * a)
                }
            }
        };
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                let d = (pts[i].z - pts[j].z).norm();
                if d < need(i, j) * (1.0 - 1e-12) {
                    return Err(Error::GeometryTooTight(format!(
                        "points {i} and {j} are {d} apart, need {}",
                        need(i, j)
                    )));
                }
            }
        }
        Ok(())
    }

    /// Nested regions for the telescoped covariance: disks of radius
    /// `2^m · 2h` (diagnostics) or `2^m · h` (correlators) around the first
    /// insertion, `h` its half-width, then, for a
    /// second energy-type insertion, complements of its own disks, then the
    /// whole domain. Returns the probe and the number of disks per family.
    ///
    /// For the annulus diagnostics the cutoff `ε` bounds the disks and at
    /// least two scales are required. For plain correlators the chain is only
    /// a variance reduction, so it takes as many scales as fit (possibly none).
    fn build_chain(
        &self,
        req: &CorrelatorRequest,
        p1: [LatticePoint; 2],
        p2: [LatticePoint; 2],
        diagnostics: bool,
    ) -> Result<(ChainProbe, usize, usize)> {
        let a = self.domain.spacing();
        let first = &req.points[0];
        let c1 = nearest_vertex(first.z, &self.domain)?.embed(a);
        // Correlator chains start one dyadic step finer than the diagnostic
        // disks, so coarse spacings still get at least one shell.
        let stretch = if diagnostics { 2.0 } else { 1.0 };
        let base1 = stretch * first.half_width(a);
        let double = req.points.len() == 2;
        let (c2, base2) = if double {
            let p = &req.points[1];
            (Some(nearest_vertex(p.z, &self.domain)?.embed(a)), stretch * p.half_width(a))
        } else {
            (None, 0.0)
        };
        let dist = match c2 {
            Some(c2) => (c2 - c1).norm(),
            None => p2.iter().map(|p| (p.embed(a) - c1).norm()).fold(f64::INFINITY, f64::min),
        };
        let scales = |cap: f64, base: f64| -> usize {
            let mut m = 0;
            while base > 0.0 && base * 2f64.powi(m as i32 + 1) <= cap * (1.0 + 1e-12) && m < 60 {
                m += 1;
            }
            m
        };
        let (mut m1, mut m2) = match (req.epsilon, diagnostics) {
            (Some(_), _) | (None, true) => {
                let eps = req.epsilon.unwrap_or(if double { dist / 4.0 } else { dist / 2.0 });
                if !(eps.is_finite() && eps > 0.0) {
                    return Err(Error::MarginTooSmall(format!("epsilon {eps}")));
                }
                (scales(eps, base1), if double { scales(eps, base2) } else { 0 })
            }
            (None, false) => {
                let cap = if double { dist / 2.0 * (1.0 - 1e-9) } else { dist * (1.0 - 1e-9) };
                (scales(cap, base1), if double { scales(cap, base2) } else { 0 })
            }
        };
        if diagnostics && (m1 < 2 || (double && m2 < 2)) {
            return Err(Error::MarginTooSmall(format!(
                "fewer than 2 dyadic scales fit between the insertion and the cutoff at spacing {a}"
            )));
        }
        let pair1 = [self.site(p1[0])?, self.site(p1[1])?];
        let pair2 = [self.site(p2[0])?, self.site(p2[1])?];
        loop {
            let r1: Vec<f64> = (1..=m1).map(|j| base1 * 2f64.powi(j as i32)).collect();
            let r2: Vec<f64> = (1..=m2).map(|j| base2 * 2f64.powi(j as i32)).collect();
            let k = m1 + m2 + 1;
            let disjoint = match c2 {
                Some(c2) => r1.last().copied().unwrap_or(0.0) + r2.last().copied().unwrap_or(0.0) < (c2 - c1).norm(),
                None => true,
            };
            let level = if disjoint {
                let shell = |c: Complex64, radii: &[f64], x: Complex64| {
                    radii.iter().position(|&r| (x - c).norm() <= r * (1.0 + 1e-12))
                };
                self.domain
                    .sites()
                    .iter()
                    .map(|x| {
                        let z = x.embed(a);
                        let l = match shell(c1, &r1, z) {
                            Some(j) => j + 1,
                            None => match c2.and_then(|c| shell(c, &r2, z)) {
                                Some(j) => k - j,
                                None => m1 + 1,
                            },
                        };
                        l as u8
                    })
                    .collect::<Vec<u8>>()
            } else {
                Vec::new()
            };
            let ok = disjoint
                && pair1.iter().all(|&i| level[i] == 1)
                && pair2.iter().all(|&i| level[i] as usize == k);
            if ok {
                let co_level = level.iter().map(|&l| (k + 1) as u8 - l).collect();
                return Ok((ChainProbe { pair1, pair2, level, co_level, k }, m1, m2));
            }
            if diagnostics || (m1 == 0 && m2 == 0) {
                return Err(Error::MarginTooSmall(
                    "insertions do not sit in the innermost regions of the disk chain".into(),
                ));
            }
            m1 = m1.saturating_sub(1);
            m2 = m2.saturating_sub(1);
        }
    }

    fn compile_pair(&mut self, req: &CorrelatorRequest) -> Result<()> {
        let (p1, p2) = self.pairs(req)?;
        let (chain, m1, _) = self.build_chain(req, p1, p2, false)?;
        let k = chain.k;
        self.probe = Probe::Chain(Box::new(chain));
        self.n_obs = 3 * k + 2;
        self.chain_len = k;
        self.scales = m1;
        let norm = product_normalization(&req.points);
        let r3 = chain_sum("R3", k, 1..k + 1, norm);
        let total = |name: &str, n| {
            let mut c = chain_sum(name, k, 1..k + 1, n);
            c.linear.extend([(3 * k, 1.0), (3 * k + 1, 1.0)]);
            c
        };
        let mut comps = vec![
            total("total", norm),
            Component::mean("R1", 3 * k, norm),
            Component::mean("R2", 3 * k + 1, norm),
            r3,
        ];
        if req.kind == CorrelatorKind::EnergyEnergy {
            comps.push(total("total_log1", Normalization { log_pow: -1.0, ..norm }));
        }
        self.components = comps;
        Ok(())
    }

    fn compile_chain(&mut self, req: &CorrelatorRequest) -> Result<()> {
        let (p1, p2) = self.pairs(req)?;
        let (chain, m1, _) = self.build_chain(req, p1, p2, true)?;
        let k = chain.k;
        self.probe = Probe::Chain(Box::new(chain));
        self.n_obs = 3 * k + 2;
        self.chain_len = k;
        self.scales = m1;
        let full = product_normalization(&req.points);
        let term_norm = without_log(full);
        let mut comps: Vec<Component> = (1..=k).map(|j| chain_sum(&format!("T{j}"), k, j..j + 1, term_norm)).collect();
        let mut sum = chain_sum("sum", k, 2..k, Normalization { log_pow: -1.0, ..term_norm });
        if req.points.len() == 2 {
            // The crossing term between the two disk families is not part of
            // the logarithmic sum.
            let skip = chain_sum("", k, m1 + 1..m1 + 2, term_norm);
            sum.linear.retain(|t| !skip.linear.contains(t));
            sum.products.retain(|t| !skip.products.contains(t));
        }
        comps.push(sum);
        comps.push(chain_sum("R3", k, 1..k + 1, full));
        self.components = comps;
        Ok(())
    }

    pub fn domain(&self) -> &Arc<Domain> {
        &self.domain
    }

    pub fn observables(&self) -> usize {
        self.n_obs
    }

    pub fn component_names(&self) -> Vec<String> {
        self.components.iter().map(|c| c.name.clone()).collect()
    }

    pub fn needs_pi(&self) -> bool {
        self.components.iter().any(|c| c.normalization.needs_pi())
    }

    /// Adds this configuration's indicator values to `acc`.
    pub fn evaluate(&self, config: &Configuration, ws: &mut Workspace, acc: &mut [u64]) {
        match &self.probe {
            Probe::OneArm { probe, radii } => {
                let reach = probe.reach_sq(config, &mut ws.scratch);
                if reach.is_some() {
                    let a = self.domain.spacing();
                    for (k, &r) in radii.iter().enumerate() {
                        acc[k] += OneArmProbe::holds_at(reach, r, a) as u64;
                    }
                }
            }
            Probe::FourArm { center, annuli } => {
                if !config.is_black(*center) {
                    for (k, ann) in annuli.iter().enumerate() {
                        if !ann.four_arm(config) {
                            break;
                        }
                        acc[k] += 1;
                    }
                }
            }
            Probe::Spin { sites } => {
                ws.ids.resize(sites.len(), None);
                // A white insertion already forces parity zero.
                ws.scratch.explore_seeds(config, sites, &mut ws.ids, |g| (0..sites.len()).any(|i| !g.is_black(i)));
                acc[0] += crate::sampler::spin_parity(&ws.ids) as u64;
            }
            Probe::Chain(c) => {
                let k = c.k;
                let seeds = [c.pair1[0], c.pair1[1], c.pair2[0], c.pair2[1]];
                ws.ids.resize(4, None);
                // The cross relations only matter while pair 1 is apart and
                // all four sites are black.
                ws.scratch.explore_seeds(config, &seeds, &mut ws.ids, |g| {
                    g.settled(0, 1)
                        && g.settled(2, 3)
                        && (g.same(0, 1)
                            || (0..4).any(|i| !g.is_black(i))
                            || (g.settled(0, 2) && g.settled(1, 3) && g.settled(0, 3) && g.settled(1, 2)))
                });
                let id = &ws.ids;
                let same = |i: usize, j: usize| id[i].is_some() && id[i] == id[j];
                let x = same(0, 1);
                let y = same(2, 3);
                acc[3 * k] += (same(0, 2) && same(1, 3) && !x) as u64;
                acc[3 * k + 1] += (same(0, 3) && same(1, 2) && !x) as u64;
                // Pair 1 is first connected inside region `s`.
                let s = if x { minimax_level(config, ws, &c.level, c.pair1[0], c.pair1[1], k) } else { None };
                if let Some(s) = s {
                    acc[k + s - 1] += 1;
                }
                if y {
                    // Every connecting path of pair 2 enters region `j` iff
                    // j >= K + 1 - t.
                    let t = minimax_level(config, ws, &c.co_level, c.pair2[0], c.pair2[1], k)
                        .expect("connected pair has a bottleneck");
                    let first = k + 1 - t;
                    for j in first..=k {
                        acc[2 * k + j - 1] += 1;
                    }
                    if let Some(s) = s.filter(|&s| s >= first) {
                        acc[s - 1] += 1;
                    }
                }
            }
        }
    }

    /// Indicators of a single configuration (mostly for tests).
    pub fn indicators(&self, config: &Configuration) -> Vec<u64> {
        let mut ws = Workspace::new(&self.domain);
        let mut acc = vec![0; self.n_obs];
        self.evaluate(config, &mut ws, &mut acc);
        acc
    }

    pub fn run_batch(&self, key: StreamKey, batch: u64, config: &mut Configuration, ws: &mut Workspace) -> BatchStats {
        let mut stats = BatchStats::new(batch, self.n_obs);
        let start = batch * self.batch_size;
        for i in start..start + self.batch_size {
            key.fill(config, i);
            self.evaluate(config, ws, &mut stats.sums);
        }
        stats.n = self.batch_size;
        stats
    }

    /// Runs the given batches on `workers` threads; output is in batch order.
    pub fn run_batches(&self, key: StreamKey, batches: Range<u64>, workers: usize) -> Vec<BatchStats> {
        let work = || {
            batches
                .clone()
                .into_par_iter()
                .map_init(
                    || (Configuration::uniform(self.domain.clone(), false), Workspace::new(&self.domain)),
                    |(config, ws), b| self.run_batch(key, b, config, ws),
                )
                .collect()
        };
        match rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build() {
            Ok(pool) => pool.install(work),
            Err(_) => work(),
        }
    }

    /// Turns batch statistics into records.
    pub fn assemble(&self, batches: &[BatchStats], pi: Option<PiPlugin>) -> Result<Vec<EstimateRecord>> {
        if batches.iter().any(|b| b.sums.len() != self.n_obs) {
            return Err(Error::InconsistentInputs("batch statistics do not match the request".into()));
        }
        let n: u64 = batches.iter().map(|b| b.n).sum();
        self.components
            .iter()
            .map(|c| {
                let est = c.estimate(batches)?;
                EstimateRecord::new(
                    &self.request_id,
                    self.kind.name(),
                    &c.name,
                    self.domain.spacing(),
                    self.points.clone(),
                    n,
                    est,
                    c.normalization,
                    pi.filter(|_| c.normalization.needs_pi()),
                )
            })
            .collect()
    }

    /// Un-normalized component estimates.
    pub fn raw_estimates(&self, batches: &[BatchStats]) -> Result<Vec<(String, Estimate)>> {
        if batches.iter().any(|b| b.sums.len() != self.n_obs) {
            return Err(Error::InconsistentInputs("batch statistics do not match the request".into()));
        }
        self.components.iter().map(|c| Ok((c.name.clone(), c.estimate(batches)?))).collect()
    }

    /// Raw component values from exact observable means.
    pub fn exact_components(&self, means: &[f64]) -> Vec<(String, f64)> {
        self.components.iter().map(|c| (c.name.clone(), c.exact(means))).collect()
    }
}

/// Smallest possible maximum of `level` along a black path from `s` to `t`,
/// or `None` when they are not connected.
fn minimax_level(config: &Configuration, ws: &mut Workspace, level: &[u8], s: usize, t: usize, k: usize) -> Option<usize> {
    if !config.is_black(s) || !config.is_black(t) {
        return None;
    }
    let start = level[s].max(level[t]) as usize;
    if s == t {
        return Some(start);
    }
    let dom = config.domain();
    let scratch = &mut ws.scratch;
    if ws.buckets.len() < k + 1 {
        ws.buckets.resize(k + 1, Vec::new());
    }
    for b in ws.buckets.iter_mut() {
        b.clear();
    }
    scratch.next_epoch();
    scratch.mark(s);
    ws.buckets[level[s] as usize].push(s as u32);
    let mut found = None;
    'outer: for th in 1..=k {
        let mut head = 0;
        while head < ws.buckets[th].len() {
            let x = ws.buckets[th][head] as usize;
            head += 1;
            for &y in dom.neighbor_ranks(x) {
                if y == crate::lattice::NO_SITE {
                    continue;
                }
                let y = y as usize;
                if scratch.is_marked(y) || !config.is_black(y) {
                    continue;
                }
                let b = th.max(level[y] as usize);
                if y == t {
                    found = Some(b);
                    break 'outer;
                }
                scratch.mark(y);
                ws.buckets[b].push(y as u32);
            }
        }
    }
    found
}

/// Where the π plug-in for normalizations comes from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PiSource {
    /// No normalization needing π is applied (requests needing one fail).
    Absent,
    Given(PiPlugin),
    /// Estimated on an independent stream at the same spacing.
    Sample { n_samples: u64, batch_size: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplingPlan {
    pub master_seed: u64,
    pub stream: u64,
    pub workers: usize,
}

impl SamplingPlan {
    pub fn new(master_seed: u64, stream: u64) -> Self {
        SamplingPlan { master_seed, stream, workers: 1 }
    }

    pub fn key(&self) -> StreamKey {
        StreamKey::new(self.master_seed, self.stream)
    }
}

/// Mixes a tag into a stream id (splitmix64 finalizer).
pub fn derive_stream(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(29);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream tag of the π plug-in.
pub const PI_STREAM_TAG: u64 = 0x7069;

/// Domain on which π at spacing `a` is estimated.
pub fn pi_domain(spacing: f64) -> Result<Arc<Domain>> {
    Ok(Arc::new(Domain::disk(spacing, 1.0 + 2.0 * spacing)?))
}

/// Frequency of the unit-radius one-arm event at the origin.
pub fn estimate_pi(domain: &Arc<Domain>, n_samples: u64, batch_size: u64, plan: SamplingPlan) -> Result<EstimateRecord> {
    let req = CorrelatorRequest::new(CorrelatorKind::PiA, vec![], n_samples, batch_size);
    let c = CompiledRequest::compile(&req, domain.clone())?;
    let batches = c.run_batches(plan.key(), 0..c.n_batches, plan.workers);
    Ok(c.assemble(&batches, None)?.remove(0))
}

/// Converts a π estimate into a plug-in.
pub fn pi_plugin(record: &EstimateRecord) -> PiPlugin {
    PiPlugin { value: record.raw_mean, std_error: record.std_error, n: record.n }
}

/// Sample budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Budget {
    pub n_samples: u64,
    pub batch_size: u64,
}

impl Budget {
    pub fn new(n_samples: u64, batch_size: u64) -> Self {
        Budget { n_samples, batch_size }
    }
}

/// Monte Carlo driver bound to a domain, a seed plan and a π source.
pub struct Estimator {
    domain: Arc<Domain>,
    plan: SamplingPlan,
    pi_source: PiSource,
    pi_cache: OnceLock<std::result::Result<PiPlugin, Error>>,
}

/// Companion of a non-local energy insertion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Companion {
    Spins(Complex64, Complex64),
    Energy(Complex64),
    EnergyDelta(Complex64, f64),
}

/// Result of an annulus decomposition.
#[derive(Clone, Debug)]
pub struct AnnulusTerms {
    /// Number of dyadic scales `M` per disk family.
    pub scales: usize,
    /// Number of regions in the chain.
    pub chain_len: usize,
    pub records: Vec<EstimateRecord>,
}

impl AnnulusTerms {
    /// Term `T_m` for the interior indices `2 ..= K-1`.
    pub fn term(&self, m: usize) -> Result<&EstimateRecord> {
        if m < 2 || m + 1 > self.chain_len {
            return Err(Error::InvalidRequest(format!(
                "term index {m} outside 2..={}",
                self.chain_len - 1
            )));
        }
        Ok(&self.records[m - 1])
    }

    pub fn component(&self, name: &str) -> Option<&EstimateRecord> {
        self.records.iter().find(|r| r.component == name)
    }
}

impl Estimator {
    pub fn new(domain: Arc<Domain>, plan: SamplingPlan, pi_source: PiSource) -> Self {
        Estimator { domain, plan, pi_source, pi_cache: OnceLock::new() }
    }

    pub fn domain(&self) -> &Arc<Domain> {
        &self.domain
    }

    /// The π plug-in at this spacing.
    pub fn pi(&self) -> Result<PiPlugin> {
        self.pi_cache
            .get_or_init(|| match self.pi_source {
                PiSource::Absent => Err(Error::InconsistentInputs("no pi plug-in available".into())),
                PiSource::Given(p) => Ok(p),
                PiSource::Sample { n_samples, batch_size } => {
                    let dom = pi_domain(self.domain.spacing())?;
                    let plan = SamplingPlan {
                        stream: derive_stream(self.plan.stream, PI_STREAM_TAG),
                        ..self.plan
                    };
                    estimate_pi(&dom, n_samples, batch_size, plan).map(|r| pi_plugin(&r))
                }
            })
            .clone()
    }

    /// Estimates every component of a request.
    pub fn run(&self, req: &CorrelatorRequest) -> Result<Vec<EstimateRecord>> {
        let c = CompiledRequest::compile(req, self.domain.clone())?;
        let pi = if c.needs_pi() { Some(self.pi()?) } else { None };
        let batches = c.run_batches(self.plan.key(), 0..c.n_batches, self.plan.workers);
        c.assemble(&batches, pi)
    }

    pub fn spin_n_point(&self, points: &[Complex64], budget: Budget) -> Result<EstimateRecord> {
        let pts = points.iter().map(|&z| PointSpec::spin(z)).collect();
        let req = CorrelatorRequest::new(CorrelatorKind::SpinNPoint, pts, budget.n_samples, budget.batch_size);
        Ok(self.run(&req)?.remove(0))
    }

    pub fn energy_spin_spin(&self, z1: Complex64, z2: Complex64, z3: Complex64, budget: Budget) -> Result<Vec<EstimateRecord>> {
        if z2 == z3 {
            return Err(Error::CoincidentPoints("spin insertions coincide".into()));
        }
        let pts = vec![PointSpec::energy(z1), PointSpec::spin(z2), PointSpec::spin(z3)];
        self.run(&CorrelatorRequest::new(CorrelatorKind::EnergySpinSpin, pts, budget.n_samples, budget.batch_size))
    }

    pub fn energy_energy(&self, z1: Complex64, z2: Complex64, budget: Budget) -> Result<Vec<EstimateRecord>> {
        let pts = vec![PointSpec::energy(z1), PointSpec::energy(z2)];
        self.run(&CorrelatorRequest::new(CorrelatorKind::EnergyEnergy, pts, budget.n_samples, budget.batch_size))
    }

    pub fn edelta(&self, z1: Complex64, delta: f64, companion: Companion, budget: Budget) -> Result<Vec<EstimateRecord>> {
        let first = PointSpec::energy_delta(z1, delta);
        let (kind, pts) = match companion {
            Companion::Spins(a, b) => (CorrelatorKind::EdeltaSpinSpin, vec![first, PointSpec::spin(a), PointSpec::spin(b)]),
            Companion::Energy(z) => (CorrelatorKind::EdeltaEnergy, vec![first, PointSpec::energy(z)]),
            Companion::EnergyDelta(z, d) => (CorrelatorKind::EdeltaEdelta, vec![first, PointSpec::energy_delta(z, d)]),
        };
        self.run(&CorrelatorRequest::new(kind, pts, budget.n_samples, budget.batch_size))
    }

    pub fn annulus_terms(
        &self,
        first: PointSpec,
        companions: &[PointSpec],
        epsilon: Option<f64>,
        budget: Budget,
    ) -> Result<AnnulusTerms> {
        let mut pts = vec![first];
        pts.extend_from_slice(companions);
        let mut req = CorrelatorRequest::new(CorrelatorKind::AnnulusTerms, pts, budget.n_samples, budget.batch_size);
        req.epsilon = epsilon;
        let c = CompiledRequest::compile(&req, self.domain.clone())?;
        let pi = if c.needs_pi() { Some(self.pi()?) } else { None };
        let batches = c.run_batches(self.plan.key(), 0..c.n_batches, self.plan.workers);
        Ok(AnnulusTerms { scales: c.scales, chain_len: c.chain_len, records: c.assemble(&batches, pi)? })
    }
}

/// Constants entering the logarithmic partner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogPartnerConstants {
    pub c1: f64,
    pub cl: f64,
    pub c2: f64,
}

/// `(2δ)^(-25/24)·η + (C1·CL/C2)·ln(2δ)·φ` from a non-local energy correlator
/// and the matching energy correlator (same companions, same spacing).
pub fn compose_log_partner(
    eta_delta: &EstimateRecord,
    phi: &EstimateRecord,
    delta: f64,
    constants: LogPartnerConstants,
) -> Result<EstimateRecord> {
    let LogPartnerConstants { c1, cl, c2 } = constants;
    if ![c1, cl, c2].iter().all(|c| c.is_finite()) || c2 == 0.0 {
        return Err(Error::InconsistentInputs("constants must be finite with C2 != 0".into()));
    }
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::InconsistentInputs(format!("delta = {delta}")));
    }
    if (eta_delta.spacing - phi.spacing).abs() > 1e-12 * phi.spacing {
        return Err(Error::InconsistentInputs("spacings differ".into()));
    }
    let (e0, p0) = match (eta_delta.points.first(), phi.points.first()) {
        (Some(e), Some(p)) => (e, p),
        _ => return Err(Error::InconsistentInputs("missing insertion points".into())),
    };
    if e0.role != PointRole::EnergyDeltaCenter || p0.role != PointRole::EnergyCenter {
        return Err(Error::InconsistentInputs("expected a non-local and a local energy insertion".into()));
    }
    if e0.delta.is_none_or(|d| (d - delta).abs() > 1e-12 * delta) || (e0.z - p0.z).norm() > 1e-12 {
        return Err(Error::InconsistentInputs("insertion geometry differs".into()));
    }
    if eta_delta.points[1..] != phi.points[1..] {
        return Err(Error::InconsistentInputs("companion points differ".into()));
    }
    let td = 2.0 * delta;
    let coef = c1 * cl / c2 * td.ln() * td.powf(-crate::stats::TWO_DELTA_POW);
    let raw = Estimate {
        mean: eta_delta.normalized_value + coef * phi.normalized_value,
        std_error: (eta_delta.normalized_error.powi(2) + (coef * phi.normalized_error).powi(2)).sqrt(),
    };
    let norm = Normalization { two_delta: Some(td), ..Normalization::NONE };
    let mut points = eta_delta.points.clone();
    points[0] = PointSpec::energy_delta(e0.z, delta);
    EstimateRecord::new(
        &eta_delta.request_id,
        "log_partner",
        &eta_delta.kind,
        eta_delta.spacing,
        points,
        eta_delta.n.min(phi.n),
        raw,
        norm,
        None,
    )
}
