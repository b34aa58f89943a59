//! Exact expectations on tiny patches by enumerating every coloring.
//!
//! Colorings are indexed by integers whose bit `i` is the color of the site
//! with rank `i`, and every coloring is fed through the same detectors and
//! probes the Monte Carlo path uses.

use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{CompiledRequest, CorrelatorKind, CorrelatorRequest, Workspace};
use crate::events::{connected, connected_not_within, connected_within, one_arm, point_four_arm, RegionMask};
use crate::lattice::{Domain, LatticePoint, PointSpec};
use crate::sampler::{label_clusters, Configuration, StreamKey};

/// Largest patch accepted for enumeration.
pub const MAX_SITES: usize = 24;

const CHUNK_BITS: u32 = 12;

#[derive(Clone, Debug)]
pub struct TinyPatch {
    domain: Arc<Domain>,
}

impl TinyPatch {
    pub fn new(domain: Arc<Domain>) -> Result<Self> {
        if domain.len() > MAX_SITES {
            return Err(Error::PatchTooLarge { sites: domain.len(), limit: MAX_SITES });
        }
        Ok(TinyPatch { domain })
    }

    pub fn from_points(spacing: f64, points: &[LatticePoint]) -> Result<Self> {
        Self::new(Arc::new(Domain::from_points(spacing, points)?))
    }

    /// Sites `(q, r)` with `q` in `q_range` and `r` in `r_range`.
    pub fn parallelogram(spacing: f64, q_range: std::ops::Range<i32>, r_range: std::ops::Range<i32>) -> Result<Self> {
        let pts: Vec<LatticePoint> = r_range
            .flat_map(|r| q_range.clone().map(move |q| LatticePoint::new(q, r)))
            .collect();
        Self::from_points(spacing, &pts)
    }

    pub fn domain(&self) -> &Arc<Domain> {
        &self.domain
    }

    pub fn colorings(&self) -> u64 {
        1u64 << self.domain.len()
    }

    /// Visits every coloring, accumulating `acc` per parallel chunk and
    /// summing chunk results in a fixed order.
    fn enumerate<S, F>(&self, width: usize, init: impl Fn() -> S + Sync, visit: F) -> Vec<u64>
    where
        F: Fn(&Configuration, &mut S, &mut [u64]) + Sync,
    {
        let n = self.domain.len() as u32;
        let chunk_bits = CHUNK_BITS.min(n);
        let chunks = 1u64 << (n - chunk_bits);
        let per = 1u64 << chunk_bits;
        let parts: Vec<Vec<u64>> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut state = init();
                let mut acc = vec![0u64; width];
                for bits in c * per..(c + 1) * per {
                    let cfg = Configuration::from_bits(self.domain.clone(), bits);
                    visit(&cfg, &mut state, &mut acc);
                }
                acc
            })
            .collect();
        parts.into_iter().fold(vec![0u64; width], |mut t, p| {
            for (a, b) in t.iter_mut().zip(p) {
                *a += b;
            }
            t
        })
    }

    /// Number of colorings on which `event` holds.
    pub fn count(&self, event: impl Fn(&Configuration) -> bool + Sync) -> u64 {
        self.enumerate(1, || (), |c, _, acc| acc[0] += event(c) as u64)[0]
    }
}

/// `2^-n · #{colorings where event holds}`.
pub fn exact_event_probability(patch: &TinyPatch, event: impl Fn(&Configuration) -> bool + Sync) -> f64 {
    patch.count(event) as f64 / patch.colorings() as f64
}

/// Exact observable counts of a compiled request over all colorings.
pub fn exact_counts(patch: &TinyPatch, compiled: &CompiledRequest) -> Vec<u64> {
    let dom = patch.domain.clone();
    patch.enumerate(compiled.observables(), || Workspace::new(&dom), |c, ws, acc| compiled.evaluate(c, ws, acc))
}

/// Exact un-normalized value of every component of a request, with means in
/// place of the sampled halves.
pub fn exact_correlator(patch: &TinyPatch, request: &CorrelatorRequest) -> Result<Vec<(String, f64)>> {
    let mut req = request.clone();
    // The sample budget is irrelevant here; keep the request valid.
    req.n_samples = 2 * crate::stats::MIN_BATCHES;
    req.batch_size = 1;
    let compiled = CompiledRequest::compile(&req, patch.domain.clone())?;
    let total = patch.colorings() as f64;
    let means: Vec<f64> = exact_counts(patch, &compiled).into_iter().map(|s| s as f64 / total).collect();
    Ok(compiled.exact_components(&means))
}

/// Looks up one component of an exact result.
pub fn exact_component(values: &[(String, f64)], name: &str) -> Option<f64> {
    values.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
}

type EventFn = Box<dyn Fn(&Configuration) -> bool + Send + Sync>;

/// What a corpus case measures.
pub enum CaseTarget {
    Event(EventFn),
    Component { request: CorrelatorRequest, component: String },
}

/// One entry of the oracle-equivalence corpus.
pub struct OracleCase {
    pub name: String,
    pub patch: TinyPatch,
    pub target: CaseTarget,
}

/// Monte Carlo against enumeration for one case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleOutcome {
    pub name: String,
    pub sites: usize,
    pub exact: f64,
    pub estimate: f64,
    pub std_error: f64,
    pub passed: bool,
}

/// Largest allowed deviation in standard errors.
pub const ORACLE_TOLERANCE: f64 = 4.0;

impl OracleCase {
    fn event(name: &str, patch: &TinyPatch, f: impl Fn(&Configuration) -> bool + Send + Sync + 'static) -> Self {
        OracleCase { name: name.into(), patch: patch.clone(), target: CaseTarget::Event(Box::new(f)) }
    }

    fn component(name: &str, patch: &TinyPatch, request: &CorrelatorRequest, component: &str) -> Self {
        OracleCase {
            name: name.into(),
            patch: patch.clone(),
            target: CaseTarget::Component { request: request.clone(), component: component.into() },
        }
    }

    pub fn exact(&self) -> Result<f64> {
        match &self.target {
            CaseTarget::Event(f) => Ok(exact_event_probability(&self.patch, f)),
            CaseTarget::Component { request, component } => exact_component(&exact_correlator(&self.patch, request)?, component)
                .ok_or_else(|| Error::InvalidRequest(format!("no component {component}"))),
        }
    }

    /// Monte Carlo estimate and standard error from `n_samples` configurations.
    pub fn sample(&self, n_samples: u64, key: StreamKey) -> Result<(f64, f64)> {
        let dom = self.patch.domain();
        match &self.target {
            CaseTarget::Event(f) => {
                let mut config = Configuration::uniform(dom.clone(), false);
                let mut hits = 0u64;
                for i in 0..n_samples {
                    key.fill(&mut config, i);
                    hits += f(&config) as u64;
                }
                let p = hits as f64 / n_samples as f64;
                Ok((p, (p * (1.0 - p) / n_samples as f64).sqrt()))
            }
            CaseTarget::Component { request, component } => {
                let mut req = request.clone();
                req.n_samples = n_samples;
                req.batch_size = n_samples / 100;
                let c = CompiledRequest::compile(&req, dom.clone())?;
                let batches = c.run_batches(key, 0..c.n_batches, 1);
                c.raw_estimates(&batches)?
                    .into_iter()
                    .find(|(n, _)| n == component)
                    .map(|(_, e)| (e.mean, e.std_error))
                    .ok_or_else(|| Error::InvalidRequest(format!("no component {component}")))
            }
        }
    }

    pub fn run(&self, n_samples: u64, key: StreamKey) -> Result<OracleOutcome> {
        let exact = self.exact()?;
        let (estimate, std_error) = self.sample(n_samples, key)?;
        let dev = (estimate - exact).abs();
        let passed = dev <= ORACLE_TOLERANCE * std_error || dev <= 1e-12;
        Ok(OracleOutcome { name: self.name.clone(), sites: self.patch.domain().len(), exact, estimate, std_error, passed })
    }
}

fn pt(q: i32, r: i32) -> LatticePoint {
    LatticePoint::new(q, r)
}

fn at(p: LatticePoint) -> Complex64 {
    p.embed(1.0)
}

/// Fixed corpus of tiny patches covering every detector and the correlator
/// components, all at unit spacing and at most 20 sites.
pub fn standard_corpus() -> Result<Vec<OracleCase>> {
    let hex = TinyPatch::new(Arc::new(Domain::disk(1.0, 2.0)?))?;
    let para = TinyPatch::parallelogram(1.0, 0..5, 0..4)?;
    let mut strip_pts: Vec<LatticePoint> = (0..12).map(|q| pt(q, 0)).collect();
    strip_pts.extend((0..8).map(|q| pt(q, 1)));
    let strip = TinyPatch::from_points(1.0, &strip_pts)?;

    let mut cases = vec![
        OracleCase::event("connected/hex", &hex, |c| {
            connected(&label_clusters(c), c.domain(), pt(-2, 0), pt(2, 0)).unwrap()
        }),
        OracleCase::event("connected/parallelogram", &para, |c| {
            connected(&label_clusters(c), c.domain(), pt(0, 0), pt(4, 3)).unwrap()
        }),
    ];
    let low_rows = RegionMask::from_fn(para.domain(), |p| p.r <= 1);
    let mask = low_rows.clone();
    cases.push(OracleCase::event("connected_within/parallelogram", &para, move |c| {
        connected_within(c, pt(0, 0), pt(4, 0), &mask).unwrap()
    }));
    cases.push(OracleCase::event("connected_not_within/parallelogram", &para, move |c| {
        connected_not_within(c, &label_clusters(c), pt(0, 0), pt(4, 0), &low_rows).unwrap()
    }));
    let ball = RegionMask::disk(strip.domain(), Complex64::new(5.0, 0.0), 3.5);
    cases.push(OracleCase::event("connected_within/strip", &strip, move |c| {
        connected_within(c, pt(3, 0), pt(7, 0), &ball).unwrap()
    }));
    cases.push(OracleCase::event("one_arm/hex", &hex, |c| one_arm(c, LatticePoint::ORIGIN, 2.0).unwrap()));
    cases.push(OracleCase::event("one_arm/parallelogram", &para, |c| one_arm(c, pt(2, 1), 1.5).unwrap()));
    cases.push(OracleCase::event("point_four_arm/hex", &hex, |c| {
        point_four_arm(c, LatticePoint::ORIGIN, 2.0).unwrap()
    }));

    let spins = |pts: &[LatticePoint]| pts.iter().map(|&p| PointSpec::spin(at(p))).collect::<Vec<_>>();
    let two = CorrelatorRequest::new(CorrelatorKind::SpinNPoint, spins(&[pt(-1, 0), pt(1, 0)]), 0, 1);
    cases.push(OracleCase::component("spin_2pt/hex", &hex, &two, "total"));
    let four = CorrelatorRequest::new(
        CorrelatorKind::SpinNPoint,
        spins(&[pt(0, 0), pt(4, 0), pt(0, 3), pt(4, 3)]),
        0,
        1,
    );
    cases.push(OracleCase::component("spin_4pt/parallelogram", &para, &four, "total"));
    let ess = CorrelatorRequest::new(
        CorrelatorKind::EnergySpinSpin,
        vec![PointSpec::energy(at(pt(6, 0))), PointSpec::spin(at(pt(1, 0))), PointSpec::spin(at(pt(11, 0)))],
        0,
        1,
    );
    for comp in ["total", "R1", "R2", "R3"] {
        cases.push(OracleCase::component(&format!("energy_spin_spin/{comp}/strip"), &strip, &ess, comp));
    }
    Ok(cases)
}

/// Runs the whole corpus with one independent stream per case.
pub fn run_corpus(n_samples: u64, master_seed: u64) -> Result<Vec<OracleOutcome>> {
    standard_corpus()?
        .iter()
        .enumerate()
        .map(|(i, case)| case.run(n_samples, StreamKey::new(master_seed, i as u64)))
        .collect()
}
