//! Connectivity and arm events evaluated on a single configuration.
//!
//! Balls are closed. The discrete boundary of a ball is the set of its sites
//! that have a lattice neighbor outside it. For an annulus with hole `H`
//! (`|x - c| < inner`), ring `A` (`inner <= |x - c| <= outer`) and exterior `E`,
//! the inner boundary is the ring sites adjacent to `H` and the outer boundary
//! the ring sites adjacent to `E`.

use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{complex_pair, Domain, LatticePoint};
use crate::sampler::{ClusterLabels, Configuration, Scratch};

const GEOM_EPS: f64 = 1e-9;

/// Subset of the sites of a domain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMask {
    bits: Vec<u64>,
    len: usize,
}

impl RegionMask {
    pub fn empty(domain: &Domain) -> Self {
        RegionMask { bits: vec![0; domain.len().div_ceil(64)], len: domain.len() }
    }

    pub fn full(domain: &Domain) -> Self {
        Self::empty(domain).complement()
    }

    pub fn from_fn(domain: &Domain, mut f: impl FnMut(LatticePoint) -> bool) -> Self {
        let mut m = Self::empty(domain);
        for (i, &p) in domain.sites().iter().enumerate() {
            if f(p) {
                m.insert(i);
            }
        }
        m
    }

    /// Closed disk `|x - center| <= radius`.
    pub fn disk(domain: &Domain, center: Complex64, radius: f64) -> Self {
        let a = domain.spacing();
        let c = center / a;
        let lim = (radius / a).powi(2) * (1.0 + GEOM_EPS);
        Self::from_fn(domain, |p| (p.unit_embedding() - c).norm_sqr() <= lim)
    }

    /// Closed annulus `inner <= |x - center| <= outer`.
    pub fn annulus(domain: &Domain, center: Complex64, inner: f64, outer: f64) -> Self {
        let a = domain.spacing();
        let c = center / a;
        let lo = (inner / a).powi(2) * (1.0 - GEOM_EPS);
        let hi = (outer / a).powi(2) * (1.0 + GEOM_EPS);
        Self::from_fn(domain, |p| {
            let d = (p.unit_embedding() - c).norm_sqr();
            d >= lo && d <= hi
        })
    }

    pub fn complement(&self) -> Self {
        let mut bits: Vec<u64> = self.bits.iter().map(|w| !w).collect();
        let rem = self.len & 63;
        if rem != 0 {
            if let Some(last) = bits.last_mut() {
                *last &= (1u64 << rem) - 1;
            }
        }
        RegionMask { bits, len: self.len }
    }

    pub fn intersection(&self, other: &Self) -> Self {
        assert_eq!(self.len, other.len);
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| a & b).collect();
        RegionMask { bits, len: self.len }
    }

    pub fn union(&self, other: &Self) -> Self {
        assert_eq!(self.len, other.len);
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| a | b).collect();
        RegionMask { bits, len: self.len }
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.bits.iter().zip(&other.bits).all(|(a, b)| a & !b == 0)
    }

    pub fn insert(&mut self, rank: usize) {
        self.bits[rank >> 6] |= 1 << (rank & 63);
    }

    #[inline]
    pub fn contains(&self, rank: usize) -> bool {
        (self.bits[rank >> 6] >> (rank & 63)) & 1 == 1
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

fn rank(domain: &Domain, p: LatticePoint) -> Result<usize> {
    domain.rank_of(p).ok_or_else(|| Error::OutOfDomain(p.to_string()))
}

/// Same black cluster (a black site is connected to itself).
pub fn connected(labels: &ClusterLabels, domain: &Domain, p1: LatticePoint, p2: LatticePoint) -> Result<bool> {
    let (i, j) = (rank(domain, p1)?, rank(domain, p2)?);
    Ok(match (labels.of(i), labels.of(j)) {
        (Some(a), Some(b)) => a == b,
        _ => false,
    })
}

/// Black path from `p1` to `p2` using only sites of `allowed`.
pub fn connected_within(
    config: &Configuration,
    p1: LatticePoint,
    p2: LatticePoint,
    allowed: &RegionMask,
) -> Result<bool> {
    let dom = config.domain();
    let (i, j) = (rank(dom, p1)?, rank(dom, p2)?);
    if !allowed.contains(i) || !allowed.contains(j) {
        return Err(Error::PointOutsideRegion);
    }
    let mut scratch = Scratch::for_domain(dom);
    Ok(scratch.connected_within(config, i, j, |k| allowed.contains(k)))
}

/// Connected, but every connecting black path leaves `container`.
pub fn connected_not_within(
    config: &Configuration,
    labels: &ClusterLabels,
    p1: LatticePoint,
    p2: LatticePoint,
    container: &RegionMask,
) -> Result<bool> {
    let dom = config.domain();
    if !connected(labels, dom, p1, p2)? {
        return Ok(false);
    }
    let (i, j) = (rank(dom, p1)?, rank(dom, p2)?);
    if !container.contains(i) || !container.contains(j) {
        return Ok(true);
    }
    let mut scratch = Scratch::for_domain(dom);
    Ok(!scratch.connected_within(config, i, j, |k| container.contains(k)))
}

/// Precomputed closed ball around a site for one-arm queries at several radii.
#[derive(Clone, Debug)]
pub struct OneArmProbe {
    center: usize,
    max_radius_sq: f64,
    /// Per site: 0 outside the largest ball, otherwise 1 + the largest squared
    /// distance (lattice units) from the center to a neighbor.
    outreach: Vec<u32>,
}

impl OneArmProbe {
    /// `radius` in continuum units; the ball must fit in the domain.
    pub fn new(domain: &Domain, p: LatticePoint, radius: f64) -> Result<Self> {
        let center = rank(domain, p)?;
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::InvalidRequest(format!("one-arm radius must be positive, got {radius}")));
        }
        if !domain.covers_disk(domain.embed(p), radius) {
            return Err(Error::OutOfDomain(format!("ball of radius {radius} around {p}")));
        }
        let lim = (radius / domain.spacing()).powi(2) * (1.0 + GEOM_EPS);
        let mut outreach = vec![0u32; domain.len()];
        for (i, &x) in domain.sites().iter().enumerate() {
            if ((x - p).norm_sq() as f64) <= lim {
                let m = x.neighbors().iter().map(|&y| (y - p).norm_sq()).max().unwrap();
                outreach[i] = m as u32 + 1;
            }
        }
        Ok(OneArmProbe { center, max_radius_sq: lim, outreach })
    }

    /// Largest squared neighbor distance reached by the black cluster of the
    /// center inside the ball, or `None` if the center is white. Stops early
    /// once the ball's boundary is reached.
    pub fn reach_sq(&self, config: &Configuration, scratch: &mut Scratch) -> Option<f64> {
        if !config.is_black(self.center) {
            return None;
        }
        let mut best = 0u32;
        let lim = self.max_radius_sq;
        scratch.search_until(
            config,
            self.center,
            |k| self.outreach[k] != 0,
            |k| {
                best = best.max(self.outreach[k] - 1);
                best as f64 > lim
            },
        );
        Some(best as f64)
    }

    /// One-arm event at the probe's full radius.
    pub fn holds(&self, config: &Configuration, scratch: &mut Scratch) -> bool {
        self.reach_sq(config, scratch).is_some_and(|m| m > self.max_radius_sq)
    }

    /// One-arm event at a smaller radius given `reach_sq`.
    pub fn holds_at(reach_sq: Option<f64>, radius: f64, spacing: f64) -> bool {
        let lim = (radius / spacing).powi(2) * (1.0 + GEOM_EPS);
        reach_sq.is_some_and(|m| m > lim)
    }
}

/// Black path from `p` to the discrete boundary of the closed ball `B_r(p)`.
pub fn one_arm(config: &Configuration, p: LatticePoint, r: f64) -> Result<bool> {
    let probe = OneArmProbe::new(config.domain(), p, r)?;
    Ok(probe.holds(config, &mut Scratch::for_domain(config.domain())))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnulusSpec {
    #[serde(with = "complex_pair")]
    pub center: Complex64,
    pub inner_radius: f64,
    pub outer_radius: f64,
}

const HOLE: u8 = 0;
const RING: u8 = 1;
const OUTSIDE: u8 = 2;

/// Precomputed annulus for alternating four-arm detection.
#[derive(Clone, Debug)]
pub struct ArmAnnulus {
    domain: Arc<Domain>,
    zone: Vec<u8>,
    ring: Vec<u32>,
    /// Triangles with one hole vertex and two ring vertices:
    /// (hole vertex, ring vertex, ring vertex).
    starts: Vec<[LatticePoint; 3]>,
    max_steps: usize,
}

impl ArmAnnulus {
    pub fn new(domain: &Arc<Domain>, spec: &AnnulusSpec) -> Result<Self> {
        let a = domain.spacing();
        let (ri, ro) = (spec.inner_radius, spec.outer_radius);
        if !(ri.is_finite() && ro.is_finite() && ri > 0.0 && ri < ro) {
            return Err(Error::InvalidAnnulus(format!("radii {ri}, {ro}")));
        }
        if ro < ri + a * (1.0 - GEOM_EPS) {
            return Err(Error::InvalidAnnulus(format!(
                "ring {ri}..{ro} thinner than the spacing {a}"
            )));
        }
        if !domain.covers_disk(spec.center, ro) {
            return Err(Error::OutOfDomain(format!("annulus of outer radius {ro} around {}", spec.center)));
        }
        let c = spec.center / a;
        let lo = (ri / a).powi(2) * (1.0 - GEOM_EPS);
        let hi = (ro / a).powi(2) * (1.0 + GEOM_EPS);
        let classify = |p: LatticePoint| {
            let d = (p.unit_embedding() - c).norm_sqr();
            if d < lo {
                HOLE
            } else if d <= hi {
                RING
            } else {
                OUTSIDE
            }
        };
        let zone: Vec<u8> = domain.sites().iter().map(|&p| classify(p)).collect();
        let mut ring = Vec::new();
        let mut starts = Vec::new();
        let mut hole_count = 0;
        for (i, &p) in domain.sites().iter().enumerate() {
            match zone[i] {
                RING => ring.push(i as u32),
                HOLE => {
                    hole_count += 1;
                    let nb = p.neighbors();
                    for k in 0..6 {
                        let (x, y) = (nb[k], nb[(k + 1) % 6]);
                        if classify(x) == RING && classify(y) == RING {
                            starts.push([p, x, y]);
                        }
                    }
                }
                _ => {}
            }
        }
        if hole_count == 0 {
            return Err(Error::InvalidAnnulus(format!("no vertex within the inner radius {ri}")));
        }
        let max_steps = 4 * ring.len() + 16;
        Ok(ArmAnnulus { domain: domain.clone(), zone, ring, starts, max_steps })
    }

    #[inline]
    fn zone_of(&self, p: LatticePoint) -> (u8, usize) {
        match self.domain.rank_of(p) {
            Some(i) => (self.zone[i], i),
            None => (OUTSIDE, usize::MAX),
        }
    }

    /// Number of color interfaces that run from the hole to the exterior,
    /// counting stops once `limit` is reached.
    pub fn crossing_interfaces(&self, config: &Configuration, limit: usize) -> usize {
        let dom = &self.domain;
        let color = |p: LatticePoint| config.is_black(dom.rank_of(p).unwrap());
        let bichromatic = self.starts.iter().filter(|t| color(t[1]) != color(t[2])).count();
        if bichromatic < limit {
            return 0;
        }
        let mut count = 0;
        for t in &self.starts {
            let (x, y) = (t[1], t[2]);
            let bx = color(x);
            if bx == color(y) {
                continue;
            }
            let (mut black, mut white) = if bx { (x, y) } else { (y, x) };
            let mut apex = t[0];
            let mut steps = 0;
            loop {
                let next = black + white - apex;
                let (z, i) = self.zone_of(next);
                if z == HOLE {
                    break;
                }
                if z == OUTSIDE {
                    count += 1;
                    break;
                }
                if config.is_black(i) {
                    apex = black;
                    black = next;
                } else {
                    apex = white;
                    white = next;
                }
                steps += 1;
                assert!(steps <= self.max_steps, "interface walk failed to terminate");
            }
            if count >= limit {
                break;
            }
        }
        count
    }

    /// Four alternating arms across the ring (interface counting).
    pub fn four_arm(&self, config: &Configuration) -> bool {
        self.crossing_interfaces(config, 4) >= 4
    }

    /// Number of black and white crossing components: monochromatic
    /// components of the ring touching both the inner and outer boundary.
    pub fn crossing_components(&self, config: &Configuration) -> (usize, usize) {
        let dom = &self.domain;
        let n = dom.len();
        let mut seen = vec![false; n];
        let mut counts = (0, 0);
        let mut stack = Vec::new();
        for &s in &self.ring {
            let s = s as usize;
            if seen[s] {
                continue;
            }
            let col = config.is_black(s);
            seen[s] = true;
            stack.push(s);
            let (mut inner, mut outer) = (false, false);
            while let Some(x) = stack.pop() {
                for nb in dom.site(x).neighbors() {
                    let (z, y) = self.zone_of(nb);
                    match z {
                        HOLE => inner = true,
                        OUTSIDE => outer = true,
                        _ => {
                            if !seen[y] && config.is_black(y) == col {
                                seen[y] = true;
                                stack.push(y);
                            }
                        }
                    }
                }
            }
            if inner && outer {
                if col {
                    counts.0 += 1;
                } else {
                    counts.1 += 1;
                }
            }
        }
        counts
    }

    /// Reference detector: two black crossing components cannot be joined
    /// inside the ring, so each of the two sectors between them holds a white
    /// crossing and the colors alternate.
    pub fn four_arm_reference(&self, config: &Configuration) -> bool {
        let (b, w) = self.crossing_components(config);
        b >= 2 && w >= 2
    }
}

/// Four alternating crossings of the annulus.
pub fn four_arm_annulus(config: &Configuration, spec: &AnnulusSpec) -> Result<bool> {
    Ok(ArmAnnulus::new(config.domain(), spec)?.four_arm(config))
}

/// Component-interleaving version of [`four_arm_annulus`].
pub fn four_arm_annulus_reference(config: &Configuration, spec: &AnnulusSpec) -> Result<bool> {
    Ok(ArmAnnulus::new(config.domain(), spec)?.four_arm_reference(config))
}

/// Annulus whose hole is the single vertex `p`.
pub fn point_annulus(domain: &Arc<Domain>, p: LatticePoint, r: f64) -> Result<ArmAnnulus> {
    if !domain.contains(p) {
        return Err(Error::OutOfDomain(p.to_string()));
    }
    let a = domain.spacing();
    let spec = AnnulusSpec { center: domain.embed(p), inner_radius: 0.5 * a, outer_radius: r };
    ArmAnnulus::new(domain, &spec)
}

/// `p` is white and four alternating arms run from its neighbors to the
/// boundary of `B_r(p)`.
pub fn point_four_arm(config: &Configuration, p: LatticePoint, r: f64) -> Result<bool> {
    let ann = point_annulus(config.domain(), p, r)?;
    let i = config.domain().rank_of(p).unwrap();
    Ok(!config.is_black(i) && ann.four_arm(config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{label_clusters, sample_config};
    use std::f64::consts::PI;

    fn disk(a: f64, r: f64) -> Arc<Domain> {
        Arc::new(Domain::disk(a, r).unwrap())
    }

    fn pt(q: i32, r: i32) -> LatticePoint {
        LatticePoint::new(q, r)
    }

    /// Four alternating angular sectors around `c`.
    fn pinwheel(d: &Arc<Domain>, c: Complex64, center_white: bool) -> Configuration {
        let a = d.spacing();
        Configuration::from_fn(d.clone(), |p| {
            let v = p.embed(a) - c;
            if v.norm() < 1e-9 {
                return !center_white;
            }
            let t = v.im.atan2(v.re).rem_euclid(2.0 * PI);
            ((t / (PI / 2.0)) as usize) % 2 == 0
        })
    }

    #[test]
    fn connected_basics() {
        let d = disk(1.0, 3.0);
        let black = Configuration::uniform(d.clone(), true);
        let l = label_clusters(&black);
        assert!(connected(&l, &d, pt(0, 0), pt(0, 0)).unwrap());
        assert!(connected(&l, &d, pt(0, 0), pt(1, 0)).unwrap());
        let white = Configuration::uniform(d.clone(), false);
        let l = label_clusters(&white);
        assert!(!connected(&l, &d, pt(0, 0), pt(0, 0)).unwrap());
    }

    #[test]
    fn adjacent_connection_probability_is_quarter() {
        let d = disk(1.0, 3.0);
        let n = 40_000u64;
        let mut hits = 0;
        for s in 0..n {
            let c = sample_config(&d, 21, s);
            let l = label_clusters(&c);
            hits += connected(&l, &d, pt(0, 0), pt(1, 0)).unwrap() as u64;
        }
        let p = hits as f64 / n as f64;
        assert!((p - 0.25).abs() < 4.0 * (0.25 * 0.75 / n as f64).sqrt());
    }

    #[test]
    fn restricted_connection() {
        let d = disk(1.0, 4.0);
        // Black corridor along r = 0 plus a detour through r = 1.
        let c = Configuration::from_fn(d.clone(), |p| p.r == 0 && p.q.abs() <= 2);
        let l = label_clusters(&c);
        let full = RegionMask::full(&d);
        assert!(connected_within(&c, pt(-2, 0), pt(2, 0), &full).unwrap());
        let single = RegionMask::from_fn(&d, |p| p == pt(-2, 0));
        assert!(connected_within(&c, pt(-2, 0), pt(-2, 0), &single).unwrap());
        let cut = RegionMask::from_fn(&d, |p| p != pt(0, 0));
        assert!(!connected_within(&c, pt(-2, 0), pt(2, 0), &cut).unwrap());
        assert!(connected_not_within(&c, &l, pt(-2, 0), pt(2, 0), &cut).unwrap());
        assert_eq!(
            connected_within(&c, pt(0, 0), pt(2, 0), &cut),
            Err(Error::PointOutsideRegion)
        );

        let detour = Configuration::from_fn(d.clone(), |p| {
            (p.r == 0 && p.q.abs() <= 2 && p.q != 0) || (p.r == 1 && (-2..=1).contains(&p.q))
        });
        let l = label_clusters(&detour);
        let no_top = RegionMask::from_fn(&d, |p| p.r <= 0);
        assert!(connected(&l, &d, pt(-2, 0), pt(2, 0)).unwrap());
        assert!(connected_not_within(&detour, &l, pt(-2, 0), pt(2, 0), &no_top).unwrap());
        assert!(!connected_not_within(&detour, &l, pt(-2, 0), pt(-1, 0), &no_top).unwrap());
    }

    #[test]
    fn one_arm_small_radius_is_site_color() {
        let d = disk(1.0, 4.0);
        for s in 0..50 {
            let c = sample_config(&d, 3, s);
            assert_eq!(one_arm(&c, pt(0, 0), 0.5).unwrap(), c.color(pt(0, 0)).unwrap());
        }
        let c = Configuration::uniform(d.clone(), true);
        assert!(one_arm(&c, pt(0, 0), 3.0).unwrap());
        assert!(matches!(one_arm(&c, pt(0, 0), 4.5), Err(Error::OutOfDomain(_))));
    }

    #[test]
    fn one_arm_radii_from_single_search() {
        let d = disk(1.0, 12.0);
        let probe = OneArmProbe::new(&d, pt(0, 0), 10.0).unwrap();
        let mut scratch = Scratch::for_domain(&d);
        for s in 0..200 {
            let c = sample_config(&d, 8, s);
            let reach = probe.reach_sq(&c, &mut scratch);
            for r in [0.5, 1.0, 2.0, 3.7, 6.0, 10.0] {
                assert_eq!(OneArmProbe::holds_at(reach, r, 1.0), one_arm(&c, pt(0, 0), r).unwrap());
            }
        }
    }

    #[test]
    fn pinwheel_has_four_arms() {
        let d = disk(1.0, 12.0);
        let spec = AnnulusSpec { center: Complex64::new(0.0, 0.0), inner_radius: 2.0, outer_radius: 9.0 };
        let c = pinwheel(&d, Complex64::new(0.0, 0.0), true);
        assert!(four_arm_annulus(&c, &spec).unwrap());
        assert!(four_arm_annulus_reference(&c, &spec).unwrap());
        assert!(point_four_arm(&c, pt(0, 0), 9.0).unwrap());
        let cb = pinwheel(&d, Complex64::new(0.0, 0.0), false);
        assert!(!point_four_arm(&cb, pt(0, 0), 9.0).unwrap());
        let black = Configuration::uniform(d.clone(), true);
        assert!(!four_arm_annulus(&black, &spec).unwrap());
        assert!(!four_arm_annulus_reference(&black, &spec).unwrap());
    }

    #[test]
    fn detectors_agree_on_random_configurations() {
        let d = disk(1.0, 9.0);
        let spec = AnnulusSpec { center: Complex64::new(0.3, -0.2), inner_radius: 1.5, outer_radius: 4.5 };
        let ann = ArmAnnulus::new(&d, &spec).unwrap();
        let mut hits = 0;
        for s in 0..3000 {
            let c = sample_config(&d, 77, s);
            let f = ann.four_arm(&c);
            assert_eq!(f, ann.four_arm_reference(&c), "sample {s}");
            hits += f as usize;
        }
        assert!(hits > 30);
    }

    #[test]
    fn annulus_validation() {
        let d = disk(1.0, 6.0);
        let z = Complex64::new(0.0, 0.0);
        let bad = |ri, ro| ArmAnnulus::new(&d, &AnnulusSpec { center: z, inner_radius: ri, outer_radius: ro }).is_err();
        assert!(bad(3.0, 2.0));
        assert!(bad(2.0, 2.5));
        assert!(bad(2.0, 6.5));
        assert!(!bad(2.0, 6.0));
        let off = Complex64::new(0.5, 0.3);
        assert!(ArmAnnulus::new(&d, &AnnulusSpec { center: off, inner_radius: 0.1, outer_radius: 3.0 }).is_err());
    }

    #[test]
    fn region_mask_algebra() {
        let d = disk(0.5, 4.0);
        let a = RegionMask::disk(&d, Complex64::new(0.0, 0.0), 2.0);
        let b = RegionMask::disk(&d, Complex64::new(1.0, 0.0), 2.0);
        assert_eq!(a.complement().complement(), a);
        assert_eq!(a.union(&a.complement()), RegionMask::full(&d));
        assert!(a.intersection(&b).is_subset_of(&a));
        let ring = RegionMask::annulus(&d, Complex64::new(0.0, 0.0), 1.0, 2.0);
        assert!(ring.is_subset_of(&a));
        for (i, &p) in d.sites().iter().enumerate() {
            let r = d.embed(p).norm();
            assert_eq!(a.contains(i), r <= 2.0 + 1e-9);
        }
    }
}
