//! Triangular lattice geometry in axial coordinates.
//!
//! A vertex `(q, r)` sits at `q·(1, 0) + r·(1/2, √3/2)` times the spacing.
//! A [`Domain`] is the finite set of vertices inside a closed disk around the
//! origin, stored in a fixed row-major order so that site ranks are stable.

use std::fmt;
use std::ops::{Add, Neg, Sub};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SQRT3_2: f64 = 0.866_025_403_784_438_6;

/// Relative slack used when comparing squared lattice distances.
const DIST_EPS: f64 = 1e-9;

/// Marker for "no site" in rank tables.
pub const NO_SITE: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LatticePoint {
    pub q: i32,
    pub r: i32,
}

impl LatticePoint {
    pub const ORIGIN: LatticePoint = LatticePoint { q: 0, r: 0 };

    /// Neighbor offsets in counterclockwise order, starting along +x.
    /// Consecutive entries together with the center span a lattice triangle.
    pub const NEIGHBOR_OFFSETS: [LatticePoint; 6] = [
        LatticePoint { q: 1, r: 0 },
        LatticePoint { q: 0, r: 1 },
        LatticePoint { q: -1, r: 1 },
        LatticePoint { q: -1, r: 0 },
        LatticePoint { q: 0, r: -1 },
        LatticePoint { q: 1, r: -1 },
    ];

    pub const fn new(q: i32, r: i32) -> Self {
        LatticePoint { q, r }
    }

    pub fn neighbors(self) -> [LatticePoint; 6] {
        Self::NEIGHBOR_OFFSETS.map(|d| self + d)
    }

    pub fn is_adjacent(self, other: LatticePoint) -> bool {
        (other - self).norm_sq() == 1
    }

    /// Squared Euclidean length in units of the spacing.
    pub fn norm_sq(self) -> i64 {
        let (q, r) = (self.q as i64, self.r as i64);
        q * q + q * r + r * r
    }

    /// Embedding at unit spacing.
    pub fn unit_embedding(self) -> Complex64 {
        Complex64::new(self.q as f64 + 0.5 * self.r as f64, SQRT3_2 * self.r as f64)
    }

    pub fn embed(self, spacing: f64) -> Complex64 {
        self.unit_embedding() * spacing
    }
}

impl Add for LatticePoint {
    type Output = LatticePoint;
    fn add(self, o: LatticePoint) -> LatticePoint {
        LatticePoint::new(self.q + o.q, self.r + o.r)
    }
}

impl Sub for LatticePoint {
    type Output = LatticePoint;
    fn sub(self, o: LatticePoint) -> LatticePoint {
        LatticePoint::new(self.q - o.q, self.r - o.r)
    }
}

impl Neg for LatticePoint {
    type Output = LatticePoint;
    fn neg(self) -> LatticePoint {
        LatticePoint::new(-self.q, -self.r)
    }
}

impl fmt::Display for LatticePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.q, self.r)
    }
}

/// Continuous axial coordinates of `z` at the given spacing.
fn axial_coords(z: Complex64, spacing: f64) -> (f64, f64) {
    let r = z.im / (SQRT3_2 * spacing);
    let q = z.re / spacing - 0.5 * r;
    (q, r)
}

/// Squared distance from `p` to `z`, both in units of the spacing.
fn unit_dist_sq(p: LatticePoint, z_unit: Complex64) -> f64 {
    (p.unit_embedding() - z_unit).norm_sqr()
}

/// Finite patch of the lattice: every vertex whose embedding lies in a closed
/// disk around the origin (or an explicit point set for tiny test patches).
#[derive(Clone, Debug)]
pub struct Domain {
    spacing: f64,
    radius: f64,
    is_disk: bool,
    sites: Vec<LatticePoint>,
    q0: i32,
    r0: i32,
    width: usize,
    height: usize,
    grid: Vec<u32>,
    neighbor_table: Vec<[u32; 6]>,
}

impl Domain {
    /// All vertices `p` with `|embed(p)| <= radius`.
    pub fn disk(spacing: f64, radius: f64) -> Result<Domain> {
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(Error::InvalidDomain(format!("spacing must be positive, got {spacing}")));
        }
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::InvalidDomain(format!("radius must be positive, got {radius}")));
        }
        let rl = radius / spacing;
        if rl > 1.0e4 {
            return Err(Error::InvalidDomain(format!("patch of {rl:.0} lattice radii is too large")));
        }
        let lim = rl * rl * (1.0 + DIST_EPS);
        let rmax = (rl / SQRT3_2).floor() as i32 + 1;
        let mut sites = Vec::new();
        for r in -rmax..=rmax {
            let qc = -0.5 * r as f64;
            let qmin = (qc - rl).floor() as i32 - 1;
            let qmax = (qc + rl).ceil() as i32 + 1;
            for q in qmin..=qmax {
                let p = LatticePoint::new(q, r);
                if (p.norm_sq() as f64) <= lim {
                    sites.push(p);
                }
            }
        }
        Ok(Self::build(spacing, radius, true, sites))
    }

    /// Explicit patch made of the given points (deduplicated, reordered
    /// row-major). The radius is the largest embedded norm.
    pub fn from_points(spacing: f64, points: &[LatticePoint]) -> Result<Domain> {
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(Error::InvalidDomain(format!("spacing must be positive, got {spacing}")));
        }
        if points.is_empty() {
            return Err(Error::InvalidDomain("empty point set".into()));
        }
        let mut sites = points.to_vec();
        sites.sort_by_key(|p| (p.r, p.q));
        sites.dedup();
        let radius = sites
            .iter()
            .map(|p| p.embed(spacing).norm())
            .fold(0.0_f64, f64::max);
        Ok(Self::build(spacing, radius, false, sites))
    }

    fn build(spacing: f64, radius: f64, is_disk: bool, mut sites: Vec<LatticePoint>) -> Domain {
        sites.sort_by_key(|p| (p.r, p.q));
        let q0 = sites.iter().map(|p| p.q).min().unwrap_or(0);
        let q1 = sites.iter().map(|p| p.q).max().unwrap_or(0);
        let r0 = sites.iter().map(|p| p.r).min().unwrap_or(0);
        let r1 = sites.iter().map(|p| p.r).max().unwrap_or(0);
        let width = (q1 - q0 + 1) as usize;
        let height = (r1 - r0 + 1) as usize;
        let mut grid = vec![NO_SITE; width * height];
        for (i, p) in sites.iter().enumerate() {
            grid[(p.r - r0) as usize * width + (p.q - q0) as usize] = i as u32;
        }
        let mut dom = Domain {
            spacing,
            radius,
            is_disk,
            sites,
            q0,
            r0,
            width,
            height,
            grid,
            neighbor_table: Vec::new(),
        };
        dom.neighbor_table = dom
            .sites
            .iter()
            .map(|p| p.neighbors().map(|n| dom.rank_of(n).map_or(NO_SITE, |i| i as u32)))
            .collect();
        dom
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn sites(&self) -> &[LatticePoint] {
        &self.sites
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn site(&self, rank: usize) -> LatticePoint {
        self.sites[rank]
    }

    #[inline]
    pub fn rank_of(&self, p: LatticePoint) -> Option<usize> {
        let dq = p.q.wrapping_sub(self.q0);
        let dr = p.r.wrapping_sub(self.r0);
        if dq < 0 || dr < 0 || dq as usize >= self.width || dr as usize >= self.height {
            return None;
        }
        let v = self.grid[dr as usize * self.width + dq as usize];
        (v != NO_SITE).then_some(v as usize)
    }

    pub fn contains(&self, p: LatticePoint) -> bool {
        self.rank_of(p).is_some()
    }

    /// Ranks of the six neighbors of a site, `NO_SITE` where the neighbor
    /// falls outside the patch. Same order as [`LatticePoint::NEIGHBOR_OFFSETS`].
    #[inline]
    pub fn neighbor_ranks(&self, rank: usize) -> &[u32; 6] {
        &self.neighbor_table[rank]
    }

    pub fn embed(&self, p: LatticePoint) -> Complex64 {
        p.embed(self.spacing)
    }

    /// True for domains built by [`Domain::disk`].
    pub fn is_disk(&self) -> bool {
        self.is_disk
    }

    /// Does the closed disk of the given radius around `z` fit in the domain?
    /// For a disk domain this is containment of disks; for an explicit patch
    /// every lattice vertex of the closed disk has to be a site.
    pub fn covers_disk(&self, z: Complex64, radius: f64) -> bool {
        if self.is_disk {
            return z.norm() + radius <= self.radius * (1.0 + DIST_EPS);
        }
        self.lattice_points_in_disk(z, radius).iter().all(|&p| self.contains(p))
    }

    /// Vertices of the infinite lattice in the closed disk `|x - z| <= radius`.
    pub fn lattice_points_in_disk(&self, z: Complex64, radius: f64) -> Vec<LatticePoint> {
        let zu = z / self.spacing;
        let rl = radius / self.spacing;
        let lim = rl * rl * (1.0 + DIST_EPS);
        let (qc, rc) = axial_coords(z, self.spacing);
        let span_r = (rl / SQRT3_2).ceil() as i32 + 1;
        let mut out = Vec::new();
        for r in rc.floor() as i32 - span_r..=rc.ceil() as i32 + span_r {
            let span_q = (rl + 0.5 * (r as f64 - rc).abs()).ceil() as i32 + 1;
            for q in qc.floor() as i32 - span_q..=qc.ceil() as i32 + span_q {
                let p = LatticePoint::new(q, r);
                if unit_dist_sq(p, zu) <= lim {
                    out.push(p);
                }
            }
        }
        out
    }
}

/// Nearest lattice vertex to `z` at the domain's spacing; ties go to the
/// lexicographically smallest `(q, r)`. On a disk domain `z` must keep one
/// spacing of margin from the rim; on an explicit patch the vertex only has
/// to be a site.
pub fn nearest_vertex(z: Complex64, domain: &Domain) -> Result<LatticePoint> {
    if !z.re.is_finite() || !z.im.is_finite() {
        return Err(Error::OutOfDomain(format!("{z}")));
    }
    if domain.is_disk() && !domain.covers_disk(z, domain.spacing) {
        return Err(Error::OutOfDomain(format!("{z}")));
    }
    let p = nearest_lattice_vertex(z, domain.spacing);
    if !domain.contains(p) {
        return Err(Error::OutOfDomain(format!("{z}")));
    }
    Ok(p)
}

/// Nearest vertex of the infinite lattice, with the same tie rule.
pub fn nearest_lattice_vertex(z: Complex64, spacing: f64) -> LatticePoint {
    let (qf, rf) = axial_coords(z, spacing);
    let zu = z / spacing;
    let (qb, rb) = (qf.floor() as i32, rf.floor() as i32);
    let mut best = LatticePoint::new(qb, rb);
    let mut best_d = f64::INFINITY;
    for r in rb - 1..=rb + 2 {
        for q in qb - 1..=qb + 2 {
            let p = LatticePoint::new(q, r);
            let d = unit_dist_sq(p, zu);
            if closer(d, p, best_d, best) {
                best = p;
                best_d = d;
            }
        }
    }
    best
}

/// Strictly better candidate under distance-then-lexicographic ordering.
fn closer(d: f64, p: LatticePoint, best_d: f64, best: LatticePoint) -> bool {
    let tol = DIST_EPS * (1.0 + best_d.min(d));
    if d < best_d - tol {
        true
    } else if d <= best_d + tol {
        p < best
    } else {
        false
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointRole {
    Spin,
    EnergyCenter,
    EnergyDeltaCenter,
}

/// A field insertion point: continuum position, which field, and the cutoff
/// for the non-local energy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointSpec {
    #[serde(with = "complex_pair")]
    pub z: Complex64,
    pub role: PointRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
}

impl PointSpec {
    pub fn spin(z: Complex64) -> Self {
        PointSpec { z, role: PointRole::Spin, delta: None }
    }

    pub fn energy(z: Complex64) -> Self {
        PointSpec { z, role: PointRole::EnergyCenter, delta: None }
    }

    pub fn energy_delta(z: Complex64, delta: f64) -> Self {
        PointSpec { z, role: PointRole::EnergyDeltaCenter, delta: Some(delta) }
    }

    pub fn validate(&self, spacing: f64) -> Result<()> {
        match (self.role, self.delta) {
            (PointRole::EnergyDeltaCenter, Some(d)) => {
                if !(d.is_finite() && d > spacing) {
                    return Err(Error::InvalidDelta { delta: d, spacing });
                }
                Ok(())
            }
            (PointRole::EnergyDeltaCenter, None) => {
                Err(Error::InvalidPoint("non-local energy point needs a cutoff delta".into()))
            }
            (_, Some(_)) => Err(Error::InvalidPoint("cutoff delta given for a local field".into())),
            (_, None) => Ok(()),
        }
    }

    /// Distance from the center vertex to each offset vertex (`a` or `δ`).
    pub fn half_width(&self, spacing: f64) -> f64 {
        match self.role {
            PointRole::Spin => 0.0,
            PointRole::EnergyCenter => spacing,
            PointRole::EnergyDeltaCenter => self.delta.unwrap_or(spacing),
        }
    }
}

/// Left/right vertices of an energy insertion along the +x axis.
pub fn energy_offsets(p: &PointSpec, domain: &Domain) -> Result<(LatticePoint, LatticePoint)> {
    let a = domain.spacing;
    p.validate(a)?;
    let center = nearest_vertex(p.z, domain)?;
    match p.role {
        PointRole::Spin => Err(Error::InvalidPoint("spin insertion has no energy offsets".into())),
        PointRole::EnergyCenter => {
            let step = LatticePoint::new(1, 0);
            let (l, r) = (center - step, center + step);
            for v in [l, r] {
                if !domain.contains(v) {
                    return Err(Error::OutOfDomain(format!("{v} at spacing {a}")));
                }
            }
            Ok((l, r))
        }
        PointRole::EnergyDeltaCenter => {
            let d = p.delta.expect("validated");
            let c = center.embed(a);
            let l = nearest_vertex(c - d, domain)?;
            let r = nearest_vertex(c + d, domain)?;
            Ok((l, r))
        }
    }
}

/// Serde helper: complex numbers as `[re, im]`.
pub mod complex_pair {
    use num_complex::Complex64;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(z: &Complex64, s: S) -> Result<S::Ok, S::Error> {
        [z.re, z.im].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Complex64, D::Error> {
        let [re, im] = <[f64; 2]>::deserialize(d)?;
        Ok(Complex64::new(re, im))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_nearest(z: Complex64, dom: &Domain) -> LatticePoint {
        let zu = z / dom.spacing();
        let mut best = dom.site(0);
        let mut best_d = f64::INFINITY;
        for &p in dom.sites() {
            let d = unit_dist_sq(p, zu);
            if closer(d, p, best_d, best) {
                best = p;
                best_d = d;
            }
        }
        best
    }

    #[test]
    fn origin_embeds_to_zero() {
        assert_eq!(LatticePoint::ORIGIN.embed(0.3), Complex64::new(0.0, 0.0));
        let dom = Domain::disk(1.0, 5.0).unwrap();
        assert_eq!(nearest_vertex(Complex64::new(0.0, 0.0), &dom).unwrap(), LatticePoint::ORIGIN);
    }

    #[test]
    fn neighbors_have_unit_length() {
        for d in LatticePoint::NEIGHBOR_OFFSETS {
            assert_eq!(d.norm_sq(), 1);
            assert!((d.unit_embedding().norm() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn disk_sites_are_inside_and_ordered() {
        let dom = Domain::disk(0.1, 1.0).unwrap();
        for w in dom.sites().windows(2) {
            assert!((w[0].r, w[0].q) < (w[1].r, w[1].q));
        }
        for (i, &p) in dom.sites().iter().enumerate() {
            assert!(dom.embed(p).norm() <= 1.0 + 1e-9);
            assert_eq!(dom.rank_of(p), Some(i));
        }
        // Every lattice point just outside is excluded.
        assert!(!dom.contains(LatticePoint::new(11, 0)));
        assert!(dom.contains(LatticePoint::new(10, 0)));
    }

    #[test]
    fn site_count_matches_area() {
        let dom = Domain::disk(1.0, 40.0).unwrap();
        let area_per_site = SQRT3_2;
        let expect = std::f64::consts::PI * 1600.0 / area_per_site;
        assert!((dom.len() as f64 - expect).abs() / expect < 0.02);
    }

    #[test]
    fn neighbor_table_is_symmetric() {
        let dom = Domain::disk(1.0, 6.0).unwrap();
        for i in 0..dom.len() {
            for &n in dom.neighbor_ranks(i) {
                if n != NO_SITE {
                    assert!(dom.neighbor_ranks(n as usize).contains(&(i as u32)));
                }
            }
        }
        let origin = dom.rank_of(LatticePoint::ORIGIN).unwrap();
        assert!(dom.neighbor_ranks(origin).iter().all(|&n| n != NO_SITE));
    }

    #[test]
    fn midway_tie_goes_to_smaller_pair() {
        let dom = Domain::disk(1.0, 10.0).unwrap();
        let p = nearest_vertex(Complex64::new(0.5, 0.0), &dom).unwrap();
        assert_eq!(p, LatticePoint::new(0, 0));
        let p = nearest_vertex(Complex64::new(-2.5, 0.0), &dom).unwrap();
        assert_eq!(p, LatticePoint::new(-3, 0));
    }

    #[test]
    fn shifted_vertex_rounds_back() {
        let dom = Domain::disk(0.25, 4.0).unwrap();
        let v = LatticePoint::new(3, -1);
        let z = v.embed(0.25) + Complex64::new(0.3 * 0.25, 0.0);
        assert_eq!(nearest_vertex(z, &dom).unwrap(), v);
        assert_eq!(brute_nearest(z, &dom), v);
    }

    #[test]
    fn nearest_matches_scan() {
        let dom = Domain::disk(0.5, 6.0).unwrap();
        let mut s = 12345u64;
        for _ in 0..2000 {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let x = ((s >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 9.0;
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let y = ((s >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 9.0;
            let z = Complex64::new(x, y);
            if z.norm() + 0.5 > 6.0 {
                continue;
            }
            assert_eq!(nearest_vertex(z, &dom).unwrap(), brute_nearest(z, &dom));
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dom = Domain::disk(0.125, 2.0).unwrap();
        for &p in dom.sites() {
            let z = dom.embed(p);
            if dom.covers_disk(z, dom.spacing()) {
                assert_eq!(nearest_vertex(z, &dom).unwrap(), p);
            }
        }
    }

    #[test]
    fn out_of_domain_is_rejected() {
        let dom = Domain::disk(1.0, 5.0).unwrap();
        assert!(matches!(
            nearest_vertex(Complex64::new(4.5, 0.0), &dom),
            Err(Error::OutOfDomain(_))
        ));
    }

    #[test]
    fn energy_offsets_local() {
        let dom = Domain::disk(1.0, 5.0).unwrap();
        let spec = PointSpec::energy(Complex64::new(0.0, 0.0));
        let (l, r) = energy_offsets(&spec, &dom).unwrap();
        assert_eq!((l, r), (LatticePoint::new(-1, 0), LatticePoint::new(1, 0)));
    }

    #[test]
    fn energy_offsets_nonlocal_match_scan() {
        let dom = Domain::disk(1.0, 8.0).unwrap();
        let spec = PointSpec::energy_delta(Complex64::new(0.0, 0.0), 2.5);
        let (l, r) = energy_offsets(&spec, &dom).unwrap();
        assert_eq!(l, brute_nearest(Complex64::new(-2.5, 0.0), &dom));
        assert_eq!(r, brute_nearest(Complex64::new(2.5, 0.0), &dom));
    }

    #[test]
    fn delta_must_exceed_spacing() {
        let dom = Domain::disk(1.0, 8.0).unwrap();
        let spec = PointSpec::energy_delta(Complex64::new(0.0, 0.0), 1.0);
        assert!(matches!(energy_offsets(&spec, &dom), Err(Error::InvalidDelta { .. })));
    }

    #[test]
    fn point_spec_json_shape() {
        let s = PointSpec::energy_delta(Complex64::new(0.25, -1.0), 0.1);
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(j, r#"{"z":[0.25,-1.0],"role":"energy_delta_center","delta":0.1}"#);
        let back: PointSpec = serde_json::from_str(&j).unwrap();
        assert_eq!(back, s);
    }
}
