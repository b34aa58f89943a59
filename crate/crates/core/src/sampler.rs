//! Critical configurations, black-cluster labeling and the spin parity rule.
//!
//! Every site is black with probability 1/2. Colors come from a ChaCha8
//! keystream keyed by `(master_seed, stream)` and positioned by the sample
//! index, so any configuration can be regenerated on its own.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::lattice::{Domain, LatticePoint, NO_SITE};

/// Label carried by white sites.
pub const WHITE: u32 = u32::MAX;

/// Bit-packed coloring of a domain (bit set = black).
#[derive(Clone, Debug)]
pub struct Configuration {
    domain: Arc<Domain>,
    words: Vec<u64>,
    sample_index: u64,
}

impl PartialEq for Configuration {
    fn eq(&self, other: &Self) -> bool {
        self.words == other.words
            && (Arc::ptr_eq(&self.domain, &other.domain) || self.domain.sites() == other.domain.sites())
    }
}

impl Eq for Configuration {}

fn word_count(n: usize) -> usize {
    n.div_ceil(64)
}

impl Configuration {
    pub fn uniform(domain: Arc<Domain>, black: bool) -> Self {
        let n = domain.len();
        let mut words = vec![if black { !0u64 } else { 0 }; word_count(n)];
        mask_tail(&mut words, n);
        Configuration { domain, words, sample_index: 0 }
    }

    pub fn from_fn(domain: Arc<Domain>, mut black: impl FnMut(LatticePoint) -> bool) -> Self {
        let mut c = Self::uniform(domain, false);
        for i in 0..c.domain.len() {
            if black(c.domain.site(i)) {
                c.words[i >> 6] |= 1 << (i & 63);
            }
        }
        c
    }

    /// Configuration whose black sites are the set bits of `bits` (site rank
    /// order). Used by exhaustive enumeration.
    pub fn from_bits(domain: Arc<Domain>, bits: u64) -> Self {
        let n = domain.len();
        assert!(n <= 64, "from_bits needs at most 64 sites");
        let mut words = vec![bits];
        mask_tail(&mut words, n);
        Configuration { domain, words, sample_index: bits }
    }

    pub fn domain(&self) -> &Arc<Domain> {
        &self.domain
    }

    pub fn sample_index(&self) -> u64 {
        self.sample_index
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.domain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domain.is_empty()
    }

    #[inline]
    pub fn is_black(&self, rank: usize) -> bool {
        (self.words[rank >> 6] >> (rank & 63)) & 1 == 1
    }

    /// Color of a lattice point, `None` outside the domain.
    pub fn color(&self, p: LatticePoint) -> Option<bool> {
        self.domain.rank_of(p).map(|i| self.is_black(i))
    }

    pub fn set(&mut self, rank: usize, black: bool) {
        if black {
            self.words[rank >> 6] |= 1 << (rank & 63);
        } else {
            self.words[rank >> 6] &= !(1 << (rank & 63));
        }
    }

    /// Same configuration with every color flipped.
    pub fn swapped(&self) -> Self {
        let mut words: Vec<u64> = self.words.iter().map(|w| !w).collect();
        mask_tail(&mut words, self.domain.len());
        Configuration { domain: self.domain.clone(), words, sample_index: self.sample_index }
    }

    pub fn black_count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }
}

fn mask_tail(words: &mut [u64], n: usize) {
    let rem = n & 63;
    if rem != 0 {
        if let Some(last) = words.last_mut() {
            *last &= (1u64 << rem) - 1;
        }
    }
}

/// Independent keystream family. Two keys with different `stream` never share
/// configurations, whatever the sample index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub master_seed: u64,
    pub stream: u64,
}

impl StreamKey {
    pub fn new(master_seed: u64, stream: u64) -> Self {
        StreamKey { master_seed, stream }
    }

    fn seed_bytes(&self) -> [u8; 32] {
        let mut k = [0u8; 32];
        k[..8].copy_from_slice(&self.master_seed.to_le_bytes());
        k[8..16].copy_from_slice(&self.stream.to_le_bytes());
        k[16..].copy_from_slice(b"percfield/colors");
        k
    }

    /// Overwrite `config` with sample number `sample_index` of this stream.
    pub fn fill(&self, config: &mut Configuration, sample_index: u64) {
        let mut rng = ChaCha8Rng::from_seed(self.seed_bytes());
        rng.set_stream(sample_index);
        for w in config.words.iter_mut() {
            *w = rng.next_u64();
        }
        mask_tail(&mut config.words, config.domain.len());
        config.sample_index = sample_index;
    }

    pub fn sample(&self, domain: &Arc<Domain>, sample_index: u64) -> Configuration {
        let mut c = Configuration::uniform(domain.clone(), false);
        self.fill(&mut c, sample_index);
        c
    }
}

/// Configuration number `sample_index` of the default stream of `master_seed`.
pub fn sample_config(domain: &Arc<Domain>, master_seed: u64, sample_index: u64) -> Configuration {
    StreamKey::new(master_seed, 0).sample(domain, sample_index)
}

/// Snapshot of a seed exploration, handed to the stop rule of
/// [`Scratch::explore_seeds`].
pub struct SeedGroups<'a> {
    group: &'a [usize],
    open: &'a [bool],
    seeds: &'a [usize],
    config: &'a Configuration,
    n_open: usize,
}

impl SeedGroups<'_> {
    fn root(&self, mut i: usize) -> usize {
        while self.group[i] != i {
            i = self.group[i];
        }
        i
    }

    pub fn is_black(&self, i: usize) -> bool {
        self.config.is_black(self.seeds[i])
    }

    /// Seeds `i` and `j` are already known to share a cluster.
    pub fn same(&self, i: usize, j: usize) -> bool {
        self.is_black(i) && self.is_black(j) && self.root(i) == self.root(j)
    }

    /// Whether `i` and `j` share a cluster is already decided.
    pub fn settled(&self, i: usize, j: usize) -> bool {
        self.same(i, j)
            || !self.is_black(i)
            || !self.is_black(j)
            || !self.open[self.root(i)]
            || !self.open[self.root(j)]
    }

    /// Number of seed groups with unexplored sites.
    pub fn open_groups(&self) -> usize {
        self.n_open
    }
}

/// Disjoint-set forest with path compression and union by size.
#[derive(Clone, Debug)]
pub struct UnionFind {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind { parent: (0..n as u32).collect(), size: vec![1; n] }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        let mut root = x;
        while self.parent[root] as usize != root {
            root = self.parent[root] as usize;
        }
        while self.parent[x] as usize != root {
            let next = self.parent[x] as usize;
            self.parent[x] = root as u32;
            x = next;
        }
        root
    }

    /// Returns true if the two sets were distinct.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra as u32;
        self.size[ra] += self.size[rb];
        true
    }
}

/// Black-cluster labels: each black site carries the smallest rank in its
/// cluster, white sites carry [`WHITE`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterLabels {
    pub label: Vec<u32>,
    pub cluster_count: usize,
}

impl ClusterLabels {
    pub fn of(&self, rank: usize) -> Option<u32> {
        let l = self.label[rank];
        (l != WHITE).then_some(l)
    }
}

pub fn label_clusters(config: &Configuration) -> ClusterLabels {
    let order: Vec<usize> = (0..config.len()).collect();
    label_clusters_in_order(config, &order)
}

/// Labeling that merges sites in the given processing order. The result does
/// not depend on the order.
pub fn label_clusters_in_order(config: &Configuration, order: &[usize]) -> ClusterLabels {
    let dom = config.domain();
    let n = dom.len();
    let mut uf = UnionFind::new(n);
    for &i in order {
        if !config.is_black(i) {
            continue;
        }
        for &j in dom.neighbor_ranks(i) {
            if j != NO_SITE && config.is_black(j as usize) {
                uf.union(i, j as usize);
            }
        }
    }
    let mut root_min = vec![WHITE; n];
    for i in 0..n {
        if config.is_black(i) {
            let r = uf.find(i);
            root_min[r] = root_min[r].min(i as u32);
        }
    }
    let mut label = vec![WHITE; n];
    let mut cluster_count = 0;
    for i in 0..n {
        if config.is_black(i) {
            let l = root_min[uf.find(i)];
            if l == i as u32 {
                cluster_count += 1;
            }
            label[i] = l;
        }
    }
    ClusterLabels { label, cluster_count }
}

/// Parity rule on cluster ids (one entry per inserted spin, `None` = white):
/// the spin average is 1 iff all points are black and every cluster holds an
/// even number of them.
pub fn spin_parity(ids: &[Option<u32>]) -> bool {
    if ids.len() % 2 == 1 || ids.iter().any(Option::is_none) {
        return false;
    }
    let mut v: Vec<u32> = ids.iter().map(|x| x.unwrap()).collect();
    v.sort_unstable();
    v.chunks(2).all(|c| c[0] == c[1])
}

/// Conditional expectation over cluster spins of the product of spins at the
/// given points (with multiplicity).
pub fn spin_product_expectation(
    labels: &ClusterLabels,
    config: &Configuration,
    points: &[LatticePoint],
) -> Result<f64> {
    let dom = config.domain();
    let ids = points
        .iter()
        .map(|&p| {
            dom.rank_of(p)
                .map(|i| labels.of(i))
                .ok_or_else(|| Error::OutOfDomain(p.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(if spin_parity(&ids) { 1.0 } else { 0.0 })
}

/// Reusable breadth-first search state sized for one domain. Marks are
/// epoch-stamped so no clearing is needed between searches.
/// Most seeds accepted by [`Scratch::local_clusters`].
pub const MAX_SEEDS: usize = 16;

#[derive(Clone, Debug)]
pub struct Scratch {
    stamp: Vec<u32>,
    aux: Vec<u32>,
    epoch: u32,
    queue: Vec<u32>,
    queues: Vec<Vec<u32>>,
}

impl Scratch {
    pub fn new(n_sites: usize) -> Self {
        Scratch { stamp: vec![0; n_sites], aux: vec![0; n_sites], epoch: 0, queue: Vec::new(), queues: Vec::new() }
    }

    pub fn for_domain(domain: &Domain) -> Self {
        Self::new(domain.len())
    }

    /// Start a new search generation.
    pub fn next_epoch(&mut self) -> u32 {
        if self.epoch == u32::MAX {
            self.stamp.fill(0);
            self.epoch = 0;
        }
        self.epoch += 1;
        self.queue.clear();
        self.epoch
    }

    #[inline]
    pub fn is_marked(&self, i: usize) -> bool {
        self.stamp[i] == self.epoch
    }

    #[inline]
    pub fn mark(&mut self, i: usize) {
        self.stamp[i] = self.epoch;
    }

    /// Cluster ids for the given seed sites computed by local search only:
    /// sites in the same black cluster get the same id, white sites `None`.
    /// Ids are arbitrary but consistent within one call.
    ///
    /// One breadth-first search per seed runs in lockstep; searches that meet
    /// are merged, and the whole thing stops once at most one group of seeds
    /// still has unexplored sites, so the cost is governed by the smaller
    /// clusters.
    pub fn local_clusters(&mut self, config: &Configuration, seeds: &[usize], out: &mut [Option<u32>]) {
        self.explore_seeds(config, seeds, out, |g| g.open_groups() <= 1);
    }

    /// Like [`Scratch::local_clusters`] but stops as soon as `stop` says the
    /// caller has what it needs. Only relations [`SeedGroups::settled`] at
    /// that point are reliable in `out`: unsettled seeds may share a cluster
    /// and still get different ids.
    pub fn explore_seeds(
        &mut self,
        config: &Configuration,
        seeds: &[usize],
        out: &mut [Option<u32>],
        stop: impl Fn(&SeedGroups) -> bool,
    ) {
        debug_assert_eq!(seeds.len(), out.len());
        let dom = config.domain();
        let k = seeds.len();
        self.next_epoch();
        if self.queues.len() < k {
            self.queues.resize(k, Vec::new());
        }
        let mut heads = [0usize; MAX_SEEDS];
        let mut group = [0usize; MAX_SEEDS];
        let mut live = [false; MAX_SEEDS];
        assert!(k <= MAX_SEEDS, "at most {MAX_SEEDS} seeds");
        fn find(g: &mut [usize], mut x: usize) -> usize {
            while g[x] != x {
                g[x] = g[g[x]];
                x = g[x];
            }
            x
        }
        for (i, &s) in seeds.iter().enumerate() {
            group[i] = i;
            self.queues[i].clear();
            if !config.is_black(s) {
                continue;
            }
            if self.is_marked(s) {
                let j = find(&mut group, self.aux[s] as usize);
                group[i] = j;
                continue;
            }
            self.mark(s);
            self.aux[s] = i as u32;
            self.queues[i].push(s as u32);
            live[i] = true;
        }
        loop {
            // Groups with unexplored sites.
            let mut open = [false; MAX_SEEDS];
            let mut n_open = 0;
            for i in 0..k {
                if live[i] && heads[i] < self.queues[i].len() {
                    let r = find(&mut group, i);
                    if !open[r] {
                        open[r] = true;
                        n_open += 1;
                    }
                }
            }
            if n_open <= 1 {
                break;
            }
            let view = SeedGroups { group: &group[..k], open: &open[..k], seeds, config, n_open };
            if stop(&view) {
                break;
            }
            for i in 0..k {
                if !live[i] || heads[i] >= self.queues[i].len() {
                    continue;
                }
                let x = self.queues[i][heads[i]] as usize;
                heads[i] += 1;
                for &y in dom.neighbor_ranks(x) {
                    if y == NO_SITE {
                        continue;
                    }
                    let y = y as usize;
                    if !config.is_black(y) {
                        continue;
                    }
                    if self.is_marked(y) {
                        let (a, b) = (find(&mut group, i), find(&mut group, self.aux[y] as usize));
                        if a != b {
                            group[a.max(b)] = a.min(b);
                        }
                    } else {
                        self.mark(y);
                        self.aux[y] = i as u32;
                        self.queues[i].push(y as u32);
                    }
                }
            }
        }
        for (i, &s) in seeds.iter().enumerate() {
            out[i] = config.is_black(s).then(|| find(&mut group, i) as u32);
        }
    }

    /// Is there a black path from `from` to `to` through sites accepted by
    /// `allowed`? Both endpoints are assumed allowed.
    pub fn connected_within(
        &mut self,
        config: &Configuration,
        from: usize,
        to: usize,
        allowed: impl Fn(usize) -> bool,
    ) -> bool {
        if !config.is_black(from) || !config.is_black(to) {
            return false;
        }
        if from == to {
            return true;
        }
        let dom = config.domain();
        self.next_epoch();
        self.mark(from);
        self.queue.push(from as u32);
        let mut head = 0;
        while head < self.queue.len() {
            let x = self.queue[head] as usize;
            head += 1;
            for &y in dom.neighbor_ranks(x) {
                if y == NO_SITE {
                    continue;
                }
                let y = y as usize;
                if self.is_marked(y) || !config.is_black(y) || !allowed(y) {
                    continue;
                }
                if y == to {
                    return true;
                }
                self.mark(y);
                self.queue.push(y as u32);
            }
        }
        false
    }

    /// Breadth-first search over black sites from `from` restricted by
    /// `allowed`, stopping as soon as `stop` accepts a visited site.
    /// Returns whether it stopped.
    pub fn search_until(
        &mut self,
        config: &Configuration,
        from: usize,
        allowed: impl Fn(usize) -> bool,
        mut stop: impl FnMut(usize) -> bool,
    ) -> bool {
        if !config.is_black(from) {
            return false;
        }
        let dom = config.domain();
        self.next_epoch();
        self.mark(from);
        if stop(from) {
            return true;
        }
        self.queue.push(from as u32);
        let mut head = 0;
        while head < self.queue.len() {
            let x = self.queue[head] as usize;
            head += 1;
            for &y in dom.neighbor_ranks(x) {
                if y == NO_SITE {
                    continue;
                }
                let y = y as usize;
                if self.is_marked(y) || !config.is_black(y) || !allowed(y) {
                    continue;
                }
                self.mark(y);
                if stop(y) {
                    return true;
                }
                self.queue.push(y as u32);
            }
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    fn bfs_labels(config: &Configuration) -> Vec<u32> {
        let dom = config.domain();
        let n = dom.len();
        let mut label = vec![WHITE; n];
        for s in 0..n {
            if !config.is_black(s) || label[s] != WHITE {
                continue;
            }
            // s is the smallest rank of its cluster because lower ranks were
            // already labeled.
            let mut q = VecDeque::from([s]);
            label[s] = s as u32;
            while let Some(x) = q.pop_front() {
                for nb in dom.site(x).neighbors() {
                    if let Some(y) = dom.rank_of(nb) {
                        if config.is_black(y) && label[y] == WHITE {
                            label[y] = s as u32;
                            q.push_back(y);
                        }
                    }
                }
            }
        }
        label
    }

    fn disk(a: f64, r: f64) -> Arc<Domain> {
        Arc::new(Domain::disk(a, r).unwrap())
    }

    #[test]
    fn same_key_same_configuration() {
        let d = disk(1.0, 12.0);
        assert_eq!(sample_config(&d, 7, 99), sample_config(&d, 7, 99));
        assert_ne!(sample_config(&d, 7, 99), sample_config(&d, 7, 100));
        assert_ne!(sample_config(&d, 7, 99), sample_config(&d, 8, 99));
        assert_ne!(
            StreamKey::new(7, 1).sample(&d, 99),
            StreamKey::new(7, 2).sample(&d, 99)
        );
    }

    #[test]
    fn tail_bits_are_clear() {
        let d = disk(1.0, 3.0);
        let n = d.len();
        assert_ne!(n % 64, 0);
        let c = Configuration::uniform(d.clone(), true);
        assert_eq!(c.black_count(), n);
        assert_eq!(c.swapped().black_count(), 0);
        let c = sample_config(&d, 1, 2);
        assert_eq!(c.black_count() + c.swapped().black_count(), n);
    }

    #[test]
    fn black_fraction_is_half() {
        let d = disk(1.0, 17.5);
        assert!(d.len() > 1000);
        let samples = 100_000u64;
        let mut black = 0u64;
        for i in 0..samples {
            black += sample_config(&d, 3, i).black_count() as u64;
        }
        let total = samples as f64 * d.len() as f64;
        let sigma = (0.25 / total).sqrt();
        assert!((black as f64 / total - 0.5).abs() < 4.0 * sigma);
    }

    #[test]
    fn distinct_sites_are_uncorrelated() {
        let d = disk(1.0, 4.0);
        let (i, j) = (0, d.len() - 1);
        let samples = 100_000u64;
        let mut sum = 0.0;
        for s in 0..samples {
            let c = sample_config(&d, 11, s);
            let x = if c.is_black(i) { 1.0 } else { -1.0 };
            let y = if c.is_black(j) { 1.0 } else { -1.0 };
            sum += x * y;
        }
        let corr = sum / samples as f64;
        assert!(corr.abs() < 4.0 / (samples as f64).sqrt());
    }

    #[test]
    fn uniform_patches() {
        let d = disk(1.0, 5.0);
        assert_eq!(label_clusters(&Configuration::uniform(d.clone(), true)).cluster_count, 1);
        let l = label_clusters(&Configuration::uniform(d, false));
        assert_eq!(l.cluster_count, 0);
        assert!(l.label.iter().all(|&x| x == WHITE));
    }

    #[test]
    fn labels_match_bfs() {
        let d = disk(1.0, 15.0);
        for s in 0..50 {
            let c = sample_config(&d, 5, s);
            let l = label_clusters(&c);
            assert_eq!(l.label, bfs_labels(&c));
            let mut roots: Vec<u32> = l.label.iter().copied().filter(|&x| x != WHITE).collect();
            roots.sort_unstable();
            roots.dedup();
            assert_eq!(roots.len(), l.cluster_count);
        }
    }

    #[test]
    fn local_clusters_agree_with_labels() {
        let d = disk(1.0, 10.0);
        let mut scratch = Scratch::for_domain(&d);
        let mut seeds: Vec<usize> = (0..d.len()).step_by(21).take(MAX_SEEDS - 1).collect();
        seeds.push(seeds[3]);
        let mut out = vec![None; seeds.len()];
        for s in 0..300 {
            let c = sample_config(&d, 9, s);
            let l = label_clusters(&c);
            scratch.local_clusters(&c, &seeds, &mut out);
            for a in 0..seeds.len() {
                assert_eq!(out[a].is_some(), l.of(seeds[a]).is_some());
                for b in 0..seeds.len() {
                    let same_local = out[a].is_some() && out[a] == out[b];
                    let same_label = l.of(seeds[a]).is_some() && l.of(seeds[a]) == l.of(seeds[b]);
                    assert_eq!(same_local, same_label);
                }
            }
        }
    }

    #[test]
    fn parity_rule() {
        assert!(!spin_parity(&[Some(1)]));
        assert!(spin_parity(&[Some(1), Some(1)]));
        assert!(!spin_parity(&[Some(1), Some(2)]));
        assert!(!spin_parity(&[Some(1), None]));
        assert!(spin_parity(&[Some(1), Some(2), Some(2), Some(1)]));
        assert!(spin_parity(&[Some(3), Some(3), Some(3), Some(3)]));
        assert!(!spin_parity(&[Some(3), Some(3), Some(3), Some(2)]));
        assert!(spin_parity(&[]));
    }

    #[test]
    fn single_point_product_vanishes() {
        let d = disk(1.0, 4.0);
        for s in 0..20 {
            let c = sample_config(&d, 2, s);
            let l = label_clusters(&c);
            assert_eq!(spin_product_expectation(&l, &c, &[LatticePoint::ORIGIN]).unwrap(), 0.0);
        }
    }

    #[test]
    fn connected_within_whole_domain_matches_labels() {
        let d = disk(1.0, 8.0);
        let mut scratch = Scratch::for_domain(&d);
        for s in 0..30 {
            let c = sample_config(&d, 4, s);
            let l = label_clusters(&c);
            for (i, j) in [(0, d.len() - 1), (5, 40), (d.len() / 2, d.len() / 2 + 1)] {
                let same = l.of(i).is_some() && l.of(i) == l.of(j);
                assert_eq!(scratch.connected_within(&c, i, j, |_| true), same);
            }
        }
    }
}
