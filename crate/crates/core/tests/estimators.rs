use std::sync::Arc;

use num_complex::Complex64;
use percfield_core::events::connected;
use percfield_core::sampler::spin_product_expectation;
use percfield_core::stats::split_halves;
use percfield_core::{
    label_clusters, nearest_vertex, sample_config, BatchStats, CompiledRequest, CorrelatorKind, CorrelatorRequest,
    Domain, LatticePoint, PiPlugin, PointSpec, StreamKey, TinyPatch,
};

fn c(x: f64, y: f64) -> Complex64 {
    Complex64::new(x, y)
}

#[test]
fn split_halves_is_unbiased_over_all_sample_pairs() {
    // Four sites, one configuration per batch: averaging over every ordered
    // pair of configurations gives the expectation of the estimator exactly.
    let patch = TinyPatch::parallelogram(1.0, 0..2, 0..2).unwrap();
    let dom = patch.domain().clone();
    let (a, b) = (LatticePoint::new(0, 0), LatticePoint::new(1, 1));
    let (p, q) = (LatticePoint::new(1, 0), LatticePoint::new(0, 1));
    let obs = |bits: u64| {
        let cfg = percfield_core::Configuration::from_bits(dom.clone(), bits);
        let l = label_clusters(&cfg);
        let x = connected(&l, &dom, a, b).unwrap() as u64;
        let y = connected(&l, &dom, p, q).unwrap() as u64;
        [x & y, x, y]
    };
    let n = patch.colorings();
    let table: Vec<[u64; 3]> = (0..n).map(obs).collect();
    let mean = |k: usize| table.iter().map(|t| t[k] as f64).sum::<f64>() / n as f64;
    let exact = mean(0) - mean(1) * mean(2);
    assert!(exact.abs() > 1e-3);

    let mut total = 0.0;
    for s0 in &table {
        for s1 in &table {
            let batches: Vec<BatchStats> = (0..30)
                .map(|i| {
                    let s = if i % 2 == 0 { s0 } else { s1 };
                    BatchStats { batch: i, n: 1, sums: s.to_vec() }
                })
                .collect();
            total += split_halves(&batches, &[(0, 1.0)], &[(1, 2, -1.0)]).unwrap().mean;
        }
    }
    let expectation = total / (n * n) as f64;
    assert!((expectation - exact).abs() < 1e-14, "{expectation} vs {exact}");
}

#[test]
fn energy_chain_telescopes_on_every_configuration() {
    let d = Arc::new(Domain::disk(1.0, 30.0).unwrap());
    let (z1, z2) = (c(-8.0, 0.0), c(8.0, 0.0));
    let req = CorrelatorRequest::new(
        CorrelatorKind::EnergyEnergy,
        vec![PointSpec::energy(z1), PointSpec::energy(z2)],
        60,
        2,
    );
    let comp = CompiledRequest::compile(&req, d.clone()).unwrap();
    let k = comp.chain_len;
    assert!(k >= 3);
    let u = [nearest_vertex(z1 - 1.0, &d).unwrap(), nearest_vertex(z1 + 1.0, &d).unwrap()];
    let v = [nearest_vertex(z2 - 1.0, &d).unwrap(), nearest_vertex(z2 + 1.0, &d).unwrap()];
    for s in 0..400 {
        let cfg = sample_config(&d, 21, s);
        let ind = comp.indicators(&cfg);
        let l = label_clusters(&cfg);
        let x = connected(&l, &d, u[0], u[1]).unwrap() as u64;
        let y = connected(&l, &d, v[0], v[1]).unwrap() as u64;
        // Pair 1 is first connected at exactly one level; pair 2, once
        // connected outside a region, stays connected outside smaller ones.
        let first: u64 = ind[k..2 * k].iter().sum();
        assert_eq!(first, x, "sample {s}");
        assert!(ind[2 * k..3 * k].windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(ind[3 * k - 1], y, "sample {s}");
        for j in 0..k {
            assert_eq!(ind[j], ind[k + j] & ind[2 * k + j]);
        }
        let all = [u[0], u[1], v[0], v[1]];
        let s4 = spin_product_expectation(&l, &cfg, &all).unwrap() as u64;
        assert_eq!(ind[3 * k] + ind[3 * k + 1] + (x & y), s4, "sample {s}");
    }
}

#[test]
fn odd_spin_products_vanish_on_every_sample() {
    let d = Arc::new(Domain::disk(1.0, 8.0).unwrap());
    let sets: [&[LatticePoint]; 3] = [
        &[LatticePoint::ORIGIN],
        &[LatticePoint::new(0, 0), LatticePoint::new(1, 0), LatticePoint::new(0, 1)],
        &[LatticePoint::new(2, 0), LatticePoint::new(2, 0), LatticePoint::new(-3, 1), LatticePoint::new(0, 4), LatticePoint::new(1, 1)],
    ];
    for s in 0..2_000 {
        let cfg = sample_config(&d, 4, s);
        let l = label_clusters(&cfg);
        for pts in sets {
            assert_eq!(spin_product_expectation(&l, &cfg, pts).unwrap(), 0.0);
        }
    }
}

#[test]
fn odd_spin_requests_are_rejected() {
    let req = CorrelatorRequest::new(
        CorrelatorKind::SpinNPoint,
        vec![PointSpec::spin(c(0.0, 0.0)), PointSpec::spin(c(2.0, 0.0)), PointSpec::spin(c(0.0, 2.0))],
        60,
        2,
    );
    let d = Arc::new(Domain::disk(1.0, 6.0).unwrap());
    assert!(CompiledRequest::compile(&req, d).is_err());
}

#[test]
fn normalized_values_recompute_bit_for_bit() {
    let d = Arc::new(Domain::disk(0.25, 2.0).unwrap());
    let req = CorrelatorRequest::new(
        CorrelatorKind::EnergySpinSpin,
        vec![PointSpec::energy(c(0.0, 0.0)), PointSpec::spin(c(0.0, 1.0)), PointSpec::spin(c(0.0, -1.0))],
        600,
        10,
    );
    let comp = CompiledRequest::compile(&req, d).unwrap();
    let batches = comp.run_batches(StreamKey::new(8, 1), 0..comp.n_batches, 2);
    let pi = PiPlugin { value: 0.43, std_error: 0.004, n: 10_000 };
    let recs = comp.assemble(&batches, Some(pi)).unwrap();
    assert!(!recs.is_empty());
    for r in &recs {
        assert_eq!(r.recompute_normalized().to_bits(), r.normalized_value.to_bits(), "{}", r.full_kind());
    }
}

#[test]
fn batches_do_not_depend_on_worker_count() {
    let d = Arc::new(Domain::disk(0.125, 1.5).unwrap());
    let req = CorrelatorRequest::new(
        CorrelatorKind::SpinNPoint,
        vec![PointSpec::spin(c(-0.5, 0.0)), PointSpec::spin(c(0.5, 0.0))],
        3_000,
        50,
    );
    let comp = CompiledRequest::compile(&req, d).unwrap();
    let key = StreamKey::new(3, 9);
    let one = comp.run_batches(key, 0..comp.n_batches, 1);
    for w in [3, 8] {
        assert_eq!(one, comp.run_batches(key, 0..comp.n_batches, w));
    }
    let mut split = comp.run_batches(key, 0..17, 2);
    split.extend(comp.run_batches(key, 17..comp.n_batches, 4));
    assert_eq!(one, split);
}
