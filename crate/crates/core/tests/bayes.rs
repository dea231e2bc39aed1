mod common;

use std::collections::BTreeMap;

use buildout_core::bayes::{
    expected_category_permits, expected_total_permits, fit_pmf, held_lot, posterior, HeldLot, TimeToPermitPMF,
};
use buildout_core::exec::stream_rng;
use buildout_core::ingestion::{CategorizeContext, CategorizeRules};
use buildout_core::synth::simulate;
use buildout_core::OwnerCategory;
use proptest::prelude::*;
use rand::Rng;

fn random_pmf(seed: u64) -> TimeToPermitPMF {
    let mut rng = stream_rng(seed, 5);
    let n = rng.random_range(1..15);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let total: f64 = w.iter().sum();
    let mass: BTreeMap<u32, f64> = w.iter().enumerate().map(|(k, v)| (k as u32, v / total)).collect();
    TimeToPermitPMF::new(OwnerCategory::Prospects, mass).unwrap()
}

proptest! {
    #[test]
    fn posterior_normalizes(seed in 0u64..100_000, held in 0u32..20) {
        let pmf = random_pmf(seed);
        let s = pmf.survival(held);
        match posterior(&pmf, held) {
            Ok(post) => {
                let total: f64 = post.values().sum();
                prop_assert!((total - 1.0).abs() <= 1e-12);
                for (&t, &p) in &post {
                    prop_assert!(t >= 1);
                    prop_assert!((p * s - pmf.get(t + held)).abs() <= 1e-15);
                }
            }
            Err(_) => prop_assert!(s <= 0.0),
        }
    }

    #[test]
    fn aggregation_is_linear(seed in 0u64..10_000, a in prop::collection::vec(0u32..3, 0..6), b in prop::collection::vec(0u32..3, 0..6)) {
        let mut mass = random_pmf(seed).mass().clone();
        // Keep mass beyond every holding time used.
        let tail = mass.remove(&0).unwrap_or(0.0);
        *mass.entry(20).or_insert(0.0) += tail;
        let pmf = TimeToPermitPMF::new(OwnerCategory::Prospects, mass).unwrap();
        let lots = |v: &[u32]| v.iter().map(|&h| HeldLot { category: OwnerCategory::Prospects, held: h }).collect::<Vec<_>>();
        let (la, lb) = (lots(&a), lots(&b));
        let both: Vec<HeldLot> = la.iter().chain(&lb).copied().collect();
        let ea = expected_category_permits(&pmf, &la, 25).unwrap();
        let eb = expected_category_permits(&pmf, &lb, 25).unwrap();
        let eab = expected_category_permits(&pmf, &both, 25).unwrap();
        for t in 0..25 {
            prop_assert!((eab[t] - ea[t] - eb[t]).abs() <= 1e-12);
        }
        let total: f64 = eab.iter().sum();
        prop_assert!((total - both.len() as f64).abs() <= 1e-9);
    }
}

#[test]
fn mixed_holding_times_match_summed_posteriors() {
    let pmf = TimeToPermitPMF::new(OwnerCategory::Builders, BTreeMap::from([(1, 0.1), (2, 0.4), (3, 0.3), (5, 0.2)]))
        .unwrap();
    let lots = [0, 1, 2].map(|held| HeldLot { category: OwnerCategory::Builders, held });
    let got = expected_category_permits(&pmf, &lots, 5).unwrap();
    // held 0: prior; held 1: {1: 4/9, 2: 3/9, 4: 2/9}; held 2: {1: 3/5, 3: 2/5}
    let want = [0.1 + 4.0 / 9.0 + 0.6, 0.4 + 3.0 / 9.0, 0.3 + 0.4, 2.0 / 9.0, 0.2];
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() < 1e-12, "{got:?}");
    }
    let total = expected_total_permits(&[got.clone(), vec![0.0; 5], vec![0.0; 5], vec![0.0; 5]]).unwrap();
    assert_eq!(total, got);
}

#[test]
fn fitted_from_synthetic_lots() {
    let out = simulate(&common::reference_spec(2), 8).unwrap();
    let ctx = CategorizeContext::new(&out.lots, CategorizeRules::default());
    for cat in [OwnerCategory::Builders, OwnerCategory::Prospects] {
        let pmf = fit_pmf(&out.lots, cat, &ctx, 2008).unwrap();
        assert_eq!(pmf.category(), cat);
        let total: f64 = pmf.mass().values().sum();
        assert!((total - 1.0).abs() < 1e-9);
        let held: Vec<HeldLot> =
            out.lots.iter().filter_map(|l| held_lot(l, &ctx, 2008)).filter(|h| h.category == cat).collect();
        assert!(!held.is_empty());
        let e = expected_category_permits(&pmf, &held, 30).unwrap();
        assert!((e.iter().sum::<f64>() - held.len() as f64).abs() < 1e-6);
    }
}
