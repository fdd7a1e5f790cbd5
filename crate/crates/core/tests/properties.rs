use std::collections::BTreeSet;

use pategen::accountant::{
    gnmax_data_dependent_rdp, to_dp, GnmaxBound, LedgerEntry, PrivacyLedger, RdpCurve, TopCounts,
};
use pategen::aggregator::{discretize, dp_grad_agg, tally, BinGrid, GnmaxParams};
use pategen::data::TabularDataset;
use pategen::eval::auroc;
use pategen::projection::make_projection;
use pategen::training::partition;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn entry_strategy() -> impl Strategy<Value = LedgerEntry> {
    prop_oneof![
        (0.5f64..200.0, 1u32..5).prop_map(|(s, c)| LedgerEntry::gaussian_threshold("t", s, c).unwrap()),
        (0.5f64..50.0, 0u64..400, 0u64..400, 0u64..400).prop_map(|(s, a, b, c)| {
            let mut v = [a, b, c];
            v.sort_unstable_by(|x, y| y.cmp(x));
            LedgerEntry::gnmax("g", s, TopCounts::new(v[0], v[1], v[2]).unwrap()).unwrap()
        }),
        (0.001f64..2.0).prop_map(|e| LedgerEntry::laplace("l", e).unwrap()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn appending_never_lowers_the_curve(entries in prop::collection::vec(entry_strategy(), 1..30)) {
        let mut ledger = PrivacyLedger::new();
        for e in entries {
            let before = ledger.composed();
            ledger.append(e);
            let after = ledger.composed();
            for (o, eps) in before.orders().iter().zip(before.epsilons()) {
                prop_assert!(after.at(*o).unwrap() >= *eps);
            }
        }
    }

    #[test]
    fn to_dp_is_monotone_in_delta(
        eps in prop::collection::vec(0.0f64..50.0, 3),
        d1 in 1e-12f64..0.5,
        d2 in 1e-12f64..0.5,
    ) {
        let curve = RdpCurve::new(vec![2.0, 8.0, 32.0], eps).unwrap();
        let (small, large) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
        prop_assert!(to_dp(&curve, small).unwrap().epsilon >= to_dp(&curve, large).unwrap().epsilon);
    }

    #[test]
    fn data_dependent_cost_falls_with_the_gap(sigma in 1.0f64..20.0, extra in 0u64..200, more in 1u64..200) {
        let base = (8.0 * sigma).ceil() as u64 + extra;
        let n3 = 0;
        let n2 = (4.0 * sigma).ceil() as u64;
        let a = gnmax_data_dependent_rdp(TopCounts::new(n2 + base, n2, n3).unwrap(), sigma).unwrap();
        let b = gnmax_data_dependent_rdp(TopCounts::new(n2 + base + more, n2, n3).unwrap(), sigma).unwrap();
        match (a, b) {
            (GnmaxBound::DataDependent { epsilon: ea, .. }, GnmaxBound::DataDependent { epsilon: eb, .. }) => {
                prop_assert!(eb <= ea);
            }
            other => prop_assert!(false, "gate should pass: {:?}", other),
        }
    }

    #[test]
    fn discretize_stays_in_range(
        values in prop::collection::vec(-1e3f64..1e3, 1..20),
        clip in 1e-6f64..10.0,
        bins in 2usize..50,
    ) {
        let grid = BinGrid::new(clip, bins).unwrap();
        for idx in discretize(&values, &grid).unwrap() {
            prop_assert!(idx < bins);
        }
    }

    #[test]
    fn tally_rows_sum_to_voters(
        votes in prop::collection::vec(prop::collection::vec(0usize..6, 4), 1..12),
    ) {
        let t = tally(&votes, 4, 6).unwrap();
        for row in t.rows() {
            prop_assert_eq!(row.iter().sum::<u64>(), votes.len() as u64);
        }
    }

    #[test]
    fn aggregation_ignores_teacher_order(
        grads in prop::collection::vec(prop::collection::vec(-2e-4f64..2e-4, 5), 2..9),
        seed in any::<u64>(),
        rotate in 0usize..8,
    ) {
        let grid = BinGrid::new(1e-4, 7).unwrap();
        let proj = make_projection(5, 3, seed).unwrap();
        let params = GnmaxParams::noiseless(0.5).unwrap();
        let mut a_ledger = PrivacyLedger::new();
        let mut b_ledger = PrivacyLedger::new();
        let a = dp_grad_agg(&grads, &grid, &proj, &params, &mut a_ledger, "q", &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut shuffled = grads.clone();
        let r = rotate % shuffled.len();
        shuffled.rotate_left(r);
        shuffled.reverse();
        let b = dp_grad_agg(&shuffled, &grid, &proj, &params, &mut b_ledger, "q", &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        prop_assert_eq!(a.gradient, b.gradient);
        prop_assert_eq!(a.tally, b.tally);
    }

    #[test]
    fn aggregate_is_bounded(
        grads in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 6), 2..9),
        seed in any::<u64>(),
        sigma in 0.0f64..5.0,
    ) {
        let clip = 1e-4;
        let grid = BinGrid::new(clip, 5).unwrap();
        let proj = make_projection(6, 2, seed).unwrap();
        let params = GnmaxParams::new(0.5, sigma, sigma).unwrap();
        let mut ledger = PrivacyLedger::new();
        let agg = dp_grad_agg(&grads, &grid, &proj, &params, &mut ledger, "q", &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for m in agg.outcome.midpoints.iter().flatten() {
            prop_assert!(m.abs() <= clip);
        }
        let norm = agg.gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
        prop_assert!(norm <= proj.backward_frobenius() * clip * (2f64).sqrt() + 1e-18);
        prop_assert_eq!(ledger.len(), 1 + agg.outcome.passed());
    }

    #[test]
    fn partition_is_a_partition(len in 1usize..60, n in 1usize..10, seed in any::<u64>(), stratify in any::<bool>()) {
        prop_assume!(n <= len);
        let labels: Vec<usize> = (0..len).map(|i| (i * 7 + 3) % 3).collect();
        let shards = partition(len, stratify.then_some(labels.as_slice()), n, seed).unwrap();
        prop_assert_eq!(shards.len(), n);
        let mut seen = BTreeSet::new();
        for s in &shards {
            for &i in s {
                prop_assert!(seen.insert(i), "index {} appears twice", i);
            }
        }
        prop_assert_eq!(seen, (0..len).collect::<BTreeSet<_>>());
        let sizes: Vec<usize> = shards.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn scaling_roundtrips(rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 3), 1..30)) {
        let ds = TabularDataset::new(vec!["a".into(), "b".into(), "c".into()], rows.clone(), None, None).unwrap();
        let scaled = ds.scaled();
        for r in scaled.features() {
            for v in r {
                prop_assert!((-1.0..=1.0).contains(v));
            }
        }
        for (orig, back) in rows.iter().zip(scaled.raw_features()) {
            for (x, y) in orig.iter().zip(back) {
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn auroc_stays_in_unit_interval(
        scores in prop::collection::vec(0u8..5, 2..40),
        flags in prop::collection::vec(any::<bool>(), 40),
    ) {
        let scores: Vec<f64> = scores.iter().map(|&s| s as f64).collect();
        let positive = &flags[..scores.len()];
        if let Some(a) = auroc(&scores, positive) {
            prop_assert!((0.0..=1.0).contains(&a));
            let flipped: Vec<bool> = positive.iter().map(|p| !p).collect();
            let b = auroc(&scores, &flipped).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }
}
