use std::collections::BTreeSet;

use cdgame_core::attack::{attack_loss, KL_FLOOR};
use cdgame_core::defense::{discrete_defense_loss, pair_costs, run_defense, DefenseConfig, DefenseContext, ScopePolicy, SignalPolicy};
use cdgame_core::detector::{init_detector, softmax_rows, unsupervised_loss, Dims};
use cdgame_core::metrics::{m1, m2};
use cdgame_core::sbm::random_graph;
use ndarray::Array2;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

proptest! {
    #[test]
    fn assignments_are_row_stochastic(seed in any::<u64>(), gain in 0.1f64..20.0, n in 3usize..12, k in 2usize..5) {
        let g = random_graph(n, 0.4, 3, seed).unwrap();
        let p = init_detector(Dims { d: 3, h: 6, v: 5, r: 4, k }, seed, gain).unwrap();
        let a = p.predict(&g).unwrap();
        for row in a.soft.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&c| (0.0..=1.0).contains(&c)));
        }
        for (i, row) in a.soft.rows().into_iter().enumerate() {
            let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(row[a.hard[i]], best);
        }
    }

    #[test]
    fn softmax_ignores_shared_shift(s in matrix(5, 3, -10.0, 10.0), shift in -50.0f64..50.0) {
        let a = softmax_rows(&s);
        let b = softmax_rows(&(&s + shift));
        prop_assert!((&a - &b).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn hard_balanced_cut_is_nonnegative(seed in any::<u64>()) {
        let g = random_graph(8, 0.5, 1, seed).unwrap();
        // Four nodes per community: CᵀC = (N/K) I, so the penalty vanishes.
        let c = Array2::from_shape_fn((8, 2), |(i, j)| if (i % 2) == j { 1.0 } else { 0.0 });
        let loss = unsupervised_loss(&c, g.adjacency(), 0.1).unwrap();
        prop_assert!(loss >= 0.0);
        let no_penalty = unsupervised_loss(&c, g.adjacency(), 0.0).unwrap();
        prop_assert!((loss - no_penalty).abs() < 1e-12);
    }

    #[test]
    fn attack_loss_is_nonpositive(c in matrix(4, 3, 0.0, 1.0), dup in any::<bool>()) {
        let mut c = c;
        for mut row in c.rows_mut() {
            let s = row.sum();
            if s == 0.0 { row.fill(1.0 / 3.0) } else { row.mapv_inplace(|v| v / s) }
        }
        if dup {
            let r0 = c.row(0).to_owned();
            c.row_mut(2).assign(&r0);
        }
        let l = attack_loss(&c, &[0, 1, 2], KL_FLOOR).unwrap();
        prop_assert!(l <= 0.0);
        if dup {
            prop_assert_eq!(l, 0.0);
        }
    }

    #[test]
    fn metrics_ignore_label_names(labels in prop::collection::vec(0usize..4, 10), t in prop::collection::btree_set(0usize..10, 1..5), perm in Just([0usize, 1, 2, 3]).prop_shuffle()) {
        let targets: Vec<usize> = t.into_iter().collect();
        let relabeled: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
        let a1 = m1(&labels, &targets, 4).unwrap();
        prop_assert_eq!(a1, m1(&relabeled, &targets, 4).unwrap());
        prop_assert_eq!(m2(&labels, &targets, 10).unwrap(), m2(&relabeled, &targets, 10).unwrap());
        prop_assert!((0.0..=1.0).contains(&a1));
        let hit: BTreeSet<usize> = targets.iter().map(|&i| labels[i]).collect();
        let max = hit.iter().map(|&c| targets.iter().filter(|&&i| labels[i] == c).count()).max().unwrap();
        prop_assert_eq!(a1 == 1.0, hit.len() == 4 && max == 1);
    }

    #[test]
    fn defense_never_raises_the_quotient(seed in any::<u64>(), budget in 1usize..4) {
        let g = random_graph(9, 0.4, 2, seed).unwrap();
        let cfg = DefenseConfig { budget, scope_policy: ScopePolicy::Full, iterations: 30, seed, ..DefenseConfig::default() };
        let res = run_defense(&g, &cfg, &DefenseContext::default()).unwrap();
        let x = g.features();
        let before = discrete_defense_loss(&g, x, SignalPolicy::PerColumnMean).unwrap();
        let after = discrete_defense_loss(&res.defended, x, SignalPolicy::PerColumnMean).unwrap();
        prop_assert!(after <= before + 1e-12);
        let q = pair_costs(x, SignalPolicy::PerColumnMean).unwrap();
        let improving = g.edges().iter().any(|&(i, j)| q[[i, j]] > 0.0);
        if improving {
            prop_assert!(after < before);
        }
        // Preferred deletions are the largest-cost existing edges.
        let mut costs: Vec<f64> = g.edges().iter().map(|&(i, j)| q[[i, j]]).collect();
        costs.sort_by(|a, b| b.total_cmp(a));
        let mut chosen: Vec<f64> = res.records.iter().map(|r| q[[r.i, r.j]]).collect();
        chosen.sort_by(|a, b| b.total_cmp(a));
        let expect: Vec<f64> = costs.iter().copied().filter(|&c| c > 0.0).take(budget).collect();
        prop_assert_eq!(chosen, expect);
    }
}
