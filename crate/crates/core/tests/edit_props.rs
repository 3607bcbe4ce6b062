use cdgame_core::baselines::{dice, inverse_dice, mba, rta, BaselineOptions};
use cdgame_core::mask::{
    apply_edit, apply_records, diff_graphs, discretize, format_diff, init_mask, parse_diff,
    relax_edit, DiscretizeMode, EditOp, Role,
};
use cdgame_core::metrics::budget_used;
use cdgame_core::scope::{CandidateScope, ScopeMode};
use cdgame_core::Graph;
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn graph_from_bits(n: usize, bits: &[bool]) -> Graph {
    let mut edges = Vec::new();
    let mut k = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            if bits[k % bits.len()] {
                edges.push((i, j));
            }
            k += 1;
        }
    }
    Graph::from_edges(n, &edges, Array2::from_shape_fn((n, 2), |(i, c)| (i * (c + 1)) as f64 * 0.1)).unwrap()
}

fn setup() -> impl Strategy<Value = (Graph, Vec<usize>, usize, Vec<f64>, u64)> {
    (4usize..12, prop::collection::vec(any::<bool>(), 1..66), 0usize..12, 0usize..12, 0usize..5, any::<u64>()).prop_flat_map(
        |(n, bits, t0, t1, budget, seed)| {
            let g = graph_from_bits(n, &bits);
            let targets = vec![t0 % n, t1 % n];
            let len = CandidateScope::build(&g, &targets, 2, ScopeMode::PairsInNeighborhood).unwrap().len();
            (
                Just(g),
                Just(targets),
                Just(budget.min(len)),
                prop::collection::vec(-2.0f64..2.0, len),
                Just(seed),
            )
        },
    )
}

proptest! {
    #[test]
    fn discretized_edits_obey_budget_and_scope((g, targets, budget, logits, seed) in setup(), sample in any::<bool>()) {
        let scope = CandidateScope::build(&g, &targets, 2, ScopeMode::PairsInNeighborhood).unwrap();
        let mut mask = init_mask(&scope, budget, seed, 0.0, Role::Attacker).unwrap();
        mask.logits = ndarray::Array1::from(logits);
        let mode = if sample { DiscretizeMode::Sample } else { DiscretizeMode::TopK };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let edit = discretize(&mask, mode, &mut rng);
        prop_assert!(edit.count() <= budget);
        let h = apply_edit(&g, &edit, &scope).unwrap();

        let a = h.adjacency();
        prop_assert_eq!(a, &a.t().to_owned());
        prop_assert_eq!(a.diag().sum(), 0.0);
        prop_assert_eq!(budget_used(&g, &h).unwrap(), edit.count());
        let records = diff_graphs(&g, &h).unwrap();
        for r in &records {
            prop_assert!(scope.index_of(r.i, r.j).is_some());
            match r.op {
                EditOp::Add => prop_assert!(!g.has_edge(r.i, r.j)),
                EditOp::Delete => prop_assert!(g.has_edge(r.i, r.j)),
            }
        }
        let parsed = parse_diff(&format_diff(&records), "roundtrip").unwrap();
        prop_assert_eq!(&parsed, &records);
        prop_assert_eq!(apply_records(&g, &parsed, Some(budget)).unwrap(), h);
    }

    #[test]
    fn relaxed_flip_is_monotone_in_logit((g, targets, budget, logits, seed) in setup(), bump in 0.0f64..3.0, pick in any::<prop::sample::Index>()) {
        let scope = CandidateScope::build(&g, &targets, 2, ScopeMode::PairsInNeighborhood).unwrap();
        prop_assume!(!scope.is_empty());
        let mut mask = init_mask(&scope, budget, seed, 0.0, Role::Defender).unwrap();
        mask.logits = ndarray::Array1::from(logits);
        let e = pick.index(scope.len());
        let (i, j) = scope.pair(e);
        let base = g.adjacency()[[i, j]];
        let lo = relax_edit(&g, &mask).weights;
        mask.logits[e] += bump;
        let hi = relax_edit(&g, &mask).weights;
        prop_assert!((hi[[i, j]] - base).abs() >= (lo[[i, j]] - base).abs() - 1e-15);
        prop_assert!(lo.iter().all(|w| (0.0..=1.0).contains(w)));
        prop_assert_eq!(&lo, &lo.t().to_owned());
        prop_assert_eq!(lo.diag().sum(), 0.0);
    }

    #[test]
    fn baselines_never_overspend((g, targets, _b, _l, seed) in setup(), budget in 0usize..6) {
        let scope = CandidateScope::build(&g, &targets, 1, ScopeMode::PairsInNeighborhood).unwrap();
        let labels: Vec<usize> = (0..g.n_nodes()).map(|i| i % 2).collect();
        for restrict in [false, true] {
            let opts = BaselineOptions { scope: restrict.then_some(&scope), ..BaselineOptions::new() };
            let runs = [
                dice(&g, &targets, budget, seed, &mut ChaCha8Rng::seed_from_u64(seed), &opts).unwrap(),
                mba(&g, &labels, budget, seed, &mut ChaCha8Rng::seed_from_u64(seed), &opts).unwrap(),
                rta(&g, &targets, budget, seed, &mut ChaCha8Rng::seed_from_u64(seed), &opts).unwrap(),
                inverse_dice(&g, &targets, budget, seed, &mut ChaCha8Rng::seed_from_u64(seed), &opts).unwrap(),
            ];
            for run in &runs {
                prop_assert!(run.edits.len() <= budget);
                prop_assert_eq!(budget_used(&g, &run.graph).unwrap(), run.edits.len());
                if restrict {
                    prop_assert!(run.edits.iter().all(|r| scope.index_of(r.i, r.j).is_some()));
                }
            }
            let again = dice(&g, &targets, budget, seed, &mut ChaCha8Rng::seed_from_u64(seed), &opts).unwrap();
            prop_assert_eq!(&again.edits, &runs[0].edits);
        }
    }
}

#[test]
fn overspending_records_are_rejected() {
    let g = graph_from_bits(4, &[false]);
    let text = "+ 0 1\n+ 1 2\n";
    let recs = parse_diff(text, "t").unwrap();
    assert!(apply_records(&g, &recs, Some(1)).is_err());
    assert!(apply_records(&g, &recs, Some(2)).is_ok());
}
