use std::collections::{BTreeSet, VecDeque};

use cdgame_core::graph::{laplacian, normalize_adjacency};
use cdgame_core::scope::{CandidateScope, ScopeMode};
use cdgame_core::Graph;
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn graph_strategy(max_n: usize) -> impl Strategy<Value = Graph> {
    (2..=max_n).prop_flat_map(|n| {
        let pairs = n * (n - 1) / 2;
        (Just(n), prop::collection::vec(any::<bool>(), pairs), prop::collection::vec(-3.0f64..3.0, n))
    })
    .prop_map(|(n, bits, xs)| {
        let mut edges = Vec::new();
        let mut k = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                if bits[k] {
                    edges.push((i, j));
                }
                k += 1;
            }
        }
        Graph::from_edges(n, &edges, Array2::from_shape_vec((n, 1), xs).unwrap()).unwrap()
    })
}

fn bfs(g: &Graph, s: usize) -> Vec<Option<usize>> {
    let n = g.n_nodes();
    let mut dist = vec![None; n];
    dist[s] = Some(0);
    let mut q = VecDeque::from([s]);
    while let Some(u) = q.pop_front() {
        for v in 0..n {
            if g.adjacency()[[u, v]] != 0.0 && dist[v].is_none() {
                dist[v] = Some(dist[u].unwrap() + 1);
                q.push_back(v);
            }
        }
    }
    dist
}

fn within(g: &Graph, targets: &[usize], k: usize, v: usize) -> bool {
    targets.iter().any(|&t| bfs(g, t)[v].is_some_and(|d| d <= k))
}

proptest! {
    #[test]
    fn adjacency_is_symmetric_without_loops(g in graph_strategy(12)) {
        let a = g.adjacency();
        prop_assert_eq!(a, &a.t().to_owned());
        prop_assert_eq!(a.diag().sum(), 0.0);
    }

    #[test]
    fn normalized_adjacency_spectral_radius(g in graph_strategy(10)) {
        let s = normalize_adjacency(&g);
        prop_assert!((&s - &s.t()).iter().all(|v| v.abs() < 1e-12));
        // Power iteration on S^2, which is positive semidefinite.
        let s2 = s.dot(&s);
        let n = g.n_nodes();
        let mut v = Array1::from_shape_fn(n, |i| 1.0 + (i as f64) * 0.37);
        let mut lambda = 0.0;
        for _ in 0..500 {
            let w = s2.dot(&v);
            let norm = w.dot(&w).sqrt();
            if norm == 0.0 {
                break;
            }
            lambda = v.dot(&w) / v.dot(&v);
            v = w / norm;
        }
        prop_assert!(lambda.sqrt() <= 1.0 + 1e-9, "radius {}", lambda.sqrt());
    }

    #[test]
    fn laplacian_quadratic_form(g in graph_strategy(10), xs in prop::collection::vec(-5.0f64..5.0, 10)) {
        let n = g.n_nodes();
        let x = Array1::from(xs[..n].to_vec());
        let (l, _) = laplacian(&g);
        let lhs = x.dot(&l.dot(&x));
        let a = g.adjacency();
        let mut rhs = 0.0;
        for i in 0..n {
            for j in 0..n {
                rhs += 0.5 * a[[i, j]] * (x[i] - x[j]).powi(2);
            }
        }
        prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1.0));
    }

    #[test]
    fn scope_pairs_lie_within_k_hops(g in graph_strategy(12), k in 1usize..4, t0 in 0usize..12, t1 in 0usize..12) {
        let n = g.n_nodes();
        let targets = vec![t0 % n, t1 % n];
        let scope = CandidateScope::build(&g, &targets, k, ScopeMode::PairsInNeighborhood).unwrap();
        let region: BTreeSet<usize> = (0..n).filter(|&v| within(&g, &targets, k, v)).collect();
        for &(i, j) in scope.pairs() {
            prop_assert!(i < j);
            prop_assert!(region.contains(&i) && region.contains(&j));
        }
        // Every pair inside the region is a candidate.
        let m = region.len();
        prop_assert_eq!(scope.len(), m * (m.saturating_sub(1)) / 2);
        for (idx, &(i, j)) in scope.pairs().iter().enumerate() {
            prop_assert_eq!(scope.is_existing(idx), g.has_edge(i, j));
        }
    }

    #[test]
    fn incident_scope_touches_a_target(g in graph_strategy(12), k in 1usize..3, t0 in 0usize..12) {
        let n = g.n_nodes();
        let scope = CandidateScope::build(&g, &[t0 % n], k, ScopeMode::IncidentToTarget).unwrap();
        for &(i, j) in scope.pairs() {
            prop_assert!(i == t0 % n || j == t0 % n);
            prop_assert!(within(&g, &[t0 % n], k, i) && within(&g, &[t0 % n], k, j));
        }
    }
}
