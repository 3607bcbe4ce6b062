//! Rayleigh-quotient defense: edits that pull the feature signal's energy
//! back toward low graph frequencies.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::DetectorParams;
use crate::error::{Error, Result};
use crate::grad::{compose, defense_logit_grad, defense_loss_from_costs, Layer};
use crate::graph::{laplacian_of, Graph};
use crate::mask::{apply_edit, discretize, edit_records, init_mask, BinaryEdit, DiscretizeMode, EditMask, EditRecord, Role};
use crate::metrics::{budget_used, MetricsReport};
use crate::scope::{CandidateScope, ScopeMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalPolicy {
    /// Mean of the per-column quotients over non-zero feature columns.
    #[default]
    PerColumnMean,
    /// Quotient of the single signal formed by averaging feature columns.
    FeatureMean,
}

impl std::str::FromStr for SignalPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_column_mean" => Ok(SignalPolicy::PerColumnMean),
            "feature_mean" => Ok(SignalPolicy::FeatureMean),
            other => Err(Error::Config(format!("unknown signal_policy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopePolicy {
    /// `full` up to 2000 nodes, `perturbed_neighborhood` beyond.
    Auto,
    Full,
    PerturbedNeighborhood,
    TargetKhop,
}

impl std::str::FromStr for ScopePolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(ScopePolicy::Auto),
            "full" => Ok(ScopePolicy::Full),
            "perturbed_neighborhood" => Ok(ScopePolicy::PerturbedNeighborhood),
            "target_khop" => Ok(ScopePolicy::TargetKhop),
            other => Err(Error::Config(format!("unknown scope_policy {other:?}"))),
        }
    }
}

const AUTO_FULL_LIMIT: usize = 2000;

fn signals(x: &Array2<f64>, policy: SignalPolicy) -> Array2<f64> {
    match policy {
        SignalPolicy::PerColumnMean => x.clone(),
        SignalPolicy::FeatureMean => x
            .mean_axis(ndarray::Axis(1))
            .expect("at least one column")
            .insert_axis(ndarray::Axis(1)),
    }
}

fn live_columns(s: &Array2<f64>) -> Vec<(usize, f64)> {
    s.columns()
        .into_iter()
        .enumerate()
        .filter_map(|(c, col)| {
            let n = col.dot(&col);
            (n > 0.0).then_some((c, n))
        })
        .collect()
}

/// Mean over non-zero signal columns of `x_c' L x_c / x_c' x_c`, with `L`
/// the Laplacian of `weights`.
pub fn rayleigh_quotient(weights: &Array2<f64>, x: &Array2<f64>, policy: SignalPolicy) -> Result<f64> {
    let s = signals(x, policy);
    let cols = live_columns(&s);
    if cols.is_empty() {
        return Err(Error::InvalidArgument("every signal column has zero norm".into()));
    }
    let (lap, _) = laplacian_of(weights);
    let total: f64 = cols
        .iter()
        .map(|&(c, norm)| {
            let col = s.column(c);
            col.dot(&lap.dot(&col)) / norm
        })
        .sum();
    Ok(total / cols.len() as f64)
}

/// Pair costs `q_ij` with `rayleigh_quotient(W) = sum_{i<j} W_ij q_ij`.
pub fn pair_costs(x: &Array2<f64>, policy: SignalPolicy) -> Result<Array2<f64>> {
    let s = signals(x, policy);
    let cols = live_columns(&s);
    if cols.is_empty() {
        return Err(Error::InvalidArgument("every signal column has zero norm".into()));
    }
    let n = s.nrows();
    let m = cols.len() as f64;
    let mut q = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let v: f64 = cols
                .iter()
                .map(|&(c, norm)| (s[[i, c]] - s[[j, c]]).powi(2) / norm)
                .sum::<f64>()
                / m;
            q[[i, j]] = v;
            q[[j, i]] = v;
        }
    }
    Ok(q)
}

pub fn discrete_defense_loss(g: &Graph, x: &Array2<f64>, policy: SignalPolicy) -> Result<f64> {
    rayleigh_quotient(g.adjacency(), x, policy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    pub budget: usize,
    pub step: f64,
    pub iterations: usize,
    pub report_every: usize,
    pub scope_policy: ScopePolicy,
    pub signal_policy: SignalPolicy,
    /// Hop radius for the neighborhood-based scope policies.
    pub hops: usize,
    pub scope_mode: ScopeMode,
    pub init_amplitude: f64,
    pub discretize: DiscretizeMode,
    pub seed: u64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            budget: 2,
            step: 0.1,
            iterations: 200,
            report_every: 10,
            scope_policy: ScopePolicy::Auto,
            signal_policy: SignalPolicy::PerColumnMean,
            hops: 1,
            scope_mode: ScopeMode::PairsInNeighborhood,
            init_amplitude: 0.0,
            discretize: DiscretizeMode::TopK,
            seed: 0,
        }
    }
}

/// Evaluation context. `reference` is the snapshot used to find perturbed
/// endpoints; the detector is only used to report metrics.
#[derive(Debug, Clone, Copy, Default)]
pub struct DefenseContext<'a> {
    pub detector: Option<&'a DetectorParams>,
    pub targets: &'a [usize],
    pub reference: Option<&'a Graph>,
}

/// Nodes whose degree differs between `reference` and `g`.
pub fn perturbed_nodes(reference: &Graph, g: &Graph) -> Vec<usize> {
    (0..g.n_nodes())
        .filter(|&i| reference.degree(i) != g.degree(i))
        .collect()
}

pub fn defense_scope(
    g: &Graph,
    policy: ScopePolicy,
    hops: usize,
    mode: ScopeMode,
    ctx: &DefenseContext<'_>,
) -> Result<CandidateScope> {
    let policy = match policy {
        ScopePolicy::Auto if g.n_nodes() <= AUTO_FULL_LIMIT => ScopePolicy::Full,
        ScopePolicy::Auto => ScopePolicy::PerturbedNeighborhood,
        p => p,
    };
    match policy {
        ScopePolicy::Full => Ok(CandidateScope::full(g)),
        ScopePolicy::TargetKhop => CandidateScope::build(g, ctx.targets, hops, mode),
        ScopePolicy::PerturbedNeighborhood => {
            let reference = ctx
                .reference
                .ok_or_else(|| Error::InvalidArgument("perturbed_neighborhood needs a reference graph".into()))?;
            let seeds = perturbed_nodes(reference, g);
            if seeds.is_empty() {
                CandidateScope::from_pairs(g, &[])
            } else {
                CandidateScope::build(g, &seeds, hops, mode)
            }
        }
        ScopePolicy::Auto => unreachable!(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseTracePoint {
    pub iteration: usize,
    pub rayleigh: f64,
    pub best_rayleigh: f64,
}

#[derive(Debug, Clone)]
pub struct DefenseResult {
    pub mask: EditMask,
    pub edit: BinaryEdit,
    pub records: Vec<EditRecord>,
    pub defended: Graph,
    pub rayleigh_before: f64,
    pub rayleigh: f64,
    pub trace: Vec<DefenseTracePoint>,
    pub before: Option<MetricsReport>,
    pub after: Option<MetricsReport>,
}

pub fn run_defense(g: &Graph, cfg: &DefenseConfig, ctx: &DefenseContext<'_>) -> Result<DefenseResult> {
    let scope = defense_scope(g, cfg.scope_policy, cfg.hops, cfg.scope_mode, ctx)?;
    run_defense_on_scope(g, cfg, ctx, &scope)
}

/// Sign-gradient descent on the Rayleigh quotient. Iteration 0 evaluates
/// the unedited graph; the best discrete edit seen is returned.
pub fn run_defense_on_scope(
    g: &Graph,
    cfg: &DefenseConfig,
    ctx: &DefenseContext<'_>,
    scope: &CandidateScope,
) -> Result<DefenseResult> {
    if !(cfg.step > 0.0) {
        return Err(Error::InvalidArgument("defense step must be positive".into()));
    }
    if cfg.report_every == 0 {
        return Err(Error::InvalidArgument("report_every must be >= 1".into()));
    }
    let x = g.features();
    let q = pair_costs(x, cfg.signal_policy)?;
    let budget = cfg.budget.min(scope.len());
    let mut mask = init_mask(scope, budget, cfg.seed, cfg.init_amplitude, Role::Defender)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best_edit = BinaryEdit::empty(scope.len(), budget);
    let mut best = f64::INFINITY;
    let mut before = f64::NAN;
    let mut trace = Vec::new();
    for it in 0..=cfg.iterations {
        let edit = if it == 0 {
            BinaryEdit::empty(scope.len(), budget)
        } else {
            discretize(&mask, cfg.discretize, &mut rng)
        };
        let layer = Layer::straight_through(&mask, &edit);
        let comp = compose(g.adjacency(), None, Some(&layer));
        let value = defense_loss_from_costs(&comp.w2, &q);
        if it == 0 {
            before = value;
        }
        if value < best {
            best = value;
            best_edit = edit;
        }
        if it % cfg.report_every == 0 || it == cfg.iterations {
            trace.push(DefenseTracePoint {
                iteration: it,
                rayleigh: value,
                best_rayleigh: best,
            });
        }
        if it == cfg.iterations {
            break;
        }
        let grad = defense_logit_grad(&comp, &layer, &q);
        mask.sign_step(&grad, cfg.step)?;
    }
    let defended = apply_edit(g, &best_edit, scope)?;
    let (before_m, after_m) = match ctx.detector {
        Some(det) if !ctx.targets.is_empty() => {
            let reference = ctx.reference.unwrap_or(g);
            let k = det.k();
            let lb = det.predict(g)?.hard;
            let la = det.predict(&defended)?.hard;
            (
                Some(MetricsReport::evaluate(&lb, ctx.targets, k, budget_used(reference, g)?)?),
                Some(MetricsReport::evaluate(&la, ctx.targets, k, budget_used(g, &defended)?)?),
            )
        }
        _ => (None, None),
    };
    Ok(DefenseResult {
        records: edit_records(&best_edit, scope),
        mask,
        edit: best_edit,
        defended,
        rayleigh_before: before,
        rayleigh: best,
        trace,
        before: before_m,
        after: after_m,
    })
}

/// Touched nodes of a set of pairs.
pub fn endpoints(pairs: &[(usize, usize)]) -> BTreeSet<usize> {
    pairs.iter().flat_map(|&(i, j)| [i, j]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn edge() -> Graph {
        Graph::from_edges(2, &[(0, 1)], array![[1.0], [0.0]]).unwrap()
    }

    #[test]
    fn single_edge_quotient() {
        let g = edge();
        let r = rayleigh_quotient(g.adjacency(), g.features(), SignalPolicy::PerColumnMean).unwrap();
        assert_eq!(r, 1.0);
    }

    #[test]
    fn constant_column_contributes_zero() {
        let g = edge();
        let x = array![[1.0, 1.0], [0.0, 1.0]];
        let r = rayleigh_quotient(g.adjacency(), &x, SignalPolicy::PerColumnMean).unwrap();
        assert_eq!(r, 0.5);
        let z = Array2::zeros((2, 2));
        assert!(rayleigh_quotient(g.adjacency(), &z, SignalPolicy::PerColumnMean).is_err());
    }

    #[test]
    fn pair_costs_reproduce_quotient() {
        let g = Graph::from_edges(4, &[(0, 1), (1, 2), (2, 3), (0, 3)], array![[1., 2.], [0., 1.], [3., 0.], [1., 1.]])
            .unwrap();
        for p in [SignalPolicy::PerColumnMean, SignalPolicy::FeatureMean] {
            let q = pair_costs(g.features(), p).unwrap();
            let a = defense_loss_from_costs(g.adjacency(), &q);
            let b = rayleigh_quotient(g.adjacency(), g.features(), p).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_budget_is_identity() {
        let g = edge();
        let cfg = DefenseConfig {
            budget: 0,
            iterations: 5,
            ..DefenseConfig::default()
        };
        let r = run_defense(&g, &cfg, &DefenseContext::default()).unwrap();
        assert_eq!(r.defended, g);
    }

    #[test]
    fn removes_the_contrasting_edge() {
        let x = array![[0.0], [0.1], [1.0]];
        let g = Graph::from_edges(3, &[(0, 1), (1, 2)], x).unwrap();
        let cfg = DefenseConfig {
            budget: 1,
            iterations: 10,
            ..DefenseConfig::default()
        };
        let r = run_defense(&g, &cfg, &DefenseContext::default()).unwrap();
        assert!(r.defended.has_edge(0, 1));
        assert!(!r.defended.has_edge(1, 2));
        assert!(r.rayleigh < r.rayleigh_before);
    }
}
