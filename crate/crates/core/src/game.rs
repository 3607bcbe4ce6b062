//! Leader-follower play between the attacker and the defender.
//!
//! The attacker moves first using the implicit-function total gradient
//!
//! ```text
//! dL_a/dm_a - H_da' (H_dd + lambda I)^-1 dL_a/dm_d
//! ```
//!
//! and the defender answers with a plain sign step on its own loss. Play
//! stops once both discrete edits stay unchanged for `patience` iterations.

use std::collections::BTreeSet;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{attack_loss, attack_scope, AttackConfig};
use crate::defense::{defense_scope, pair_costs, DefenseConfig, DefenseContext, ScopePolicy};
use crate::detector::{forward_eval, DetectorParams};
use crate::error::{Error, Result};
use crate::grad::{compose, curvature, defense_logit_grad, defense_loss_from_costs, CurvatureReport, GradState, Layer};
use crate::graph::{normalize_weights, Graph};
use crate::mask::{apply_edit, discretize, edit_records, init_mask, BinaryEdit, EditMask, EditRecord, Role};
use crate::metrics::{budget_used, m1, m2};
use crate::scope::CandidateScope;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IftForm {
    /// Follower-response gradient in the last factor.
    #[default]
    Standard,
    /// The attacker's own gradient in the last factor, restricted to the
    /// defender's pairs.
    PaperLiteral,
    /// No correction: both players take plain gradient steps.
    Simultaneous,
}

impl std::str::FromStr for IftForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(IftForm::Standard),
            "paper_literal" => Ok(IftForm::PaperLiteral),
            "simultaneous" => Ok(IftForm::Simultaneous),
            other => Err(Error::Config(format!("unknown ift_form {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameConfig {
    pub attack: AttackConfig,
    pub defense: DefenseConfig,
    pub max_iterations: usize,
    pub patience: usize,
    /// Number of pairs by which consecutive edits may differ and still
    /// count as unchanged.
    pub tolerance: usize,
    pub ift_lambda: f64,
    pub ift_form: IftForm,
    /// Rebuild the defender's scope every this many iterations (it is also
    /// rebuilt whenever the attacked graph changes under it).
    pub rebuild_every: usize,
}

impl GameConfig {
    pub fn new(attack: AttackConfig) -> Self {
        let defense = DefenseConfig {
            budget: attack.budget,
            scope_policy: ScopePolicy::PerturbedNeighborhood,
            seed: attack.seed,
            ..DefenseConfig::default()
        };
        GameConfig {
            attack,
            defense,
            max_iterations: 500,
            patience: 20,
            tolerance: 0,
            ift_lambda: 1.0,
            ift_form: IftForm::Standard,
            rebuild_every: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(Error::InvalidArgument("max_iterations must be >= 1".into()));
        }
        if self.patience < 1 {
            return Err(Error::InvalidArgument("patience must be >= 1".into()));
        }
        if !(self.ift_lambda > 0.0) {
            return Err(Error::InvalidArgument("ift_lambda must be positive".into()));
        }
        if self.rebuild_every < 1 {
            return Err(Error::InvalidArgument("rebuild_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Leader's total gradient from a curvature report.
pub fn total_attack_gradient(rep: &CurvatureReport, lambda: f64, form: IftForm, attack: &CandidateScope, defense: &CandidateScope) -> Array1<f64> {
    let nd = rep.h_dd.nrows();
    let last: Array1<f64> = match form {
        IftForm::Simultaneous => return rep.g_attack.clone(),
        IftForm::Standard => rep.g_resp.clone(),
        IftForm::PaperLiteral => defense
            .pairs()
            .iter()
            .map(|&(i, j)| attack.index_of(i, j).map_or(0.0, |f| rep.g_attack[f]))
            .collect(),
    };
    for e in 0..nd {
        for e2 in 0..nd {
            if e != e2 {
                assert_eq!(rep.h_dd[[e, e2]], 0.0, "defender curvature is diagonal");
            }
        }
    }
    let solved: Array1<f64> = (0..nd)
        .map(|e| {
            let d = rep.h_dd[[e, e]] + lambda;
            assert!(d != 0.0, "H_dd + lambda I must be invertible");
            last[e] / d
        })
        .collect();
    &rep.g_attack - &rep.h_da.t().dot(&solved)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GameTracePoint {
    pub iteration: usize,
    pub attack_loss: f64,
    pub defense_loss: f64,
    pub m1: f64,
    pub m2: f64,
    pub attack_edits: usize,
    pub defense_edits: usize,
}

#[derive(Debug, Clone)]
pub struct GameResult {
    pub attack_scope: CandidateScope,
    pub attack_edit: BinaryEdit,
    pub attack_records: Vec<EditRecord>,
    pub defense_scope: CandidateScope,
    pub defense_edit: BinaryEdit,
    pub defense_records: Vec<EditRecord>,
    pub attacked: Graph,
    pub defended: Graph,
    pub trace: Vec<GameTracePoint>,
    pub converged: bool,
    pub iterations_used: usize,
    pub attack_loss: f64,
    pub defense_loss: f64,
    pub m1: f64,
    pub m2: f64,
}

type EditKey = (BTreeSet<EditRecord>, BTreeSet<EditRecord>);

fn key_distance(a: &EditKey, b: &EditKey) -> usize {
    a.0.symmetric_difference(&b.0).count() + a.1.symmetric_difference(&b.1).count()
}

struct DefenderState {
    scope: CandidateScope,
    mask: EditMask,
}

fn defender_for(g_hat: &Graph, clean: &Graph, cfg: &GameConfig, prev: Option<&EditMask>) -> Result<DefenderState> {
    let ctx = DefenseContext {
        detector: None,
        targets: &cfg.attack.targets,
        reference: Some(clean),
    };
    let scope = defense_scope(g_hat, cfg.defense.scope_policy, cfg.defense.hops, cfg.defense.scope_mode, &ctx)?;
    let budget = cfg.defense.budget.min(scope.len());
    let mask = match prev {
        Some(m) => m.remap(&scope, budget)?,
        None => init_mask(&scope, budget, cfg.defense.seed, cfg.defense.init_amplitude, Role::Defender)?,
    };
    Ok(DefenderState { scope, mask })
}

pub fn run_game(g: &Graph, det: &DetectorParams, cfg: &GameConfig) -> Result<GameResult> {
    cfg.validate()?;
    let acfg = &cfg.attack;
    let a_scope = attack_scope(g, acfg)?;
    let a_budget = acfg.budget.min(a_scope.len());
    let mut a_mask = init_mask(&a_scope, a_budget, acfg.seed, acfg.init_amplitude, Role::Attacker)?;
    let mut rng = ChaCha8Rng::seed_from_u64(acfg.seed);
    let q = pair_costs(g.features(), cfg.defense.signal_policy)?;
    let k = det.k();

    let mut a_edit = BinaryEdit::empty(a_scope.len(), a_budget);
    let mut g_hat = g.clone();
    let mut def = defender_for(&g_hat, g, cfg, None)?;
    let mut d_edit = BinaryEdit::empty(def.scope.len(), def.mask.budget());

    let mut trace = Vec::new();
    let mut prev_key: Option<EditKey> = None;
    let mut stable = 0;
    let mut converged = false;
    let mut iterations_used = 0;
    let key = |ae: &BinaryEdit, de: &BinaryEdit, ds: &CandidateScope| -> EditKey {
        (
            edit_records(ae, &a_scope).into_iter().collect(),
            edit_records(de, ds).into_iter().collect(),
        )
    };

    for it in 0..cfg.max_iterations {
        iterations_used = it + 1;
        let g_bar = apply_edit(&g_hat, &d_edit, &def.scope)?;
        let mut state = GradState::new(det, g, &acfg.targets);
        state.kl_floor = acfg.kl_floor;
        state.signal = cfg.defense.signal_policy;
        state.attack = Some(&a_mask);
        state.attack_edit = Some(&a_edit);
        state.defense = Some(&def.mask);
        state.defense_edit = Some(&d_edit);
        let rep = curvature(&state)?;
        let labels = det.predict(&g_bar)?.hard;
        trace.push(GameTracePoint {
            iteration: it,
            attack_loss: rep.attack_loss,
            defense_loss: rep.defense_loss,
            m1: m1(&labels, &acfg.targets, k)?,
            m2: m2(&labels, &acfg.targets, g.n_nodes())?,
            attack_edits: a_edit.count(),
            defense_edits: d_edit.count(),
        });

        // leader
        let total = total_attack_gradient(&rep, cfg.ift_lambda, cfg.ift_form, &a_scope, &def.scope);
        a_mask.sign_step(&total, acfg.step)?;
        a_edit = discretize(&a_mask, acfg.discretize, &mut rng);
        g_hat = apply_edit(g, &a_edit, &a_scope)?;

        // follower, against the leader's new move
        if it % cfg.rebuild_every == 0 || !def.scope.consistent_with(&g_hat) {
            def = defender_for(&g_hat, g, cfg, Some(&def.mask))?;
        }
        let cur = discretize(&def.mask, cfg.defense.discretize, &mut rng);
        let layer = Layer::straight_through(&def.mask, &cur);
        let comp = compose(g_hat.adjacency(), None, Some(&layer));
        let dgrad = defense_logit_grad(&comp, &layer, &q);
        def.mask.sign_step(&dgrad, cfg.defense.step)?;
        d_edit = discretize(&def.mask, cfg.defense.discretize, &mut rng);

        let k_now = key(&a_edit, &d_edit, &def.scope);
        if let Some(prev) = &prev_key {
            if key_distance(prev, &k_now) <= cfg.tolerance {
                stable += 1;
            } else {
                stable = 0;
            }
        }
        prev_key = Some(k_now);
        if stable >= cfg.patience {
            converged = true;
            break;
        }
    }

    let g_bar = apply_edit(&g_hat, &d_edit, &def.scope)?;
    debug_assert!(budget_used(g, &g_hat)? <= a_budget);
    let (assign, _) = forward_eval(det, &normalize_weights(g_bar.adjacency()), g_bar.features())?;
    let la = attack_loss(&assign.soft, &acfg.targets, acfg.kl_floor)?;
    let ld = defense_loss_from_costs(g_bar.adjacency(), &q);
    Ok(GameResult {
        attack_records: edit_records(&a_edit, &a_scope),
        defense_records: edit_records(&d_edit, &def.scope),
        m1: m1(&assign.hard, &acfg.targets, k)?,
        m2: m2(&assign.hard, &acfg.targets, g.n_nodes())?,
        attack_scope: a_scope,
        attack_edit: a_edit,
        defense_scope: def.scope,
        defense_edit: d_edit,
        attacked: g_hat,
        defended: g_bar,
        trace,
        converged,
        iterations_used,
        attack_loss: la,
        defense_loss: ld,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquilibriumReport {
    pub follower_optimal: bool,
    pub follower_loss: f64,
    pub best_follower_loss: f64,
    pub achieved_attack_loss: f64,
    pub best_attack_loss: f64,
    pub leader_regret: f64,
    pub attack_edits_enumerated: usize,
}

pub const ENUMERATION_SCOPE_LIMIT: usize = 20;
pub const ENUMERATION_BUDGET_LIMIT: usize = 2;

/// All index subsets of `0..n` with at most `budget` elements, in
/// lexicographic order starting with the empty set.
pub fn feasible_edits(n: usize, budget: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        out.push(cur.clone());
        if left == 0 {
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, left - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, budget, &mut Vec::new(), &mut out);
    out
}

fn check_enumerable(scope: &CandidateScope, budget: usize, who: &str) -> Result<()> {
    if scope.len() > ENUMERATION_SCOPE_LIMIT || budget > ENUMERATION_BUDGET_LIMIT {
        return Err(Error::InvalidArgument(format!(
            "{who} strategy space too large to enumerate (scope {}, budget {budget})",
            scope.len()
        )));
    }
    Ok(())
}

/// Best follower responses on `g_hat`: minimal discrete defense loss, and
/// every feasible edit attaining it.
fn best_responses(g_hat: &Graph, scope: &CandidateScope, budget: usize, q: &ndarray::Array2<f64>) -> Result<(f64, Vec<Graph>)> {
    check_enumerable(scope, budget, "defender")?;
    let mut best = f64::INFINITY;
    let mut arg = Vec::new();
    for idx in feasible_edits(scope.len(), budget) {
        let e = BinaryEdit::from_indices(scope.len(), budget, &idx);
        let h = apply_edit(g_hat, &e, scope)?;
        let v = defense_loss_from_costs(h.adjacency(), q);
        if v < best - 1e-12 {
            best = v;
            arg = vec![h];
        } else if (v - best).abs() <= 1e-12 {
            arg.push(h);
        }
    }
    Ok((best, arg))
}

/// Exhaustive verification of the follower's optimality at the returned
/// strategies, and the leader's regret against the best enumerated
/// commitment when the follower best-responds (ties favor the leader).
pub fn equilibrium_check(g: &Graph, det: &DetectorParams, cfg: &GameConfig, result: &GameResult) -> Result<EquilibriumReport> {
    let q = pair_costs(g.features(), cfg.defense.signal_policy)?;
    let dbudget = result.defense_edit.budget;
    let (best_d, _) = best_responses(&result.attacked, &result.defense_scope, dbudget, &q)?;
    let follower_loss = defense_loss_from_costs(result.defended.adjacency(), &q);
    let follower_optimal = follower_loss <= best_d + 1e-12;

    let la_of = |h: &Graph| -> Result<f64> {
        let (a, _) = forward_eval(det, &normalize_weights(h.adjacency()), h.features())?;
        attack_loss(&a.soft, &cfg.attack.targets, cfg.attack.kl_floor)
    };
    let achieved = la_of(&result.defended)?;
    check_enumerable(&result.attack_scope, result.attack_edit.budget, "attacker")?;
    let mut best_a = f64::INFINITY;
    let candidates = feasible_edits(result.attack_scope.len(), result.attack_edit.budget);
    for idx in &candidates {
        let e = BinaryEdit::from_indices(result.attack_scope.len(), result.attack_edit.budget, idx);
        let g_hat = apply_edit(g, &e, &result.attack_scope)?;
        let ctx = DefenseContext {
            detector: None,
            targets: &cfg.attack.targets,
            reference: Some(g),
        };
        let scope = defense_scope(&g_hat, cfg.defense.scope_policy, cfg.defense.hops, cfg.defense.scope_mode, &ctx)?;
        let budget = cfg.defense.budget.min(scope.len());
        let (_, responses) = best_responses(&g_hat, &scope, budget, &q)?;
        for h in responses {
            best_a = best_a.min(la_of(&h)?);
        }
    }
    Ok(EquilibriumReport {
        follower_optimal,
        follower_loss,
        best_follower_loss: best_d,
        achieved_attack_loss: achieved,
        best_attack_loss: best_a,
        leader_regret: achieved - best_a,
        attack_edits_enumerated: candidates.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn enumeration_counts() {
        assert_eq!(feasible_edits(4, 0).len(), 1);
        assert_eq!(feasible_edits(4, 1).len(), 5);
        assert_eq!(feasible_edits(4, 2).len(), 11);
        assert_eq!(feasible_edits(20, 2).len(), 211);
    }

    fn report(nd: usize, na: usize) -> CurvatureReport {
        CurvatureReport {
            h_dd: Array2::zeros((nd, nd)),
            h_da: Array2::zeros((nd, na)),
            g_resp: Array1::from_elem(nd, 0.3),
            g_attack: Array1::from_shape_fn(na, |i| i as f64 - 0.5),
            attack_loss: 0.0,
            defense_loss: 0.0,
        }
    }

    fn scopes() -> (CandidateScope, CandidateScope) {
        let g = Graph::from_edges(3, &[(0, 1)], Array2::ones((3, 1))).unwrap();
        (
            CandidateScope::from_pairs(&g, &[(0, 1), (1, 2)]).unwrap(),
            CandidateScope::from_pairs(&g, &[(1, 2)]).unwrap(),
        )
    }

    #[test]
    fn vanishing_cross_term_leaves_gradient() {
        let (a, d) = scopes();
        let r = report(1, 2);
        for form in [IftForm::Standard, IftForm::PaperLiteral] {
            assert_eq!(total_attack_gradient(&r, 1.0, form, &a, &d), r.g_attack);
        }
    }

    #[test]
    fn huge_lambda_suppresses_correction() {
        let (a, d) = scopes();
        let mut r = report(1, 2);
        r.h_da[[0, 1]] = 0.7;
        r.h_dd[[0, 0]] = -0.02;
        let t = total_attack_gradient(&r, 1e12, IftForm::Standard, &a, &d);
        let corr = (&t - &r.g_attack).mapv(f64::abs).sum();
        let norm = r.g_attack.mapv(f64::abs).sum();
        assert!(corr < 1e-6 * norm);
        let t1 = total_attack_gradient(&r, 1.0, IftForm::Standard, &a, &d);
        assert!((t1[1] - (0.5 - 0.7 * 0.3 / 0.98)).abs() < 1e-12);
        let lit = total_attack_gradient(&r, 1.0, IftForm::PaperLiteral, &a, &d);
        assert!((lit[1] - (0.5 - 0.7 * 0.5 / 0.98)).abs() < 1e-12);
    }
}
