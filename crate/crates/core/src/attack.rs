//! Gradient-guided edge perturbation that scatters a target set across
//! communities of a frozen surrogate detector.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{forward_eval, DetectorParams};
use crate::error::{Error, Result};
use crate::grad::{attack_logit_grad, compose, detector_pair_grad, Layer};
use crate::graph::{normalize_weights, Graph};
use crate::mask::{apply_edit, discretize, edit_records, init_mask, BinaryEdit, DiscretizeMode, EditMask, EditRecord, Role};
use crate::metrics::{budget_used, MetricsReport};
use crate::scope::{CandidateScope, ScopeMode};

pub const KL_FLOOR: f64 = 1e-12;

fn distinct_targets(targets: &[usize]) -> Result<Vec<usize>> {
    let t: Vec<usize> = targets.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if t.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "attack loss needs at least 2 distinct targets, got {}",
            t.len()
        )));
    }
    Ok(t)
}

fn floored_row(soft: &Array2<f64>, i: usize, floor: f64) -> (Vec<f64>, f64) {
    let raw: Vec<f64> = soft.row(i).iter().map(|&v| v.max(floor)).collect();
    let s: f64 = raw.iter().sum();
    (raw.into_iter().map(|v| v / s).collect(), s)
}

/// `(1 + r) ln(1 + r) - r`, accurate for small `r`.
fn excess(r: f64) -> f64 {
    if r.abs() > 0.1 {
        return (1.0 + r) * r.ln_1p() - r;
    }
    let mut term = r * r;
    let mut sum = 0.0;
    for n in 2..40 {
        sum += term / (n * (n - 1)) as f64;
        term *= -r;
        if term.abs() < 1e-18 * sum.abs() {
            break;
        }
    }
    sum
}

// Summed as q * excess((p - q) / q); both rows sum to one, so this equals
// the usual form but keeps full precision when the rows nearly agree.
fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| b * excess((a - b) / b)).sum()
}

/// Ordered target pair with the smallest KL divergence, and that value.
pub fn closest_pair(soft: &Array2<f64>, targets: &[usize], floor: f64) -> Result<((usize, usize), f64)> {
    let t = distinct_targets(targets)?;
    if let Some(&bad) = t.iter().find(|&&i| i >= soft.nrows()) {
        return Err(Error::InvalidArgument(format!("target {bad} out of range")));
    }
    let rows: Vec<Vec<f64>> = t.iter().map(|&i| floored_row(soft, i, floor).0).collect();
    let mut best = ((t[0], t[1]), f64::INFINITY);
    for a in 0..t.len() {
        for b in 0..t.len() {
            if a != b {
                let d = kl(&rows[a], &rows[b]);
                if d < best.1 {
                    best = ((t[a], t[b]), d);
                }
            }
        }
    }
    if !best.1.is_finite() {
        return Err(Error::Divergence("non-finite KL divergence".into()));
    }
    Ok(best)
}

/// Negated smallest KL divergence between ordered pairs of target rows,
/// after flooring rows at `floor` and renormalizing.
pub fn attack_loss(soft: &Array2<f64>, targets: &[usize], floor: f64) -> Result<f64> {
    Ok(-closest_pair(soft, targets, floor)?.1)
}

pub fn attack_loss_grad(soft: &Array2<f64>, targets: &[usize], floor: f64) -> Result<(f64, Array2<f64>)> {
    let ((i, j), d) = closest_pair(soft, targets, floor)?;
    let (p, si) = floored_row(soft, i, floor);
    let (q, sj) = floored_row(soft, j, floor);
    // loss = -KL(p || q)
    let gp: Vec<f64> = p.iter().zip(&q).map(|(a, b)| -((a / b).ln() + 1.0)).collect();
    let gq: Vec<f64> = p.iter().zip(&q).map(|(a, b)| a / b).collect();
    let mut grad = Array2::zeros(soft.raw_dim());
    let mut chain = |row: usize, probs: &[f64], g: &[f64], s: f64| {
        let dot: f64 = probs.iter().zip(g).map(|(a, b)| a * b).sum();
        for k in 0..probs.len() {
            if soft[[row, k]] > floor {
                grad[[row, k]] += (g[k] - dot) / s;
            }
        }
    };
    chain(i, &p, &gp, si);
    chain(j, &q, &gq, sj);
    Ok((-d, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub targets: Vec<usize>,
    pub budget: usize,
    pub hops: usize,
    pub scope_mode: ScopeMode,
    pub step: f64,
    pub iterations: usize,
    pub report_every: usize,
    pub kl_floor: f64,
    pub init_amplitude: f64,
    pub discretize: DiscretizeMode,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(targets: Vec<usize>) -> Self {
        AttackConfig {
            budget: targets.len(),
            targets,
            hops: 2,
            scope_mode: ScopeMode::PairsInNeighborhood,
            step: 0.1,
            iterations: 200,
            report_every: 10,
            kl_floor: KL_FLOOR,
            init_amplitude: 0.0,
            discretize: DiscretizeMode::TopK,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        distinct_targets(&self.targets)?;
        if !(self.step > 0.0) {
            return Err(Error::InvalidArgument("attack step must be positive".into()));
        }
        if self.report_every == 0 {
            return Err(Error::InvalidArgument("report_every must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    /// Loss at the discrete edit evaluated this iteration.
    pub loss: f64,
    pub best_loss: f64,
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub mask: EditMask,
    pub edit: BinaryEdit,
    pub records: Vec<EditRecord>,
    pub attacked: Graph,
    pub loss: f64,
    pub trace: Vec<TracePoint>,
    pub clean: MetricsReport,
    pub metrics: MetricsReport,
}

/// Discrete attack loss of `g` under the frozen detector.
pub fn discrete_attack_loss(det: &DetectorParams, g: &Graph, targets: &[usize], floor: f64) -> Result<f64> {
    let (a, _) = forward_eval(det, &normalize_weights(g.adjacency()), g.features())?;
    attack_loss(&a.soft, targets, floor)
}

pub fn attack_scope(g: &Graph, cfg: &AttackConfig) -> Result<CandidateScope> {
    CandidateScope::build(g, &cfg.targets, cfg.hops, cfg.scope_mode)
}

/// Sign-gradient attack. Iteration 0 evaluates the unedited graph; after
/// that each iteration discretizes the mask and evaluates the edited graph.
/// Logits step along the gradient of the relaxed loss. The best discrete
/// edit seen is returned.
pub fn run_attack(g: &Graph, det: &DetectorParams, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    let scope = attack_scope(g, cfg)?;
    run_attack_on_scope(g, det, cfg, &scope)
}

pub fn run_attack_on_scope(
    g: &Graph,
    det: &DetectorParams,
    cfg: &AttackConfig,
    scope: &CandidateScope,
) -> Result<AttackResult> {
    cfg.validate()?;
    let budget = cfg.budget.min(scope.len());
    let mut mask = init_mask(scope, budget, cfg.seed, cfg.init_amplitude, Role::Attacker)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = det.k();
    let clean_labels = det.predict(g)?.hard;
    let clean = MetricsReport::evaluate(&clean_labels, &cfg.targets, k, 0)?;

    let mut best_edit = BinaryEdit::empty(scope.len(), budget);
    let mut best_loss = f64::INFINITY;
    let mut trace = Vec::new();
    for it in 0..=cfg.iterations {
        let edit = if it == 0 {
            BinaryEdit::empty(scope.len(), budget)
        } else {
            discretize(&mask, cfg.discretize, &mut rng)
        };
        let loss = discrete_attack_loss(det, &apply_edit(g, &edit, scope)?, &cfg.targets, cfg.kl_floor)?;
        if loss < best_loss {
            best_loss = loss;
            best_edit = edit.clone();
        }
        if it % cfg.report_every == 0 || it == cfg.iterations {
            trace.push(TracePoint {
                iteration: it,
                loss,
                best_loss,
            });
        }
        if it == cfg.iterations {
            break;
        }
        let (_, grad) = relaxed_attack_grad(g, det, &mask, &cfg.targets, cfg.kl_floor)?;
        mask.sign_step(&grad, cfg.step)?;
    }
    let attacked = apply_edit(g, &best_edit, scope)?;
    let labels = det.predict(&attacked)?.hard;
    let used = budget_used(g, &attacked)?;
    let metrics = MetricsReport::evaluate(&labels, &cfg.targets, k, used)?;
    Ok(AttackResult {
        records: edit_records(&best_edit, scope),
        mask,
        edit: best_edit,
        attacked,
        loss: best_loss,
        trace,
        clean,
        metrics,
    })
}

/// Attack-loss gradient with respect to attack logits on a relaxed mask.
pub fn relaxed_attack_grad(
    g: &Graph,
    det: &DetectorParams,
    mask: &EditMask,
    targets: &[usize],
    floor: f64,
) -> Result<(f64, Array1<f64>)> {
    let layer = Layer::relaxed(mask);
    let comp = compose(g.adjacency(), Some(&layer), None);
    let (loss, _, dw) = detector_pair_grad(det, &comp.w2, g.features(), |c| attack_loss_grad(c, targets, floor))?;
    Ok((loss, attack_logit_grad(&comp, &layer, None, &dw)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_rows_give_zero() {
        let c = array![[0.3, 0.7], [0.3, 0.7], [0.9, 0.1]];
        assert_eq!(attack_loss(&c, &[0, 1], KL_FLOOR).unwrap(), 0.0);
        let (_, g) = attack_loss_grad(&c, &[0, 1], KL_FLOOR).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn opposite_rows() {
        let c = array![[0.9, 0.1], [0.1, 0.9]];
        let l = attack_loss(&c, &[0, 1], KL_FLOOR).unwrap();
        let expect = -(0.9 * 9f64.ln() + 0.1 * (1.0f64 / 9.0).ln());
        assert!((l - expect).abs() < 1e-12);
        assert!((l + 1.7578).abs() < 1e-4);
    }

    #[test]
    fn three_targets_brute_force() {
        let c: Array2<f64> = array![[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.5, 0.4, 0.1]];
        let mut best = f64::INFINITY;
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    let d: f64 = (0..3).map(|k| c[[i, k]] * (c[[i, k]] / c[[j, k]]).ln()).sum();
                    best = best.min(d);
                }
            }
        }
        let l = attack_loss(&c, &[0, 1, 2], KL_FLOOR).unwrap();
        assert!((l + best).abs() < 1e-12);
        assert!(l <= 0.0);
    }

    #[test]
    fn zeros_are_floored() {
        let c = array![[1.0, 0.0], [0.0, 1.0]];
        let l = attack_loss(&c, &[0, 1], KL_FLOOR).unwrap();
        assert!(l.is_finite() && l < -20.0);
        assert!(attack_loss(&c, &[0], KL_FLOOR).is_err());
        assert!(attack_loss(&c, &[0, 0], KL_FLOOR).is_err());
    }

    #[test]
    fn loss_gradient_matches_differences() {
        let c = array![[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.1, 0.1, 0.8]];
        let (_, g) = attack_loss_grad(&c, &[0, 1, 2], KL_FLOOR).unwrap();
        let h = 1e-6;
        for r in 0..3 {
            for k in 0..3 {
                let mut a = c.clone();
                a[[r, k]] += h;
                let mut b = c.clone();
                b[[r, k]] -= h;
                let fd = (attack_loss(&a, &[0, 1, 2], KL_FLOOR).unwrap()
                    - attack_loss(&b, &[0, 1, 2], KL_FLOOR).unwrap())
                    / (2.0 * h);
                assert!((fd - g[[r, k]]).abs() < 1e-6, "{r},{k}: {fd} vs {}", g[[r, k]]);
            }
        }
    }
}
