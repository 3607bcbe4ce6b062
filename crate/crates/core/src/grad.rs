//! First- and second-order derivatives of the three losses with respect to
//! detector weights and edit logits, plus a central-difference checker.
//!
//! Edits compose as layers over the clean adjacency. A layer with per-pair
//! flip intensity `v` maps a weight `b` to `b + (1 - 2b) v`; the attacker's
//! layer acts on the clean graph and the defender's on the attacked one.
//! In relaxed mode `v = sigmoid(m)`. In straight-through mode `v` is the
//! discrete selection while derivatives still use `sigmoid'(m)`.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::attack::attack_loss_grad;
use crate::defense::{pair_costs, SignalPolicy};
use crate::detector::{
    backward, forward_eval, normalize_weights_backward, unsupervised_loss_grad, Assignment, DetectorParams,
};
use crate::error::{Error, Result};
use crate::graph::{normalize_weights, Graph};
use crate::mask::{sigmoid_prime, sigmoid_second, BinaryEdit, EditMask};
use crate::scope::CandidateScope;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    #[default]
    Relaxed,
    StraightThrough,
}

/// One player's edit layer.
#[derive(Debug, Clone)]
pub struct Layer {
    pub scope: CandidateScope,
    pub v: Array1<f64>,
    pub dv: Array1<f64>,
    pub d2v: Array1<f64>,
}

impl Layer {
    pub fn relaxed(mask: &EditMask) -> Self {
        Layer {
            scope: mask.scope().clone(),
            v: mask.probabilities(),
            dv: mask.logits.mapv(sigmoid_prime),
            d2v: mask.logits.mapv(sigmoid_second),
        }
    }

    pub fn straight_through(mask: &EditMask, edit: &BinaryEdit) -> Self {
        Layer {
            scope: mask.scope().clone(),
            v: edit.values(),
            dv: mask.logits.mapv(sigmoid_prime),
            d2v: mask.logits.mapv(sigmoid_second),
        }
    }

    pub fn build(mask: &EditMask, edit: Option<&BinaryEdit>, mode: GradMode) -> Self {
        match (mode, edit) {
            (GradMode::StraightThrough, Some(e)) => Self::straight_through(mask, e),
            _ => Self::relaxed(mask),
        }
    }
}

/// Clean, attacked and defended weight matrices.
#[derive(Debug, Clone)]
pub struct Composition {
    pub w0: Array2<f64>,
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
}

pub fn compose(base: &Array2<f64>, attack: Option<&Layer>, defense: Option<&Layer>) -> Composition {
    let w0 = base.clone();
    let w1 = match attack {
        Some(l) => crate::mask::overlay(&w0, &l.scope, &l.v),
        None => w0.clone(),
    };
    let w2 = match defense {
        Some(l) => crate::mask::overlay(&w1, &l.scope, &l.v),
        None => w1.clone(),
    };
    Composition { w0, w1, w2 }
}

/// Chains a pair gradient on the final weights to the defender's logits.
pub fn defense_logit_grad(comp: &Composition, defense: &Layer, dw: &Array2<f64>) -> Array1<f64> {
    defense
        .scope
        .pairs()
        .iter()
        .enumerate()
        .map(|(e, &(i, j))| dw[[i, j]] * (1.0 - 2.0 * comp.w1[[i, j]]) * defense.dv[e])
        .collect()
}

/// Chains a pair gradient on the final weights to the attacker's logits,
/// passing through the defender's layer where the scopes overlap.
pub fn attack_logit_grad(
    comp: &Composition,
    attack: &Layer,
    defense: Option<&Layer>,
    dw: &Array2<f64>,
) -> Array1<f64> {
    attack
        .scope
        .pairs()
        .iter()
        .enumerate()
        .map(|(f, &(i, j))| {
            let through = defense
                .and_then(|d| d.scope.index_of(i, j).map(|e| 1.0 - 2.0 * d.v[e]))
                .unwrap_or(1.0);
            dw[[i, j]] * through * (1.0 - 2.0 * comp.w0[[i, j]]) * attack.dv[f]
        })
        .collect()
}

/// Runs the detector on `weights` and pulls `dLoss/dC` back to a pair
/// gradient matrix (entry `(i, j)` is the derivative with respect to the
/// symmetric weight of pair `{i, j}`).
pub fn detector_pair_grad<F>(
    det: &DetectorParams,
    weights: &Array2<f64>,
    x: &Array2<f64>,
    loss: F,
) -> Result<(f64, Assignment, Array2<f64>)>
where
    F: FnOnce(&Array2<f64>) -> Result<(f64, Array2<f64>)>,
{
    let adj = normalize_weights(weights);
    let (assign, cache) = forward_eval(det, &adj, x)?;
    let (value, d_soft) = loss(&assign.soft)?;
    let (_, d_adj) = backward(det, &cache, x, &d_soft);
    let dw = normalize_weights_backward(weights, &adj, &d_adj);
    if !value.is_finite() || dw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("non-finite gradient".into()));
    }
    Ok((value, assign, dw))
}

/// `sum_{i<j} w_ij q_ij`: the mean per-column Rayleigh quotient written as a
/// weighted sum of pair costs.
pub fn defense_loss_from_costs(weights: &Array2<f64>, costs: &Array2<f64>) -> f64 {
    let n = weights.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            s += weights[[i, j]] * costs[[i, j]];
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossId {
    Unsupervised,
    Attack,
    Defense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VarGroup {
    W0,
    W1,
    Wc1,
    Wc2,
    AttackLogits,
    DefenseLogits,
}

/// Everything a loss evaluation may depend on.
#[derive(Debug, Clone)]
pub struct GradState<'a> {
    pub detector: &'a DetectorParams,
    pub graph: &'a Graph,
    pub attack: Option<&'a EditMask>,
    pub attack_edit: Option<&'a BinaryEdit>,
    pub defense: Option<&'a EditMask>,
    pub defense_edit: Option<&'a BinaryEdit>,
    pub targets: &'a [usize],
    pub gamma: f64,
    pub kl_floor: f64,
    pub signal: SignalPolicy,
    pub mode: GradMode,
}

impl<'a> GradState<'a> {
    pub fn new(detector: &'a DetectorParams, graph: &'a Graph, targets: &'a [usize]) -> Self {
        GradState {
            detector,
            graph,
            attack: None,
            attack_edit: None,
            defense: None,
            defense_edit: None,
            targets,
            gamma: 0.1,
            kl_floor: crate::attack::KL_FLOOR,
            signal: SignalPolicy::PerColumnMean,
            mode: GradMode::Relaxed,
        }
    }

    pub fn layers(&self) -> (Option<Layer>, Option<Layer>) {
        let a = self.attack.map(|m| Layer::build(m, self.attack_edit, self.mode));
        let d = self.defense.map(|m| Layer::build(m, self.defense_edit, self.mode));
        (a, d)
    }

    pub fn composition(&self) -> (Option<Layer>, Option<Layer>, Composition) {
        let (a, d) = self.layers();
        let comp = compose(self.graph.adjacency(), a.as_ref(), d.as_ref());
        (a, d, comp)
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub loss_value: f64,
    pub gradients: BTreeMap<VarGroup, ArrayD<f64>>,
}

impl GradReport {
    pub fn vector(&self, g: VarGroup) -> Option<Array1<f64>> {
        self.gradients
            .get(&g)
            .map(|a| a.iter().copied().collect::<Array1<f64>>())
    }
}

fn need_mask<'m>(m: Option<&'m EditMask>, what: &str) -> Result<&'m EditMask> {
    m.ok_or_else(|| Error::InvalidArgument(format!("state has no {what} mask")))
}

/// Gradient of `loss` with respect to the requested variable groups.
///
/// The unsupervised loss is taken on the final composed graph and is
/// differentiated with respect to detector weights only; the attack and
/// defense losses are differentiated with respect to either logit set.
pub fn grad(loss: LossId, state: &GradState<'_>, wrt: &[VarGroup]) -> Result<GradReport> {
    let (al, dl, comp) = state.composition();
    let x = state.graph.features();
    let mut out = BTreeMap::new();
    let value;
    match loss {
        LossId::Unsupervised => {
            let adj = normalize_weights(&comp.w2);
            let (assign, cache) = forward_eval(state.detector, &adj, x)?;
            let (v, d_soft) = unsupervised_loss_grad(&assign.soft, &comp.w2, state.gamma)?;
            value = v;
            let (pg, _) = backward(state.detector, &cache, x, &d_soft);
            for &g in wrt {
                let m = match g {
                    VarGroup::W0 => &pg.w0,
                    VarGroup::W1 => &pg.w1,
                    VarGroup::Wc1 => &pg.wc1,
                    VarGroup::Wc2 => &pg.wc2,
                    other => {
                        return Err(Error::InvalidArgument(format!(
                            "unsupervised loss is not differentiated by {other:?}"
                        )))
                    }
                };
                out.insert(g, m.clone().into_dyn());
            }
        }
        LossId::Attack | LossId::Defense => {
            let dw = if loss == LossId::Attack {
                let (v, _, dw) = detector_pair_grad(state.detector, &comp.w2, x, |c| {
                    attack_loss_grad(c, state.targets, state.kl_floor)
                })?;
                value = v;
                dw
            } else {
                let q = pair_costs(x, state.signal)?;
                value = defense_loss_from_costs(&comp.w2, &q);
                q
            };
            for &g in wrt {
                let v = match g {
                    VarGroup::AttackLogits => {
                        need_mask(state.attack, "attack")?;
                        attack_logit_grad(&comp, al.as_ref().unwrap(), dl.as_ref(), &dw)
                    }
                    VarGroup::DefenseLogits => {
                        need_mask(state.defense, "defense")?;
                        defense_logit_grad(&comp, dl.as_ref().unwrap(), &dw)
                    }
                    other => {
                        return Err(Error::InvalidArgument(format!(
                            "{loss:?} loss is not differentiated by {other:?}"
                        )))
                    }
                };
                out.insert(g, v.into_dyn());
            }
        }
    }
    for (g, a) in &out {
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!("non-finite gradient for {g:?}")));
        }
    }
    Ok(GradReport {
        loss_value: value,
        gradients: out,
    })
}

/// Second-order terms of the defender's loss and the attack loss's
/// sensitivity to the defender.
#[derive(Debug, Clone)]
pub struct CurvatureReport {
    /// `d^2 L_d / d m_d^2`, diagonal because `L_d` is affine in each weight.
    pub h_dd: Array2<f64>,
    /// `d^2 L_d / (d m_d d m_a)`.
    pub h_da: Array2<f64>,
    /// `d L_a / d m_d`.
    pub g_resp: Array1<f64>,
    /// `d L_a / d m_a`.
    pub g_attack: Array1<f64>,
    pub attack_loss: f64,
    pub defense_loss: f64,
}

pub fn curvature(state: &GradState<'_>) -> Result<CurvatureReport> {
    let attack = need_mask(state.attack, "attack")?;
    let defense = need_mask(state.defense, "defense")?;
    let (al, dl, comp) = state.composition();
    let (al, dl) = (al.unwrap(), dl.unwrap());
    let x = state.graph.features();
    let q = pair_costs(x, state.signal)?;
    let nd = defense.len();
    let na = attack.len();
    let mut h_dd = Array2::zeros((nd, nd));
    let mut h_da = Array2::zeros((nd, na));
    for (e, &(i, j)) in dl.scope.pairs().iter().enumerate() {
        let b = comp.w1[[i, j]];
        h_dd[[e, e]] = q[[i, j]] * (1.0 - 2.0 * b) * dl.d2v[e];
        if let Some(f) = al.scope.index_of(i, j) {
            let db = (1.0 - 2.0 * comp.w0[[i, j]]) * al.dv[f];
            h_da[[e, f]] = -2.0 * q[[i, j]] * dl.dv[e] * db;
        }
    }
    let (la, _, dw) = detector_pair_grad(state.detector, &comp.w2, x, |c| {
        attack_loss_grad(c, state.targets, state.kl_floor)
    })?;
    Ok(CurvatureReport {
        h_dd,
        h_da,
        g_resp: defense_logit_grad(&comp, &dl, &dw),
        g_attack: attack_logit_grad(&comp, &al, Some(&dl), &dw),
        attack_loss: la,
        defense_loss: defense_loss_from_costs(&comp.w2, &q),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub scale: f64,
}

/// Smallest magnitude used to scale relative errors.
pub const FD_ERROR_FLOOR: f64 = 1e-8;

/// Compares `analytic` against central differences of `f` at `point`.
/// Errors are measured per coordinate and scaled by the larger max-norm of
/// the two gradient vectors, so tiny components do not blow up the ratio.
pub fn fd_check<F>(f: F, point: &[f64], analytic: &[f64], step: f64) -> Result<FdReport>
where
    F: Fn(&[f64]) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {step}")));
    }
    if point.len() != analytic.len() {
        return Err(Error::Dimension("point and gradient lengths differ".into()));
    }
    let numeric = central_differences(&f, point, step);
    Ok(compare(analytic, &numeric))
}

pub fn central_differences<F: Fn(&[f64]) -> f64>(f: &F, point: &[f64], step: f64) -> Vec<f64> {
    let mut p = point.to_vec();
    (0..point.len())
        .map(|i| {
            p[i] = point[i] + step;
            let hi = f(&p);
            p[i] = point[i] - step;
            let lo = f(&p);
            p[i] = point[i];
            (hi - lo) / (2.0 * step)
        })
        .collect()
}

pub fn compare(analytic: &[f64], numeric: &[f64]) -> FdReport {
    let norm = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let scale = norm(analytic).max(norm(numeric)).max(FD_ERROR_FLOOR);
    let max_abs_err = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    FdReport {
        max_rel_err: max_abs_err / scale,
        max_abs_err,
        scale,
    }
}

/// Converts a flat vector back into the shape of a dynamic array.
pub fn reshape_like(v: Vec<f64>, like: &ArrayD<f64>) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(like.shape()), v).expect("length matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_on_quadratic() {
        let f = |p: &[f64]| 3.0 * p[0] * p[0] - 2.0 * p[0] * p[1] + p[1] * p[1] + 4.0 * p[1];
        let pt = [0.7, -1.3];
        let g = [6.0 * pt[0] - 2.0 * pt[1], -2.0 * pt[0] + 2.0 * pt[1] + 4.0];
        let r = fd_check(f, &pt, &g, 1e-3).unwrap();
        assert!(r.max_rel_err <= 1e-8, "{r:?}");
        assert!(fd_check(f, &pt, &g, 0.0).is_err());
    }

    #[test]
    fn fd_detects_wrong_gradient() {
        let f = |p: &[f64]| p[0] * p[0];
        let r = fd_check(f, &[1.0], &[3.0], 1e-4).unwrap();
        assert!(r.max_rel_err > 0.1);
    }
}
