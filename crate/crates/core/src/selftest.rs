//! Finite-difference checks of every analytic derivative, on random small
//! graphs. Function values for the numeric side come from forward passes
//! and the Laplacian form of the Rayleigh quotient only.
//!
//! Points where a probe crosses a ReLU kink or switches the closest target
//! pair of the attack loss are not differentiable there; such points are
//! discarded and redrawn.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{attack_loss, closest_pair, KL_FLOOR};
use crate::defense::{rayleigh_quotient, SignalPolicy};
use crate::detector::{forward_eval, init_detector, unsupervised_loss, DetectorParams, Dims};
use crate::error::Result;
use crate::grad::{compare, curvature, grad, GradState, LossId, VarGroup};
use crate::graph::{normalize_weights, Graph};
use crate::mask::{init_mask, sigmoid, EditMask, Role};
use crate::sbm::random_graph;
use crate::scope::{CandidateScope, ScopeMode};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub points: usize,
    pub redrawn: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

#[derive(Debug, Clone, Default)]
pub struct SelftestOptions {
    /// Scales the analytic side of the named check by 1.01.
    pub inject_bug: Option<String>,
}

impl SelftestOptions {
    fn skew(&self, name: &str, v: &mut [f64]) {
        if self.inject_bug.as_deref() == Some(name) {
            v.iter_mut().for_each(|x| *x *= 1.01);
        }
    }
}

const MAX_REDRAWS: usize = 1000;

struct Instance {
    graph: Graph,
    det: DetectorParams,
    targets: Vec<usize>,
}

fn instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let n = rng.gen_range(15..=20);
    let d = rng.gen_range(3..=5);
    let k = rng.gen_range(2..=3);
    let graph = random_graph(n, rng.gen_range(0.15..0.35), d, rng.gen())?;
    let dims = Dims { d, h: 8, v: 6, r: 8, k };
    let det = init_detector(dims, rng.gen(), 1.0)?;
    let mut nodes: Vec<usize> = (0..n).collect();
    nodes.shuffle(rng);
    let targets = nodes[..rng.gen_range(2..=3)].to_vec();
    Ok(Instance { graph, det, targets })
}

fn relu_signature(det: &DetectorParams, w: &Array2<f64>, x: &Array2<f64>) -> Result<Vec<bool>> {
    let (_, cache) = forward_eval(det, &normalize_weights(w), x)?;
    Ok(cache.z0.iter().chain(cache.z1.iter()).map(|&v| v > 0.0).collect())
}

fn random_mask(scope: &CandidateScope, rng: &mut ChaCha8Rng, spread: f64, role: Role) -> Result<EditMask> {
    let mut m = init_mask(scope, scope.len().min(1), 0, 0.0, role)?;
    m.logits = Array1::from_shape_fn(scope.len(), |_| rng.gen_range(-spread..spread));
    Ok(m)
}

/// Flip-intensity overlay written out independently of the library's
/// composition code.
fn oracle_weights(g: &Graph, attack: Option<(&CandidateScope, &[f64])>, defense: Option<(&CandidateScope, &[f64])>) -> Array2<f64> {
    let mut w = g.adjacency().clone();
    for layer in [attack, defense].into_iter().flatten() {
        let (scope, logits) = layer;
        for (idx, &(i, j)) in scope.pairs().iter().enumerate() {
            let s = sigmoid(logits[idx]);
            let v = w[[i, j]] * (1.0 - s) + (1.0 - w[[i, j]]) * s;
            w[[i, j]] = v;
            w[[j, i]] = v;
        }
    }
    w
}

fn with_param(det: &DetectorParams, which: usize, flat: &[f64]) -> DetectorParams {
    let mut p = det.clone();
    let m = p.matrices_mut().into_iter().nth(which).unwrap();
    for (dst, &v) in m.iter_mut().zip(flat) {
        *dst = v;
    }
    p
}

/// Unsupervised loss against every detector weight matrix.
pub fn check_unsupervised(points: usize, seed: u64, opts: &SelftestOptions) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 1e-5;
    let mut worst = 0.0f64;
    let mut redrawn = 0;
    let mut done = 0;
    let groups = [VarGroup::W0, VarGroup::W1, VarGroup::Wc1, VarGroup::Wc2];
    while done < points && redrawn < MAX_REDRAWS {
        let inst = instance(&mut rng)?;
        let g = &inst.graph;
        let x = g.features();
        let w = g.adjacency();
        let center = relu_signature(&inst.det, w, x)?;
        let state = GradState::new(&inst.det, g, &inst.targets);
        let report = grad(LossId::Unsupervised, &state, &groups)?;
        let mut kink = false;
        let mut point_err = 0.0f64;
        for (which, group) in groups.iter().enumerate() {
            let base: Vec<f64> = inst.det.matrices()[which].1.iter().copied().collect();
            let mut analytic: Vec<f64> = report.gradients[group].iter().copied().collect();
            opts.skew("unsupervised", &mut analytic);
            let mut numeric = Vec::with_capacity(base.len());
            let mut probe = base.clone();
            for c in 0..base.len() {
                let mut eval = |v: f64| -> Result<f64> {
                    probe[c] = v;
                    let p = with_param(&inst.det, which, &probe);
                    if relu_signature(&p, w, x)? != center {
                        kink = true;
                    }
                    let (a, _) = forward_eval(&p, &normalize_weights(w), x)?;
                    unsupervised_loss(&a.soft, w, 0.1)
                };
                let hi = eval(base[c] + step)?;
                let lo = eval(base[c] - step)?;
                probe[c] = base[c];
                numeric.push((hi - lo) / (2.0 * step));
            }
            point_err = point_err.max(compare(&analytic, &numeric).max_rel_err);
        }
        if kink {
            redrawn += 1;
            continue;
        }
        worst = worst.max(point_err);
        done += 1;
    }
    Ok(CheckOutcome {
        name: "unsupervised".into(),
        points: done,
        redrawn,
        max_rel_err: if done < points { f64::INFINITY } else { worst },
        tolerance: 1e-4,
    })
}

/// Attack loss against attack logits on the relaxed edit.
pub fn check_attack(points: usize, seed: u64, opts: &SelftestOptions) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 1e-5;
    let mut worst = 0.0f64;
    let mut redrawn = 0;
    let mut done = 0;
    while done < points && redrawn < MAX_REDRAWS {
        let inst = instance(&mut rng)?;
        let g = &inst.graph;
        let scope = CandidateScope::build(g, &inst.targets, 1, ScopeMode::PairsInNeighborhood)?;
        if scope.is_empty() {
            redrawn += 1;
            continue;
        }
        let mask = random_mask(&scope, &mut rng, 2.0, Role::Attacker)?;
        let x = g.features();
        let center_w = oracle_weights(g, Some((&scope, mask.logits.as_slice().unwrap())), None);
        let center_sig = relu_signature(&inst.det, &center_w, x)?;
        let soft = |w: &Array2<f64>| forward_eval(&inst.det, &normalize_weights(w), x).map(|r| r.0.soft);
        let center_pair = closest_pair(&soft(&center_w)?, &inst.targets, KL_FLOOR)?.0;
        let mut state = GradState::new(&inst.det, g, &inst.targets);
        state.attack = Some(&mask);
        let mut analytic = grad(LossId::Attack, &state, &[VarGroup::AttackLogits])?
            .vector(VarGroup::AttackLogits)
            .unwrap()
            .to_vec();
        opts.skew("attack", &mut analytic);
        let base = mask.logits.to_vec();
        let mut probe = base.clone();
        let mut bad = false;
        let mut numeric = Vec::new();
        for c in 0..base.len() {
            let mut vals = [0.0; 2];
            for (slot, v) in [base[c] + step, base[c] - step].into_iter().enumerate() {
                probe[c] = v;
                let w = oracle_weights(g, Some((&scope, &probe)), None);
                let s = soft(&w)?;
                if relu_signature(&inst.det, &w, x)? != center_sig
                    || closest_pair(&s, &inst.targets, KL_FLOOR)?.0 != center_pair
                {
                    bad = true;
                }
                vals[slot] = attack_loss(&s, &inst.targets, KL_FLOOR)?;
            }
            probe[c] = base[c];
            numeric.push((vals[0] - vals[1]) / (2.0 * step));
        }
        if bad {
            redrawn += 1;
            continue;
        }
        worst = worst.max(compare(&analytic, &numeric).max_rel_err);
        done += 1;
    }
    Ok(CheckOutcome {
        name: "attack".into(),
        points: done,
        redrawn,
        max_rel_err: if done < points { f64::INFINITY } else { worst },
        tolerance: 1e-4,
    })
}

struct Composed {
    inst: Instance,
    attack: EditMask,
    defense: EditMask,
}

fn composed_instance(rng: &mut ChaCha8Rng) -> Result<Option<Composed>> {
    let inst = instance(rng)?;
    let g = &inst.graph;
    let a_scope = CandidateScope::build(g, &inst.targets, 1, ScopeMode::PairsInNeighborhood)?;
    let hub = inst.targets[0];
    let d_scope = CandidateScope::build(g, &[hub], 1, ScopeMode::IncidentToTarget)?;
    if a_scope.is_empty() || d_scope.is_empty() {
        return Ok(None);
    }
    let attack = random_mask(&a_scope, rng, 2.0, Role::Attacker)?;
    let defense = random_mask(&d_scope, rng, 2.0, Role::Defender)?;
    Ok(Some(Composed { inst, attack, defense }))
}

fn composed_ld(c: &Composed, ma: &[f64], md: &[f64]) -> f64 {
    let w = oracle_weights(
        &c.inst.graph,
        Some((c.attack.scope(), ma)),
        Some((c.defense.scope(), md)),
    );
    rayleigh_quotient(&w, c.inst.graph.features(), SignalPolicy::PerColumnMean).expect("nonzero features")
}

/// Defense loss against defense logits, with an attack layer underneath.
pub fn check_defense(points: usize, seed: u64, opts: &SelftestOptions) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 1e-5;
    let mut worst = 0.0f64;
    let mut done = 0;
    let mut redrawn = 0;
    while done < points && redrawn < MAX_REDRAWS {
        let Some(c) = composed_instance(&mut rng)? else {
            redrawn += 1;
            continue;
        };
        let mut state = GradState::new(&c.inst.det, &c.inst.graph, &c.inst.targets);
        state.attack = Some(&c.attack);
        state.defense = Some(&c.defense);
        let rep = grad(LossId::Defense, &state, &[VarGroup::DefenseLogits, VarGroup::AttackLogits])?;
        let ma = c.attack.logits.to_vec();
        let md = c.defense.logits.to_vec();
        let mut analytic = rep.vector(VarGroup::DefenseLogits).unwrap().to_vec();
        analytic.extend(rep.vector(VarGroup::AttackLogits).unwrap().to_vec());
        opts.skew("defense", &mut analytic);
        let nd = md.len();
        let f = |p: &[f64]| composed_ld(&c, &p[nd..], &p[..nd]);
        let mut point = md.clone();
        point.extend(&ma);
        let numeric = crate::grad::central_differences(&f, &point, step);
        worst = worst.max(compare(&analytic, &numeric).max_rel_err);
        done += 1;
    }
    Ok(CheckOutcome {
        name: "defense".into(),
        points: done,
        redrawn,
        max_rel_err: if done < points { f64::INFINITY } else { worst },
        tolerance: 1e-4,
    })
}

/// Second derivatives of the defense loss (full `H_dd` and `H_da` by
/// second central differences) and the attack loss's first derivative
/// with respect to defense logits.
pub fn check_curvature(points: usize, seed: u64, opts: &SelftestOptions) -> Result<(CheckOutcome, CheckOutcome)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-4;
    let mut worst2 = 0.0f64;
    let mut worst1 = 0.0f64;
    let mut done = 0;
    let mut redrawn = 0;
    while done < points && redrawn < MAX_REDRAWS {
        let Some(c) = composed_instance(&mut rng)? else {
            redrawn += 1;
            continue;
        };
        let mut state = GradState::new(&c.inst.det, &c.inst.graph, &c.inst.targets);
        state.attack = Some(&c.attack);
        state.defense = Some(&c.defense);
        let rep = curvature(&state)?;
        let ma = c.attack.logits.to_vec();
        let md = c.defense.logits.to_vec();
        let (na, nd) = (ma.len(), md.len());

        let f = |a: &[f64], d: &[f64]| composed_ld(&c, a, d);
        let mut num_dd = Array2::<f64>::zeros((nd, nd));
        for e in 0..nd {
            for e2 in e..nd {
                let val = if e == e2 {
                    let mut p = md.clone();
                    p[e] += h;
                    let hi = f(&ma, &p);
                    p[e] -= 2.0 * h;
                    let lo = f(&ma, &p);
                    (hi - 2.0 * f(&ma, &md) + lo) / (h * h)
                } else {
                    mixed(|p, q| {
                        let mut d = md.clone();
                        d[e] += p;
                        d[e2] += q;
                        f(&ma, &d)
                    }, h)
                };
                num_dd[[e, e2]] = val;
                num_dd[[e2, e]] = val;
            }
        }
        let mut num_da = Array2::<f64>::zeros((nd, na));
        for e in 0..nd {
            for a in 0..na {
                num_da[[e, a]] = mixed(|p, q| {
                    let mut d = md.clone();
                    d[e] += p;
                    let mut aa = ma.clone();
                    aa[a] += q;
                    f(&aa, &d)
                }, h);
            }
        }
        let mut analytic2: Vec<f64> = rep.h_dd.iter().chain(rep.h_da.iter()).copied().collect();
        opts.skew("curvature", &mut analytic2);
        let numeric2: Vec<f64> = num_dd.iter().chain(num_da.iter()).copied().collect();
        let err2 = compare(&analytic2, &numeric2).max_rel_err;

        // first-order response of the attack loss to defense logits
        let x = c.inst.graph.features();
        let soft_at = |d: &[f64]| -> Result<Array2<f64>> {
            let w = oracle_weights(&c.inst.graph, Some((c.attack.scope(), &ma)), Some((c.defense.scope(), d)));
            Ok(forward_eval(&c.inst.det, &normalize_weights(&w), x)?.0.soft)
        };
        let sig_at = |d: &[f64]| -> Result<Vec<bool>> {
            let w = oracle_weights(&c.inst.graph, Some((c.attack.scope(), &ma)), Some((c.defense.scope(), d)));
            relu_signature(&c.inst.det, &w, x)
        };
        let center_sig = sig_at(&md)?;
        let center_pair = closest_pair(&soft_at(&md)?, &c.inst.targets, KL_FLOOR)?.0;
        let step = 1e-5;
        let mut bad = false;
        let mut numeric1 = Vec::with_capacity(nd);
        for e in 0..nd {
            let mut vals = [0.0; 2];
            for (slot, s) in [step, -step].into_iter().enumerate() {
                let mut d = md.clone();
                d[e] += s;
                let soft = soft_at(&d)?;
                if sig_at(&d)? != center_sig || closest_pair(&soft, &c.inst.targets, KL_FLOOR)?.0 != center_pair {
                    bad = true;
                }
                vals[slot] = attack_loss(&soft, &c.inst.targets, KL_FLOOR)?;
            }
            numeric1.push((vals[0] - vals[1]) / (2.0 * step));
        }
        if bad {
            redrawn += 1;
            continue;
        }
        let mut analytic1 = rep.g_resp.to_vec();
        opts.skew("response", &mut analytic1);
        worst1 = worst1.max(compare(&analytic1, &numeric1).max_rel_err);
        worst2 = worst2.max(err2);
        done += 1;
    }
    let short = done < points;
    Ok((
        CheckOutcome {
            name: "curvature".into(),
            points: done,
            redrawn,
            max_rel_err: if short { f64::INFINITY } else { worst2 },
            tolerance: 1e-3,
        },
        CheckOutcome {
            name: "response".into(),
            points: done,
            redrawn,
            max_rel_err: if short { f64::INFINITY } else { worst1 },
            tolerance: 1e-4,
        },
    ))
}

fn mixed<F: Fn(f64, f64) -> f64>(f: F, h: f64) -> f64 {
    (f(h, h) - f(h, -h) - f(-h, h) + f(-h, -h)) / (4.0 * h * h)
}

/// Runs every check with `points` random points each.
pub fn run_all(points: usize, seed: u64, opts: &SelftestOptions) -> Result<Vec<CheckOutcome>> {
    let mut out = vec![
        check_unsupervised(points, seed, opts)?,
        check_attack(points, seed.wrapping_add(1), opts)?,
        check_defense(points, seed.wrapping_add(2), opts)?,
    ];
    let (c2, c1) = check_curvature(points, seed.wrapping_add(3), opts)?;
    out.push(c2);
    out.push(c1);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a_few_points_pass() {
        for c in run_all(3, 11, &SelftestOptions::default()).unwrap() {
            assert!(c.passed(), "{c:?}");
        }
    }

    #[test]
    fn injected_bug_is_caught() {
        let opts = SelftestOptions {
            inject_bug: Some("defense".into()),
        };
        let c = check_defense(2, 5, &opts).unwrap();
        assert!(!c.passed());
        assert_eq!(c.name, "defense");
    }
}
