//! Randomized heuristic attacks (DICE, MBA, RTA) and the Inverse-DICE
//! defense.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::mask::{apply_records, EditOp, EditRecord};
use crate::scope::CandidateScope;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dice,
    Mba,
    Rta,
    InverseDice,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dice" => Ok(Method::Dice),
            "mba" => Ok(Method::Mba),
            "rta" => Ok(Method::Rta),
            "inverse_dice" | "inverse-dice" => Ok(Method::InverseDice),
            other => Err(Error::Config(format!("unknown baseline method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub method: Method,
    pub budget: usize,
    pub seed: u64,
    /// In the order the edits were made.
    pub edits: Vec<EditRecord>,
    pub graph: Graph,
}

/// Optional restriction of the pairs a baseline may touch.
#[derive(Debug, Clone, Copy, Default)]
pub struct BaselineOptions<'a> {
    pub scope: Option<&'a CandidateScope>,
    /// DICE: deletions in phase one; a uniform draw from `0..=budget` when
    /// unset. Inverse-DICE: additions in phase one, same rule.
    pub split: Option<usize>,
    /// MBA: probability that a budget unit deletes.
    pub delete_prob: f64,
}

impl BaselineOptions<'_> {
    pub fn new() -> Self {
        BaselineOptions {
            scope: None,
            split: None,
            delete_prob: 0.5,
        }
    }

    fn allowed(&self, i: usize, j: usize) -> bool {
        self.scope.map_or(true, |s| s.index_of(i, j).is_some())
    }
}

fn rec(op: EditOp, i: usize, j: usize) -> EditRecord {
    EditRecord {
        op,
        i: i.min(j),
        j: i.max(j),
    }
}

fn finish(g: &Graph, method: Method, budget: usize, seed: u64, edits: Vec<EditRecord>) -> Result<BaselineRun> {
    let graph = apply_records(g, &edits, Some(budget))?;
    Ok(BaselineRun {
        method,
        budget,
        seed,
        edits,
        graph,
    })
}

fn target_set(g: &Graph, targets: &[usize]) -> Result<BTreeSet<usize>> {
    if let Some(&t) = targets.iter().find(|&&t| t >= g.n_nodes()) {
        return Err(Error::InvalidArgument(format!("target {t} out of range")));
    }
    Ok(targets.iter().copied().collect())
}

/// Existing edges with at least one endpoint in `set`.
fn incident_edges(g: &Graph, set: &BTreeSet<usize>, opts: &BaselineOptions) -> Vec<(usize, usize)> {
    g.edges()
        .into_iter()
        .filter(|&(i, j)| (set.contains(&i) || set.contains(&j)) && opts.allowed(i, j))
        .collect()
}

/// Non-edges joining `set` to the rest of the graph.
fn crossing_non_edges(g: &Graph, set: &BTreeSet<usize>, opts: &BaselineOptions) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for &t in set {
        for v in 0..g.n_nodes() {
            if !set.contains(&v) && !g.has_edge(t, v) && opts.allowed(t, v) {
                out.push((t.min(v), t.max(v)));
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Existing edges joining `set` to the rest of the graph.
fn crossing_edges(g: &Graph, set: &BTreeSet<usize>, opts: &BaselineOptions) -> Vec<(usize, usize)> {
    g.edges()
        .into_iter()
        .filter(|&(i, j)| (set.contains(&i) != set.contains(&j)) && opts.allowed(i, j))
        .collect()
}

/// Non-edges with at least one endpoint in `set`.
fn incident_non_edges(g: &Graph, set: &BTreeSet<usize>, opts: &BaselineOptions) -> Vec<(usize, usize)> {
    let n = g.n_nodes();
    let mut out = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if (set.contains(&i) || set.contains(&j)) && !g.has_edge(i, j) && opts.allowed(i, j) {
                out.push((i, j));
            }
        }
    }
    out
}

fn draw<R: Rng>(pool: &[(usize, usize)], k: usize, rng: &mut R) -> Vec<(usize, usize)> {
    pool.choose_multiple(rng, k.min(pool.len())).copied().collect()
}

/// Delete random target-incident edges, then insert random edges from the
/// targets to the rest of the graph.
pub fn dice<R: Rng>(g: &Graph, targets: &[usize], budget: usize, seed: u64, rng: &mut R, opts: &BaselineOptions) -> Result<BaselineRun> {
    let set = target_set(g, targets)?;
    let split = opts.split.unwrap_or_else(|| rng.gen_range(0..=budget)).min(budget);
    let dels = draw(&incident_edges(g, &set, opts), split, rng);
    let left = budget - dels.len();
    let adds = draw(&crossing_non_edges(g, &set, opts), left, rng);
    let mut edits: Vec<EditRecord> = dels.into_iter().map(|(i, j)| rec(EditOp::Delete, i, j)).collect();
    edits.extend(adds.into_iter().map(|(i, j)| rec(EditOp::Add, i, j)));
    finish(g, Method::Dice, budget, seed, edits)
}

/// Per budget unit, a coin decides between deleting a random
/// intra-community edge and inserting a random inter-community non-edge.
pub fn mba<R: Rng>(g: &Graph, labels: &[usize], budget: usize, seed: u64, rng: &mut R, opts: &BaselineOptions) -> Result<BaselineRun> {
    if labels.len() != g.n_nodes() {
        return Err(Error::Dimension("one label per node required".into()));
    }
    let n = g.n_nodes();
    let mut intra = Vec::new();
    let mut inter = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if !opts.allowed(i, j) {
                continue;
            }
            match (g.has_edge(i, j), labels[i] == labels[j]) {
                (true, true) => intra.push((i, j)),
                (false, false) => inter.push((i, j)),
                _ => {}
            }
        }
    }
    let mut edits = Vec::new();
    for _ in 0..budget {
        let delete = rng.gen::<f64>() < opts.delete_prob;
        let delete = if delete { !intra.is_empty() } else { inter.is_empty() };
        let (primary, op) = if delete {
            (&mut intra, EditOp::Delete)
        } else {
            (&mut inter, EditOp::Add)
        };
        if primary.is_empty() {
            break;
        }
        let k = rng.gen_range(0..primary.len());
        let (i, j) = primary.swap_remove(k);
        edits.push(rec(op, i, j));
    }
    finish(g, Method::Mba, budget, seed, edits)
}

/// Each round samples a non-target node and a target, with replacement,
/// and toggles the pair between them. Pairs already toggled are redrawn.
pub fn rta<R: Rng>(g: &Graph, targets: &[usize], budget: usize, seed: u64, rng: &mut R, opts: &BaselineOptions) -> Result<BaselineRun> {
    let set = target_set(g, targets)?;
    let tv: Vec<usize> = set.iter().copied().collect();
    let others: Vec<usize> = (0..g.n_nodes()).filter(|v| !set.contains(v)).collect();
    let mut edits: Vec<EditRecord> = Vec::new();
    let mut touched = BTreeSet::new();
    if tv.is_empty() || others.is_empty() {
        return finish(g, Method::Rta, budget, seed, edits);
    }
    let pool = tv
        .iter()
        .flat_map(|&t| others.iter().map(move |&v| (t, v)))
        .filter(|&(t, v)| opts.allowed(t, v))
        .count();
    let want = budget.min(pool);
    while edits.len() < want {
        let v = *others.choose(rng).unwrap();
        let t = *tv.choose(rng).unwrap();
        let p = (v.min(t), v.max(t));
        // a pair drawn twice would undo itself, so repeats are redrawn
        if !opts.allowed(p.0, p.1) || !touched.insert(p) {
            continue;
        }
        let op = if g.has_edge(p.0, p.1) { EditOp::Delete } else { EditOp::Add };
        edits.push(rec(op, p.0, p.1));
    }
    finish(g, Method::Rta, budget, seed, edits)
}

/// Defense mirror of DICE: first add random target-incident edges, then
/// delete random edges between the targets and the rest.
pub fn inverse_dice<R: Rng>(g: &Graph, targets: &[usize], budget: usize, seed: u64, rng: &mut R, opts: &BaselineOptions) -> Result<BaselineRun> {
    let set = target_set(g, targets)?;
    let split = opts.split.unwrap_or_else(|| rng.gen_range(0..=budget)).min(budget);
    let adds = draw(&incident_non_edges(g, &set, opts), split, rng);
    let left = budget - adds.len();
    let dels = draw(&crossing_edges(g, &set, opts), left, rng);
    let mut edits: Vec<EditRecord> = adds.into_iter().map(|(i, j)| rec(EditOp::Add, i, j)).collect();
    edits.extend(dels.into_iter().map(|(i, j)| rec(EditOp::Delete, i, j)));
    finish(g, Method::InverseDice, budget, seed, edits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn g() -> Graph {
        Graph::from_edges(6, &[(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (2, 3)], Array2::ones((6, 1))).unwrap()
    }

    #[test]
    fn zero_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let o = BaselineOptions::new();
        assert!(dice(&g(), &[0, 1], 0, 0, &mut rng, &o).unwrap().edits.is_empty());
        assert!(inverse_dice(&g(), &[0, 1], 0, 0, &mut rng, &o).unwrap().edits.is_empty());
        assert!(rta(&g(), &[0, 1], 0, 0, &mut rng, &o).unwrap().edits.is_empty());
    }

    #[test]
    fn dice_with_isolated_targets_only_inserts() {
        let g = Graph::from_edges(5, &[(2, 3)], Array2::ones((5, 1))).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = dice(&g, &[0, 1], 3, 1, &mut rng, &BaselineOptions::new()).unwrap();
        assert_eq!(r.edits.len(), 3);
        assert!(r.edits.iter().all(|e| e.op == EditOp::Add));
        assert!(r.edits.iter().all(|e| e.i <= 1 || e.j <= 1));
    }

    #[test]
    fn mba_respects_labels() {
        let labels = [0, 0, 0, 1, 1, 1];
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = mba(&g(), &labels, 3, seed, &mut rng, &BaselineOptions::new()).unwrap();
            assert!(r.edits.len() <= 3);
            for e in &r.edits {
                assert_eq!(e.op == EditOp::Delete, labels[e.i] == labels[e.j]);
            }
        }
    }

    #[test]
    fn rta_isolated_targets_insert() {
        let g = Graph::from_edges(5, &[(2, 3)], Array2::ones((5, 1))).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = rta(&g, &[0], 2, 2, &mut rng, &BaselineOptions::new()).unwrap();
        assert!(r.edits.iter().all(|e| e.op == EditOp::Add));
    }

    #[test]
    fn inverse_dice_adds_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let o = BaselineOptions {
            split: Some(1),
            ..BaselineOptions::new()
        };
        let r = inverse_dice(&g(), &[2], 2, 3, &mut rng, &o).unwrap();
        assert_eq!(r.edits[0].op, EditOp::Add);
        assert_eq!(r.edits[1].op, EditOp::Delete);
        assert!(r.edits.iter().all(|e| e.i == 2 || e.j == 2));
    }
}
