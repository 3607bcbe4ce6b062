//! Editing masks over a candidate scope, their discretization into budgeted
//! binary edits, and application of edits to graphs.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::scope::CandidateScope;

static VIOLATIONS: AtomicUsize = AtomicUsize::new(0);

/// Number of budget or scope violations rejected by this process so far.
pub fn constraint_violations() -> usize {
    VIOLATIONS.load(Ordering::SeqCst)
}

fn violation(msg: String) -> Error {
    VIOLATIONS.fetch_add(1, Ordering::SeqCst);
    Error::Constraint(msg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Attacker,
    Defender,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscretizeMode {
    #[default]
    TopK,
    Sample,
}

impl std::str::FromStr for DiscretizeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topk" => Ok(DiscretizeMode::TopK),
            "sample" => Ok(DiscretizeMode::Sample),
            other => Err(Error::Config(format!("unknown discretize mode {other:?}"))),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

pub fn sigmoid_second(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s) * (1.0 - 2.0 * s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditMask {
    scope: CandidateScope,
    pub logits: Array1<f64>,
    /// Accumulated descent direction, used to order pairs whose logits tie.
    pub score: Array1<f64>,
    budget: usize,
    role: Role,
}

/// Fresh mask with logits uniform in `[-amplitude, amplitude]`.
pub fn init_mask(
    scope: &CandidateScope,
    budget: usize,
    seed: u64,
    amplitude: f64,
    role: Role,
) -> Result<EditMask> {
    if budget > scope.len() {
        return Err(Error::InvalidArgument(format!(
            "budget {budget} exceeds scope size {}",
            scope.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = if amplitude > 0.0 {
        Array1::from_shape_fn(scope.len(), |_| rng.gen_range(-amplitude..=amplitude))
    } else {
        Array1::zeros(scope.len())
    };
    Ok(EditMask {
        scope: scope.clone(),
        logits,
        score: Array1::zeros(scope.len()),
        budget,
        role,
    })
}

impl EditMask {
    pub fn scope(&self) -> &CandidateScope {
        &self.scope
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    /// +1 for pairs that are currently non-edges, -1 for edges.
    pub fn indicator(&self) -> Array1<f64> {
        self.scope
            .existing_flags()
            .iter()
            .map(|&e| if e { -1.0 } else { 1.0 })
            .collect()
    }

    pub fn probabilities(&self) -> Array1<f64> {
        self.logits.mapv(sigmoid)
    }

    /// `logits -= step * sign(grad)` with `sign(0) = 0`.
    pub fn sign_step(&mut self, grad: &Array1<f64>, step: f64) -> Result<()> {
        if grad.len() != self.logits.len() {
            return Err(Error::Dimension(format!(
                "gradient has {} entries for {} logits",
                grad.len(),
                self.logits.len()
            )));
        }
        for ((m, s), &g) in self.logits.iter_mut().zip(self.score.iter_mut()).zip(grad) {
            *m -= step * sign(g);
            *s -= g;
        }
        Ok(())
    }

    /// Moves this mask onto a new scope, keeping logits of pairs that
    /// survive with the same existing flag and resetting the rest.
    pub fn remap(&self, scope: &CandidateScope, budget: usize) -> Result<EditMask> {
        let mut out = init_mask(scope, budget, 0, 0.0, self.role)?;
        for (idx, &(i, j)) in scope.pairs().iter().enumerate() {
            if let Some(old) = self.scope.index_of(i, j) {
                if self.scope.is_existing(old) == scope.is_existing(idx) {
                    out.logits[idx] = self.logits[old];
                    out.score[idx] = self.score[old];
                }
            }
        }
        Ok(out)
    }
}

pub fn sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-pair selection with the budget it was drawn under.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryEdit {
    pub selected: Vec<bool>,
    pub budget: usize,
}

impl BinaryEdit {
    pub fn empty(len: usize, budget: usize) -> Self {
        BinaryEdit {
            selected: vec![false; len],
            budget,
        }
    }

    pub fn from_indices(len: usize, budget: usize, idx: &[usize]) -> Self {
        let mut e = Self::empty(len, budget);
        for &i in idx {
            e.selected[i] = true;
        }
        e
    }

    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.selected
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
            .collect()
    }

    pub fn values(&self) -> Array1<f64> {
        self.selected.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect()
    }
}

const TIE_QUANTUM: f64 = 1e-9;

/// Pair indices ordered by logit (descending), then accumulated score
/// (descending), then index.
pub fn priority_order(mask: &EditMask) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..mask.len()).collect();
    let key = |i: usize| (mask.logits[i] / TIE_QUANTUM).round() as i64;
    idx.sort_by(|&a, &b| {
        key(b)
            .cmp(&key(a))
            .then(mask.score[b].total_cmp(&mask.score[a]))
            .then(a.cmp(&b))
    });
    idx
}

pub fn discretize<R: Rng>(mask: &EditMask, mode: DiscretizeMode, rng: &mut R) -> BinaryEdit {
    let n = mask.len();
    let k = mask.budget.min(n);
    let chosen: Vec<usize> = match mode {
        DiscretizeMode::TopK => priority_order(mask).into_iter().take(k).collect(),
        DiscretizeMode::Sample => {
            let mut weights: Vec<f64> = mask.probabilities().to_vec();
            let mut out = Vec::with_capacity(k);
            for _ in 0..k {
                let total: f64 = weights.iter().sum();
                let mut u = rng.gen::<f64>() * total;
                let mut pick = None;
                for (i, &w) in weights.iter().enumerate() {
                    if w <= 0.0 {
                        continue;
                    }
                    pick = Some(i);
                    if u < w {
                        break;
                    }
                    u -= w;
                }
                let i = pick
                    .or_else(|| (0..n).find(|i| !out.contains(i)))
                    .expect("budget never exceeds scope");
                weights[i] = 0.0;
                out.push(i);
            }
            out
        }
    };
    BinaryEdit::from_indices(n, mask.budget, &chosen)
}

/// Flips every selected pair of `scope` in `g`.
pub fn apply_edit(g: &Graph, edit: &BinaryEdit, scope: &CandidateScope) -> Result<Graph> {
    if edit.selected.len() != scope.len() {
        return Err(violation(format!(
            "edit covers {} pairs, scope has {}",
            edit.selected.len(),
            scope.len()
        )));
    }
    if edit.count() > edit.budget {
        return Err(violation(format!(
            "edit selects {} pairs over budget {}",
            edit.count(),
            edit.budget
        )));
    }
    for idx in edit.indices() {
        let (i, j) = scope.pair(idx);
        if i >= g.n_nodes() || j >= g.n_nodes() || g.has_edge(i, j) != scope.is_existing(idx) {
            return Err(Error::Constraint(format!(
                "pair ({i}, {j}) changed since the scope was built"
            )));
        }
    }
    let out = g.toggled(edit.indices().into_iter().map(|i| scope.pair(i)));
    let used = crate::metrics::budget_used(g, &out)?;
    if used != edit.count() {
        return Err(violation(format!("edit flipped {used} pairs, expected {}", edit.count())));
    }
    Ok(out)
}

/// Dense relaxed adjacency: base weights everywhere, and on scope pairs
/// `b + (1 - 2b) * sigma(m)`, i.e. `sigma(m)` for non-edges and
/// `1 - sigma(m)` for edges.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedAdjacency {
    pub weights: Array2<f64>,
}

pub fn relax_edit(g: &Graph, mask: &EditMask) -> WeightedAdjacency {
    WeightedAdjacency {
        weights: overlay(g.adjacency(), mask.scope(), &mask.probabilities()),
    }
}

/// Applies per-pair flip intensities `v` on top of `base`.
pub fn overlay(base: &Array2<f64>, scope: &CandidateScope, v: &Array1<f64>) -> Array2<f64> {
    let mut w = base.clone();
    for (idx, &(i, j)) in scope.pairs().iter().enumerate() {
        let b = base[[i, j]];
        let x = b + (1.0 - 2.0 * b) * v[idx];
        w[[i, j]] = x;
        w[[j, i]] = x;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EditOp {
    Add,
    Delete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EditRecord {
    pub op: EditOp,
    pub i: usize,
    pub j: usize,
}

impl fmt::Display for EditRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self.op {
            EditOp::Add => '+',
            EditOp::Delete => '-',
        };
        write!(f, "{c} {} {}", self.i, self.j)
    }
}

pub fn edit_records(edit: &BinaryEdit, scope: &CandidateScope) -> Vec<EditRecord> {
    edit.indices()
        .into_iter()
        .map(|idx| {
            let (i, j) = scope.pair(idx);
            let op = if scope.is_existing(idx) {
                EditOp::Delete
            } else {
                EditOp::Add
            };
            EditRecord { op, i, j }
        })
        .collect()
}

/// Records turning `a` into `b`, in row-major pair order.
pub fn diff_graphs(a: &Graph, b: &Graph) -> Result<Vec<EditRecord>> {
    if a.n_nodes() != b.n_nodes() {
        return Err(Error::Dimension("graphs differ in node count".into()));
    }
    let n = a.n_nodes();
    let mut out = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            match (a.has_edge(i, j), b.has_edge(i, j)) {
                (false, true) => out.push(EditRecord { op: EditOp::Add, i, j }),
                (true, false) => out.push(EditRecord { op: EditOp::Delete, i, j }),
                _ => {}
            }
        }
    }
    Ok(out)
}

pub fn format_diff(records: &[EditRecord]) -> String {
    records.iter().map(|r| format!("{r}\n")).collect()
}

/// Parses `+ i j` / `- i j` lines. The unicode minus sign is accepted.
pub fn parse_diff(text: &str, context: &str) -> Result<Vec<EditRecord>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::parse(context, format!("line {}: {line:?}", ln + 1));
        if parts.len() != 3 {
            return Err(bad());
        }
        let op = match parts[0] {
            "+" => EditOp::Add,
            "-" | "\u{2212}" => EditOp::Delete,
            _ => return Err(bad()),
        };
        let i: usize = parts[1].parse().map_err(|_| bad())?;
        let j: usize = parts[2].parse().map_err(|_| bad())?;
        if i == j {
            return Err(bad());
        }
        out.push(EditRecord {
            op,
            i: i.min(j),
            j: i.max(j),
        });
    }
    Ok(out)
}

/// Applies diff records, checking each against the current topology.
pub fn apply_records(g: &Graph, records: &[EditRecord], budget: Option<usize>) -> Result<Graph> {
    if let Some(b) = budget {
        if records.len() > b {
            return Err(violation(format!("{} edits over budget {b}", records.len())));
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    for r in records {
        if r.i >= g.n_nodes() || r.j >= g.n_nodes() || r.i == r.j {
            return Err(Error::Constraint(format!("edit {r} is out of range")));
        }
        if !seen.insert((r.i, r.j)) {
            return Err(Error::Constraint(format!("pair ({}, {}) edited twice", r.i, r.j)));
        }
        let exists = g.has_edge(r.i, r.j);
        if (r.op == EditOp::Add) == exists {
            return Err(Error::Constraint(format!("edit {r} does not match the graph")));
        }
    }
    Ok(g.toggled(records.iter().map(|r| (r.i, r.j))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tri_scope() -> (Graph, CandidateScope) {
        let g = Graph::from_edges(3, &[(0, 1)], Array2::ones((3, 1))).unwrap();
        let s = CandidateScope::from_pairs(&g, &[(0, 1), (0, 2), (1, 2)]).unwrap();
        (g, s)
    }

    #[test]
    fn budget_must_fit_scope() {
        let (_, s) = tri_scope();
        assert!(init_mask(&s, 3, 0, 0.01, Role::Attacker).is_ok());
        assert!(init_mask(&s, 4, 0, 0.01, Role::Attacker).is_err());
        let a = init_mask(&s, 1, 5, 0.01, Role::Attacker).unwrap();
        let b = init_mask(&s, 1, 5, 0.01, Role::Attacker).unwrap();
        assert_eq!(a.logits, b.logits);
        assert!(a.logits.iter().all(|v| v.abs() <= 0.01));
    }

    #[test]
    fn topk_and_ties() {
        let (_, s) = tri_scope();
        let mut m = init_mask(&s, 2, 0, 0.0, Role::Attacker).unwrap();
        m.logits = array![2.0, -1.0, 0.5];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(discretize(&m, DiscretizeMode::TopK, &mut rng).indices(), vec![0, 2]);
        let m = init_mask(&s, 1, 0, 0.0, Role::Attacker).unwrap();
        assert_eq!(discretize(&m, DiscretizeMode::TopK, &mut rng).indices(), vec![0]);
        let m = init_mask(&s, 3, 0, 0.0, Role::Attacker).unwrap();
        for mode in [DiscretizeMode::TopK, DiscretizeMode::Sample] {
            assert_eq!(discretize(&m, mode, &mut rng).count(), 3);
        }
    }

    #[test]
    fn sample_respects_budget() {
        let (_, s) = tri_scope();
        let m = init_mask(&s, 2, 3, 0.01, Role::Attacker).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            assert_eq!(discretize(&m, DiscretizeMode::Sample, &mut rng).count(), 2);
        }
    }

    #[test]
    fn apply_follows_indicator() {
        let (g, s) = tri_scope();
        let e = BinaryEdit::from_indices(3, 2, &[0, 1]);
        let h = apply_edit(&g, &e, &s).unwrap();
        assert!(!h.has_edge(0, 1));
        assert!(h.has_edge(0, 2));
        assert_eq!(crate::metrics::budget_used(&g, &h).unwrap(), 2);
        let z = apply_edit(&g, &BinaryEdit::empty(3, 2), &s).unwrap();
        assert_eq!(z, g);
    }

    #[test]
    fn apply_rejects_stale_scope_and_overspend() {
        let (g, s) = tri_scope();
        let h = g.toggled([(0, 2)]);
        assert!(apply_edit(&h, &BinaryEdit::from_indices(3, 1, &[1]), &s).is_err());
        assert!(apply_edit(&g, &BinaryEdit::from_indices(3, 1, &[0, 1]), &s).is_err());
    }

    #[test]
    fn relaxed_weights() {
        let (g, s) = tri_scope();
        let mut m = init_mask(&s, 1, 0, 0.0, Role::Attacker).unwrap();
        let w = relax_edit(&g, &m).weights;
        assert_eq!(w[[0, 1]], 0.5);
        assert_eq!(w[[2, 0]], 0.5);
        m.logits[0] = -800.0;
        assert_eq!(relax_edit(&g, &m).weights[[0, 1]], 1.0);
    }

    #[test]
    fn sign_step_semantics() {
        let (_, s) = tri_scope();
        let mut m = init_mask(&s, 1, 0, 0.0, Role::Attacker).unwrap();
        m.sign_step(&array![3.0, -0.2, 0.0], 0.1).unwrap();
        assert_eq!(m.logits, array![-0.1, 0.1, 0.0]);
        m.sign_step(&array![3.0, -0.2, 0.0], 0.1).unwrap();
        assert_eq!(m.logits, array![-0.2, 0.2, 0.0]);
        assert!(m.sign_step(&array![1.0], 0.1).is_err());
    }

    #[test]
    fn remap_keeps_matching_pairs() {
        let (g, s) = tri_scope();
        let mut m = init_mask(&s, 1, 0, 0.0, Role::Defender).unwrap();
        m.logits = array![1.0, 2.0, 3.0];
        let h = g.toggled([(0, 2)]);
        let s2 = CandidateScope::from_pairs(&h, &[(1, 2), (0, 2)]).unwrap();
        let r = m.remap(&s2, 1).unwrap();
        assert_eq!(r.logits, array![3.0, 0.0]);
    }

    #[test]
    fn diff_roundtrip() {
        let (g, s) = tri_scope();
        let e = BinaryEdit::from_indices(3, 2, &[0, 2]);
        let recs = edit_records(&e, &s);
        let text = format_diff(&recs);
        assert_eq!(text, "- 0 1\n+ 1 2\n");
        let parsed = parse_diff(&text, "t").unwrap();
        assert_eq!(parsed, recs);
        let h = apply_records(&g, &parsed, Some(2)).unwrap();
        assert_eq!(h, apply_edit(&g, &e, &s).unwrap());
        assert_eq!(diff_graphs(&g, &h).unwrap(), recs);
        assert!(apply_records(&g, &parsed, Some(1)).is_err());
        assert!(parse_diff("* 0 1", "t").is_err());
        assert_eq!(parse_diff("\u{2212} 1 0", "t").unwrap()[0].op, EditOp::Delete);
    }
}
