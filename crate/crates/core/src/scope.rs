//! Candidate perturbation scopes: the node pairs a player may flip.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;

/// Which pairs inside the k-hop neighborhood of the targets are eligible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeMode {
    /// Both endpoints lie in the union of closed k-hop neighborhoods.
    #[default]
    PairsInNeighborhood,
    /// One endpoint is a target, the other lies in that union.
    IncidentToTarget,
}

impl std::str::FromStr for ScopeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pairs_in_neighborhood" => Ok(ScopeMode::PairsInNeighborhood),
            "incident_to_target" => Ok(ScopeMode::IncidentToTarget),
            other => Err(Error::Config(format!("unknown scope_mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateScope {
    pairs: Vec<(usize, usize)>,
    existing: Vec<bool>,
    index: BTreeMap<(usize, usize), usize>,
    origin_targets: Vec<usize>,
    hops: usize,
}

impl CandidateScope {
    /// Scope from the k-hop neighborhoods of `targets` in `g`.
    pub fn build(g: &Graph, targets: &[usize], k: usize, mode: ScopeMode) -> Result<Self> {
        Self::build_with_reach(g, g, targets, k, mode)
    }

    /// Like [`CandidateScope::build`], but neighborhoods are measured in
    /// `reach` while existing flags come from `g`. Used for pixel graphs,
    /// where reach is the spatial lattice rather than the affinity graph.
    pub fn build_with_reach(
        g: &Graph,
        reach: &Graph,
        targets: &[usize],
        k: usize,
        mode: ScopeMode,
    ) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::InvalidArgument("scope needs at least one target".into()));
        }
        if k < 1 {
            return Err(Error::InvalidArgument("hop count k must be >= 1".into()));
        }
        if reach.n_nodes() != g.n_nodes() {
            return Err(Error::Dimension("reach graph size differs from graph".into()));
        }
        let n = g.n_nodes();
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::InvalidArgument(format!("target {t} out of range (N={n})")));
        }
        let region: BTreeSet<usize> = targets.iter().flat_map(|&t| reach.k_hop(t, k)).collect();
        let target_set: BTreeSet<usize> = targets.iter().copied().collect();
        let mut pairs = Vec::new();
        let region_vec: Vec<usize> = region.iter().copied().collect();
        for (ai, &a) in region_vec.iter().enumerate() {
            for &b in &region_vec[ai + 1..] {
                let eligible = match mode {
                    ScopeMode::PairsInNeighborhood => true,
                    ScopeMode::IncidentToTarget => {
                        target_set.contains(&a) || target_set.contains(&b)
                    }
                };
                if eligible {
                    pairs.push((a, b));
                }
            }
        }
        let mut scope = Self::from_pairs(g, &pairs)?;
        scope.origin_targets = target_set.into_iter().collect();
        scope.hops = k;
        Ok(scope)
    }

    /// Every unordered pair of the graph.
    pub fn full(g: &Graph) -> Self {
        let n = g.n_nodes();
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .collect();
        let mut scope = Self::from_pairs(g, &pairs).expect("pairs are valid by construction");
        scope.hops = usize::MAX;
        scope
    }

    /// Explicit scope. Pairs are normalized to `i < j` and deduplicated,
    /// keeping first-seen order.
    pub fn from_pairs(g: &Graph, pairs: &[(usize, usize)]) -> Result<Self> {
        let n = g.n_nodes();
        let mut out = Vec::with_capacity(pairs.len());
        let mut index = BTreeMap::new();
        for &(a, b) in pairs {
            if a == b {
                return Err(Error::InvalidArgument(format!("self-pair ({a}, {a}) in scope")));
            }
            if a >= n || b >= n {
                return Err(Error::InvalidArgument(format!("pair ({a}, {b}) out of range")));
            }
            let p = (a.min(b), a.max(b));
            if let std::collections::btree_map::Entry::Vacant(e) = index.entry(p) {
                e.insert(out.len());
                out.push(p);
            }
        }
        let existing = out.iter().map(|&(i, j)| g.has_edge(i, j)).collect();
        Ok(CandidateScope {
            pairs: out,
            existing,
            index,
            origin_targets: Vec::new(),
            hops: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn pair(&self, idx: usize) -> (usize, usize) {
        self.pairs[idx]
    }

    pub fn existing_flags(&self) -> &[bool] {
        &self.existing
    }

    pub fn is_existing(&self, idx: usize) -> bool {
        self.existing[idx]
    }

    pub fn origin_targets(&self) -> &[usize] {
        &self.origin_targets
    }

    pub fn hops(&self) -> usize {
        self.hops
    }

    pub fn index_of(&self, i: usize, j: usize) -> Option<usize> {
        self.index.get(&(i.min(j), i.max(j))).copied()
    }

    /// True when every existing flag still matches `g`.
    pub fn consistent_with(&self, g: &Graph) -> bool {
        self.pairs
            .iter()
            .zip(&self.existing)
            .all(|(&(i, j), &e)| i < g.n_nodes() && j < g.n_nodes() && g.has_edge(i, j) == e)
    }
}
