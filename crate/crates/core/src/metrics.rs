//! Hiding measures for a target set, budget accounting and report rows.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::Graph;

fn target_counts(labels: &[usize], targets: &[usize]) -> BTreeMap<usize, usize> {
    let set: BTreeSet<usize> = targets.iter().copied().collect();
    let mut out = BTreeMap::new();
    for t in set {
        *out.entry(labels[t]).or_insert(0) += 1;
    }
    out
}

/// Spread of the targets over communities:
/// `(#communities hit - 1) / ((K - 1) * max_i |G_i ∩ C+|)`.
pub fn m1(labels: &[usize], targets: &[usize], k: usize) -> Result<f64> {
    if k <= 1 {
        return Err(Error::InvalidArgument(format!("M1 needs K > 1, got {k}")));
    }
    check_targets(labels, targets)?;
    let counts = target_counts(labels, targets);
    let hit = counts.len() as f64;
    let max = *counts.values().max().unwrap() as f64;
    Ok((hit - 1.0) / ((k as f64 - 1.0) * max))
}

/// Share of non-targets that sit in some community holding a target.
pub fn m2(labels: &[usize], targets: &[usize], n: usize) -> Result<f64> {
    check_targets(labels, targets)?;
    let counts = target_counts(labels, targets);
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in &labels[..n.min(labels.len())] {
        *sizes.entry(l).or_insert(0) += 1;
    }
    let crowd: usize = counts.iter().map(|(c, t)| sizes[c] - t).sum();
    let n_targets = targets.iter().collect::<BTreeSet<_>>().len();
    Ok(crowd as f64 / n.saturating_sub(n_targets).max(1) as f64)
}

fn check_targets(labels: &[usize], targets: &[usize]) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("empty target set".into()));
    }
    if let Some(t) = targets.iter().find(|&&t| t >= labels.len()) {
        return Err(Error::InvalidArgument(format!("target {t} out of range")));
    }
    Ok(())
}

/// `sum_{i<j} |A_ij - B_ij|`.
pub fn budget_used(a: &Graph, b: &Graph) -> Result<usize> {
    if a.n_nodes() != b.n_nodes() {
        return Err(Error::Dimension(format!(
            "graphs have {} and {} nodes",
            a.n_nodes(),
            b.n_nodes()
        )));
    }
    let n = a.n_nodes();
    let mut used = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            if a.has_edge(i, j) != b.has_edge(i, j) {
                used += 1;
            }
        }
    }
    Ok(used)
}

pub fn community_sizes(labels: &[usize], k: usize) -> Vec<usize> {
    let mut sizes = vec![0; k.max(labels.iter().map(|&l| l + 1).max().unwrap_or(0))];
    for &l in labels {
        sizes[l] += 1;
    }
    sizes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub m1: f64,
    pub m2: f64,
    pub k: usize,
    pub n_targets: usize,
    pub budget_used: usize,
    pub community_sizes: Vec<usize>,
}

impl MetricsReport {
    pub fn evaluate(labels: &[usize], targets: &[usize], k: usize, budget_used: usize) -> Result<Self> {
        Ok(MetricsReport {
            m1: m1(labels, targets, k)?,
            m2: m2(labels, targets, labels.len())?,
            k,
            n_targets: targets.iter().collect::<BTreeSet<_>>().len(),
            budget_used,
            community_sizes: community_sizes(labels, k),
        })
    }

    /// `"3.61% / 34.11%"`.
    pub fn table_cell(&self) -> String {
        format!("{} / {}", percent(self.m1), percent(self.m2))
    }
}

pub fn percent(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

/// Hex SHA-256 of a canonical config rendering.
pub fn config_hash(canonical: &str) -> String {
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn m1_examples() {
        assert_eq!(m1(&[0, 0, 1], &[0, 1], 2).unwrap(), 0.0);
        assert_eq!(m1(&[0, 1, 2, 3], &[0, 1, 2, 3], 4).unwrap(), 1.0);
        assert_eq!(m1(&[0, 0, 1, 2], &[0, 1, 2], 3).unwrap(), 0.25);
        assert!(m1(&[0, 0], &[0], 1).is_err());
    }

    #[test]
    fn m2_examples() {
        assert_eq!(m2(&[0, 0, 1, 1], &[0, 1], 4).unwrap(), 0.0);
        assert_eq!(m2(&[0; 5], &[0, 1], 5).unwrap(), 1.0);
        let labels = [0, 0, 0, 0, 1, 1, 1, 2, 2, 2];
        assert_eq!(m2(&labels, &[0, 4], 10).unwrap(), 0.625);
    }

    #[test]
    fn budget_examples() {
        let g = Graph::from_edges(3, &[(0, 1)], Array2::ones((3, 1))).unwrap();
        assert_eq!(budget_used(&g, &g).unwrap(), 0);
        assert_eq!(budget_used(&g, &g.toggled([(1, 2)])).unwrap(), 1);
        let h = Graph::from_edges(2, &[(0, 1)], Array2::ones((2, 1))).unwrap();
        assert!(budget_used(&g, &h).is_err());
    }

    #[test]
    fn table_cell_format() {
        let r = MetricsReport {
            m1: 0.0361,
            m2: 0.3411,
            k: 2,
            n_targets: 2,
            budget_used: 0,
            community_sizes: vec![],
        };
        assert_eq!(r.table_cell(), "3.61% / 34.11%");
    }
}
