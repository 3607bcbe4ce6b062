//! Undirected attributed graphs and the dense operators built on them.
//!
//! Adjacency is stored densely (`N x N`, entries exactly `0.0` or `1.0`).
//! All graphs are immutable after construction; edits produce new graphs.

use std::collections::{BTreeSet, VecDeque};
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    adjacency: Array2<f64>,
    features: Array2<f64>,
    node_ids: Vec<String>,
}

impl Graph {
    /// Builds a graph from an explicit edge list. Duplicate and reversed
    /// pairs collapse to one undirected edge; self-loops are rejected.
    pub fn from_edges(n: usize, edges: &[(usize, usize)], features: Array2<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidGraph("empty node set".into()));
        }
        let mut adjacency = Array2::zeros((n, n));
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::InvalidGraph(format!(
                    "edge ({i}, {j}) references a node >= {n}"
                )));
            }
            if i == j {
                return Err(Error::InvalidGraph(format!("self-loop on node {i}")));
            }
            adjacency[[i, j]] = 1.0;
            adjacency[[j, i]] = 1.0;
        }
        Self::from_adjacency(adjacency, features)
    }

    /// Validates and wraps a dense adjacency matrix.
    pub fn from_adjacency(adjacency: Array2<f64>, features: Array2<f64>) -> Result<Self> {
        let n = adjacency.nrows();
        if n == 0 {
            return Err(Error::InvalidGraph("empty node set".into()));
        }
        if adjacency.ncols() != n {
            return Err(Error::Dimension(format!(
                "adjacency is {}x{}",
                adjacency.nrows(),
                adjacency.ncols()
            )));
        }
        for i in 0..n {
            if adjacency[[i, i]] != 0.0 {
                return Err(Error::InvalidGraph(format!("self-loop on node {i}")));
            }
            for j in 0..n {
                let a = adjacency[[i, j]];
                if a != 0.0 && a != 1.0 {
                    return Err(Error::InvalidGraph(format!("entry ({i}, {j}) = {a} is not 0/1")));
                }
                if a != adjacency[[j, i]] {
                    return Err(Error::InvalidGraph(format!("asymmetric entry ({i}, {j})")));
                }
            }
        }
        check_features(n, &features)?;
        Ok(Graph {
            adjacency,
            features,
            node_ids: (0..n).map(|i| i.to_string()).collect(),
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn adjacency(&self) -> &Array2<f64> {
        &self.adjacency
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn with_node_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.n_nodes() {
            return Err(Error::Dimension(format!(
                "{} node ids for {} nodes",
                ids.len(),
                self.n_nodes()
            )));
        }
        self.node_ids = ids;
        Ok(self)
    }

    /// Same topology, different node attributes.
    pub fn with_features(&self, features: Array2<f64>) -> Result<Self> {
        check_features(self.n_nodes(), &features)?;
        Ok(Graph {
            adjacency: self.adjacency.clone(),
            features,
            node_ids: self.node_ids.clone(),
        })
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[[i, j]] > 0.5
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency.row(i).iter().filter(|&&a| a > 0.5).count()
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.n_nodes()).map(|i| self.degree(i)).collect()
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency
            .row(i)
            .into_iter()
            .enumerate()
            .filter(|(_, &a)| a > 0.5)
            .map(|(j, _)| j)
    }

    /// Undirected edges as `(i, j)` with `i < j`, in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.n_nodes();
        let mut out = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if self.has_edge(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn n_edges(&self) -> usize {
        self.edges().len()
    }

    /// Closed `k`-hop neighborhood of `source` (includes `source`).
    pub fn k_hop(&self, source: usize, k: usize) -> BTreeSet<usize> {
        let n = self.n_nodes();
        let mut dist = vec![usize::MAX; n];
        let mut queue = VecDeque::new();
        dist[source] = 0;
        queue.push_back(source);
        while let Some(u) = queue.pop_front() {
            if dist[u] == k {
                continue;
            }
            for v in self.neighbors(u) {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        (0..n).filter(|&v| dist[v] != usize::MAX).collect()
    }

    /// Returns a copy with the given pairs toggled. Callers are responsible
    /// for validating the flips; this only preserves symmetry.
    pub(crate) fn toggled(&self, pairs: impl IntoIterator<Item = (usize, usize)>) -> Graph {
        let mut out = self.clone();
        for (i, j) in pairs {
            let v = 1.0 - out.adjacency[[i, j]];
            out.adjacency[[i, j]] = v;
            out.adjacency[[j, i]] = v;
        }
        out
    }
}

fn check_features(n: usize, features: &Array2<f64>) -> Result<()> {
    if features.nrows() != n {
        return Err(Error::Dimension(format!(
            "feature matrix has {} rows for {} nodes",
            features.nrows(),
            n
        )));
    }
    if features.ncols() == 0 {
        return Err(Error::Dimension("feature matrix has zero columns".into()));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidGraph("non-finite feature value".into()));
    }
    Ok(())
}

/// Reads an edge list (`i j` per line, 0-based) and a headerless CSV of node
/// features. The node count is the number of feature rows.
pub fn load_graph(edge_path: &Path, feature_path: &Path) -> Result<Graph> {
    let features = read_features(feature_path)?;
    let n = features.nrows();
    let text = fs::read_to_string(edge_path).map_err(|e| Error::io(edge_path, e))?;
    let edges = parse_edge_list(&text, &edge_path.display().to_string())?;
    for &(i, j) in &edges {
        if i >= n || j >= n {
            return Err(Error::InvalidGraph(format!(
                "{}: edge ({i}, {j}) references a node >= {n} (feature file has {n} rows)",
                edge_path.display()
            )));
        }
    }
    Graph::from_edges(n, &edges, features)
}

/// Parses `i j` lines. Blank lines and `#` comments are skipped.
pub fn parse_edge_list(text: &str, context: &str) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::parse(
                format!("{context}:{}", lineno + 1),
                format!("expected two node indices, got {line:?}"),
            ));
        };
        let parse = |s: &str| {
            s.parse::<usize>().map_err(|e| {
                Error::parse(format!("{context}:{}", lineno + 1), format!("{s:?}: {e}"))
            })
        };
        edges.push((parse(a)?, parse(b)?));
    }
    Ok(edges)
}

pub fn read_features(path: &Path) -> Result<Array2<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_features(&text, &path.display().to_string())
}

pub fn parse_features(text: &str, context: &str) -> Result<Array2<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|s| {
                s.trim().parse::<f64>().map_err(|e| {
                    Error::parse(format!("{context}:{}", lineno + 1), format!("{s:?}: {e}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::parse(
                    format!("{context}:{}", lineno + 1),
                    format!("expected {} columns, got {}", first.len(), row.len()),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::InvalidGraph(format!("{context}: empty node set")));
    }
    let d = rows[0].len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((flat.len() / d, d), flat)
        .map_err(|e| Error::Dimension(format!("{context}: {e}")))
}

pub fn write_edge_list(g: &Graph) -> String {
    g.edges().iter().map(|(i, j)| format!("{i} {j}\n")).collect()
}

pub fn write_features(features: &Array2<f64>) -> String {
    features
        .rows()
        .into_iter()
        .map(|r| {
            let cells: Vec<String> = r.iter().map(|v| format!("{v}")).collect();
            cells.join(",") + "\n"
        })
        .collect()
}

/// `D~^{-1/2} (W + I) D~^{-1/2}` for any symmetric non-negative weight matrix.
pub fn normalize_weights(weights: &Array2<f64>) -> Array2<f64> {
    let n = weights.nrows();
    let mut tilde = weights.clone();
    for i in 0..n {
        tilde[[i, i]] += 1.0;
    }
    let inv_sqrt: Array1<f64> = tilde.sum_axis(Axis(1)).mapv(|d| 1.0 / d.sqrt());
    for i in 0..n {
        for j in 0..n {
            tilde[[i, j]] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    tilde
}

/// Renormalized adjacency fed to the graph convolution.
pub fn normalize_adjacency(g: &Graph) -> Array2<f64> {
    normalize_weights(g.adjacency())
}

/// Combinatorial Laplacian `L = D - A` and the degree vector.
pub fn laplacian(g: &Graph) -> (Array2<f64>, Array1<f64>) {
    laplacian_of(g.adjacency())
}

pub fn laplacian_of(weights: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let degrees = weights.sum_axis(Axis(1));
    let mut lap = -weights.clone();
    for i in 0..weights.nrows() {
        lap[[i, i]] += degrees[i];
    }
    (lap, degrees)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn feats(n: usize) -> Array2<f64> {
        Array2::ones((n, 1))
    }

    #[test]
    fn parses_and_dedups() {
        let e = parse_edge_list("0 1\n1 2", "t").unwrap();
        let g = Graph::from_edges(3, &e, feats(3)).unwrap();
        assert_eq!(g.n_nodes(), 3);
        assert_eq!(g.n_edges(), 2);

        let e = parse_edge_list("0 1\n1 0\n0 1\n", "t").unwrap();
        let g = Graph::from_edges(2, &e, feats(2)).unwrap();
        assert_eq!(g.n_edges(), 1);
    }

    #[test]
    fn rejects_self_loop_and_range() {
        let e = parse_edge_list("0 0", "t").unwrap();
        assert!(matches!(
            Graph::from_edges(1, &e, feats(1)),
            Err(Error::InvalidGraph(_))
        ));
        assert!(Graph::from_edges(2, &[(0, 2)], feats(2)).is_err());
        assert!(Graph::from_edges(0, &[], Array2::zeros((0, 1))).is_err());
        assert!(parse_edge_list("0 1 2", "t").is_err());
        assert!(parse_edge_list("0 x", "t").is_err());
    }

    #[test]
    fn load_from_files() {
        let dir = tempfile::tempdir().unwrap();
        let ep = dir.path().join("e.txt");
        let fp = dir.path().join("x.csv");
        fs::write(&ep, "0 1\n1 2\n").unwrap();
        fs::write(&fp, "1,0\n0,1\n1,1\n").unwrap();
        let g = load_graph(&ep, &fp).unwrap();
        assert_eq!(g.n_edges(), 2);
        assert_eq!(g.n_features(), 2);

        fs::write(&fp, "1,0\n0,1\n").unwrap();
        let err = load_graph(&ep, &fp).unwrap_err();
        assert!(err.to_string().contains("node >= 2"), "{err}");

        let missing = dir.path().join("missing.csv");
        let err = load_graph(&ep, &missing).unwrap_err();
        assert!(err.to_string().contains("missing.csv"));
    }

    #[test]
    fn normalization_examples() {
        let g = Graph::from_edges(1, &[], feats(1)).unwrap();
        assert_eq!(normalize_adjacency(&g), array![[1.0]]);

        let g = Graph::from_edges(2, &[(0, 1)], feats(2)).unwrap();
        let a = normalize_adjacency(&g);
        assert!(a.iter().all(|&v| (v - 0.5).abs() < 1e-15));

        let g = Graph::from_edges(3, &[(0, 1), (1, 2)], feats(3)).unwrap();
        let a = normalize_adjacency(&g);
        assert!((a[[0, 1]] - 1.0 / 6f64.sqrt()).abs() < 1e-12);
        assert!((a[[0, 1]] - 0.40825).abs() < 1e-5);
    }

    #[test]
    fn laplacian_examples() {
        let g = Graph::from_edges(2, &[(0, 1)], feats(2)).unwrap();
        let (l, d) = laplacian(&g);
        assert_eq!(l, array![[1.0, -1.0], [-1.0, 1.0]]);
        assert_eq!(d, array![1.0, 1.0]);
        let x = array![1.0, 0.0];
        assert_eq!(x.dot(&l.dot(&x)), 1.0);

        let g = Graph::from_edges(3, &[(0, 1), (1, 2), (0, 2)], feats(3)).unwrap();
        let (l, _) = laplacian(&g);
        for i in 0..3 {
            assert_eq!(l[[i, i]], 2.0);
            assert_eq!(l.row(i).sum(), 0.0);
        }
    }

    #[test]
    fn k_hop_on_path() {
        let g = Graph::from_edges(4, &[(0, 1), (1, 2), (2, 3)], feats(4)).unwrap();
        assert_eq!(g.k_hop(1, 1), [0, 1, 2].into_iter().collect());
        assert_eq!(g.k_hop(0, 2), [0, 1, 2].into_iter().collect());
        assert_eq!(g.k_hop(0, 10).len(), 4);
    }
}
