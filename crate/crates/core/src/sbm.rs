//! Synthetic graphs: stochastic block models and small named fixtures.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image::Raster;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbmSpec {
    pub sizes: Vec<usize>,
    pub p_in: f64,
    pub p_out: f64,
    /// Scale of the block indicator columns in the features.
    pub feature_signal: f64,
    /// Gaussian noise added to the indicator columns.
    pub feature_noise: f64,
    /// Extra pure-noise feature columns.
    pub noise_dims: usize,
}

impl Default for SbmSpec {
    fn default() -> Self {
        SbmSpec {
            sizes: vec![20, 20],
            p_in: 0.5,
            p_out: 0.02,
            feature_signal: 1.0,
            feature_noise: 0.3,
            noise_dims: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sbm {
    pub graph: Graph,
    pub blocks: Vec<usize>,
}

pub fn generate_sbm(spec: &SbmSpec, seed: u64) -> Result<Sbm> {
    if spec.sizes.is_empty() || spec.sizes.iter().any(|&s| s == 0) {
        return Err(Error::InvalidArgument("block sizes must be positive".into()));
    }
    for p in [spec.p_in, spec.p_out] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("edge probability {p} outside [0, 1]")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks: Vec<usize> = spec
        .sizes
        .iter()
        .enumerate()
        .flat_map(|(b, &s)| std::iter::repeat(b).take(s))
        .collect();
    let n = blocks.len();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if blocks[i] == blocks[j] { spec.p_in } else { spec.p_out };
            if rng.gen::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    let nb = spec.sizes.len();
    let noise = Normal::new(0.0, spec.feature_noise.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut x = Array2::zeros((n, nb + spec.noise_dims));
    for i in 0..n {
        for c in 0..nb + spec.noise_dims {
            let base = if c == blocks[i] { spec.feature_signal } else { 0.0 };
            x[[i, c]] = base + noise.sample(&mut rng);
        }
    }
    Ok(Sbm {
        graph: Graph::from_edges(n, &edges, x)?,
        blocks,
    })
}

/// Erdos-Renyi graph with standard normal features.
pub fn random_graph(n: usize, p: f64, d: usize, seed: u64) -> Result<Graph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.gen::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    let normal = Normal::new(0.0, 1.0).expect("valid");
    let x = Array2::from_shape_fn((n, d), |_| normal.sample(&mut rng));
    Graph::from_edges(n, &edges, x)
}

/// Nodes of `block` ordered by how weakly they are tied to it: most
/// cross-block edges per in-block edge first, ties by index.
pub fn weakest_members(g: &Graph, blocks: &[usize], block: usize) -> Vec<usize> {
    let mut members: Vec<(usize, f64)> = (0..g.n_nodes())
        .filter(|&i| blocks[i] == block)
        .map(|i| {
            let (inside, cross) = g.neighbors(i).fold((0usize, 0usize), |(a, b), j| {
                if blocks[j] == block {
                    (a + 1, b)
                } else {
                    (a, b + 1)
                }
            });
            (i, (cross as f64 + 1.0) / (inside as f64 + 1.0))
        })
        .collect();
    members.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    members.into_iter().map(|(i, _)| i).collect()
}

/// Two disjoint triangles with identity features.
pub fn two_triangles() -> Graph {
    let edges = [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)];
    Graph::from_edges(6, &edges, Array2::eye(6)).expect("valid fixture")
}

/// Two 4-cliques joined by the bridge `(3, 4)`. Features mark the side.
pub fn barbell() -> Graph {
    let mut edges = Vec::new();
    for side in [0usize, 4] {
        for a in 0..4 {
            for b in (a + 1)..4 {
                edges.push((side + a, side + b));
            }
        }
    }
    edges.push((3, 4));
    let x = Array2::from_shape_fn((8, 2), |(i, c)| if (i < 4) == (c == 0) { 1.0 } else { 0.1 * i as f64 / 8.0 });
    Graph::from_edges(8, &edges, x).expect("valid fixture")
}

/// Grayscale image whose left half is black and right half white.
pub fn two_color_image(width: usize, height: usize) -> Raster {
    let data = (0..width * height)
        .map(|p| if p % width < width / 2 { 0 } else { 255 })
        .collect();
    Raster::new(width, height, 1, data).expect("valid size")
}
