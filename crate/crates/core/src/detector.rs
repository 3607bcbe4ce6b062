//! Surrogate community detector: two-layer graph convolution for node
//! embedding, a two-layer assignment head with row softmax, and the
//! normalized-cut training objective with a balance penalty.
//!
//! ```text
//! H = A_n · relu(A_n · X · W0) · W1
//! C = softmax_rows(relu(H · Wc1) · Wc2)
//! ```
//!
//! Backpropagation is written out by hand. [`backward`] returns gradients
//! for the weight matrices and, when requested, for the normalized
//! adjacency `A_n`, which the perturbation gradients chain through.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{laplacian_of, normalize_weights, Graph};

/// Guard added to each normalized-cut denominator.
pub const CUT_EPSILON: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d: usize,
    pub h: usize,
    pub v: usize,
    pub r: usize,
    pub k: usize,
}

impl Dims {
    /// Hidden sizes 32/16/32 for the given input width and community count.
    pub fn with_defaults(d: usize, k: usize) -> Self {
        Dims {
            d,
            h: 32,
            v: 16,
            r: 32,
            k,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub w0: Array2<f64>,
    pub w1: Array2<f64>,
    pub wc1: Array2<f64>,
    pub wc2: Array2<f64>,
    pub dropout_rate: f64,
    pub seed: u64,
}

/// Soft memberships plus their row argmax (ties go to the lowest index).
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub soft: Array2<f64>,
    pub hard: Vec<usize>,
}

impl Assignment {
    pub fn from_soft(soft: Array2<f64>) -> Self {
        let hard = soft.rows().into_iter().map(|r| argmax(r.iter().copied())).collect();
        Assignment { soft, hard }
    }

    pub fn k(&self) -> usize {
        self.soft.ncols()
    }
}

pub(crate) fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in it.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Uniform `[-b, b]` with `b = gain * sqrt(3 / fan_in)`, so each layer
/// starts with unit-variance weights scaled by fan-in.
pub fn init_detector(dims: Dims, seed: u64, gain: f64) -> Result<DetectorParams> {
    let Dims { d, h, v, r, k } = dims;
    if k < 2 {
        return Err(Error::InvalidArgument(format!("K must be >= 2, got {k}")));
    }
    if d == 0 || h == 0 || v == 0 || r == 0 {
        return Err(Error::InvalidArgument(format!("all dims must be >= 1: {dims:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = |rows: usize, cols: usize| {
        let bound = gain * (3.0 / rows as f64).sqrt();
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..=bound))
    };
    Ok(DetectorParams {
        w0: layer(d, h),
        w1: layer(h, v),
        wc1: layer(v, r),
        wc2: layer(r, k),
        dropout_rate: 0.3,
        seed,
    })
}

impl DetectorParams {
    pub fn dims(&self) -> Dims {
        Dims {
            d: self.w0.nrows(),
            h: self.w0.ncols(),
            v: self.w1.ncols(),
            r: self.wc1.ncols(),
            k: self.wc2.ncols(),
        }
    }

    pub fn k(&self) -> usize {
        self.wc2.ncols()
    }

    pub fn matrices(&self) -> [(&'static str, &Array2<f64>); 4] {
        [
            ("W0", &self.w0),
            ("W1", &self.w1),
            ("Wc1", &self.wc1),
            ("Wc2", &self.wc2),
        ]
    }

    pub fn matrices_mut(&mut self) -> [&mut Array2<f64>; 4] {
        [&mut self.w0, &mut self.w1, &mut self.wc1, &mut self.wc2]
    }

    fn check(&self, x: &Array2<f64>, adj: &Array2<f64>) -> Result<()> {
        let Dims { d, h, v, r, .. } = self.dims();
        if x.ncols() != d {
            return Err(Error::Dimension(format!("features have {} columns, W0 expects {d}", x.ncols())));
        }
        if adj.nrows() != x.nrows() || adj.ncols() != x.nrows() {
            return Err(Error::Dimension(format!(
                "adjacency {}x{} for {} nodes",
                adj.nrows(),
                adj.ncols(),
                x.nrows()
            )));
        }
        if self.w1.nrows() != h || self.wc1.nrows() != v || self.wc2.nrows() != r {
            return Err(Error::Dimension("inconsistent layer shapes".into()));
        }
        Ok(())
    }

    /// Hard labels in evaluation mode for a graph's own topology.
    pub fn predict(&self, g: &Graph) -> Result<Assignment> {
        let adj = normalize_weights(g.adjacency());
        Ok(forward_eval(self, &adj, g.features())?.0)
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub adj_norm: Array2<f64>,
    xw0: Array2<f64>,
    pub z0: Array2<f64>,
    h0: Array2<f64>,
    h0w1: Array2<f64>,
    h: Array2<f64>,
    pub z1: Array2<f64>,
    h1: Array2<f64>,
    drop: Option<Array2<f64>>,
    pub soft: Array2<f64>,
}

impl ForwardCache {
    /// Smallest distance of any ReLU pre-activation from its kink.
    pub fn relu_margin(&self) -> f64 {
        self.z0
            .iter()
            .chain(self.z1.iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

/// Runs the detector. Passing an rng turns on training mode, which applies
/// inverted dropout to the `relu(H Wc1)` activations; evaluation mode is
/// deterministic.
pub fn forward<R: Rng>(
    p: &DetectorParams,
    adj_norm: &Array2<f64>,
    x: &Array2<f64>,
    train_rng: Option<&mut R>,
) -> Result<(Assignment, ForwardCache)> {
    p.check(x, adj_norm)?;
    let xw0 = x.dot(&p.w0);
    let z0 = adj_norm.dot(&xw0);
    let h0 = z0.mapv(relu);
    let h0w1 = h0.dot(&p.w1);
    let h = adj_norm.dot(&h0w1);
    let z1 = h.dot(&p.wc1);
    let mut h1 = z1.mapv(relu);
    let drop = match train_rng {
        Some(rng) if p.dropout_rate > 0.0 => {
            let keep = 1.0 - p.dropout_rate;
            let mask = Array2::from_shape_fn(h1.raw_dim(), |_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            h1 *= &mask;
            Some(mask)
        }
        _ => None,
    };
    let s = h1.dot(&p.wc2);
    let soft = softmax_rows(&s);
    if soft.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("non-finite community assignment".into()));
    }
    let cache = ForwardCache {
        adj_norm: adj_norm.clone(),
        xw0,
        z0,
        h0,
        h0w1,
        h,
        z1,
        h1,
        drop,
        soft: soft.clone(),
    };
    Ok((Assignment::from_soft(soft), cache))
}

/// Evaluation-mode forward pass.
pub fn forward_eval(
    p: &DetectorParams,
    adj_norm: &Array2<f64>,
    x: &Array2<f64>,
) -> Result<(Assignment, ForwardCache)> {
    forward::<ChaCha8Rng>(p, adj_norm, x, None)
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

pub fn softmax_rows(s: &Array2<f64>) -> Array2<f64> {
    let mut out = s.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub w0: Array2<f64>,
    pub w1: Array2<f64>,
    pub wc1: Array2<f64>,
    pub wc2: Array2<f64>,
}

impl ParamGrads {
    pub fn matrices(&self) -> [&Array2<f64>; 4] {
        [&self.w0, &self.w1, &self.wc1, &self.wc2]
    }
}

/// Reverse pass from `d_soft = dLoss/dC`. Returns weight gradients and the
/// gradient with respect to the normalized adjacency.
pub fn backward(
    p: &DetectorParams,
    cache: &ForwardCache,
    x: &Array2<f64>,
    d_soft: &Array2<f64>,
) -> (ParamGrads, Array2<f64>) {
    let c = &cache.soft;
    let inner = (d_soft * c).sum_axis(Axis(1)).insert_axis(Axis(1));
    let ds = c * &(d_soft - &inner);

    let dwc2 = cache.h1.t().dot(&ds);
    let mut dz1 = ds.dot(&p.wc2.t());
    if let Some(mask) = &cache.drop {
        dz1 *= mask;
    }
    Zip::from(&mut dz1).and(&cache.z1).for_each(|g, &z| {
        if z <= 0.0 {
            *g = 0.0
        }
    });
    let dwc1 = cache.h.t().dot(&dz1);
    let dh = dz1.dot(&p.wc1.t());

    let a = &cache.adj_norm;
    let mut d_adj = dh.dot(&cache.h0w1.t());
    let d_h0w1 = a.t().dot(&dh);
    let dw1 = cache.h0.t().dot(&d_h0w1);
    let mut dz0 = d_h0w1.dot(&p.w1.t());
    Zip::from(&mut dz0).and(&cache.z0).for_each(|g, &z| {
        if z <= 0.0 {
            *g = 0.0
        }
    });
    d_adj += &dz0.dot(&cache.xw0.t());
    let d_xw0 = a.t().dot(&dz0);
    let dw0 = x.t().dot(&d_xw0);

    (
        ParamGrads {
            w0: dw0,
            w1: dw1,
            wc1: dwc1,
            wc2: dwc2,
        },
        d_adj,
    )
}

/// Chains a gradient on `normalize_weights(W)` back to the symmetric pair
/// weights of `W`. Entry `(i, j)`, `i != j`, is the derivative with respect
/// to the single weight shared by `(i, j)` and `(j, i)`; the diagonal is 0.
pub fn normalize_weights_backward(
    weights: &Array2<f64>,
    adj_norm: &Array2<f64>,
    d_adj: &Array2<f64>,
) -> Array2<f64> {
    let n = weights.nrows();
    let t: Array1<f64> = weights.sum_axis(Axis(1)).mapv(|d| d + 1.0);
    let sym = d_adj + &d_adj.t();
    let gt: Array1<f64> = (&sym * adj_norm)
        .sum_axis(Axis(1))
        .iter()
        .zip(t.iter())
        .map(|(s, ti)| -0.5 * s / ti)
        .collect();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                out[[i, j]] = sym[[i, j]] / (t[i] * t[j]).sqrt() + gt[i] + gt[j];
            }
        }
    }
    out
}

/// Normalized-cut loss with balance penalty:
/// `(1/K) tr((C'LC) ./ (C'DC + eps)) + gamma * ||(K/N) C'C - I||_F^2`.
/// `weights` is the (possibly relaxed) adjacency that defines `L` and `D`.
pub fn unsupervised_loss(soft: &Array2<f64>, weights: &Array2<f64>, gamma: f64) -> Result<f64> {
    Ok(unsupervised_loss_grad(soft, weights, gamma)?.0)
}

pub fn unsupervised_loss_grad(
    soft: &Array2<f64>,
    weights: &Array2<f64>,
    gamma: f64,
) -> Result<(f64, Array2<f64>)> {
    if soft.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("non-finite assignment in loss".into()));
    }
    if soft.nrows() != weights.nrows() {
        return Err(Error::Dimension("assignment rows differ from node count".into()));
    }
    let (n, k) = soft.dim();
    let kf = k as f64;
    let (lap, deg) = laplacian_of(weights);
    let lc = lap.dot(soft);
    let dc = soft * &deg.clone().insert_axis(Axis(1));
    let mut loss = 0.0;
    let mut grad = Array2::zeros((n, k));
    for col in 0..k {
        let c = soft.column(col);
        let num = c.dot(&lc.column(col));
        let den = c.dot(&dc.column(col)) + CUT_EPSILON;
        loss += num / den / kf;
        let mut g = grad.column_mut(col);
        g.scaled_add(2.0 / (den * kf), &lc.column(col));
        g.scaled_add(-2.0 * num / (den * den * kf), &dc.column(col));
    }
    let scale = kf / n as f64;
    let mut m = soft.t().dot(soft) * scale;
    for i in 0..k {
        m[[i, i]] -= 1.0;
    }
    loss += gamma * m.iter().map(|v| v * v).sum::<f64>();
    grad.scaled_add(4.0 * gamma * scale, &soft.dot(&m));
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f64,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            lr: 0.001,
            lr_decay: 0.999,
            gamma: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: DetectorParams,
    pub loss_history: Vec<f64>,
}

/// Full-batch Adam on the unsupervised loss with exponential lr decay.
pub fn train(p: &DetectorParams, g: &Graph, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.epochs < 1 {
        return Err(Error::InvalidArgument("epochs must be >= 1".into()));
    }
    let weights = g.adjacency();
    let adj = normalize_weights(weights);
    let x = g.features();
    let mut params = p.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut m: Vec<Array2<f64>> = params.matrices().iter().map(|(_, w)| Array2::zeros(w.raw_dim())).collect();
    let mut v = m.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (assign, cache) = forward(&params, &adj, x, Some(&mut rng))?;
        let (loss, d_soft) = unsupervised_loss_grad(&assign.soft, weights, cfg.gamma)?;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("loss became {loss} at epoch {epoch}")));
        }
        history.push(loss);
        let (grads, _) = backward(&params, &cache, x, &d_soft);
        let lr = cfg.lr * cfg.lr_decay.powi(epoch as i32);
        let t = (epoch + 1) as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (((w, g), m), v) in params
            .matrices_mut()
            .into_iter()
            .zip(grads.matrices())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            Zip::from(w).and(g).and(m).and(v).for_each(|w, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
    Ok(TrainOutcome {
        params,
        loss_history: history,
    })
}

const CHECKPOINT_MAGIC: &str = "cdgame-detector v1";

/// Text checkpoint. Layout:
///
/// ```text
/// cdgame-detector v1
/// dropout <rate>
/// seed <u64>
/// matrix <name> <rows> <cols>
/// <cols space-separated values, one row per line>
/// ```
///
/// Values are written with Rust's shortest round-trip float formatting.
pub fn encode_checkpoint(p: &DetectorParams) -> String {
    let mut out = String::new();
    writeln!(out, "{CHECKPOINT_MAGIC}").unwrap();
    writeln!(out, "dropout {}", p.dropout_rate).unwrap();
    writeln!(out, "seed {}", p.seed).unwrap();
    for (name, w) in p.matrices() {
        writeln!(out, "matrix {name} {} {}", w.nrows(), w.ncols()).unwrap();
        for row in w.rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{}", cells.join(" ")).unwrap();
        }
    }
    out
}

pub fn decode_checkpoint(text: &str) -> Result<DetectorParams> {
    let perr = |m: String| Error::parse("checkpoint", m);
    let mut lines = text.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(perr("missing header".into()));
    }
    let mut dropout = None;
    let mut seed = None;
    let mut mats: Vec<(String, Array2<f64>)> = Vec::new();
    while let Some(line) = lines.next() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            [] => continue,
            ["dropout", v] => dropout = Some(v.parse::<f64>().map_err(|e| perr(e.to_string()))?),
            ["seed", v] => seed = Some(v.parse::<u64>().map_err(|e| perr(e.to_string()))?),
            ["matrix", name, r, c] => {
                let r: usize = r.parse().map_err(|_| perr(format!("bad rows {r}")))?;
                let c: usize = c.parse().map_err(|_| perr(format!("bad cols {c}")))?;
                let mut data = Vec::with_capacity(r * c);
                for _ in 0..r {
                    let row = lines.next().ok_or_else(|| perr(format!("{name}: truncated")))?;
                    let vals = row
                        .split_whitespace()
                        .map(|s| s.parse::<f64>().map_err(|e| perr(format!("{name}: {e}"))))
                        .collect::<Result<Vec<_>>>()?;
                    if vals.len() != c {
                        return Err(perr(format!("{name}: row has {} values, expected {c}", vals.len())));
                    }
                    data.extend(vals);
                }
                let m = Array2::from_shape_vec((r, c), data).map_err(|e| perr(e.to_string()))?;
                mats.push((name.to_string(), m));
            }
            _ => return Err(perr(format!("unexpected line {line:?}"))),
        }
    }
    let mut take = |name: &str| {
        mats.iter()
            .position(|(n, _)| n == name)
            .map(|i| mats.swap_remove(i).1)
            .ok_or_else(|| perr(format!("missing matrix {name}")))
    };
    let p = DetectorParams {
        w0: take("W0")?,
        w1: take("W1")?,
        wc1: take("Wc1")?,
        wc2: take("Wc2")?,
        dropout_rate: dropout.ok_or_else(|| perr("missing dropout".into()))?,
        seed: seed.ok_or_else(|| perr("missing seed".into()))?,
    };
    let d = p.dims();
    if p.w1.nrows() != d.h || p.wc1.nrows() != d.v || p.wc2.nrows() != d.r {
        return Err(perr("inconsistent layer shapes".into()));
    }
    Ok(p)
}

pub fn save_checkpoint(p: &DetectorParams, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(p)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<DetectorParams> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&text)
}
