//! Edge, 2-star and triangle counts in the Bernoulli random graph G(n, p).
//!
//! The embedding vector is `(T, V, U)` (edges, 2-stars, triangles),
//! centred and rescaled to `W₁ = ((n−2)T/n², V/n², U/n²) − mean`. The
//! coupling resamples one uniformly chosen vertex pair; it satisfies the
//! linearity condition with R = 0 and a lower bidiagonal Λ.
//!
//! Adjacency is stored as bit rows so common-neighbour counts are an AND
//! and a popcount per word.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matlite::{LowerMatrix, Square, SymMatrix};
use crate::mc::{self, Coupling, Estimate, McConfig, McError, StreamRng};
use crate::stein::DerivBounds;

/// Largest n for exhaustive enumeration (2^15 graphs).
pub const ENUMERATION_MAX_N: usize = 6;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("invalid model: need n >= 4 and 0 < p < 1, got n = {n}, p = {p}")]
    InvalidModel { n: usize, p: f64 },
    #[error("graphs need at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("enumeration is limited to n <= {ENUMERATION_MAX_N}, got {0}")]
    TooLarge(usize),
    #[error("edge list: {0}")]
    Parse(String),
}

#[inline]
pub fn choose(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc.round()
}

/// G(n, p) with `n >= 4` and `0 < p < 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphModel {
    n: usize,
    p: f64,
}

impl GraphModel {
    pub fn new(n: usize, p: f64) -> Result<Self, GraphError> {
        if n < 4 || !(p > 0.0 && p < 1.0) {
            return Err(GraphError::InvalidModel { n, p });
        }
        Ok(GraphModel { n, p })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// C(n, 2), the number of potential edges.
    pub fn pairs(&self) -> f64 {
        choose(self.n, 2)
    }

    /// Rescaling factors `((n−2)/n², 1/n², 1/n²)`.
    pub fn scales(&self) -> [f64; 3] {
        let n = self.n as f64;
        let n2 = n * n;
        [(n - 2.0) / n2, 1.0 / n2, 1.0 / n2]
    }
}

/// Simple undirected graph on `n` labelled vertices.
#[derive(Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    words: usize,
    bits: Vec<u64>,
}

impl std::fmt::Debug for Graph {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Graph(n={}, edges={:?})", self.n, self.edges())
    }
}

impl Graph {
    pub fn empty(n: usize) -> Result<Self, GraphError> {
        if n < 3 {
            return Err(GraphError::TooFewVertices(n));
        }
        let words = n.div_ceil(64);
        Ok(Graph {
            n,
            words,
            bits: vec![0; n * words],
        })
    }

    pub fn complete(n: usize) -> Result<Self, GraphError> {
        let mut g = Self::empty(n)?;
        for i in 0..n {
            for j in (i + 1)..n {
                g.set_edge(i, j, true);
            }
        }
        Ok(g)
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        let mut g = Self::empty(n)?;
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(GraphError::Parse(format!("edge ({i}, {j}) out of range for n = {n}")));
            }
            if i == j {
                return Err(GraphError::Parse(format!("self loop at {i}")));
            }
            if g.has_edge(i, j) {
                return Err(GraphError::Parse(format!("duplicate edge ({i}, {j})")));
            }
            g.set_edge(i, j, true);
        }
        Ok(g)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn row(&self, i: usize) -> &[u64] {
        &self.bits[i * self.words..(i + 1) * self.words]
    }

    #[inline]
    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.words + j / 64] >> (j % 64) & 1 == 1
    }

    pub fn set_edge(&mut self, i: usize, j: usize, on: bool) {
        debug_assert!(i != j);
        for (a, b) in [(i, j), (j, i)] {
            let w = &mut self.bits[a * self.words + b / 64];
            if on {
                *w |= 1 << (b % 64);
            } else {
                *w &= !(1 << (b % 64));
            }
        }
    }

    #[inline]
    pub fn degree(&self, i: usize) -> u64 {
        self.row(i).iter().map(|w| w.count_ones() as u64).sum()
    }

    /// |N(i) ∩ N(j)|.
    #[inline]
    pub fn common_neighbours(&self, i: usize, j: usize) -> u64 {
        self.row(i)
            .iter()
            .zip(self.row(j))
            .map(|(a, b)| (a & b).count_ones() as u64)
            .sum()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                if self.has_edge(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Whitespace edge list: `n m` header, then `m` lines `i j`, 0-based.
    pub fn to_edge_list(&self) -> String {
        let edges = self.edges();
        let mut s = format!("{} {}\n", self.n, edges.len());
        for (i, j) in edges {
            let _ = writeln!(s, "{i} {j}");
        }
        s
    }

    pub fn parse_edge_list(text: &str) -> Result<Self, GraphError> {
        let mut tokens = text.split_whitespace().map(|t| {
            t.parse::<usize>()
                .map_err(|_| GraphError::Parse(format!("not a vertex index: {t:?}")))
        });
        let mut next = |what: &str| {
            tokens
                .next()
                .unwrap_or_else(|| Err(GraphError::Parse(format!("missing {what}"))))
        };
        let n = next("vertex count")?;
        let m = next("edge count")?;
        let mut edges = Vec::with_capacity(m);
        for _ in 0..m {
            edges.push((next("edge endpoint")?, next("edge endpoint")?));
        }
        if tokens.next().is_some() {
            return Err(GraphError::Parse(format!("more than {m} edges listed")));
        }
        Self::from_edges(n, &edges)
    }
}

/// Edge, 2-star and triangle counts. `v = Σ_i C(deg_i, 2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CountVector {
    pub t: u64,
    pub v: u64,
    pub u: u64,
}

impl CountVector {
    pub fn as_f64(&self) -> [f64; 3] {
        [self.t as f64, self.v as f64, self.u as f64]
    }

    pub fn apply(&self, d: &CountDelta) -> CountVector {
        CountVector {
            t: (self.t as i64 + d.t) as u64,
            v: (self.v as i64 + d.v) as u64,
            u: (self.u as i64 + d.u) as u64,
        }
    }
}

/// Change in counts from one edge toggle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CountDelta {
    pub t: i64,
    pub v: i64,
    pub u: i64,
}

impl CountDelta {
    pub fn as_f64(&self) -> [f64; 3] {
        [self.t as f64, self.v as f64, self.u as f64]
    }
}

pub fn sample(model: &GraphModel, rng: &mut StreamRng) -> Graph {
    let n = model.n;
    let mut g = Graph::empty(n).expect("model has n >= 4");
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random::<f64>() < model.p {
                g.set_edge(i, j, true);
            }
        }
    }
    g
}

pub fn count(g: &Graph) -> CountVector {
    let mut t = 0;
    let mut v = 0;
    let mut tri = 0;
    for i in 0..g.n {
        let deg = g.degree(i);
        t += deg;
        v += deg * deg.saturating_sub(1) / 2;
        for j in (i + 1)..g.n {
            if g.has_edge(i, j) {
                tri += g.common_neighbours(i, j);
            }
        }
    }
    CountVector {
        t: t / 2,
        v,
        u: tri / 3,
    }
}

/// Centred and rescaled counts W₁.
pub fn scaled_counts(c: &CountVector, model: &GraphModel) -> [f64; 3] {
    let mean = exact_means(model);
    let s = model.scales();
    let raw = c.as_f64();
    [0, 1, 2].map(|k| s[k] * (raw[k] - mean[k]))
}

/// `(ET, EV, EU) = (C(n,2)p, 3C(n,3)p², C(n,3)p³)`.
pub fn exact_means(model: &GraphModel) -> [f64; 3] {
    let (n, p) = (model.n, model.p);
    [choose(n, 2) * p, 3.0 * choose(n, 3) * p * p, choose(n, 3) * p.powi(3)]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExactMoments {
    pub means: [f64; 3],
    /// Covariance of the raw counts (T, V, U).
    pub cov: [[f64; 3]; 3],
    /// Covariance of the rescaled vector.
    pub sigma1: SymMatrix,
    /// The rank-one n → ∞ limit of `sigma1`.
    pub sigma0: SymMatrix,
}

/// Closed-form moments of (T, V, U) under G(n, p).
pub fn exact_moments(model: &GraphModel) -> ExactMoments {
    let (n, p) = (model.n, model.p);
    let nf = n as f64;
    let q = 1.0 - p;
    let c2 = choose(n, 2);
    let c3 = choose(n, 3);

    let var_t = c2 * p * q;
    let var_v = 3.0 * c3 * p * p * q * (q + 4.0 * (nf - 2.0) * p);
    let var_u = c3 * p.powi(3) * q * (q * q + 3.0 * p * q + 3.0 * (nf - 2.0) * p * p);
    let cov_tv = 6.0 * c3 * p * p * q;
    let cov_tu = 3.0 * c3 * p.powi(3) * q;
    let cov_vu = 3.0 * c3 * p.powi(3) * q * (q + 2.0 * (nf - 2.0) * p);

    ExactMoments {
        means: exact_means(model),
        cov: [
            [var_t, cov_tv, cov_tu],
            [cov_tv, var_v, cov_vu],
            [cov_tu, cov_vu, var_u],
        ],
        sigma1: sigma1(model),
        sigma0: sigma0(p),
    }
}

/// Covariance of W₁ in its factored closed form.
pub fn sigma1(model: &GraphModel) -> SymMatrix {
    let (n, p) = (model.n, model.p);
    let nf = n as f64;
    let q = 1.0 - p;
    let pre = 3.0 * (nf - 2.0) * choose(n, 3) / nf.powi(4) * p * q;
    let m = [
        [1.0, 2.0 * p, p * p],
        [
            2.0 * p,
            4.0 * p * p + p * q / (nf - 2.0),
            2.0 * p.powi(3) + p * p * q / (nf - 2.0),
        ],
        [
            p * p,
            2.0 * p.powi(3) + p * p * q / (nf - 2.0),
            p.powi(4) + p * p * (1.0 + p - 2.0 * p * p) / (3.0 * (nf - 2.0)),
        ],
    ];
    SymMatrix::from_upper(3, |i, j| pre * m[i][j])
}

/// `½p(1−p)·vvᵗ` with `v = (1, 2p, p²)`.
pub fn sigma0(p: f64) -> SymMatrix {
    let c = 0.5 * p * (1.0 - p);
    let v = [1.0, 2.0 * p, p * p];
    SymMatrix::from_upper(3, |i, j| c * v[i] * v[j])
}

/// Moments from summing over every labelled graph.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnumeratedMoments {
    pub graphs: u64,
    pub means: [f64; 3],
    pub cov: [[f64; 3]; 3],
    pub sigma1: SymMatrix,
}

fn all_graphs(model: &GraphModel) -> Result<impl Iterator<Item = (Graph, f64)> + '_, GraphError> {
    let n = model.n;
    if n > ENUMERATION_MAX_N {
        return Err(GraphError::TooLarge(n));
    }
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect();
    let e = pairs.len();
    let p = model.p;
    Ok((0u64..1 << e).map(move |mask| {
        let mut g = Graph::empty(n).expect("n >= 4");
        for (b, &(i, j)) in pairs.iter().enumerate() {
            if mask >> b & 1 == 1 {
                g.set_edge(i, j, true);
            }
        }
        let t = mask.count_ones() as i32;
        (g, p.powi(t) * (1.0 - p).powi(e as i32 - t))
    }))
}

/// Exact moments of (T, V, U) by weighting all `2^C(n,2)` graphs.
pub fn enumerate_exact(model: &GraphModel) -> Result<EnumeratedMoments, GraphError> {
    let counts: Vec<([f64; 3], f64)> = all_graphs(model)?.map(|(g, w)| (count(&g).as_f64(), w)).collect();
    let mut means = [0.0; 3];
    for (c, w) in &counts {
        for k in 0..3 {
            means[k] += w * c[k];
        }
    }
    let mut cov = [[0.0; 3]; 3];
    for (c, w) in &counts {
        for k in 0..3 {
            for l in 0..3 {
                cov[k][l] += w * (c[k] - means[k]) * (c[l] - means[l]);
            }
        }
    }
    let s = model.scales();
    Ok(EnumeratedMoments {
        graphs: counts.len() as u64,
        means,
        cov,
        sigma1: SymMatrix::from_upper(3, |k, l| s[k] * s[l] * cov[k][l]),
    })
}

/// Λ of the edge-resampling pair in rescaled coordinates:
/// `C(n,2)⁻¹ [[1,0,0],[−2p,2,0],[0,−p,3]]`.
pub fn lambda_graph(model: &GraphModel) -> LowerMatrix {
    let p = model.p;
    let c = 1.0 / model.pairs();
    LowerMatrix::from_rows(&[
        [c, 0.0, 0.0],
        [-2.0 * p * c, 2.0 * c, 0.0],
        [0.0, -p * c, 3.0 * c],
    ])
    .expect("lower by construction")
}

/// Count change if pair `(i, j)` is set to `on`.
pub fn edge_delta(g: &Graph, i: usize, j: usize, on: bool) -> CountDelta {
    let old = g.has_edge(i, j);
    if old == on {
        return CountDelta::default();
    }
    let sign = if on { 1 } else { -1 };
    let other = (g.degree(i) + g.degree(j)) as i64 - 2 * old as i64;
    CountDelta {
        t: sign,
        v: sign * other,
        u: sign * g.common_neighbours(i, j) as i64,
    }
}

/// Uniform unordered pair `i < j`.
pub fn random_pair(n: usize, rng: &mut StreamRng) -> (usize, usize) {
    let i = rng.random_range(0..n);
    let mut j = rng.random_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    (i.min(j), i.max(j))
}

/// One step of the coupling: a uniformly chosen pair has its indicator
/// redrawn as Bernoulli(p).
#[derive(Debug, Clone)]
pub struct PairStep {
    pub graph: Graph,
    pub pair: (usize, usize),
    pub delta: CountDelta,
}

pub fn pair_step(g: &Graph, model: &GraphModel, rng: &mut StreamRng) -> PairStep {
    let (i, j) = random_pair(g.n, rng);
    let on = rng.random::<f64>() < model.p;
    let delta = edge_delta(g, i, j, on);
    let mut graph = g.clone();
    graph.set_edge(i, j, on);
    PairStep {
        graph,
        pair: (i, j),
        delta,
    }
}

/// `E[(T′−T, V′−V, U′−U) | g]` in raw counts:
/// `(p − T/C, (2p(n−2)T − 2V)/C, (pV − 3U)/C)` with `C = C(n,2)`.
pub fn cond_mean(c: &CountVector, model: &GraphModel) -> [f64; 3] {
    let p = model.p;
    let nf = model.n as f64;
    let pairs = model.pairs();
    let [t, v, u] = c.as_f64();
    [
        p - t / pairs,
        (2.0 * p * (nf - 2.0) * t - 2.0 * v) / pairs,
        (p * v - 3.0 * u) / pairs,
    ]
}

pub fn cond_mean_scaled(c: &CountVector, model: &GraphModel) -> [f64; 3] {
    let s = model.scales();
    let m = cond_mean(c, model);
    [0, 1, 2].map(|k| s[k] * m[k])
}

/// `E[ΔₖΔₗ | g]` for the raw count changes, by summing over all pairs:
/// each pair is chosen with probability `1/C(n,2)` and actually flips with
/// probability `p + (1−2p)I_ij`, and then moves the counts by
/// `±(1, N_i + N_j − 2I_ij, M_ij)`.
pub fn cond_products(g: &Graph, model: &GraphModel) -> [[f64; 3]; 3] {
    let p = model.p;
    let n = g.n;
    let deg: Vec<f64> = (0..n).map(|i| g.degree(i) as f64).collect();
    let mut acc = [[0.0; 3]; 3];
    for i in 0..n {
        for j in (i + 1)..n {
            let e = g.has_edge(i, j) as u8 as f64;
            let flip = p + (1.0 - 2.0 * p) * e;
            let a = [1.0, deg[i] + deg[j] - 2.0 * e, g.common_neighbours(i, j) as f64];
            for k in 0..3 {
                for l in 0..3 {
                    acc[k][l] += flip * a[k] * a[l];
                }
            }
        }
    }
    let pairs = model.pairs();
    acc.map(|row| row.map(|x| x / pairs))
}

pub fn cond_products_scaled(g: &Graph, model: &GraphModel) -> [[f64; 3]; 3] {
    let s = model.scales();
    let raw = cond_products(g, model);
    let mut out = [[0.0; 3]; 3];
    for k in 0..3 {
        for l in 0..3 {
            out[k][l] = s[k] * s[l] * raw[k][l];
        }
    }
    out
}

/// `E[Δ | g]` in raw counts, accumulated pair by pair from single-toggle
/// deltas, together with the sum of absolute contributions.
pub fn cond_mean_by_pairs(g: &Graph, model: &GraphModel) -> ([f64; 3], [f64; 3]) {
    let p = model.p;
    let pairs = model.pairs();
    let mut mean = [0.0; 3];
    let mut mag = [0.0; 3];
    for i in 0..g.n {
        for j in (i + 1)..g.n {
            let e = g.has_edge(i, j);
            let flip = if e { 1.0 - p } else { p };
            let d = edge_delta(g, i, j, !e).as_f64();
            for k in 0..3 {
                let c = flip * d[k] / pairs;
                mean[k] += c;
                mag[k] += c.abs();
            }
        }
    }
    (mean, mag)
}

/// `E[W′₁ − W₁ | g] + ΛW₁` per coordinate, with the conditional mean taken
/// pair by pair, and a magnitude bounding the rounding in both terms.
pub fn drift_residual(g: &Graph, model: &GraphModel) -> ([f64; 3], [f64; 3]) {
    let (m, mag) = cond_mean_by_pairs(g, model);
    let s = model.scales();
    let c = count(g);
    let raw = c.as_f64();
    let mean = exact_means(model);
    let w = scaled_counts(&c, model);
    let l = lambda_graph(model);
    let mut res = [0.0; 3];
    let mut scale = [0.0; 3];
    for k in 0..3 {
        let mut lw = 0.0;
        let mut lmag = 0.0;
        for j in 0..3 {
            lw += l.get(k, j) * w[j];
            lmag += l.get(k, j).abs() * s[j] * (raw[j] + mean[j]);
        }
        res[k] = s[k] * m[k] + lw;
        scale[k] = s[k] * mag[k] + lmag;
    }
    (res, scale)
}

/// Monte Carlo `(E|T′−T|³, E|V′−V|³, E|U′−U|³)` over graph and pair draws.
pub fn third_moments_mc(model: &GraphModel, nsamples: u64, cfg: &McConfig) -> Result<Vec<Estimate>, McError> {
    mc::estimate_many(cfg, nsamples, 3, |rng, out| {
        let g = sample(model, rng);
        let (i, j) = random_pair(model.n, rng);
        let on = rng.random::<f64>() < model.p;
        let d = edge_delta(&g, i, j, on).as_f64();
        for k in 0..3 {
            out[k] = d[k].abs().powi(3);
        }
    })
}

/// Draws W₁ for a fresh graph.
pub fn sample_scaled(model: &GraphModel, rng: &mut StreamRng) -> Vec<f64> {
    scaled_counts(&count(&sample(model, rng)), model).to_vec()
}

/// `Var E[(T′−T)² | W] = (1−2p)² p(1−p) / C(n,2)`.
pub fn cond_tt_variance(model: &GraphModel) -> f64 {
    let p = model.p;
    (1.0 - 2.0 * p).powi(2) * p * (1.0 - p) / model.pairs()
}

/// `Var E[(T′−T)(V′−V) | W]`.
pub fn cond_tv_variance(model: &GraphModel) -> f64 {
    let (p, nf) = (model.p, model.n as f64);
    4.0 * (nf - 2.0) / model.pairs()
        * p
        * (1.0 - p)
        * ((nf - 2.0) * p * p * (3.0 - 4.0 * p).powi(2) + (1.0 - 2.0 * p).powi(2) * p * (1.0 - p))
}

/// `Var E[(T′−T)(U′−U) | W]`.
pub fn cond_tu_variance(model: &GraphModel) -> f64 {
    let (p, nf) = (model.p, model.n as f64);
    let q = 1.0 - p;
    (nf - 2.0) / model.pairs()
        * p.powi(3)
        * q
        * (3.0 * (1.0 - 2.0 * p).powi(2) * q * q
            + p * q * (4.0 - 6.0 * p).powi(2)
            + (nf - 2.0) * p * p * (5.0 - 6.0 * p).powi(2))
}

/// `(E|T′−T|³, E|V′−V|³, E|U′−U|³)`.
///
/// Given a flip of pair (i, j), `|V′−V| = Σ_k (I_ik + I_jk)` and
/// `|U′−U| = Σ_k I_ik I_jk` over the other `n−2` vertices, so the cubes
/// expand over triples (k, l, s) into all-equal, two-equal (three
/// arrangements) and all-distinct terms.
pub fn third_moments_exact(model: &GraphModel) -> [f64; 3] {
    let (p, nf) = (model.p, model.n as f64);
    let flip = 2.0 * p * (1.0 - p);
    let v = flip
        * (nf - 2.0)
        * (8.0 * p * p
            + 2.0 * p * (1.0 - p)
            + 6.0 * (nf - 3.0) * (2.0 * p * p + 2.0 * p.powi(3))
            + 8.0 * (nf - 3.0) * (nf - 4.0) * p.powi(3));
    let u = flip
        * (nf - 2.0)
        * (p * p + 3.0 * (nf - 3.0) * p.powi(4) + (nf - 3.0) * (nf - 4.0) * p.powi(6));
    [flip, v, u]
}

/// The same three moments with the two-equal terms counted once instead
/// of three times. Kept for comparison with published values; it
/// underestimates the V and U moments whenever n > 3.
pub fn third_moments_single_arrangement(model: &GraphModel) -> [f64; 3] {
    let (p, nf) = (model.p, model.n as f64);
    let flip = 2.0 * p * (1.0 - p);
    let v = flip
        * (nf - 2.0)
        * (8.0 * p * p
            + 2.0 * p * (1.0 - p)
            + 2.0 * (nf - 3.0) * (2.0 * p * p + 2.0 * p.powi(3))
            + 8.0 * (nf - 3.0) * (nf - 4.0) * p.powi(3));
    let u = flip * (nf - 2.0) * (p * p + (nf - 3.0) * p.powi(4) + (nf - 3.0) * (nf - 4.0) * p.powi(6));
    [flip, v, u]
}

/// Third absolute moments by enumerating every graph and every pair.
pub fn third_moments_enumerated(model: &GraphModel) -> Result<[f64; 3], GraphError> {
    let p = model.p;
    let pairs = model.pairs();
    let mut acc = [0.0; 3];
    for (g, w) in all_graphs(model)? {
        for i in 0..g.n {
            for j in (i + 1)..g.n {
                let e = g.has_edge(i, j);
                let flip = if e { 1.0 - p } else { p };
                let d = edge_delta(&g, i, j, !e).as_f64();
                for k in 0..3 {
                    acc[k] += w * flip * d[k].abs().powi(3) / pairs;
                }
            }
        }
    }
    Ok(acc)
}

/// Smooth-function bound for W₁ against N(0, Σ₁):
/// `|h|₂/n·(35/4 + 9/n) + 8|h|₃/(3n)·(1 + 1/n + 1/n²)`.
pub fn prop_bound(n: usize, db: &DerivBounds) -> f64 {
    let n = n as f64;
    db.h2 / n * (35.0 / 4.0 + 9.0 / n) + 8.0 * db.h3 / (3.0 * n) * (1.0 + 1.0 / n + 1.0 / (n * n))
}

/// Smooth-function bound for W₁ against the rank-one limit N(0, Σ₀):
/// `|h|₂/(2n)·(44 + 21/n + 32/n² + 4/n³) + 8|h|₃/(3n)·(1 + 1/n + 1/n²)`.
pub fn corollary_bound(n: usize, db: &DerivBounds) -> f64 {
    let n = n as f64;
    db.h2 / (2.0 * n) * (44.0 + 21.0 / n + 32.0 / (n * n) + 4.0 / n.powi(3))
        + 8.0 * db.h3 / (3.0 * n) * (1.0 + 1.0 / n + 1.0 / (n * n))
}

/// Upper bound on `Σ_{i,j} |Σ₁ − Σ₀|_{ij}`: `26/n + 3/n² + 32/n³ + 4/n⁴`.
pub fn sigma_gap_bound(n: usize) -> f64 {
    let n = n as f64;
    26.0 / n + 3.0 / (n * n) + 32.0 / n.powi(3) + 4.0 / n.powi(4)
}

/// The edge-resampling exchangeable pair on rescaled counts.
#[derive(Debug, Clone, Copy)]
pub struct GraphCoupling {
    pub model: GraphModel,
}

impl GraphCoupling {
    pub fn new(model: GraphModel) -> Self {
        GraphCoupling { model }
    }
}

pub struct GraphState {
    pub graph: Graph,
    pub counts: CountVector,
}

impl Coupling for GraphCoupling {
    type State = GraphState;

    fn dim(&self) -> usize {
        3
    }

    fn draw_state(&self, rng: &mut StreamRng) -> GraphState {
        let graph = sample(&self.model, rng);
        let counts = count(&graph);
        GraphState { graph, counts }
    }

    fn embed(&self, s: &GraphState) -> Vec<f64> {
        scaled_counts(&s.counts, &self.model).to_vec()
    }

    fn draw_delta(&self, s: &GraphState, rng: &mut StreamRng) -> Vec<f64> {
        let (i, j) = random_pair(self.model.n, rng);
        let on = rng.random::<f64>() < self.model.p;
        let d = edge_delta(&s.graph, i, j, on).as_f64();
        let sc = self.model.scales();
        vec![sc[0] * d[0], sc[1] * d[1], sc[2] * d[2]]
    }

    fn lambda(&self) -> LowerMatrix {
        lambda_graph(&self.model)
    }

    fn cond_products(&self, s: &GraphState) -> Option<Vec<f64>> {
        Some(cond_products_scaled(&s.graph, &self.model).concat())
    }

    fn cond_mean(&self, s: &GraphState) -> Option<Vec<f64>> {
        Some(cond_mean_scaled(&s.counts, &self.model).to_vec())
    }

    fn remainder_free(&self) -> bool {
        true
    }
}

/// `Λ·W₁` for the given counts.
pub fn lambda_times_scaled(c: &CountVector, model: &GraphModel) -> [f64; 3] {
    let w = scaled_counts(c, model);
    let l: Square = lambda_graph(model).into();
    let v = l.matvec(&w).expect("3x3");
    [v[0], v[1], v[2]]
}
