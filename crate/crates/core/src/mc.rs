//! Seeded Monte Carlo engine.
//!
//! Work is cut into fixed-size blocks of `BLOCK_SIZE` samples. Block `b`
//! draws from ChaCha stream `b` of the run seed, and block accumulators are
//! merged in block order after the parallel map. Results are therefore
//! bit-identical for a given seed whatever the worker count.
//!
//! The module also carries the library of smooth test functions (with
//! analytic derivative certificates), the discrepancy estimator
//! `Êh(W) − Êh(Σ^{1/2}Z)`, the [`Coupling`] abstraction shared by the three
//! embeddings, and the estimator of the A/B/C statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matlite::{LowerMatrix, MatError, Square, SymMatrix};
use crate::stein::{AbcStats, DerivBounds, Provenance};

/// Samples per RNG stream. Part of the reproducibility contract: changing
/// it changes every seeded result.
pub const BLOCK_SIZE: u64 = 1024;

/// Global statistical tolerance, in standard errors.
pub const SIGMA_TOL: f64 = 4.0;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Error)]
pub enum McError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(u64),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("coupling has no exact conditional moments and no inner sample count was given")]
    NoConditionalForm,
    #[error("unknown test function {0:?}")]
    UnknownTestFunction(String),
    #[error("failed to build worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Mat(#[from] MatError),
}

/// RNG for stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Independent sub-seed for a named stage of a run (splitmix64 finaliser).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McConfig {
    pub seed: u64,
    /// Worker count; `None` uses the global rayon pool.
    pub threads: Option<usize>,
}

impl McConfig {
    pub fn new(seed: u64) -> Self {
        McConfig { seed, threads: None }
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = Some(threads);
        self
    }

    /// Same worker settings, seed derived for stage `tag`.
    pub fn stage(&self, tag: u64) -> Self {
        McConfig {
            seed: derive_seed(self.seed, tag),
            threads: self.threads,
        }
    }
}

pub trait Merge {
    fn merge(&mut self, other: Self);
}

/// Parallel map over blocks, ordered reduction.
pub fn map_reduce<A, I, F>(cfg: &McConfig, nsamples: u64, init: I, per_sample: F) -> Result<A, McError>
where
    A: Merge + Send,
    I: Fn() -> A + Sync,
    F: Fn(&mut StreamRng, &mut A) + Sync,
{
    let nblocks = nsamples.div_ceil(BLOCK_SIZE);
    let run = || {
        (0..nblocks)
            .into_par_iter()
            .map(|b| {
                let mut rng = stream_rng(cfg.seed, b);
                let mut acc = init();
                let len = BLOCK_SIZE.min(nsamples - b * BLOCK_SIZE);
                for _ in 0..len {
                    per_sample(&mut rng, &mut acc);
                }
                acc
            })
            .collect::<Vec<A>>()
    };
    let parts = match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| McError::Pool(e.to_string()))?
            .install(run),
        None => run(),
    };
    let mut total = init();
    for p in parts {
        total.merge(p);
    }
    Ok(total)
}

/// Streaming mean and variance (Welford; Chan et al. for merging).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Welford {
    pub count: u64,
    pub mean: f64,
    m2: f64,
}

impl Welford {
    #[inline]
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn stderr(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }

    pub fn estimate(&self, seed: u64) -> Estimate {
        Estimate {
            mean: self.mean,
            stderr: self.stderr(),
            count: self.count,
            seed,
        }
    }
}

impl Merge for Welford {
    fn merge(&mut self, other: Self) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other;
            return;
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let n = na + nb;
        let delta = other.mean - self.mean;
        self.mean += delta * nb / n;
        self.m2 += other.m2 + delta * delta * na * nb / n;
        self.count += other.count;
    }
}

impl Merge for Vec<Welford> {
    fn merge(&mut self, other: Self) {
        for (a, b) in self.iter_mut().zip(other) {
            a.merge(b);
        }
    }
}

/// Central moments up to order four, mergeable (Pébay's pairwise update).
/// Used where the standard error of a variance is needed.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments4 {
    pub count: u64,
    pub mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

impl Moments4 {
    #[inline]
    pub fn push(&mut self, x: f64) {
        self.merge(Moments4 {
            count: 1,
            mean: x,
            ..Default::default()
        });
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    /// Large-sample standard error of [`Self::variance`]: √((μ₄ − σ⁴)/n).
    pub fn variance_stderr(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        let n = self.count as f64;
        let mu2 = self.m2 / n;
        let mu4 = self.m4 / n;
        ((mu4 - mu2 * mu2).max(0.0) / n).sqrt()
    }
}

impl Merge for Moments4 {
    fn merge(&mut self, o: Self) {
        if o.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = o;
            return;
        }
        let na = self.count as f64;
        let nb = o.count as f64;
        let n = na + nb;
        let d = o.mean - self.mean;
        let d2 = d * d;
        let m2 = self.m2 + o.m2 + d2 * na * nb / n;
        let m3 = self.m3
            + o.m3
            + d2 * d * na * nb * (na - nb) / (n * n)
            + 3.0 * d * (na * o.m2 - nb * self.m2) / n;
        let m4 = self.m4
            + o.m4
            + d2 * d2 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
            + 6.0 * d2 * (na * na * o.m2 + nb * nb * self.m2) / (n * n)
            + 4.0 * d * (na * o.m3 - nb * self.m3) / n;
        self.mean += d * nb / n;
        self.m2 = m2;
        self.m3 = m3;
        self.m4 = m4;
        self.count += o.count;
    }
}

impl Merge for Vec<Moments4> {
    fn merge(&mut self, other: Self) {
        for (a, b) in self.iter_mut().zip(other) {
            a.merge(b);
        }
    }
}

/// A Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub count: u64,
    pub seed: u64,
}

impl Estimate {
    /// `(mean − target) / stderr`; zero when both the difference and the
    /// stderr vanish.
    pub fn z_score(&self, target: f64) -> f64 {
        let diff = self.mean - target;
        if diff == 0.0 {
            0.0
        } else {
            diff / self.stderr
        }
    }

    pub fn within_sigma(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.stderr
    }
}

/// Mean of a scalar functional of one random draw.
pub fn estimate<F>(cfg: &McConfig, nsamples: u64, functional: F) -> Result<Estimate, McError>
where
    F: Fn(&mut StreamRng) -> f64 + Sync,
{
    if nsamples < 2 {
        return Err(McError::TooFewSamples(nsamples));
    }
    let acc = map_reduce(cfg, nsamples, Welford::default, |rng, acc| {
        acc.push(functional(rng))
    })?;
    Ok(acc.estimate(cfg.seed))
}

/// Means of `k` functionals evaluated on the same draw.
pub fn estimate_many<F>(cfg: &McConfig, nsamples: u64, k: usize, functional: F) -> Result<Vec<Estimate>, McError>
where
    F: Fn(&mut StreamRng, &mut [f64]) + Sync,
{
    if nsamples < 2 {
        return Err(McError::TooFewSamples(nsamples));
    }
    let acc = map_reduce(
        cfg,
        nsamples,
        || vec![Welford::default(); k],
        |rng, acc| {
            let mut buf = vec![0.0; k];
            functional(rng, &mut buf);
            for (a, x) in acc.iter_mut().zip(&buf) {
                a.push(*x);
            }
        },
    )?;
    Ok(acc.iter().map(|w| w.estimate(cfg.seed)).collect())
}

/// Vector of i.i.d. standard normals.
pub fn standard_normal_vec(rng: &mut StreamRng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

// sup |σ''| for the logistic function, attained at σ = (3 − √3)/6
const SIGMOID_D2: f64 = 0.096_225_044_864_937_63;
const SIGMOID_D1: f64 = 0.25;
const SIGMOID_D3: f64 = 0.125;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "coeffs", rename_all = "snake_case")]
pub enum TestFunctionKind {
    /// `a·x`
    Linear(Vec<f64>),
    /// `cos(a·x)`
    Cosine(Vec<f64>),
    /// `∏ σ(a_i x_i)` with the logistic σ.
    SigmoidProduct(Vec<f64>),
}

/// Smooth test function with analytic bounds on its first three partial
/// derivatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub name: String,
    pub kind: TestFunctionKind,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl TestFunction {
    pub fn cosine(a: Vec<f64>) -> Self {
        TestFunction {
            name: format!("cos{:?}", a),
            kind: TestFunctionKind::Cosine(a),
        }
    }

    pub fn linear(a: Vec<f64>) -> Self {
        TestFunction {
            name: format!("lin{:?}", a),
            kind: TestFunctionKind::Linear(a),
        }
    }

    pub fn sigmoid_product(a: Vec<f64>) -> Self {
        TestFunction {
            name: format!("sig{:?}", a),
            kind: TestFunctionKind::SigmoidProduct(a),
        }
    }

    /// Parses `cos111`, `lin12`, `sig0.5,1` style names: a family prefix
    /// followed by the coefficients, either as single digits or as a
    /// comma-separated list.
    pub fn parse(name: &str) -> Result<Self, McError> {
        let bad = || McError::UnknownTestFunction(name.to_string());
        let (prefix, rest) = name.split_at(name.len().min(3));
        let coeffs: Vec<f64> = if rest.contains(',') {
            rest.split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
                .collect::<Result<_, _>>()?
        } else {
            rest.chars()
                .map(|c| c.to_digit(10).map(f64::from).ok_or_else(bad))
                .collect::<Result<_, _>>()?
        };
        if coeffs.is_empty() || coeffs.iter().any(|c| !c.is_finite()) {
            return Err(bad());
        }
        let kind = match prefix {
            "cos" => TestFunctionKind::Cosine(coeffs),
            "lin" => TestFunctionKind::Linear(coeffs),
            "sig" => TestFunctionKind::SigmoidProduct(coeffs),
            _ => return Err(bad()),
        };
        Ok(TestFunction {
            name: name.to_string(),
            kind,
        })
    }

    pub fn coeffs(&self) -> &[f64] {
        match &self.kind {
            TestFunctionKind::Linear(a)
            | TestFunctionKind::Cosine(a)
            | TestFunctionKind::SigmoidProduct(a) => a,
        }
    }

    pub fn dim(&self) -> usize {
        self.coeffs().len()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match &self.kind {
            TestFunctionKind::Linear(a) => a.iter().zip(x).map(|(a, x)| a * x).sum(),
            TestFunctionKind::Cosine(a) => a.iter().zip(x).map(|(a, x)| a * x).sum::<f64>().cos(),
            TestFunctionKind::SigmoidProduct(a) => {
                a.iter().zip(x).map(|(a, x)| logistic(a * x)).product()
            }
        }
    }

    /// Certified suprema |h|₁, |h|₂, |h|₃.
    pub fn bounds(&self) -> DerivBounds {
        let a = self.coeffs();
        let amax = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        match &self.kind {
            TestFunctionKind::Linear(_) => DerivBounds::new(amax, 0.0, 0.0),
            TestFunctionKind::Cosine(_) => DerivBounds::new(amax, amax * amax, amax * amax * amax),
            TestFunctionKind::SigmoidProduct(_) => {
                let d = a.len();
                let abs: Vec<f64> = a.iter().map(|x| x.abs()).collect();
                let mut h2 = 0.0f64;
                let mut h3 = 0.0f64;
                for i in 0..d {
                    h2 = h2.max(abs[i] * abs[i] * SIGMOID_D2);
                    h3 = h3.max(abs[i].powi(3) * SIGMOID_D3);
                    for j in 0..d {
                        if j == i {
                            continue;
                        }
                        h2 = h2.max(abs[i] * abs[j] * SIGMOID_D1 * SIGMOID_D1);
                        h3 = h3.max(abs[i] * abs[i] * abs[j] * SIGMOID_D2 * SIGMOID_D1);
                        for k in 0..d {
                            if k != i && k != j {
                                h3 = h3.max(abs[i] * abs[j] * abs[k] * SIGMOID_D1.powi(3));
                            }
                        }
                    }
                }
                DerivBounds::new(amax * SIGMOID_D1, h2, h3)
            }
        }
    }
}

/// Estimates `Eh(W) − Eh(Σ^{1/2}Z)`. Each sample pairs one draw of `W`
/// with one independent standard normal `Z`, so the reported stderr covers
/// both arms.
pub fn discrepancy<S>(
    h: &TestFunction,
    w_sampler: S,
    sigma_half: &SymMatrix,
    nsamples: u64,
    cfg: &McConfig,
) -> Result<Estimate, McError>
where
    S: Fn(&mut StreamRng) -> Vec<f64> + Sync,
{
    let d = sigma_half.dim();
    if h.dim() != d {
        return Err(McError::DimensionMismatch(h.dim(), d));
    }
    estimate(cfg, nsamples, |rng| {
        let w = w_sampler(rng);
        let z = standard_normal_vec(rng, d);
        let y = sigma_half.as_square().matvec(&z).expect("dimension checked");
        h.eval(&w) - h.eval(&y)
    })
}

/// An exchangeable pair built by resampling one piece of an underlying
/// random state. `embed` is the centred embedding vector W; `draw_delta`
/// draws W′ − W for a given state.
pub trait Coupling: Sync {
    type State: Send;

    fn dim(&self) -> usize;

    fn draw_state(&self, rng: &mut StreamRng) -> Self::State;

    fn embed(&self, state: &Self::State) -> Vec<f64>;

    fn draw_delta(&self, state: &Self::State, rng: &mut StreamRng) -> Vec<f64>;

    /// Drift matrix Λ of `E[W′ − W | W] = −ΛW + R`.
    fn lambda(&self) -> LowerMatrix;

    /// Exact `E[(W′−W)(W′−W)ᵗ | state]`, row-major d×d, when available.
    fn cond_products(&self, _state: &Self::State) -> Option<Vec<f64>> {
        None
    }

    /// Exact `E[W′ − W | state]`, when available.
    fn cond_mean(&self, _state: &Self::State) -> Option<Vec<f64>> {
        None
    }

    /// True when the coupling is known to satisfy the linearity condition
    /// with R = 0.
    fn remainder_free(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbcMode {
    /// Conditional moments from the coupling's closed forms.
    ExactConditional,
    /// Conditional moments from an inner sample per outer state, debiased.
    Nested { inner: u64 },
}

#[derive(Debug, Clone)]
pub struct AbcOptions {
    pub nsamples: u64,
    /// Inner draws per state; used only when the coupling has no exact
    /// conditional moments, or when `force_nested` is set.
    pub inner_nsamples: Option<u64>,
    pub force_nested: bool,
    /// Optional linear map applied to W′ − W and R (Σ^{-1/2} for the
    /// non-smooth primed statistics).
    pub transform: Option<Square>,
}

impl AbcOptions {
    pub fn exact(nsamples: u64) -> Self {
        AbcOptions {
            nsamples,
            inner_nsamples: None,
            force_nested: false,
            transform: None,
        }
    }
}

/// A, B, C with the pieces they were assembled from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AbcReport {
    pub stats: AbcStats,
    pub mode: AbcMode,
    pub weights: Vec<f64>,
    /// √Var E[(W′_i−W_i)(W′_j−W_j) | state], row-major.
    pub cond_sd: Vec<f64>,
    /// Standard errors of `cond_sd`.
    pub cond_sd_stderr: Vec<f64>,
    /// E|W′_i − W_i|³ for each coordinate.
    pub third_abs: Vec<Estimate>,
    /// Largest entry of `cond_sd`.
    pub sup_cond_sd: f64,
    pub nsamples: u64,
}

#[derive(Clone)]
struct AbcAcc {
    prod: Vec<Moments4>,
    inner_var: Vec<Welford>,
    triple: Vec<Welford>,
    rem_sq: Vec<Welford>,
    rem_var: Vec<Welford>,
}

impl Merge for AbcAcc {
    fn merge(&mut self, o: Self) {
        self.prod.merge(o.prod);
        self.inner_var.merge(o.inner_var);
        self.triple.merge(o.triple);
        self.rem_sq.merge(o.rem_sq);
        self.rem_var.merge(o.rem_var);
    }
}

fn apply(t: Option<&Square>, v: Vec<f64>) -> Vec<f64> {
    match t {
        Some(t) => t.matvec(&v).expect("transform dimension checked"),
        None => v,
    }
}

/// Estimates the A, B, C statistics of the smooth bound, weighted by
/// `weights` (λ⁽ⁱ⁾, or λ̂⁽ⁱ⁾ together with a Σ^{-1/2} transform).
///
/// Conditioning is on the full underlying state rather than on W alone.
/// Since `Var E[X|W] ≤ Var E[X|state]` and likewise for R, the resulting A
/// and C upper-bound the ones conditioned on W, so plugging them into the
/// bound stays valid.
pub fn abc_from_pairs<C: Coupling>(
    coupling: &C,
    weights: &[f64],
    opts: &AbcOptions,
    cfg: &McConfig,
) -> Result<AbcReport, McError> {
    let d = coupling.dim();
    if weights.len() != d {
        return Err(McError::DimensionMismatch(weights.len(), d));
    }
    if let Some(t) = &opts.transform {
        if t.dim() != d {
            return Err(McError::DimensionMismatch(t.dim(), d));
        }
    }
    if opts.nsamples < 2 {
        return Err(McError::TooFewSamples(opts.nsamples));
    }

    let probe = coupling.draw_state(&mut stream_rng(cfg.seed, u64::MAX));
    let has_exact = coupling.cond_products(&probe).is_some()
        && (coupling.remainder_free() || coupling.cond_mean(&probe).is_some());
    let mode = match (has_exact && !opts.force_nested, opts.inner_nsamples) {
        (true, _) => AbcMode::ExactConditional,
        (false, Some(m)) if m >= 2 => AbcMode::Nested { inner: m },
        (false, Some(m)) => return Err(McError::TooFewSamples(m)),
        (false, None) => return Err(McError::NoConditionalForm),
    };
    let lambda = coupling.lambda();
    let t = opts.transform.as_ref();
    let remainder_free = coupling.remainder_free();

    let init = || AbcAcc {
        prod: vec![Moments4::default(); d * d],
        inner_var: vec![Welford::default(); d * d],
        triple: vec![Welford::default(); d * d * d],
        rem_sq: vec![Welford::default(); d],
        rem_var: vec![Welford::default(); d],
    };

    let acc = map_reduce(cfg, opts.nsamples, init, |rng, acc| {
        let state = coupling.draw_state(rng);
        let delta = apply(t, coupling.draw_delta(&state, rng));
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    acc.triple[(i * d + j) * d + k].push((delta[i] * delta[j] * delta[k]).abs());
                }
            }
        }

        match mode {
            AbcMode::ExactConditional => {
                let p = coupling.cond_products(&state).expect("probed");
                let p = match t {
                    Some(t) => {
                        let pm = Square::from_vec(d, p).expect("d×d products");
                        (&(t * &pm) * &t.transpose()).as_slice().to_vec()
                    }
                    None => p,
                };
                for (a, x) in acc.prod.iter_mut().zip(&p) {
                    a.push(*x);
                }
                if !remainder_free {
                    let w = coupling.embed(&state);
                    let m = coupling.cond_mean(&state).expect("probed");
                    let lw = lambda.as_square().matvec(&w).expect("lambda dim");
                    let r = apply(t, m.iter().zip(&lw).map(|(m, l)| m + l).collect());
                    for (a, x) in acc.rem_sq.iter_mut().zip(&r) {
                        a.push(x * x);
                    }
                }
            }
            AbcMode::Nested { inner } => {
                let mut prods = vec![Welford::default(); d * d];
                let mut means = vec![Welford::default(); d];
                for _ in 0..inner {
                    let dl = apply(t, coupling.draw_delta(&state, rng));
                    for i in 0..d {
                        means[i].push(dl[i]);
                        for j in 0..d {
                            prods[i * d + j].push(dl[i] * dl[j]);
                        }
                    }
                }
                for (k, w) in prods.iter().enumerate() {
                    acc.prod[k].push(w.mean);
                    acc.inner_var[k].push(w.variance() / inner as f64);
                }
                if !remainder_free {
                    let w = coupling.embed(&state);
                    let lw = apply(t, lambda.as_square().matvec(&w).expect("lambda dim"));
                    for i in 0..d {
                        let r = means[i].mean + lw[i];
                        acc.rem_sq[i].push(r * r);
                        acc.rem_var[i].push(means[i].variance() / inner as f64);
                    }
                }
            }
        }
    })?;

    let mut cond_sd = vec![0.0; d * d];
    let mut cond_sd_stderr = vec![0.0; d * d];
    for k in 0..d * d {
        let var = (acc.prod[k].variance() - acc.inner_var[k].mean).max(0.0);
        let sd = var.sqrt();
        cond_sd[k] = sd;
        cond_sd_stderr[k] = if sd > 0.0 {
            acc.prod[k].variance_stderr() / (2.0 * sd)
        } else {
            acc.prod[k].variance_stderr().sqrt()
        };
    }

    let mut a = 0.0;
    let mut a_se = 0.0;
    let mut b = 0.0;
    let mut b_se = 0.0;
    for i in 0..d {
        for j in 0..d {
            a += weights[i] * cond_sd[i * d + j];
            a_se += weights[i] * cond_sd_stderr[i * d + j];
            for k in 0..d {
                let w = &acc.triple[(i * d + j) * d + k];
                b += weights[i] * w.mean;
                b_se += weights[i] * w.stderr();
            }
        }
    }
    let (c, c_se) = if remainder_free {
        (0.0, 0.0)
    } else {
        let mut c = 0.0;
        let mut c_se = 0.0;
        for i in 0..d {
            let ms = (acc.rem_sq[i].mean - acc.rem_var[i].mean).max(0.0);
            let root = ms.sqrt();
            c += weights[i] * root;
            c_se += weights[i]
                * if root > 0.0 {
                    acc.rem_sq[i].stderr() / (2.0 * root)
                } else {
                    acc.rem_sq[i].stderr().sqrt()
                };
        }
        (c, c_se)
    };

    let third_abs = (0..d)
        .map(|i| acc.triple[(i * d + i) * d + i].estimate(cfg.seed))
        .collect();
    let sup_cond_sd = cond_sd.iter().fold(0.0f64, |m, x| m.max(*x));
    Ok(AbcReport {
        stats: AbcStats {
            a,
            b,
            c,
            provenance: Provenance::MonteCarlo {
                a_stderr: a_se,
                b_stderr: b_se,
                c_stderr: c_se,
            },
        },
        mode,
        weights: weights.to_vec(),
        cond_sd,
        cond_sd_stderr,
        third_abs,
        sup_cond_sd,
        nsamples: opts.nsamples,
    })
}
