//! Multilinear chaos in i.i.d. mean-zero coordinates.
//!
//! `F = Σ_n Σ_{i₁<…<i_n} n! f_n(i₁,…,i_n) X_{i₁}⋯X_{i_n} = Σ_n J_n(f_n)`.
//! Redrawing one uniformly chosen coordinate gives an exchangeable pair for
//! `(J₁,…,J_d)` with `E(J′_n − J_n | X) = −(n/d) J_n`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matlite::{LowerMatrix, SymMatrix};
use crate::mc::{Coupling, StreamRng};

/// Largest d for which every subset may be generated densely.
pub const DENSE_MAX_D: usize = 20;

#[derive(Debug, Error)]
pub enum ChaosError {
    #[error("coefficients: {0}")]
    Parse(String),
    #[error("index set {0:?} is invalid for d = {1}")]
    BadSubset(Vec<usize>, usize),
    #[error("d = {0} is outside 1..={DENSE_MAX_D} for dense generation")]
    TooLarge(usize),
    #[error("unknown base law {0:?}")]
    UnknownBase(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Sparse kernels f₁..f_d keyed by strictly increasing 0-based index sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChaosCoeffs {
    d: usize,
    terms: BTreeMap<Vec<usize>, f64>,
}

impl ChaosCoeffs {
    pub fn new(d: usize) -> Self {
        ChaosCoeffs {
            d,
            terms: BTreeMap::new(),
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Sets `f_n(subset)` with `n = subset.len()`; zero removes the entry.
    pub fn set(&mut self, subset: &[usize], value: f64) -> Result<(), ChaosError> {
        let ok = !subset.is_empty()
            && subset.windows(2).all(|w| w[0] < w[1])
            && subset.last().is_some_and(|&i| i < self.d);
        if !ok || !value.is_finite() {
            return Err(ChaosError::BadSubset(subset.to_vec(), self.d));
        }
        if value == 0.0 {
            self.terms.remove(subset);
        } else {
            self.terms.insert(subset.to_vec(), value);
        }
        Ok(())
    }

    pub fn get(&self, subset: &[usize]) -> f64 {
        self.terms.get(subset).copied().unwrap_or(0.0)
    }

    pub fn terms(&self) -> impl Iterator<Item = (&[usize], f64)> {
        self.terms.iter().map(|(k, v)| (k.as_slice(), *v))
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// One term per line: `n i₁ … i_n value`, indices 1-based. Blank lines
    /// and `#` comments are ignored.
    pub fn parse(text: &str, d: usize) -> Result<Self, ChaosError> {
        let mut c = ChaosCoeffs::new(d);
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |why: &str| ChaosError::Parse(format!("line {}: {why}", lineno + 1));
            let tok: Vec<&str> = line.split_whitespace().collect();
            let n: usize = tok[0].parse().map_err(|_| bad("bad order"))?;
            if n == 0 || tok.len() != n + 2 {
                return Err(bad("expected order, that many indices, and a value"));
            }
            let idx = tok[1..=n]
                .iter()
                .map(|t| match t.parse::<usize>() {
                    Ok(i) if i >= 1 => Ok(i - 1),
                    _ => Err(bad("indices are 1-based integers")),
                })
                .collect::<Result<Vec<_>, _>>()?;
            let value: f64 = tok[n + 1].parse().map_err(|_| bad("bad value"))?;
            if c.terms.contains_key(&idx) {
                return Err(bad("duplicate index set"));
            }
            c.set(&idx, value).map_err(|e| bad(&e.to_string()))?;
        }
        Ok(c)
    }

    pub fn load(path: &Path, d: usize) -> Result<Self, ChaosError> {
        Self::parse(&std::fs::read_to_string(path)?, d)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.terms {
            let _ = write!(s, "{}", k.len());
            for i in k {
                let _ = write!(s, " {}", i + 1);
            }
            let _ = writeln!(s, " {v:e}");
        }
        s
    }
}

/// Every subset of `0..d` is kept with probability `density` and given an
/// N(0, 1) coefficient.
pub fn random_coeffs(d: usize, density: f64, rng: &mut StreamRng) -> Result<ChaosCoeffs, ChaosError> {
    if d == 0 || d > DENSE_MAX_D {
        return Err(ChaosError::TooLarge(d));
    }
    let mut c = ChaosCoeffs::new(d);
    for mask in 1u32..(1 << d) {
        if rng.random::<f64>() < density {
            let subset: Vec<usize> = (0..d).filter(|i| mask >> i & 1 == 1).collect();
            c.set(&subset, rng.sample(StandardNormal))?;
        }
    }
    Ok(c)
}

/// Law of the i.i.d. coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseLaw {
    Rademacher,
    /// Uniform on [−1, 1].
    CenteredUniform,
    StandardNormal,
}

impl BaseLaw {
    pub fn parse(s: &str) -> Result<Self, ChaosError> {
        match s {
            "rademacher" | "pm1" => Ok(BaseLaw::Rademacher),
            "uniform" | "centered-uniform" => Ok(BaseLaw::CenteredUniform),
            "normal" | "standard-normal" => Ok(BaseLaw::StandardNormal),
            other => Err(ChaosError::UnknownBase(other.to_string())),
        }
    }

    pub fn mean(&self) -> f64 {
        0.0
    }

    pub fn variance(&self) -> f64 {
        match self {
            BaseLaw::Rademacher | BaseLaw::StandardNormal => 1.0,
            BaseLaw::CenteredUniform => 1.0 / 3.0,
        }
    }

    pub fn sample(&self, rng: &mut StreamRng) -> f64 {
        match self {
            BaseLaw::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            BaseLaw::CenteredUniform => rng.random_range(-1.0..=1.0),
            BaseLaw::StandardNormal => rng.sample(StandardNormal),
        }
    }

    pub fn sample_vec(&self, d: usize, rng: &mut StreamRng) -> Vec<f64> {
        (0..d).map(|_| self.sample(rng)).collect()
    }
}

/// `(J₁(f₁), …, J_d(f_d))` at `x`.
pub fn eval_j(x: &[f64], c: &ChaosCoeffs) -> Vec<f64> {
    let mut j = vec![0.0; c.d];
    for (s, f) in c.terms() {
        j[s.len() - 1] += factorial(s.len()) * f * s.iter().map(|i| x[*i]).product::<f64>();
    }
    j
}

/// `∂J_n/∂x_i` for every order n and coordinate i, as `grad[n−1][i]`.
pub fn gradients(x: &[f64], c: &ChaosCoeffs) -> Vec<Vec<f64>> {
    let mut g = vec![vec![0.0; c.d]; c.d];
    for (s, f) in c.terms() {
        let coef = factorial(s.len()) * f;
        for &i in s {
            let rest: f64 = s.iter().filter(|j| **j != i).map(|j| x[*j]).product();
            g[s.len() - 1][i] += coef * rest;
        }
    }
    g
}

/// Redraws one uniformly chosen coordinate.
pub fn pair_step(x: &[f64], base: BaseLaw, rng: &mut StreamRng) -> (Vec<f64>, usize) {
    let i = rng.random_range(0..x.len());
    let mut y = x.to_vec();
    y[i] = base.sample(rng);
    (y, i)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChaosResidual {
    /// `E(J′_n − J_n | x)`, accumulated coordinate by coordinate.
    pub lhs: Vec<f64>,
    /// `−(n/d) J_n(x)`.
    pub rhs: Vec<f64>,
    pub residual: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ChaosResidual {
    pub fn max_relative(&self) -> f64 {
        self.residual
            .iter()
            .zip(&self.scale)
            .fold(0.0f64, |m, (r, s)| m.max(r.abs() / s.max(f64::MIN_POSITIVE)))
    }
}

/// Checks `E(J′_n − J_n | x) = −(n/d)J_n(x)`. Redrawing coordinate i
/// replaces `x_i` by a value of mean `base.mean()`, so each monomial
/// containing i moves by `(mean − x_i)·∏_{j≠i} x_j` in expectation.
pub fn cond_identity_residual(x: &[f64], c: &ChaosCoeffs, base: BaseLaw) -> ChaosResidual {
    let d = c.d;
    let df = d as f64;
    let mut lhs = vec![0.0; d];
    let mut scale = vec![0.0; d];
    for i in 0..d {
        for (s, f) in c.terms() {
            if !s.contains(&i) {
                continue;
            }
            let coef = factorial(s.len()) * f;
            let rest: f64 = s.iter().filter(|j| **j != i).map(|j| x[*j]).product();
            let term = coef * rest * (base.mean() - x[i]) / df;
            lhs[s.len() - 1] += term;
            scale[s.len() - 1] += term.abs();
        }
    }
    let jv = eval_j(x, c);
    let rhs: Vec<f64> = jv.iter().enumerate().map(|(n, v)| -((n + 1) as f64) / df * v).collect();
    let residual = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
    let scale = scale.into_iter().map(|s| s.max(f64::MIN_POSITIVE)).collect();
    ChaosResidual { lhs, rhs, residual, scale }
}

/// `diag(1/d, 2/d, …, d/d)`.
pub fn lambda_chaos(d: usize) -> LowerMatrix {
    let df = d as f64;
    LowerMatrix::diag(&(1..=d).map(|n| n as f64 / df).collect::<Vec<_>>())
}

/// Diagonal covariance of `(J₁,…,J_d)`: distinct monomials are orthogonal
/// and each has second moment `Var(X)^n`.
pub fn exact_sigma(c: &ChaosCoeffs, base: BaseLaw) -> SymMatrix {
    let mut v = vec![0.0; c.d];
    for (s, f) in c.terms() {
        let n = s.len();
        v[n - 1] += (factorial(n) * f).powi(2) * base.variance().powi(n as i32);
    }
    SymMatrix::diag(&v)
}

/// The redraw-one-coordinate pair on `(J₁,…,J_d)`.
#[derive(Debug, Clone)]
pub struct ChaosCoupling {
    pub coeffs: ChaosCoeffs,
    pub base: BaseLaw,
}

impl ChaosCoupling {
    pub fn new(coeffs: ChaosCoeffs, base: BaseLaw) -> Self {
        ChaosCoupling { coeffs, base }
    }
}

impl Coupling for ChaosCoupling {
    type State = Vec<f64>;

    fn dim(&self) -> usize {
        self.coeffs.d
    }

    fn draw_state(&self, rng: &mut StreamRng) -> Vec<f64> {
        self.base.sample_vec(self.coeffs.d, rng)
    }

    fn embed(&self, x: &Vec<f64>) -> Vec<f64> {
        eval_j(x, &self.coeffs)
    }

    fn draw_delta(&self, x: &Vec<f64>, rng: &mut StreamRng) -> Vec<f64> {
        let i = rng.random_range(0..x.len());
        let y = self.base.sample(rng);
        let g = gradients(x, &self.coeffs);
        g.iter().map(|row| row[i] * (y - x[i])).collect()
    }

    fn lambda(&self) -> LowerMatrix {
        lambda_chaos(self.coeffs.d)
    }

    /// `(1/d) Σ_i (Var X + x_i²) ∂_iJ_n ∂_iJ_m`.
    fn cond_products(&self, x: &Vec<f64>) -> Option<Vec<f64>> {
        let d = self.coeffs.d;
        let g = gradients(x, &self.coeffs);
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            let jump = (self.base.variance() + x[i] * x[i]) / d as f64;
            for n in 0..d {
                for m in 0..d {
                    out[n * d + m] += jump * g[n][i] * g[m][i];
                }
            }
        }
        Some(out)
    }

    fn cond_mean(&self, x: &Vec<f64>) -> Option<Vec<f64>> {
        let d = self.coeffs.d;
        let g = gradients(x, &self.coeffs);
        Some(
            (0..d)
                .map(|n| (0..d).map(|i| g[n][i] * (self.base.mean() - x[i])).sum::<f64>() / d as f64)
                .collect(),
        )
    }

    fn remainder_free(&self) -> bool {
        true
    }
}
