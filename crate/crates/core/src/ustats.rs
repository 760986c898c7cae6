//! Complete non-degenerate U-statistics and their Hoeffding projections.
//!
//! For a symmetric kernel ψ of order d with Eψ = 0, `ψ_k` is the
//! conditional expectation given k arguments, `U_k = Σ_{|α|=k} ψ_k(α)` and
//! `W_k = n^{1/2} C(n,k)⁻¹ U_k`. Replacing one uniformly chosen sample point
//! gives an exchangeable pair with a lower bidiagonal Λ and R = 0.

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphs::choose;
use crate::matlite::{LowerMatrix, Square, SymMatrix};
use crate::mc::{self, Coupling, Estimate, McConfig, McError, StreamRng, Welford};
use crate::stein::DerivBounds;

/// Upper limit on the number of kernel evaluations in one full U-vector.
pub const SUBSET_BUDGET: f64 = 1e8;

#[derive(Debug, Error)]
pub enum UstatError {
    #[error("subset enumeration needs {0:.3e} kernel evaluations, over the budget of {SUBSET_BUDGET:.0e}")]
    BudgetExceeded(f64),
    #[error("kernel {0} has no conditional kernel of order {1}")]
    MissingConditionalKernel(String, usize),
    #[error("sample size {n} is smaller than the kernel order {d}")]
    SampleTooSmall { n: usize, d: usize },
    #[error("value {0} is not in the kernel's support")]
    OutsideSupport(f64),
    #[error("kernel table: {0}")]
    Parse(String),
    #[error("kernel table: {0}")]
    Invalid(String),
    #[error("unknown kernel {0:?}")]
    UnknownKernel(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Mc(#[from] McError),
}

/// Nodes and weights reproducing expectations under the base law for the
/// polynomial degrees the kernel needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedrawRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl RedrawRule {
    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(x, w)| w * f(*x)).sum()
    }
}

/// Five-point Gauss–Hermite rule for N(0, 1), exact for polynomials of
/// degree ≤ 9.
pub fn gauss_hermite5() -> RedrawRule {
    // w = n! / (n He_{n−1}(x))² with He₄(x) = x⁴ − 6x² + 3
    let w = |x: f64| {
        let he4 = x.powi(4) - 6.0 * x * x + 3.0;
        120.0 / (25.0 * he4 * he4)
    };
    let s10 = 10f64.sqrt();
    let c = (5.0 - s10).sqrt();
    let e = (5.0 + s10).sqrt();
    RedrawRule {
        nodes: vec![-e, -c, 0.0, c, e],
        weights: vec![w(e), w(c), w(0.0), w(c), w(e)],
    }
}

/// A symmetric kernel with its base distribution.
pub trait Kernel: Send + Sync + fmt::Debug {
    fn name(&self) -> String;

    /// Order d.
    fn order(&self) -> usize;

    /// `ψ_k` at `args.len() = k` points, `1 ≤ k ≤ d`. `None` when the
    /// conditional kernel of that order is not known.
    fn psi_k(&self, args: &[f64]) -> Option<f64>;

    fn sample_point(&self, rng: &mut StreamRng) -> f64;

    /// Exact quadrature for the base law, if one is known.
    fn redraw_rule(&self) -> Option<RedrawRule> {
        None
    }

    /// `E ψ_c(X₁,…,X_c)²` for `1 ≤ c ≤ d`.
    fn psi_sq_mean(&self, _c: usize) -> Option<f64> {
        None
    }

    /// `ρ = Eψ⁴`.
    fn rho_exact(&self) -> Option<f64> {
        None
    }

    /// U₁..U_d from power sums, when the kernel admits it.
    fn closed_form_u(&self, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }

    fn psi(&self, args: &[f64]) -> f64 {
        debug_assert_eq!(args.len(), self.order());
        self.psi_k(args).expect("the full kernel is always available")
    }
}

/// `ψ(x, y) = (x + y)/2` on symmetric ±1 points; `ψ₁(x) = x/2`.
#[derive(Debug, Clone, Copy, Default)]
pub struct RademacherMean;

impl Kernel for RademacherMean {
    fn name(&self) -> String {
        "rademacher-mean".into()
    }

    fn order(&self) -> usize {
        2
    }

    fn psi_k(&self, args: &[f64]) -> Option<f64> {
        match args.len() {
            1 => Some(args[0] / 2.0),
            2 => Some((args[0] + args[1]) / 2.0),
            _ => None,
        }
    }

    fn sample_point(&self, rng: &mut StreamRng) -> f64 {
        if rng.random::<bool>() {
            1.0
        } else {
            -1.0
        }
    }

    fn redraw_rule(&self) -> Option<RedrawRule> {
        Some(RedrawRule {
            nodes: vec![-1.0, 1.0],
            weights: vec![0.5, 0.5],
        })
    }

    fn psi_sq_mean(&self, c: usize) -> Option<f64> {
        match c {
            1 => Some(0.25),
            2 => Some(0.5),
            _ => None,
        }
    }

    fn rho_exact(&self) -> Option<f64> {
        Some(0.5)
    }

    fn closed_form_u(&self, x: &[f64]) -> Option<Vec<f64>> {
        let s: f64 = x.iter().sum();
        let n = x.len() as f64;
        Some(vec![s / 2.0, (n - 1.0) * s / 2.0])
    }
}

/// `ψ(x, y) = (x − y)²/2 − 1` on standard normal points;
/// `ψ₁(x) = (x² − 1)/2`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SampleVariance;

impl Kernel for SampleVariance {
    fn name(&self) -> String {
        "sample-variance".into()
    }

    fn order(&self) -> usize {
        2
    }

    fn psi_k(&self, args: &[f64]) -> Option<f64> {
        match args.len() {
            1 => Some((args[0] * args[0] - 1.0) / 2.0),
            2 => Some((args[0] - args[1]).powi(2) / 2.0 - 1.0),
            _ => None,
        }
    }

    fn sample_point(&self, rng: &mut StreamRng) -> f64 {
        rng.sample(StandardNormal)
    }

    fn redraw_rule(&self) -> Option<RedrawRule> {
        Some(gauss_hermite5())
    }

    fn psi_sq_mean(&self, c: usize) -> Option<f64> {
        match c {
            1 => Some(0.5),
            2 => Some(2.0),
            _ => None,
        }
    }

    /// `(X − Y)²/2` is χ²₁, whose fourth central moment is 60.
    fn rho_exact(&self) -> Option<f64> {
        Some(60.0)
    }

    fn closed_form_u(&self, x: &[f64]) -> Option<Vec<f64>> {
        let n = x.len() as f64;
        let s: f64 = x.iter().sum();
        let q: f64 = x.iter().map(|v| v * v).sum();
        Some(vec![(q - n) / 2.0, (n * q - s * s) / 2.0 - n * (n - 1.0) / 2.0])
    }
}

/// Kernel on a finite support, given by its full table. All conditional
/// kernels, their second moments and ρ are computed by enumeration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FiniteKernel {
    pub label: String,
    pub d: usize,
    pub values: Vec<f64>,
    pub probs: Vec<f64>,
    /// `tables[k-1]` holds ψ_k on the m^k grid, row-major.
    tables: Vec<Vec<f64>>,
    cumulative: Vec<f64>,
}

impl FiniteKernel {
    /// `psi` is the order-d table on the m^d grid, first argument most
    /// significant.
    pub fn new(label: &str, d: usize, values: Vec<f64>, probs: Vec<f64>, psi: Vec<f64>) -> Result<Self, UstatError> {
        let m = values.len();
        let bad = |s: String| Err(UstatError::Invalid(s));
        if d == 0 || m == 0 {
            return bad("order and support size must be positive".into());
        }
        if probs.len() != m {
            return bad(format!("{} probabilities for {m} support points", probs.len()));
        }
        if psi.len() != m.pow(d as u32) {
            return bad(format!("expected {} kernel values, got {}", m.pow(d as u32), psi.len()));
        }
        if values.iter().chain(&probs).chain(&psi).any(|v| !v.is_finite()) {
            return bad("non-finite entry".into());
        }
        if probs.iter().any(|p| *p <= 0.0) {
            return bad("probabilities must be positive".into());
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return bad(format!("probabilities sum to {total}"));
        }
        for i in 0..m {
            for j in (i + 1)..m {
                if values[i] == values[j] {
                    return bad(format!("support value {} repeated", values[i]));
                }
            }
        }
        let scale = psi.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        for idx in 0..psi.len() {
            let mut digits = to_digits(idx, m, d);
            digits.sort_unstable();
            let sorted = from_digits(&digits, m);
            if (psi[idx] - psi[sorted]).abs() > 1e-12 * scale {
                return bad(format!("kernel is not symmetric at grid index {idx}"));
            }
        }
        let mut tables = vec![Vec::new(); d];
        tables[d - 1] = psi;
        for k in (1..d).rev() {
            let next = &tables[k];
            tables[k - 1] = (0..m.pow(k as u32))
                .map(|i| (0..m).map(|v| probs[v] * next[i * m + v]).sum())
                .collect();
        }
        let mean: f64 = (0..m).map(|v| probs[v] * tables[0][v]).sum();
        if mean.abs() > 1e-12 * scale {
            return bad(format!("kernel is not centred: mean {mean}"));
        }
        let var1: f64 = (0..m).map(|v| probs[v] * tables[0][v].powi(2)).sum();
        if var1 <= 1e-24 * scale * scale {
            return bad("degenerate kernel: the first projection vanishes".into());
        }
        let cumulative = probs
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p;
                Some(*acc)
            })
            .collect();
        Ok(FiniteKernel {
            label: label.to_string(),
            d,
            values,
            probs,
            tables,
            cumulative,
        })
    }

    /// Table format: `d m`, then m lines `value probability`, then m^d
    /// kernel values.
    pub fn parse(label: &str, text: &str) -> Result<Self, UstatError> {
        let mut tok = text.split_whitespace();
        let mut num = |what: &str| -> Result<f64, UstatError> {
            let t = tok
                .next()
                .ok_or_else(|| UstatError::Parse(format!("missing {what}")))?;
            t.parse::<f64>()
                .map_err(|_| UstatError::Parse(format!("bad {what}: {t:?}")))
        };
        let d = num("order")?;
        let m = num("support size")?;
        if d < 1.0 || m < 1.0 || d.fract() != 0.0 || m.fract() != 0.0 || d > 16.0 {
            return Err(UstatError::Parse(format!("bad header {d} {m}")));
        }
        let (d, m) = (d as usize, m as usize);
        let mut values = Vec::with_capacity(m);
        let mut probs = Vec::with_capacity(m);
        for _ in 0..m {
            values.push(num("support value")?);
            probs.push(num("probability")?);
        }
        let cells = m
            .checked_pow(d as u32)
            .filter(|c| *c <= 1 << 24)
            .ok_or_else(|| UstatError::Parse("table too large".into()))?;
        let psi = (0..cells).map(|_| num("kernel value")).collect::<Result<Vec<_>, _>>()?;
        if tok.next().is_some() {
            return Err(UstatError::Parse("trailing data after the kernel table".into()));
        }
        Self::new(label, d, values, probs, psi)
    }

    pub fn load(path: &Path) -> Result<Self, UstatError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&path.display().to_string(), &text)
    }

    fn index_of(&self, v: f64) -> Result<usize, UstatError> {
        self.values
            .iter()
            .position(|x| *x == v)
            .ok_or(UstatError::OutsideSupport(v))
    }

    fn table_at(&self, args: &[f64]) -> Result<f64, UstatError> {
        let m = self.values.len();
        let mut idx = 0;
        for a in args {
            idx = idx * m + self.index_of(*a)?;
        }
        Ok(self.tables[args.len() - 1][idx])
    }
}

fn to_digits(mut idx: usize, m: usize, d: usize) -> Vec<usize> {
    let mut out = vec![0; d];
    for slot in out.iter_mut().rev() {
        *slot = idx % m;
        idx /= m;
    }
    out
}

fn from_digits(digits: &[usize], m: usize) -> usize {
    digits.iter().fold(0, |acc, x| acc * m + x)
}

impl Kernel for FiniteKernel {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn order(&self) -> usize {
        self.d
    }

    fn psi_k(&self, args: &[f64]) -> Option<f64> {
        if args.is_empty() || args.len() > self.d {
            return None;
        }
        Some(self.table_at(args).expect("sample point outside the kernel support"))
    }

    fn sample_point(&self, rng: &mut StreamRng) -> f64 {
        let u: f64 = rng.random();
        let i = self.cumulative.iter().position(|c| u < *c).unwrap_or(self.values.len() - 1);
        self.values[i]
    }

    fn redraw_rule(&self) -> Option<RedrawRule> {
        Some(RedrawRule {
            nodes: self.values.clone(),
            weights: self.probs.clone(),
        })
    }

    fn psi_sq_mean(&self, c: usize) -> Option<f64> {
        if c == 0 || c > self.d {
            return None;
        }
        Some(self.grid_mean(c, |v| v * v))
    }

    fn rho_exact(&self) -> Option<f64> {
        Some(self.grid_mean(self.d, |v| v.powi(4)))
    }
}

impl FiniteKernel {
    fn grid_mean(&self, k: usize, f: impl Fn(f64) -> f64) -> f64 {
        let m = self.values.len();
        self.tables[k - 1]
            .iter()
            .enumerate()
            .map(|(i, v)| to_digits(i, m, k).iter().map(|j| self.probs[*j]).product::<f64>() * f(*v))
            .sum()
    }
}

/// Resolves a built-in kernel name or loads a kernel table file.
pub fn load_kernel(spec: &str) -> Result<Box<dyn Kernel>, UstatError> {
    match spec {
        "rademacher-mean" | "pm1" => Ok(Box::new(RademacherMean)),
        "sample-variance" | "svar" => Ok(Box::new(SampleVariance)),
        path if Path::new(path).is_file() => Ok(Box::new(FiniteKernel::load(Path::new(path))?)),
        other => Err(UstatError::UnknownKernel(other.to_string())),
    }
}

/// Visits every k-subset of `0..n` in colexicographic order.
pub fn for_each_subset(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    if k > n {
        return;
    }
    let mut c: Vec<usize> = (0..k).collect();
    loop {
        f(&c);
        let mut i = 0;
        while i < k && c[i] + 1 == if i + 1 < k { c[i + 1] } else { n } {
            i += 1;
        }
        if i == k {
            return;
        }
        c[i] += 1;
        for (j, slot) in c.iter_mut().enumerate().take(i) {
            *slot = j;
        }
    }
}

/// U₁..U_d and the rescaled W₁..W_d.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UVector {
    pub n: usize,
    pub u: Vec<f64>,
    pub w: Vec<f64>,
}

impl UVector {
    pub fn from_u(n: usize, u: Vec<f64>) -> Self {
        let rn = (n as f64).sqrt();
        let w = u
            .iter()
            .enumerate()
            .map(|(i, uk)| rn / choose(n, i + 1) * uk)
            .collect();
        UVector { n, u, w }
    }
}

fn check_size(n: usize, d: usize) -> Result<(), UstatError> {
    if n < d {
        Err(UstatError::SampleTooSmall { n, d })
    } else {
        Ok(())
    }
}

fn psi_or_missing(kernel: &dyn Kernel, args: &[f64]) -> Result<f64, UstatError> {
    kernel
        .psi_k(args)
        .ok_or_else(|| UstatError::MissingConditionalKernel(kernel.name(), args.len()))
}

/// U₁..U_d by summing over every subset.
pub fn compute_u_by_subsets(x: &[f64], kernel: &dyn Kernel) -> Result<Vec<f64>, UstatError> {
    let (n, d) = (x.len(), kernel.order());
    check_size(n, d)?;
    let work: f64 = (1..=d).map(|k| choose(n, k)).sum();
    if work > SUBSET_BUDGET {
        return Err(UstatError::BudgetExceeded(work));
    }
    let mut u = vec![0.0; d];
    let mut args = Vec::with_capacity(d);
    for k in 1..=d {
        psi_or_missing(kernel, &x[..k])?;
        let mut acc = 0.0;
        for_each_subset(n, k, |s| {
            args.clear();
            args.extend(s.iter().map(|i| x[*i]));
            acc += kernel.psi_k(&args).expect("checked above");
        });
        u[k - 1] = acc;
    }
    Ok(u)
}

/// U-vector of a sample, using power sums where the kernel has them.
pub fn compute_u(x: &[f64], kernel: &dyn Kernel) -> Result<UVector, UstatError> {
    check_size(x.len(), kernel.order())?;
    let u = match kernel.closed_form_u(x) {
        Some(u) => u,
        None => compute_u_by_subsets(x, kernel)?,
    };
    Ok(UVector::from_u(x.len(), u))
}

/// Change in U₁..U_d when `x[j]` is replaced by `y`, summing only over
/// subsets containing j.
pub fn delta_u(x: &[f64], kernel: &dyn Kernel, j: usize, y: f64) -> Result<Vec<f64>, UstatError> {
    let d = kernel.order();
    check_size(x.len(), d)?;
    let others: Vec<f64> = x.iter().enumerate().filter(|(i, _)| *i != j).map(|(_, v)| *v).collect();
    let old = x[j];
    let mut out = vec![0.0; d];
    if old == y {
        return Ok(out);
    }
    let mut a = Vec::with_capacity(d);
    let mut b = Vec::with_capacity(d);
    for k in 1..=d {
        psi_or_missing(kernel, &x[..k])?;
        let mut acc = 0.0;
        for_each_subset(others.len(), k - 1, |s| {
            a.clear();
            b.clear();
            a.extend(s.iter().map(|i| others[*i]));
            b.extend_from_slice(&a);
            a.push(y);
            b.push(old);
            acc += kernel.psi_k(&a).expect("checked") - kernel.psi_k(&b).expect("checked");
        });
        out[k - 1] = acc;
    }
    Ok(out)
}

pub fn sample_points(kernel: &dyn Kernel, n: usize, rng: &mut StreamRng) -> Vec<f64> {
    (0..n).map(|_| kernel.sample_point(rng)).collect()
}

/// `Λ = n⁻¹ bidiag(k, −k)`: diagonal `k/n`, subdiagonal `−k/n` in row k.
pub fn lambda_ustat(n: usize, d: usize) -> LowerMatrix {
    let nf = n as f64;
    LowerMatrix::new(Square::from_fn(d, |i, j| {
        let k = (i + 1) as f64;
        if i == j {
            k / nf
        } else if i == j + 1 {
            -k / nf
        } else {
            0.0
        }
    }))
    .expect("lower by construction")
}

/// `(Λ⁻¹)_{k,l} = n/l` for `l ≤ k`.
pub fn lambda_ustat_inverse(n: usize, d: usize) -> LowerMatrix {
    let nf = n as f64;
    LowerMatrix::new(Square::from_fn(d, |i, j| if j <= i { nf / (j + 1) as f64 } else { 0.0 }))
        .expect("lower by construction")
}

/// One coupling step: a uniform index J is redrawn from the base law.
#[derive(Debug, Clone)]
pub struct PairStep {
    pub x: Vec<f64>,
    pub index: usize,
    pub u: UVector,
}

pub fn pair_step(x: &[f64], u: &UVector, kernel: &dyn Kernel, rng: &mut StreamRng) -> Result<PairStep, UstatError> {
    let j = rng.random_range(0..x.len());
    let y = kernel.sample_point(rng);
    let du = delta_u(x, kernel, j, y)?;
    let mut x2 = x.to_vec();
    x2[j] = y;
    let u2 = u.u.iter().zip(&du).map(|(a, b)| a + b).collect();
    Ok(PairStep {
        x: x2,
        index: j,
        u: UVector::from_u(x.len(), u2),
    })
}

/// Both sides of the conditional drift identity
/// `E[U′_k − U_k | X] = −(k/n)U_k + ((n−k+1)/n)U_{k−1}` (U₀ = 0).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentityResidual {
    /// `(1/n) Σ_{|α|=k} Σ_{j∈α} (ψ_{k−1}(α∖j) − ψ_k(α))`.
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub residual: Vec<f64>,
    /// Sum of absolute values of the terms, for relative tolerances.
    pub scale: Vec<f64>,
}

impl IdentityResidual {
    pub fn max_relative(&self) -> f64 {
        self.residual
            .iter()
            .zip(&self.scale)
            .fold(0.0f64, |m, (r, s)| m.max(r.abs() / s.max(f64::MIN_POSITIVE)))
    }
}

pub fn cond_identity_residual(x: &[f64], kernel: &dyn Kernel) -> Result<IdentityResidual, UstatError> {
    let (n, d) = (x.len(), kernel.order());
    check_size(n, d)?;
    let work: f64 = (1..=d).map(|k| k as f64 * choose(n, k)).sum();
    if work > SUBSET_BUDGET {
        return Err(UstatError::BudgetExceeded(work));
    }
    for k in 1..=d {
        psi_or_missing(kernel, &x[..k])?;
    }
    let u = compute_u_by_subsets(x, kernel)?;
    let nf = n as f64;
    let mut lhs = vec![0.0; d];
    let mut scale = vec![0.0; d];
    let mut args = Vec::with_capacity(d);
    let mut sub = Vec::with_capacity(d);
    for k in 1..=d {
        let mut acc = 0.0;
        let mut mag = 0.0;
        for_each_subset(n, k, |s| {
            args.clear();
            args.extend(s.iter().map(|i| x[*i]));
            let full = kernel.psi_k(&args).expect("checked");
            for skip in 0..k {
                let lower = if k == 1 {
                    0.0
                } else {
                    sub.clear();
                    sub.extend(args.iter().enumerate().filter(|(i, _)| *i != skip).map(|(_, v)| *v));
                    kernel.psi_k(&sub).expect("checked")
                };
                acc += lower - full;
                mag += lower.abs() + full.abs();
            }
        });
        lhs[k - 1] = acc / nf;
        scale[k - 1] = (mag / nf).max(1.0);
    }
    let rhs: Vec<f64> = (1..=d)
        .map(|k| {
            let prev = if k == 1 { 0.0 } else { u[k - 2] };
            -(k as f64) / nf * u[k - 1] + (nf - k as f64 + 1.0) / nf * prev
        })
        .collect();
    let residual = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
    Ok(IdentityResidual { lhs, rhs, residual, scale })
}

/// `E[U′ − U | X]` averaged directly over the index J and the redrawn
/// value, using the kernel's exact quadrature for the base law.
pub fn cond_mean_by_redraw(x: &[f64], kernel: &dyn Kernel) -> Result<Vec<f64>, UstatError> {
    let rule = kernel
        .redraw_rule()
        .ok_or_else(|| UstatError::MissingConditionalKernel(kernel.name(), 0))?;
    let (n, d) = (x.len(), kernel.order());
    let mut out = vec![0.0; d];
    for j in 0..n {
        for (y, w) in rule.nodes.iter().zip(&rule.weights) {
            let du = delta_u(x, kernel, j, *y)?;
            for k in 0..d {
                out[k] += w * du[k] / n as f64;
            }
        }
    }
    Ok(out)
}

/// `E[(W′−W)(W′−W)ᵗ | X]` and `E[W′ − W | X]` via the redraw quadrature.
pub fn cond_moments_by_redraw(x: &[f64], kernel: &dyn Kernel) -> Result<(Vec<f64>, Vec<f64>), UstatError> {
    let rule = kernel
        .redraw_rule()
        .ok_or_else(|| UstatError::MissingConditionalKernel(kernel.name(), 0))?;
    let (n, d) = (x.len(), kernel.order());
    let scale: Vec<f64> = (1..=d).map(|k| (n as f64).sqrt() / choose(n, k)).collect();
    let mut mean = vec![0.0; d];
    let mut prod = vec![0.0; d * d];
    for j in 0..n {
        for (y, w) in rule.nodes.iter().zip(&rule.weights) {
            let du = delta_u(x, kernel, j, *y)?;
            let dw: Vec<f64> = du.iter().zip(&scale).map(|(a, s)| a * s).collect();
            let p = w / n as f64;
            for k in 0..d {
                mean[k] += p * dw[k];
                for l in 0..d {
                    prod[k * d + l] += p * dw[k] * dw[l];
                }
            }
        }
    }
    Ok((prod, mean))
}

/// `n^{−1/2}(4ρ^{1/2}d⁶|h|₂ + ρ^{3/4}d⁷|h|₃)`.
pub fn thm_bound(n: usize, d: usize, rho: f64, db: &DerivBounds) -> f64 {
    let df = d as f64;
    let term2 = if db.h2 == 0.0 { 0.0 } else { 4.0 * rho.sqrt() * df.powi(6) * db.h2 };
    let term3 = if db.h3 == 0.0 { 0.0 } else { rho.powf(0.75) * df.powi(7) * db.h3 };
    (term2 + term3) / (n as f64).sqrt()
}

/// Bound range over `ρ ± k·stderr`.
pub fn thm_bound_interval(n: usize, d: usize, rho: &Estimate, db: &DerivBounds, k: f64) -> (f64, f64) {
    let lo = (rho.mean - k * rho.stderr).max(0.0);
    let hi = rho.mean + k * rho.stderr;
    (thm_bound(n, d, lo, db), thm_bound(n, d, hi, db))
}

/// `Σ = E WWᵗ` from the overlap decomposition
/// `Σ_{kl} = n C(n,l)⁻¹ Σ_c C(k,c) C(n−k,l−c) Eψ_c²`.
pub fn exact_sigma(kernel: &dyn Kernel, n: usize) -> Option<SymMatrix> {
    let d = kernel.order();
    if n < d {
        return None;
    }
    let moments: Vec<f64> = (1..=d).map(|c| kernel.psi_sq_mean(c)).collect::<Option<_>>()?;
    let nf = n as f64;
    Some(SymMatrix::from_upper(d, |i, j| {
        let (k, l) = (i + 1, j + 1);
        let sum: f64 = (1..=k.min(l))
            .map(|c| choose(k, c) * choose(n - k, l - c) * moments[c - 1])
            .sum();
        nf / choose(n, l) * sum
    }))
}

/// `(k·l·Var ψ₁)_{k,l}`, the n → ∞ limit of Σ.
pub fn limit_sigma(kernel: &dyn Kernel) -> Option<SymMatrix> {
    let v = kernel.psi_sq_mean(1)?;
    Some(SymMatrix::from_upper(kernel.order(), |i, j| ((i + 1) * (j + 1)) as f64 * v))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SigmaEstimate {
    pub sigma: SymMatrix,
    pub stderr: Square,
    pub nsamples: u64,
}

impl SigmaEstimate {
    /// Entrywise z-scores against `target`, row-major.
    pub fn z_scores(&self, target: &SymMatrix) -> Vec<f64> {
        let d = target.dim();
        let mut z = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                let diff = self.sigma.get(i, j) - target.get(i, j);
                z.push(if diff == 0.0 { 0.0 } else { diff / self.stderr.get(i, j) });
            }
        }
        z
    }
}

/// Monte Carlo `E WWᵗ` with standard errors.
pub fn estimate_sigma(kernel: &dyn Kernel, n: usize, nsamples: u64, cfg: &McConfig) -> Result<SigmaEstimate, UstatError> {
    let d = kernel.order();
    check_size(n, d)?;
    if kernel.closed_form_u(&vec![0.0; n]).is_none() {
        let work: f64 = (1..=d).map(|k| choose(n, k)).sum::<f64>() * nsamples as f64;
        if work > 1e3 * SUBSET_BUDGET {
            return Err(UstatError::BudgetExceeded(work));
        }
        // fail early rather than inside the parallel loop
        compute_u_by_subsets(&vec![kernel.sample_point(&mut mc::stream_rng(0, 0)); n], kernel)?;
    }
    if nsamples < 2 {
        return Err(McError::TooFewSamples(nsamples).into());
    }
    let acc = mc::map_reduce(
        cfg,
        nsamples,
        || vec![Welford::default(); d * d],
        |rng, acc| {
            let x = sample_points(kernel, n, rng);
            let w = compute_u(&x, kernel).expect("checked").w;
            for i in 0..d {
                for j in 0..d {
                    acc[i * d + j].push(w[i] * w[j]);
                }
            }
        },
    )?;
    let sigma = SymMatrix::symmetrize(&Square::from_fn(d, |i, j| acc[i * d + j].mean));
    let stderr = Square::from_fn(d, |i, j| acc[i * d + j].stderr());
    Ok(SigmaEstimate { sigma, stderr, nsamples })
}

/// Monte Carlo `Eψ⁴`.
pub fn estimate_rho(kernel: &dyn Kernel, nsamples: u64, cfg: &McConfig) -> Result<Estimate, UstatError> {
    let d = kernel.order();
    Ok(mc::estimate(cfg, nsamples, |rng| {
        let x = sample_points(kernel, d, rng);
        kernel.psi(&x).powi(4)
    })?)
}

/// The resample-one-point exchangeable pair on W.
#[derive(Debug)]
pub struct UstatCoupling<'a> {
    pub kernel: &'a dyn Kernel,
    pub n: usize,
}

impl<'a> UstatCoupling<'a> {
    pub fn new(kernel: &'a dyn Kernel, n: usize) -> Result<Self, UstatError> {
        check_size(n, kernel.order())?;
        let probe = vec![kernel.sample_point(&mut mc::stream_rng(0, 0)); n];
        compute_u(&probe, kernel)?;
        Ok(UstatCoupling { kernel, n })
    }
}

pub struct UstatState {
    pub x: Vec<f64>,
    pub u: UVector,
}

impl Coupling for UstatCoupling<'_> {
    type State = UstatState;

    fn dim(&self) -> usize {
        self.kernel.order()
    }

    fn draw_state(&self, rng: &mut StreamRng) -> UstatState {
        let x = sample_points(self.kernel, self.n, rng);
        let u = compute_u(&x, self.kernel).expect("validated in new");
        UstatState { x, u }
    }

    fn embed(&self, s: &UstatState) -> Vec<f64> {
        s.u.w.clone()
    }

    fn draw_delta(&self, s: &UstatState, rng: &mut StreamRng) -> Vec<f64> {
        let j = rng.random_range(0..self.n);
        let y = self.kernel.sample_point(rng);
        let du = delta_u(&s.x, self.kernel, j, y).expect("validated in new");
        let rn = (self.n as f64).sqrt();
        du.iter()
            .enumerate()
            .map(|(k, v)| rn / choose(self.n, k + 1) * v)
            .collect()
    }

    fn lambda(&self) -> LowerMatrix {
        lambda_ustat(self.n, self.kernel.order())
    }

    fn cond_products(&self, s: &UstatState) -> Option<Vec<f64>> {
        cond_moments_by_redraw(&s.x, self.kernel).ok().map(|(p, _)| p)
    }

    fn cond_mean(&self, s: &UstatState) -> Option<Vec<f64>> {
        cond_moments_by_redraw(&s.x, self.kernel).ok().map(|(_, m)| m)
    }

    fn remainder_free(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matlite::{lambda_colsums, lower_inverse};
    use crate::mc::stream_rng;

    /// ψ(x,y,z) = (x+y+z) + (xy+yz+xz) + (x²+y²+z² − 2) on uniform {−1, 0, 1}.
    pub(crate) fn cubic_table() -> FiniteKernel {
        let vals = [-1.0, 0.0, 1.0];
        let mut psi = Vec::new();
        for x in vals {
            for y in vals {
                for z in vals {
                    psi.push(x + y + z + x * y + y * z + x * z + x * x + y * y + z * z - 2.0);
                }
            }
        }
        FiniteKernel::new("cubic", 3, vals.to_vec(), vec![1.0 / 3.0; 3], psi).unwrap()
    }

    /// A kernel that only knows its top-order ψ.
    #[derive(Debug)]
    struct Bare;

    impl Kernel for Bare {
        fn name(&self) -> String {
            "bare".into()
        }
        fn order(&self) -> usize {
            2
        }
        fn psi_k(&self, args: &[f64]) -> Option<f64> {
            (args.len() == 2).then(|| args[0] * args[1] + args[0] + args[1])
        }
        fn sample_point(&self, rng: &mut StreamRng) -> f64 {
            rng.sample(StandardNormal)
        }
    }

    fn kernels() -> Vec<Box<dyn Kernel>> {
        vec![Box::new(RademacherMean), Box::new(SampleVariance), Box::new(cubic_table())]
    }

    #[test]
    fn gauss_hermite_moments() {
        let r = gauss_hermite5();
        let want = [1.0, 0.0, 1.0, 0.0, 3.0, 0.0, 15.0, 0.0, 105.0, 0.0];
        for (p, w) in want.iter().enumerate() {
            let got = r.expect(|x| x.powi(p as i32));
            assert!((got - w).abs() < 1e-10 * w.max(1.0), "degree {p}: {got}");
        }
    }

    #[test]
    fn subsets_in_colex_order() {
        let mut seen = Vec::new();
        for_each_subset(4, 2, |s| seen.push(s.to_vec()));
        assert_eq!(
            seen,
            vec![vec![0, 1], vec![0, 2], vec![1, 2], vec![0, 3], vec![1, 3], vec![2, 3]]
        );
        let mut count = 0;
        for_each_subset(10, 4, |_| count += 1);
        assert_eq!(count, 210);
        let mut empty = 0;
        for_each_subset(5, 0, |s| {
            assert!(s.is_empty());
            empty += 1
        });
        assert_eq!(empty, 1);
        for_each_subset(2, 3, |_| panic!("no subsets"));
    }

    #[test]
    fn rademacher_example() {
        let x = [1.0, 1.0, -1.0, 1.0];
        let u = compute_u(&x, &RademacherMean).unwrap();
        assert_eq!(u.u, vec![1.0, 3.0]);
        assert_eq!(compute_u_by_subsets(&x, &RademacherMean).unwrap(), vec![1.0, 3.0]);
        let du = delta_u(&x, &RademacherMean, 2, 1.0).unwrap();
        assert_eq!(du[1], 3.0);
        assert_eq!(delta_u(&x, &RademacherMean, 2, -1.0).unwrap(), vec![0.0, 0.0]);
        let r = cond_identity_residual(&x, &RademacherMean).unwrap();
        assert!((r.lhs[1] + 0.75).abs() < 1e-15);
        assert!(r.residual.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn zero_sample_gives_zero_u() {
        let u = compute_u(&[0.0; 6], &RademacherMean).unwrap();
        assert_eq!(u.u, vec![0.0, 0.0]);
        assert_eq!(u.w, vec![0.0, 0.0]);
    }

    #[test]
    fn closed_forms_match_subset_sums() {
        let mut rng = stream_rng(21, 0);
        for k in [&RademacherMean as &dyn Kernel, &SampleVariance] {
            for n in [2, 3, 7, 40] {
                let x = sample_points(k, n, &mut rng);
                let a = k.closed_form_u(&x).unwrap();
                let b = compute_u_by_subsets(&x, k).unwrap();
                for (p, q) in a.iter().zip(&b) {
                    assert!((p - q).abs() <= 1e-10 * q.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn kernels_are_symmetric() {
        let mut rng = stream_rng(22, 0);
        for k in kernels() {
            for _ in 0..50 {
                let x = sample_points(k.as_ref(), k.order(), &mut rng);
                let mut y = x.clone();
                y.reverse();
                y.rotate_left(1);
                assert!((k.psi(&x) - k.psi(&y)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn conditional_kernels_are_projections() {
        let mut rng = stream_rng(23, 0);
        for k in kernels() {
            let rule = k.redraw_rule().unwrap();
            let d = k.order();
            for c in 1..d {
                for _ in 0..30 {
                    let x = sample_points(k.as_ref(), c, &mut rng);
                    let proj = rule.expect(|y| {
                        let mut a = x.clone();
                        a.push(y);
                        k.psi_k(&a).unwrap()
                    });
                    assert!((proj - k.psi_k(&x).unwrap()).abs() < 1e-12);
                }
            }
            let mean = rule.expect(|y| k.psi_k(&[y]).unwrap());
            assert!(mean.abs() < 1e-12, "{}", k.name());
        }
    }

    #[test]
    fn incremental_update_matches_recomputation() {
        let mut rng = stream_rng(24, 0);
        for k in kernels() {
            let n = 9;
            let mut x = sample_points(k.as_ref(), n, &mut rng);
            let mut u = compute_u(&x, k.as_ref()).unwrap();
            for _ in 0..1000 {
                let step = pair_step(&x, &u, k.as_ref(), &mut rng).unwrap();
                let diffs = x.iter().zip(&step.x).filter(|(a, b)| a != b).count();
                assert!(diffs <= 1);
                x = step.x;
                u = step.u;
                let fresh = compute_u_by_subsets(&x, k.as_ref()).unwrap();
                for (a, b) in u.u.iter().zip(&fresh) {
                    assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn drift_identity_holds_exactly() {
        let mut rng = stream_rng(25, 0);
        for k in kernels() {
            for n in [4, 10] {
                for _ in 0..100 {
                    let x = sample_points(k.as_ref(), n, &mut rng);
                    let r = cond_identity_residual(&x, k.as_ref()).unwrap();
                    assert!(r.max_relative() <= 1e-12, "{} n={n}", k.name());
                    let direct = cond_mean_by_redraw(&x, k.as_ref()).unwrap();
                    for (a, b) in direct.iter().zip(&r.rhs) {
                        assert!((a - b).abs() <= 1e-12 * r.scale.iter().fold(1.0f64, |m, s| m.max(*s)));
                    }
                }
            }
        }
    }

    #[test]
    fn missing_conditional_kernel() {
        let x = [0.1, 0.2, 0.3];
        assert!(matches!(
            cond_identity_residual(&x, &Bare),
            Err(UstatError::MissingConditionalKernel(_, 1))
        ));
        assert!(matches!(compute_u(&x, &Bare), Err(UstatError::MissingConditionalKernel(..))));
        assert!(UstatCoupling::new(&Bare, 5).is_err());
    }

    #[test]
    fn lambda_and_inverse() {
        assert_eq!(lambda_ustat(7, 1).as_square().as_slice(), &[1.0 / 7.0]);
        let l = lambda_ustat(10, 3);
        let inv = lower_inverse(&l).unwrap();
        let closed = lambda_ustat_inverse(10, 3);
        assert!((inv.as_square() - closed.as_square()).supnorm() < 1e-12);
        let prod = l.as_square() * closed.as_square();
        assert!((&prod - &Square::identity(3)).supnorm() < 1e-12);
        assert_eq!(lambda_colsums(closed.as_square()), vec![30.0, 10.0, 10.0 / 3.0]);
        for (n, d) in [(4, 2), (50, 3), (100, 5)] {
            let cs = lambda_colsums(lambda_ustat_inverse(n, d).as_square());
            for (l, c) in cs.iter().enumerate() {
                let l1 = (l + 1) as f64;
                assert!((c - (d as f64 - l1 + 1.0) * n as f64 / l1).abs() < 1e-12);
                assert!(*c <= (d * n) as f64);
            }
        }
    }

    #[test]
    fn thm_bound_values() {
        let db = DerivBounds::new(1.0, 1.0, 1.0);
        let v = thm_bound(100, 2, 0.5, &db);
        let want = (4.0 * 0.5f64.sqrt() * 64.0 + 0.5f64.powf(0.75) * 128.0) / 10.0;
        assert!((v - want).abs() < 1e-12);
        assert!((v - 25.713).abs() < 5e-4);
        assert_eq!(thm_bound(100, 2, 0.5, &DerivBounds::new(1.0, 0.0, 0.0)), 0.0);
        assert!((thm_bound(400, 2, 0.5, &db) - v / 2.0).abs() < 1e-12);
    }

    #[test]
    fn rho_by_enumeration() {
        assert_eq!(RademacherMean.rho_exact(), Some(0.5));
        let k = cubic_table();
        let brute: f64 = {
            let vals = [-1.0, 0.0, 1.0];
            let mut s = 0.0;
            for x in vals {
                for y in vals {
                    for z in vals {
                        s += k.psi(&[x, y, z]).powi(4) / 27.0;
                    }
                }
            }
            s
        };
        assert!((k.rho_exact().unwrap() - brute).abs() < 1e-12);
    }

    #[test]
    fn rho_estimate_agrees_with_exact() {
        let cfg = McConfig::new(5);
        let est = estimate_rho(&SampleVariance, 200_000, &cfg).unwrap();
        assert!(est.within_sigma(60.0, 4.0), "{est:?}");
        let again = estimate_rho(&SampleVariance, 200_000, &McConfig::new(6)).unwrap();
        let pooled = (est.stderr.powi(2) + again.stderr.powi(2)).sqrt();
        assert!((est.mean - again.mean).abs() <= 4.0 * pooled);
    }

    #[test]
    fn exact_sigma_of_rademacher_kernel() {
        for n in [2, 5, 100, 2000] {
            let s = exact_sigma(&RademacherMean, n).unwrap();
            let want = [[0.25, 0.5], [0.5, 1.0]];
            for i in 0..2 {
                for j in 0..2 {
                    assert!((s.get(i, j) - want[i][j]).abs() < 1e-12);
                }
            }
        }
        let lim = limit_sigma(&RademacherMean).unwrap();
        assert_eq!(lim.get(0, 1), 0.5);
    }

    #[test]
    fn exact_sigma_matches_enumeration() {
        // all 3^n samples of the cubic kernel
        let k = cubic_table();
        let n = 5;
        let mut acc = [[0.0; 3]; 3];
        for idx in 0..3usize.pow(n as u32) {
            let x: Vec<f64> = to_digits(idx, 3, n).iter().map(|d| k.values[*d]).collect();
            let w = compute_u(&x, &k).unwrap().w;
            for i in 0..3 {
                for j in 0..3 {
                    acc[i][j] += w[i] * w[j] / 3f64.powi(n as i32);
                }
            }
        }
        let s = exact_sigma(&k, n).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((s.get(i, j) - acc[i][j]).abs() < 1e-10 * acc[i][j].abs().max(1.0));
            }
        }
    }

    #[test]
    fn sigma_estimate_and_consistency() {
        let cfg = McConfig::new(8);
        for k in [&RademacherMean as &dyn Kernel, &SampleVariance] {
            let n = 50;
            let est = estimate_sigma(k, n, 50_000, &cfg).unwrap();
            let exact = exact_sigma(k, n).unwrap();
            for z in est.z_scores(&exact) {
                assert!(z.abs() <= 4.0, "{}: {z}", k.name());
            }
            let l = lambda_ustat(n, 2);
            assert!(crate::stein::consistency_check(&l, &exact).unwrap() < 1e-12);
            let r = crate::stein::consistency_residual(&l, &est.sigma).unwrap();
            let se = crate::stein::consistency_stderr(&l, &est.stderr).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    assert!(r.get(i, j).abs() <= 4.0 * se.get(i, j) + 1e-15);
                }
            }
        }
    }

    #[test]
    fn sample_variance_u_is_centred() {
        let cfg = McConfig::new(9);
        let est = mc::estimate_many(&cfg, 100_000, 2, |rng, out| {
            let x = sample_points(&SampleVariance, 6, rng);
            let u = compute_u(&x, &SampleVariance).unwrap().u;
            out.copy_from_slice(&u);
        })
        .unwrap();
        for e in est {
            assert!(e.within_sigma(0.0, 4.0));
        }
    }

    #[test]
    fn coupling_conditionals_match_sampling() {
        let k = SampleVariance;
        let c = UstatCoupling::new(&k, 12).unwrap();
        let mut rng = stream_rng(30, 0);
        let s = c.draw_state(&mut rng);
        let exact = c.cond_products(&s).unwrap();
        let mean = c.cond_mean(&s).unwrap();
        let lw = lambda_ustat(12, 2).as_square().matvec(&s.u.w).unwrap();
        for i in 0..2 {
            assert!((mean[i] + lw[i]).abs() < 1e-12);
        }
        let mut acc = vec![Welford::default(); 4];
        for _ in 0..200_000 {
            let dl = c.draw_delta(&s, &mut rng);
            for i in 0..2 {
                for j in 0..2 {
                    acc[i * 2 + j].push(dl[i] * dl[j]);
                }
            }
        }
        for (a, e) in acc.iter().zip(&exact) {
            assert!((a.mean - e).abs() <= 4.0 * a.stderr());
        }
    }

    #[test]
    fn aprime_direct_within_simplified_bound() {
        let k = SampleVariance;
        let n = 50;
        let c = UstatCoupling::new(&k, n).unwrap();
        let sigma = exact_sigma(&k, n).unwrap();
        let lambda = lambda_ustat(n, 2);
        let inv_half = crate::matlite::sym_inv_sqrt(&sigma).unwrap();
        let lh = crate::stein::lambda_hat(&lambda, &sigma).unwrap();
        let cfg = McConfig::new(31);
        let mut opts = mc::AbcOptions::exact(20_000);
        opts.transform = Some(inv_half.as_square().clone());
        let direct = mc::abc_from_pairs(&c, &lh, &opts, &cfg).unwrap();
        let plain = mc::abc_from_pairs(&c, &lh, &mc::AbcOptions::exact(20_000), &cfg).unwrap();
        let bound = crate::stein::aprime_simplified(2, inv_half.supnorm(), &lh, plain.sup_cond_sd);
        assert!(bound.is_finite() && bound > 0.0);
        assert!(direct.stats.a <= bound, "{} > {bound}", direct.stats.a);
    }

    #[test]
    fn finite_kernel_validation() {
        let ok = "2 2\n-1 0.5\n1 0.5\n1 0\n0 -1\n";
        let k = FiniteKernel::parse("t", ok).unwrap();
        assert_eq!(k.psi_k(&[1.0]), Some(-0.5));
        let cases = [
            "2 2\n-1 0.5\n1 0.4\n1 0\n0 -1\n",  // probabilities
            "2 2\n-1 0.5\n1 0.5\n1 0\n2 -1\n",  // asymmetric
            "2 2\n-1 0.5\n1 0.5\n1 1\n1 1\n",   // not centred
            "2 2\n-1 0.5\n1 0.5\n1 -1\n-1 1\n", // degenerate
            "2 2\n-1 0.5\n-1 0.5\n1 0\n0 -1\n", // repeated value
            "2 2\n-1 0.5\n1 0.5\n1 0\n0\n",     // short table
            "2 2\n-1 0.5\n1 0.5\n1 0\n0 -1 7\n", // trailing
            "x 2\n",
        ];
        for c in cases {
            assert!(FiniteKernel::parse("t", c).is_err(), "{c:?}");
        }
        assert!(matches!(load_kernel("no-such-kernel"), Err(UstatError::UnknownKernel(_))));
    }

    #[test]
    fn budget_guard() {
        let x = vec![1.0; 20_000];
        let k = cubic_table();
        assert!(matches!(compute_u_by_subsets(&x, &k), Err(UstatError::BudgetExceeded(_))));
        assert!(matches!(compute_u(&[1.0], &RademacherMean), Err(UstatError::SampleTooSmall { .. })));
    }
}
