//! Bound evaluators for exchangeable pairs satisfying
//! `E[W′ − W | W] = −ΛW + R`, plus the structural identities any correct
//! (Σ, Λ) pair must satisfy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matlite::{self, LowerMatrix, MatError, Square, SymMatrix};
use crate::mc::{self, Coupling, Estimate, McConfig, McError, Welford};

#[derive(Debug, Error)]
pub enum SteinError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("degenerate inputs: A', B' and C' are all zero, so T' = 0")]
    DegenerateInputs,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Mat(#[from] MatError),
    #[error(transparent)]
    Mc(#[from] McError),
}

/// Suprema of the first three partial derivatives of a test function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivBounds {
    pub h1: f64,
    pub h2: f64,
    pub h3: f64,
}

impl DerivBounds {
    pub fn new(h1: f64, h2: f64, h3: f64) -> Self {
        DerivBounds { h1, h2, h3 }
    }

    pub fn validate(&self) -> Result<(), SteinError> {
        for (name, v) in [("h1", self.h1), ("h2", self.h2), ("h3", self.h3)] {
            if v.is_nan() || v < 0.0 {
                return Err(SteinError::InvalidInput(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Where a set of A/B/C values came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Exact,
    MonteCarlo {
        a_stderr: f64,
        b_stderr: f64,
        c_stderr: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbcStats {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub provenance: Provenance,
}

impl AbcStats {
    pub fn exact(a: f64, b: f64, c: f64) -> Self {
        AbcStats {
            a,
            b,
            c,
            provenance: Provenance::Exact,
        }
    }

    /// Shift each statistic by `k` standard errors (clamped at zero). The
    /// identity for exact stats.
    pub fn shifted(&self, k: f64) -> AbcStats {
        match self.provenance {
            Provenance::Exact => *self,
            Provenance::MonteCarlo {
                a_stderr,
                b_stderr,
                c_stderr,
            } => AbcStats {
                a: (self.a + k * a_stderr).max(0.0),
                b: (self.b + k * b_stderr).max(0.0),
                c: (self.c + k * c_stderr).max(0.0),
                provenance: self.provenance,
            },
        }
    }
}

/// The smooth-function bound
/// `|h|₂/4·A + |h|₃/12·B + (|h|₁ + ½d‖Σ‖^{1/2}|h|₂)·C`.
pub fn smooth_bound(stats: &AbcStats, db: &DerivBounds, d: usize, signorm: f64) -> f64 {
    let c_coeff = if stats.c == 0.0 {
        // h1 may be an infinite sentinel when unused
        0.0
    } else {
        db.h1 + 0.5 * d as f64 * signorm.sqrt() * db.h2
    };
    db.h2 / 4.0 * stats.a + db.h3 / 12.0 * stats.b + c_coeff * stats.c
}

/// `[bound(point − kσ), bound(point + kσ)]`; a degenerate interval for exact
/// stats.
pub fn smooth_bound_interval(stats: &AbcStats, db: &DerivBounds, d: usize, signorm: f64, k: f64) -> (f64, f64) {
    (
        smooth_bound(&stats.shifted(-k), db, d, signorm),
        smooth_bound(&stats.shifted(k), db, d, signorm),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonSmoothInputs {
    pub a_prime: f64,
    pub b_prime: f64,
    pub c_prime: f64,
    pub d: usize,
    /// Smoothing constant of the function class, at least 1.
    pub a: f64,
    /// Dimension constant; not determined by the theory, so user-supplied.
    pub gamma: f64,
}

impl NonSmoothInputs {
    pub fn new(a_prime: f64, b_prime: f64, c_prime: f64, d: usize) -> Self {
        NonSmoothInputs {
            a_prime,
            b_prime,
            c_prime,
            d,
            a: 1.0,
            gamma: 1.0,
        }
    }
}

/// Class constant for indicators of convex sets in dimension `d`.
pub fn convex_class_constant(d: usize) -> f64 {
    2.0 * (d as f64).sqrt()
}

/// Breakdown of the non-smooth bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonSmoothBound {
    pub d_prime: f64,
    pub t_prime: f64,
    /// Bound value, including the γ² prefactor.
    pub value: f64,
}

/// `γ²(−D′ log T′ + B′/(2√T′) + C′ + a√T′)` with `D′ = A′/2 + C′d` and
/// `T′ = (D′ + √(aB′/2 + D′²))² / a²`.
pub fn nonsmooth_bound(inp: &NonSmoothInputs) -> Result<NonSmoothBound, SteinError> {
    let NonSmoothInputs {
        a_prime,
        b_prime,
        c_prime,
        d,
        a,
        gamma,
    } = *inp;
    for (name, v) in [("A'", a_prime), ("B'", b_prime), ("C'", c_prime)] {
        if v.is_nan() || v < 0.0 {
            return Err(SteinError::InvalidInput(format!("{name} must be >= 0, got {v}")));
        }
    }
    if a.is_nan() || a < 1.0 {
        return Err(SteinError::InvalidInput(format!("class constant a must be >= 1, got {a}")));
    }
    if gamma.is_nan() || gamma <= 0.0 {
        return Err(SteinError::InvalidInput(format!("gamma must be > 0, got {gamma}")));
    }
    if a_prime == 0.0 && b_prime == 0.0 && c_prime == 0.0 {
        return Err(SteinError::DegenerateInputs);
    }
    let d_prime = a_prime / 2.0 + c_prime * d as f64;
    let root = d_prime + (a * b_prime / 2.0 + d_prime * d_prime).sqrt();
    let t_prime = root * root / (a * a);
    let sqrt_t = t_prime.sqrt();
    let value = gamma * gamma * (-d_prime * t_prime.ln() + b_prime / (2.0 * sqrt_t) + c_prime + a * sqrt_t);
    Ok(NonSmoothBound {
        d_prime,
        t_prime,
        value,
    })
}

/// `½|h|₂ Σ_{i,j} |σ_ij − σ⁰_ij|`: cost of swapping one Gaussian covariance
/// for another.
pub fn cov_perturbation_bound(sigma: &SymMatrix, sigma0: &SymMatrix, h2: f64) -> Result<f64, SteinError> {
    if sigma.dim() != sigma0.dim() {
        return Err(SteinError::DimensionMismatch(sigma.dim(), sigma0.dim()));
    }
    let sum: f64 = sigma
        .as_square()
        .as_slice()
        .iter()
        .zip(sigma0.as_square().as_slice())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(0.5 * h2 * sum)
}

/// `‖ΛΣ − ΣΛᵗ‖`. Zero (up to rounding) whenever Σ and Λ come from the
/// same exchangeable pair.
pub fn consistency_check(lambda: &LowerMatrix, sigma: &SymMatrix) -> Result<f64, SteinError> {
    Ok(consistency_residual(lambda, sigma)?.supnorm())
}

/// The matrix `ΛΣ − ΣΛᵗ`.
pub fn consistency_residual(lambda: &LowerMatrix, sigma: &SymMatrix) -> Result<Square, SteinError> {
    if lambda.dim() != sigma.dim() {
        return Err(SteinError::DimensionMismatch(lambda.dim(), sigma.dim()));
    }
    let l = lambda.as_square();
    let s = sigma.as_square();
    Ok(&(l * s) - &(s * &l.transpose()))
}

/// Per-entry standard error of `ΛΣ − ΣΛᵗ` given per-entry standard errors
/// of Σ, by the triangle inequality over the linear combination.
pub fn consistency_stderr(lambda: &LowerMatrix, sigma_stderr: &Square) -> Result<Square, SteinError> {
    let d = lambda.dim();
    if sigma_stderr.dim() != d {
        return Err(SteinError::DimensionMismatch(d, sigma_stderr.dim()));
    }
    let l = lambda.as_square();
    Ok(Square::from_fn(d, |k, j| {
        let mut acc = 0.0;
        for m in 0..d {
            acc += l.get(k, m).abs() * sigma_stderr.get(m, j);
            acc += sigma_stderr.get(k, m) * l.get(j, m).abs();
        }
        acc
    }))
}

/// Monte Carlo check of `E(W′−W)(W′−W)ᵗ = 2ΣΛᵗ`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SecondMomentCheck {
    pub target: Square,
    pub estimate: Vec<Estimate>,
    /// `(estimate − target)/stderr`, row-major.
    pub z: Vec<f64>,
}

impl SecondMomentCheck {
    pub fn max_abs_z(&self) -> f64 {
        self.z.iter().fold(0.0f64, |m, z| m.max(z.abs()))
    }
}

pub fn pair_second_moment_check<C: Coupling>(
    coupling: &C,
    lambda: &LowerMatrix,
    sigma: &SymMatrix,
    nsamples: u64,
    cfg: &McConfig,
) -> Result<SecondMomentCheck, SteinError> {
    let d = coupling.dim();
    if lambda.dim() != d || sigma.dim() != d {
        return Err(SteinError::DimensionMismatch(lambda.dim(), sigma.dim()));
    }
    let target = (sigma.as_square() * &lambda.as_square().transpose()).scale(2.0);
    let acc = mc::map_reduce(
        cfg,
        nsamples,
        || vec![Welford::default(); d * d],
        |rng, acc| {
            let state = coupling.draw_state(rng);
            let dl = coupling.draw_delta(&state, rng);
            for i in 0..d {
                for j in 0..d {
                    acc[i * d + j].push(dl[i] * dl[j]);
                }
            }
        },
    )?;
    let estimate: Vec<Estimate> = acc.iter().map(|w| w.estimate(cfg.seed)).collect();
    let z = estimate
        .iter()
        .zip(target.as_slice())
        .map(|(e, t)| e.z_score(*t))
        .collect();
    Ok(SecondMomentCheck { target, estimate, z })
}

/// λ̂⁽ⁱ⁾: column sums of `|Σ^{-1/2} Λ⁻¹ Σ^{1/2}|`.
pub fn lambda_hat(lambda: &LowerMatrix, sigma: &SymMatrix) -> Result<Vec<f64>, SteinError> {
    if lambda.dim() != sigma.dim() {
        return Err(SteinError::DimensionMismatch(lambda.dim(), sigma.dim()));
    }
    let inv = matlite::lower_inverse(lambda)?;
    let half = matlite::sym_sqrt(sigma)?;
    let inv_half = matlite::sym_inv_sqrt(sigma)?;
    let m = &(inv_half.as_square() * inv.as_square()) * half.as_square();
    Ok(matlite::lambda_colsums(&m))
}

/// Simplified upper bound on A′:
/// `d³ ‖Σ^{-1/2}‖² Σλ̂⁽ⁱ⁾ · sup_{k,l} √Var E^W[(W′_k−W_k)(W′_l−W_l)]`.
pub fn aprime_simplified(d: usize, signorm_invhalf: f64, lambdahat: &[f64], sup_condvar_sqrt: f64) -> f64 {
    let d = d as f64;
    d.powi(3) * signorm_invhalf * signorm_invhalf * lambdahat.iter().sum::<f64>() * sup_condvar_sqrt
}
