//! Small dense linear algebra for the handful of 3×3-ish matrices that the
//! bounds need: symmetric covariances, lower-triangular drift matrices,
//! Jacobi eigendecomposition, PSD square roots and column-sum weights.
//!
//! Everything is row-major `f64` and sized for d ≤ ~10.

use std::fmt;
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sweep budget for cyclic Jacobi. Tiny symmetric matrices converge in well
/// under ten sweeps; hitting this means the input is not a sane matrix.
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Relative off-diagonal threshold at which Jacobi stops.
pub const JACOBI_TOL: f64 = 1e-13;

/// Relative eigenvalue tolerance below zero that still counts as PSD.
pub const PSD_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("expected {expected} entries for a {d}x{d} matrix, got {got}")]
    BadShape { d: usize, expected: usize, got: usize },
    #[error("matrix is not symmetric at ({0}, {1})")]
    NotSymmetric(usize, usize),
    #[error("matrix has a nonzero entry above the diagonal at ({0}, {1})")]
    NotLower(usize, usize),
    #[error("matrix is not positive semidefinite (eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("matrix is singular (pivot {0} is zero)")]
    Singular(usize),
    #[error("Jacobi iteration did not converge after {0} sweeps")]
    NoConvergence(usize),
    #[error("matrix contains a non-finite entry")]
    NonFinite,
}

/// Square dense matrix, row-major.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Square {
    d: usize,
    data: Vec<f64>,
}

impl Square {
    pub fn zeros(d: usize) -> Self {
        Square {
            d,
            data: vec![0.0; d * d],
        }
    }

    pub fn identity(d: usize) -> Self {
        Self::diag(&vec![1.0; d])
    }

    pub fn diag(values: &[f64]) -> Self {
        let d = values.len();
        let mut m = Self::zeros(d);
        for (i, v) in values.iter().enumerate() {
            m.data[i * d + i] = *v;
        }
        m
    }

    pub fn from_vec(d: usize, data: Vec<f64>) -> Result<Self, MatError> {
        if data.len() != d * d {
            return Err(MatError::BadShape {
                d,
                expected: d * d,
                got: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(MatError::NonFinite);
        }
        Ok(Square { d, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, MatError> {
        let d = rows.len();
        let mut data = Vec::with_capacity(d * d);
        for r in rows {
            let r = r.as_ref();
            if r.len() != d {
                return Err(MatError::BadShape {
                    d,
                    expected: d * d,
                    got: d * r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(d, data)
    }

    pub fn from_fn(d: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                data.push(f(i, j));
            }
        }
        Square { d, data }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.d + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.d + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.d).map(|r| r.to_vec()).collect()
    }

    pub fn transpose(&self) -> Square {
        Square::from_fn(self.d, |i, j| self.get(j, i))
    }

    pub fn scale(&self, s: f64) -> Square {
        Square {
            d: self.d,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn matmul(&self, other: &Square) -> Result<Square, MatError> {
        if self.d != other.d {
            return Err(MatError::DimensionMismatch(self.d, other.d));
        }
        let d = self.d;
        let mut out = Square::zeros(d);
        for i in 0..d {
            for k in 0..d {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..d {
                    out.data[i * d + j] += a * other.get(k, j);
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>, MatError> {
        if v.len() != self.d {
            return Err(MatError::DimensionMismatch(self.d, v.len()));
        }
        Ok(self
            .data
            .chunks(self.d)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn checked_sub(&self, other: &Square) -> Result<Square, MatError> {
        if self.d != other.d {
            return Err(MatError::DimensionMismatch(self.d, other.d));
        }
        Ok(Square {
            d: self.d,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn trace(&self) -> f64 {
        (0..self.d).map(|i| self.get(i, i)).sum()
    }

    /// Largest absolute entry.
    pub fn supnorm(&self) -> f64 {
        supnorm(&self.data)
    }

    /// Largest absolute off-diagonal entry.
    pub fn off_diag_supnorm(&self) -> f64 {
        let mut m = 0.0f64;
        for i in 0..self.d {
            for j in 0..self.d {
                if i != j {
                    m = m.max(self.get(i, j).abs());
                }
            }
        }
        m
    }
}

impl fmt::Debug for Square {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.data.chunks(self.d)).finish()
    }
}

impl Mul for &Square {
    type Output = Square;
    fn mul(self, rhs: &Square) -> Square {
        self.matmul(rhs).expect("matrix dimensions must agree")
    }
}

impl Add for &Square {
    type Output = Square;
    fn add(self, rhs: &Square) -> Square {
        assert_eq!(self.d, rhs.d, "matrix dimensions must agree");
        Square {
            d: self.d,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Sub for &Square {
    type Output = Square;
    fn sub(self, rhs: &Square) -> Square {
        self.checked_sub(rhs).expect("matrix dimensions must agree")
    }
}

/// Max absolute value of a slice; 0 for an empty slice.
pub fn supnorm(values: &[f64]) -> f64 {
    values.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Symmetric matrix. Symmetry is exact: the constructor rejects any
/// `a[i][j] != a[j][i]`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Square", into = "Square")]
pub struct SymMatrix(Square);

impl SymMatrix {
    pub fn new(m: Square) -> Result<Self, MatError> {
        for i in 0..m.d {
            for j in (i + 1)..m.d {
                if m.get(i, j) != m.get(j, i) {
                    return Err(MatError::NotSymmetric(i, j));
                }
            }
        }
        Ok(SymMatrix(m))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, MatError> {
        Self::new(Square::from_rows(rows)?)
    }

    /// Build from the upper triangle (`j >= i`) of `f`, mirroring it below.
    pub fn from_upper(d: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut m = Square::zeros(d);
        for i in 0..d {
            for j in i..d {
                let v = f(i, j);
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        SymMatrix(m)
    }

    /// `(m + mᵗ) / 2`.
    pub fn symmetrize(m: &Square) -> Self {
        Self::from_upper(m.d, |i, j| 0.5 * (m.get(i, j) + m.get(j, i)))
    }

    pub fn identity(d: usize) -> Self {
        SymMatrix(Square::identity(d))
    }

    pub fn diag(values: &[f64]) -> Self {
        SymMatrix(Square::diag(values))
    }

    pub fn dim(&self) -> usize {
        self.0.d
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    pub fn as_square(&self) -> &Square {
        &self.0
    }

    pub fn into_square(self) -> Square {
        self.0
    }

    pub fn supnorm(&self) -> f64 {
        self.0.supnorm()
    }
}

impl TryFrom<Square> for SymMatrix {
    type Error = MatError;
    fn try_from(m: Square) -> Result<Self, MatError> {
        SymMatrix::new(m)
    }
}

impl From<SymMatrix> for Square {
    fn from(m: SymMatrix) -> Square {
        m.0
    }
}

impl fmt::Debug for SymMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Sym{:?}", self.0)
    }
}

/// Lower-triangular matrix: every entry strictly above the diagonal is zero.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Square", into = "Square")]
pub struct LowerMatrix(Square);

impl LowerMatrix {
    pub fn new(m: Square) -> Result<Self, MatError> {
        for i in 0..m.d {
            for j in (i + 1)..m.d {
                if m.get(i, j) != 0.0 {
                    return Err(MatError::NotLower(i, j));
                }
            }
        }
        Ok(LowerMatrix(m))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, MatError> {
        Self::new(Square::from_rows(rows)?)
    }

    pub fn identity(d: usize) -> Self {
        LowerMatrix(Square::identity(d))
    }

    pub fn diag(values: &[f64]) -> Self {
        LowerMatrix(Square::diag(values))
    }

    pub fn dim(&self) -> usize {
        self.0.d
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    pub fn as_square(&self) -> &Square {
        &self.0
    }

    pub fn is_invertible(&self) -> bool {
        (0..self.0.d).all(|i| self.0.get(i, i) != 0.0)
    }
}

impl TryFrom<Square> for LowerMatrix {
    type Error = MatError;
    fn try_from(m: Square) -> Result<Self, MatError> {
        LowerMatrix::new(m)
    }
}

impl From<LowerMatrix> for Square {
    fn from(m: LowerMatrix) -> Square {
        m.0
    }
}

impl fmt::Debug for LowerMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Lower{:?}", self.0)
    }
}

/// Inverse of a lower-triangular matrix by forward substitution, one column
/// of the identity at a time.
pub fn lower_inverse(l: &LowerMatrix) -> Result<LowerMatrix, MatError> {
    let d = l.dim();
    if let Some(i) = (0..d).find(|&i| l.get(i, i) == 0.0) {
        return Err(MatError::Singular(i));
    }
    let mut inv = Square::zeros(d);
    for col in 0..d {
        // rows above `col` stay zero
        for i in col..d {
            let mut acc = if i == col { 1.0 } else { 0.0 };
            for k in col..i {
                acc -= l.get(i, k) * inv.get(k, col);
            }
            inv.set(i, col, acc / l.get(i, i));
        }
    }
    Ok(LowerMatrix(inv))
}

/// Column sums of absolute values: component `i` is `Σ_m |m[m][i]|`.
///
/// Applied to Λ⁻¹ this gives the λ⁽ⁱ⁾ weights of the smooth bound; applied to
/// Σ^{-1/2}Λ⁻¹Σ^{1/2} it gives the λ̂⁽ⁱ⁾ weights of the non-smooth bound.
pub fn lambda_colsums(m: &Square) -> Vec<f64> {
    let d = m.dim();
    (0..d)
        .map(|i| (0..d).map(|r| m.get(r, i).abs()).sum())
        .collect()
}

/// Eigenvalues and eigenvectors of a symmetric matrix. `vectors` holds the
/// eigenvectors as columns, in the same order as `values`.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Square,
}

/// Cyclic Jacobi eigendecomposition.
///
/// Stops once the off-diagonal supnorm falls to `JACOBI_TOL` times the
/// initial supnorm. Jacobi rotations are orthogonal similarities, so the
/// trace is preserved up to rounding.
pub fn sym_eigen(s: &SymMatrix) -> Result<SymEigen, MatError> {
    let d = s.dim();
    let mut a = s.as_square().clone();
    let mut v = Square::identity(d);
    let scale = a.supnorm();
    if !scale.is_finite() {
        return Err(MatError::NonFinite);
    }
    let threshold = JACOBI_TOL * scale;

    let mut sweeps = 0;
    while a.off_diag_supnorm() > threshold {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(MatError::NoConvergence(sweeps));
        }
        sweeps += 1;
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;

                for k in 0..d {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - sn * akq);
                    a.set(k, q, sn * akp + c * akq);
                }
                for k in 0..d {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - sn * aqk);
                    a.set(q, k, sn * apk + c * aqk);
                }
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);

                for k in 0..d {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - sn * vkq);
                    v.set(k, q, sn * vkp + c * vkq);
                }
            }
        }
    }
    Ok(SymEigen {
        values: (0..d).map(|i| a.get(i, i)).collect(),
        vectors: v,
    })
}

/// Eigenvalues in ascending order.
pub fn psd_eigencheck(s: &SymMatrix) -> Result<Vec<f64>, MatError> {
    let mut values = sym_eigen(s)?.values;
    values.sort_by(|a, b| a.total_cmp(b));
    Ok(values)
}

fn spectral_map(
    eig: &SymEigen,
    f: impl Fn(f64) -> f64,
) -> SymMatrix {
    let d = eig.values.len();
    let fv: Vec<f64> = eig.values.iter().map(|&l| f(l)).collect();
    let v = &eig.vectors;
    let m = Square::from_fn(d, |i, j| (0..d).map(|k| v.get(i, k) * fv[k] * v.get(j, k)).sum());
    SymMatrix::symmetrize(&m)
}

/// The unique symmetric PSD square root.
///
/// Eigenvalues in `[-PSD_TOL·‖S‖, 0)` are clamped to zero; rank-deficient
/// covariances such as the limiting graph covariance come out of floating
/// point with tiny negative eigenvalues.
pub fn sym_sqrt(s: &SymMatrix) -> Result<SymMatrix, MatError> {
    let eig = sym_eigen(s)?;
    let tol = PSD_TOL * s.supnorm();
    if let Some(&bad) = eig.values.iter().find(|&&l| l < -tol) {
        return Err(MatError::NotPsd(bad));
    }
    Ok(spectral_map(&eig, |l| l.max(0.0).sqrt()))
}

/// Σ^{-1/2} for a positive definite Σ. Eigenvalues at or below the PSD
/// tolerance make the matrix singular for this purpose.
pub fn sym_inv_sqrt(s: &SymMatrix) -> Result<SymMatrix, MatError> {
    let eig = sym_eigen(s)?;
    let tol = PSD_TOL * s.supnorm();
    if let Some(&bad) = eig.values.iter().find(|&&l| l < -tol) {
        return Err(MatError::NotPsd(bad));
    }
    if let Some(i) = eig.values.iter().position(|&l| l <= tol) {
        return Err(MatError::Singular(i));
    }
    Ok(spectral_map(&eig, |l| 1.0 / l.sqrt()))
}
