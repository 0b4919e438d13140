//! Dense kernels for matrices of dimension at most [`MAX_DIM`].
//!
//! Storage is inline and fixed-size so that per-cell matrix fields do not
//! allocate. Symmetric eigendecompositions use cyclic Jacobi rotations with
//! a fixed sweep order, which makes every result a deterministic function
//! of the input bits.

use std::fmt;
use std::ops::{Index, IndexMut, Mul};

use crate::error::{Error, Result};

pub const MAX_DIM: usize = 8;

/// Relative symmetry tolerance accepted by [`sym_eig`] and [`SpdMatrix::new`].
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Positive-definiteness floor relative to the largest eigenvalue.
pub const PD_FLOOR: f64 = 1e-12;

const JACOBI_TOL: f64 = 1e-14;
const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Clone, Copy, PartialEq)]
pub struct Vector {
    n: usize,
    v: [f64; MAX_DIM],
}

impl Vector {
    pub fn zeros(n: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&n), "vector dimension {n} out of range");
        Self { n, v: [0.0; MAX_DIM] }
    }

    pub fn from_slice(s: &[f64]) -> Self {
        let mut out = Self::zeros(s.len());
        out.v[..s.len()].copy_from_slice(s);
        out
    }

    pub fn basis(n: usize, i: usize) -> Self {
        let mut out = Self::zeros(n);
        out.v[i] = 1.0;
        out
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.v[..self.n]
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.v[..self.n]
    }

    /// Euclidean length.
    #[inline]
    pub fn norm(&self) -> f64 {
        self.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut out = *self;
        out.as_mut_slice().iter_mut().for_each(|x| *x *= c);
        out
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        self.as_slice().iter().zip(other.as_slice()).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.as_slice().iter().all(|x| x.is_finite())
    }
}

impl Index<usize> for Vector {
    type Output = f64;
    #[inline]
    fn index(&self, i: usize) -> &f64 {
        debug_assert!(i < self.n);
        &self.v[i]
    }
}

impl IndexMut<usize> for Vector {
    #[inline]
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        debug_assert!(i < self.n);
        &mut self.v[i]
    }
}

impl fmt::Debug for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.as_slice()).finish()
    }
}

/// Square matrix, row-major.
#[derive(Clone, Copy, PartialEq)]
pub struct Matrix {
    n: usize,
    a: [f64; MAX_DIM * MAX_DIM],
}

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&n), "matrix dimension {n} out of range");
        Self { n, a: [0.0; MAX_DIM * MAX_DIM] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len());
        for (i, &x) in d.iter().enumerate() {
            m[(i, i)] = x;
        }
        m
    }

    /// Builds from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let n = rows.len();
        let mut m = Self::zeros(n);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), n, "row {i} has the wrong length");
            for (j, &x) in r.iter().enumerate() {
                m[(i, j)] = x;
            }
        }
        m
    }

    /// Builds from `n*n` row-major entries.
    pub fn from_row_major(n: usize, entries: &[f64]) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::DimensionMismatch { expected: n * n, got: entries.len() });
        }
        if !(1..=MAX_DIM).contains(&n) {
            return Err(Error::UnsupportedMatrixDim(n));
        }
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = entries[i * n + j];
            }
        }
        Ok(m)
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n * self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                out.push(self[(i, j)]);
            }
        }
        out
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut out = *self;
        for i in 0..self.n {
            for j in 0..self.n {
                out[(i, j)] *= c;
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Self {
        assert_eq!(self.n, other.n);
        let mut out = *self;
        for i in 0..self.n {
            for j in 0..self.n {
                out[(i, j)] += other[(i, j)];
            }
        }
        out
    }

    pub fn sub(&self, other: &Matrix) -> Self {
        self.add(&other.scale(-1.0))
    }

    #[inline]
    pub fn matmul(&self, other: &Matrix) -> Self {
        debug_assert_eq!(self.n, other.n);
        let n = self.n;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let aik = self.a[i * MAX_DIM + k];
                if aik == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.a[i * MAX_DIM + j] += aik * other.a[k * MAX_DIM + j];
                }
            }
        }
        out
    }

    #[inline]
    pub fn mul_vec(&self, v: &Vector) -> Vector {
        debug_assert_eq!(self.n, v.n);
        let n = self.n;
        let mut out = Vector::zeros(n);
        for i in 0..n {
            let row = &self.a[i * MAX_DIM..i * MAX_DIM + n];
            out.v[i] = row.iter().zip(&v.v[..n]).map(|(a, b)| a * b).sum();
        }
        out
    }

    /// `AᵀA`, symmetric by construction.
    pub fn gram(&self) -> Self {
        let n = self.n;
        let mut g = Self::zeros(n);
        for i in 0..n {
            for j in i..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += self.a[k * MAX_DIM + i] * self.a[k * MAX_DIM + j];
                }
                g.a[i * MAX_DIM + j] = s;
                g.a[j * MAX_DIM + i] = s;
            }
        }
        g
    }

    pub fn frobenius(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                s += self[(i, j)] * self[(i, j)];
            }
        }
        s.sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                m = m.max(self[(i, j)].abs());
            }
        }
        m
    }

    pub fn is_finite(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self[(i, j)].is_finite()))
    }

    /// `vᵀ M v`.
    #[inline]
    pub fn quad_form(&self, v: &Vector) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            let mut r = 0.0;
            for j in 0..self.n {
                r += self.a[i * MAX_DIM + j] * v.v[j];
            }
            s += v.v[i] * r;
        }
        s
    }

    /// Largest asymmetry `|a_ij - a_ji|` with its position.
    fn asymmetry(&self) -> (usize, usize, f64) {
        let mut worst = (0, 0, 0.0);
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                let d = (self[(i, j)] - self[(j, i)]).abs();
                if d > worst.2 {
                    worst = (i, j, d);
                }
            }
        }
        worst
    }

    fn check_symmetric(&self) -> Result<()> {
        let (row, col, defect) = self.asymmetry();
        if defect > SYMMETRY_TOL * self.max_abs().max(f64::MIN_POSITIVE) {
            return Err(Error::NotSymmetric { row, col, defect });
        }
        Ok(())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.n && j < self.n);
        &self.a[i * MAX_DIM + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.n && j < self.n);
        &mut self.a[i * MAX_DIM + j]
    }
}

impl Mul for &Matrix {
    type Output = Matrix;
    fn mul(self, rhs: &Matrix) -> Matrix {
        self.matmul(rhs)
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: Vec<Vec<f64>> =
            (0..self.n).map(|i| (0..self.n).map(|j| self[(i, j)]).collect()).collect();
        f.debug_list().entries(rows).finish()
    }
}

/// A symmetric positive-definite matrix.
#[derive(Clone, Copy, PartialEq)]
pub struct SpdMatrix(Matrix);

impl SpdMatrix {
    /// Validates symmetry and positive definiteness (via Cholesky).
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_finite() {
            return Err(Error::NotPositiveDefinite);
        }
        m.check_symmetric()?;
        if !cholesky_ok(&m) {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(Self(m))
    }

    /// Symmetrizes `(m + mᵀ)/2` before validating; for matrices that are
    /// symmetric up to accumulated rounding.
    pub fn from_nearly_symmetric(m: Matrix) -> Result<Self> {
        m.check_symmetric()?;
        let s = m.add(&m.transpose()).scale(0.5);
        Self::new(s)
    }

    pub fn identity(n: usize) -> Self {
        Self(Matrix::identity(n))
    }

    #[inline]
    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.n
    }

    pub fn inverse(&self) -> Result<SpdMatrix> {
        mat_pow(self, -1.0)
    }

    pub fn sqrt(&self) -> Result<SpdMatrix> {
        mat_pow(self, 0.5)
    }
}

impl fmt::Debug for SpdMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Inverse of a symmetric positive-definite matrix by Cholesky
/// factorization; `None` when the factorization breaks down.
pub fn cholesky_inverse(m: &Matrix) -> Option<Matrix> {
    let n = m.n;
    let mut l = Matrix::zeros(n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    // Invert L by forward substitution, then M⁻¹ = L⁻ᵀ L⁻¹.
    let mut li = Matrix::zeros(n);
    for c in 0..n {
        for i in c..n {
            let mut s = if i == c { 1.0 } else { 0.0 };
            for k in c..i {
                s -= l[(i, k)] * li[(k, c)];
            }
            li[(i, c)] = s / l[(i, i)];
        }
    }
    let mut out = Matrix::zeros(n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = 0.0;
            for k in i..n {
                s += li[(k, i)] * li[(k, j)];
            }
            out[(i, j)] = s;
            out[(j, i)] = s;
        }
    }
    Some(out)
}

fn cholesky_ok(m: &Matrix) -> bool {
    let n = m.n;
    let mut l = [0.0f64; MAX_DIM * MAX_DIM];
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[j * MAX_DIM + k] * l[j * MAX_DIM + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        l[j * MAX_DIM + j] = d;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[i * MAX_DIM + k] * l[j * MAX_DIM + k];
            }
            l[i * MAX_DIM + j] = s / d;
        }
    }
    true
}

/// Eigenpairs of a symmetric matrix: ascending eigenvalues, eigenvectors in
/// the columns of `vectors`.
#[derive(Clone, Debug)]
pub struct SymEig {
    pub values: Vector,
    pub vectors: Matrix,
}

impl SymEig {
    /// `Q diag(φ(λ)) Qᵀ`.
    pub fn reconstruct_with(&self, phi: impl Fn(f64) -> f64) -> Matrix {
        let n = self.values.n;
        let q = &self.vectors;
        let mut out = Matrix::zeros(n);
        for k in 0..n {
            let lk = phi(self.values[k]);
            for i in 0..n {
                let qik = q[(i, k)] * lk;
                for j in 0..n {
                    out[(i, j)] += qik * q[(j, k)];
                }
            }
        }
        out
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.n - 1]
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Sweeps visit the pairs `(p, q)`, `p < q`, in row order and stop once the
/// off-diagonal Frobenius mass falls below `1e-14·‖M‖_F`.
pub fn sym_eig(m: &Matrix) -> Result<SymEig> {
    m.check_symmetric()?;
    Ok(jacobi(m))
}

fn jacobi(m: &Matrix) -> SymEig {
    let n = m.n;
    let mut a = m.add(&m.transpose()).scale(0.5);
    let mut v = Matrix::identity(n);
    let scale = a.frobenius();
    let target = JACOBI_TOL * scale;

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += 2.0 * a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() <= target {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A <- Jᵀ A J with J the (p, q) rotation.
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]).then(i.cmp(&j)));
    let mut values = Vector::zeros(n);
    let mut vectors = Matrix::zeros(n);
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = a[(src, src)];
        for k in 0..n {
            vectors[(k, dst)] = v[(k, src)];
        }
    }
    SymEig { values, vectors }
}

/// `Wʳ` through the eigendecomposition.
///
/// Negative powers refuse matrices whose smallest eigenvalue falls below
/// [`PD_FLOOR`] times the largest.
pub fn mat_pow(w: &SpdMatrix, r: f64) -> Result<SpdMatrix> {
    let n = w.dim();
    if r == 0.0 {
        return Ok(SpdMatrix::identity(n));
    }
    if n == 1 {
        let x = w.0[(0, 0)];
        let y = scalar_pow(x, r);
        if r < 0.0 && !(y.is_finite() && y > 0.0) {
            return Err(Error::NearSingular { min_eig: x, floor: 0.0 });
        }
        return Ok(SpdMatrix(Matrix::diag(&[y])));
    }
    let eig = jacobi(&w.0);
    let floor = PD_FLOOR * eig.max();
    if eig.min() <= 0.0 || (r < 0.0 && eig.min() < floor) {
        return Err(Error::NearSingular { min_eig: eig.min(), floor });
    }
    let m = eig.reconstruct_with(|l| scalar_pow(l, r));
    // Reconstruction is symmetric up to rounding; force exact symmetry.
    Ok(SpdMatrix(m.add(&m.transpose()).scale(0.5)))
}

fn scalar_pow(x: f64, r: f64) -> f64 {
    if r == 1.0 {
        x
    } else if r == -1.0 {
        1.0 / x
    } else if r == 0.5 {
        x.sqrt()
    } else if r == -0.5 {
        1.0 / x.sqrt()
    } else {
        x.powf(r)
    }
}

/// Operator norm: square root of the largest eigenvalue of `AᵀA`.
#[inline]
pub fn op_norm(a: &Matrix) -> f64 {
    match a.n {
        1 => a[(0, 0)].abs(),
        2 => {
            let g = a.gram();
            sym2_max_eig(g[(0, 0)], g[(0, 1)], g[(1, 1)]).sqrt()
        }
        _ => jacobi(&a.gram()).max().max(0.0).sqrt(),
    }
}

/// Largest eigenvalue of the symmetric 2×2 matrix `[[p, q], [q, r]]`.
#[inline]
pub fn sym2_max_eig(p: f64, q: f64, r: f64) -> f64 {
    let mean = 0.5 * (p + r);
    let half_gap = 0.5 * (p - r);
    mean + half_gap.hypot(q)
}
