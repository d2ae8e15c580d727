//! Dense real linear algebra for small dimensions (d ≤ 10).
//!
//! Everything here works on row-major `Vec<f64>` storage. Compound matrices
//! index their rows and columns by k-subsets in lexicographic order, so
//! `compound_matrix(A, 2)` for a 3×3 `A` uses the order `{0,1}, {0,2}, {1,2}`.

use std::fmt;
use std::ops::{Index, IndexMut, Mul};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported square dimension.
pub const MAX_DIM: usize = 10;

const JACOBI_MAX_SWEEPS: usize = 60;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be positive");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Matrix::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting empty shapes and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::domain("matrix dimensions must be positive"));
        }
        if data.len() != rows * cols {
            return Err(Error::domain(format!(
                "expected {} entries for a {rows}x{cols} matrix, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite matrix entry {bad}")));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::domain("ragged rows"));
        }
        Matrix::from_vec(r, c, rows.iter().flat_map(|row| row.iter().copied()).collect())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols, "dimension mismatch in mul_vec");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `self * rhs`, panicking on shape mismatch.
    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.rows, "dimension mismatch in matmul");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let rrow = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, b) in orow.iter_mut().zip(rrow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// Householder QR. `Q` is square orthogonal (rows×rows), `R` is upper
    /// triangular with a nonnegative diagonal; sign flips are pushed into
    /// the columns of `Q`.
    pub fn qr(&self) -> (Matrix, Matrix) {
        let m = self.rows;
        let n = self.cols;
        let mut r = self.clone();
        let mut q = Matrix::identity(m);
        let mut v = vec![0.0; m];
        for j in 0..n.min(m.saturating_sub(1)) {
            let norm = (j..m).map(|i| r[(i, j)] * r[(i, j)]).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let x0 = r[(j, j)];
            let alpha = if x0 >= 0.0 { -norm } else { norm };
            for i in 0..m {
                v[i] = if i < j { 0.0 } else { r[(i, j)] };
            }
            v[j] -= alpha;
            let vnorm2: f64 = v[j..].iter().map(|x| x * x).sum();
            if vnorm2 == 0.0 {
                continue;
            }
            let beta = 2.0 / vnorm2;
            for c in j..n {
                let dot: f64 = (j..m).map(|i| v[i] * r[(i, c)]).sum();
                let f = beta * dot;
                for i in j..m {
                    r[(i, c)] -= f * v[i];
                }
            }
            for row in 0..m {
                let dot: f64 = (j..m).map(|i| q[(row, i)] * v[i]).sum();
                let f = beta * dot;
                for i in j..m {
                    q[(row, i)] -= f * v[i];
                }
            }
            for i in (j + 1)..m {
                r[(i, j)] = 0.0;
            }
        }
        for i in 0..n.min(m) {
            if r[(i, i)] < 0.0 {
                for c in 0..n {
                    r[(i, c)] = -r[(i, c)];
                }
                for row in 0..m {
                    q[(row, i)] = -q[(row, i)];
                }
            }
        }
        (q, r)
    }

    /// LU factorization with partial pivoting; returns the packed factors,
    /// the row permutation and its sign.
    fn lu(&self) -> (Matrix, Vec<usize>, f64) {
        assert!(self.is_square(), "LU requires a square matrix");
        let n = self.rows;
        let mut a = self.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for k in 0..n {
            let (p, pmax) = (k..n)
                .map(|i| (i, a[(i, k)].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pmax == 0.0 {
                continue;
            }
            if p != k {
                for c in 0..n {
                    a.data.swap(k * n + c, p * n + c);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = a[(k, k)];
            for i in (k + 1)..n {
                let f = a[(i, k)] / pivot;
                a[(i, k)] = f;
                if f != 0.0 {
                    for c in (k + 1)..n {
                        let akc = a[(k, c)];
                        a[(i, c)] -= f * akc;
                    }
                }
            }
        }
        (a, perm, sign)
    }

    pub fn determinant(&self) -> f64 {
        match self.rows {
            1 => self.data[0],
            2 => self.data[0] * self.data[3] - self.data[1] * self.data[2],
            _ => {
                let (lu, _, sign) = self.lu();
                sign * lu.diag().iter().product::<f64>()
            }
        }
    }

    /// Solves `self * x = b` for square nonsingular `self`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if !self.is_square() || b.len() != self.rows {
            return Err(Error::domain("solve needs a square system of matching size"));
        }
        let n = self.rows;
        let (lu, perm, _) = self.lu();
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        if lu.diag().iter().any(|d| d.abs() <= 1e-14 * scale) {
            return Err(Error::Numeric("singular matrix in solve".into()));
        }
        let mut y: Vec<f64> = perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for k in 0..i {
                y[i] -= lu[(i, k)] * y[k];
            }
        }
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                y[i] -= lu[(i, k)] * y[k];
            }
            y[i] /= lu[(i, i)];
        }
        Ok(y)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl Mul<&Matrix> for &Matrix {
    type Output = Matrix;
    fn mul(self, rhs: &Matrix) -> Matrix {
        self.matmul(rhs)
    }
}

/// Singular values in descending order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularValueSet {
    values: Vec<f64>,
}

impl SingularValueSet {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Operator 2-norm of the source matrix.
    pub fn largest(&self) -> f64 {
        self.values[0]
    }

    pub fn product(&self) -> f64 {
        self.values.iter().product()
    }

    /// Product of the `k` largest values (`‖∧^k A‖`).
    pub fn top_product(&self, k: usize) -> f64 {
        self.values.iter().take(k).product()
    }
}

/// One-sided Jacobi singular values.
pub fn singular_values(a: &Matrix) -> SingularValueSet {
    // Work on the orientation with at least as many rows as columns.
    let mut w = if a.rows >= a.cols { a.clone() } else { a.transpose() };
    let m = w.rows;
    let n = w.cols;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..m {
                    let ap = w.data[i * n + p];
                    let aq = w.data[i * n + q];
                    alpha += ap * ap;
                    beta += aq * aq;
                    gamma += ap * aq;
                }
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let ap = w.data[i * n + p];
                    let aq = w.data[i * n + q];
                    w.data[i * n + p] = c * ap - s * aq;
                    w.data[i * n + q] = s * ap + c * aq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut values: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| w.data[i * n + j].powi(2)).sum::<f64>().sqrt())
        .collect();
    values.sort_by(|x, y| y.total_cmp(x));
    SingularValueSet { values }
}

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// All k-subsets of `0..n` in lexicographic order.
pub fn k_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(binomial(n, k));
    if k == 0 || k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let mut i = k;
        while i > 0 && idx[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            break;
        }
        idx[i - 1] += 1;
        for j in i..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
    out
}

fn check_k(a: &Matrix, k: usize) -> Result<()> {
    if !a.is_square() {
        return Err(Error::domain(format!(
            "exterior power needs a square matrix, got {}x{}",
            a.rows, a.cols
        )));
    }
    if a.rows > MAX_DIM {
        return Err(Error::domain(format!("dimension {} exceeds {MAX_DIM}", a.rows)));
    }
    if k < 1 || k > a.rows {
        return Err(Error::domain(format!("k = {k} outside 1..={}", a.rows)));
    }
    Ok(())
}

/// The k-th compound matrix: entry `(I, J)` is the minor `det A[I, J]`.
pub fn compound_matrix(a: &Matrix, k: usize) -> Result<Matrix> {
    check_k(a, k)?;
    let n = a.rows;
    if k == 1 {
        return Ok(a.clone());
    }
    let subsets = k_subsets(n, k);
    let size = subsets.len();
    let mut out = Matrix::zeros(size, size);
    if k == 2 {
        for (r, rows) in subsets.iter().enumerate() {
            let (i0, i1) = (rows[0], rows[1]);
            for (c, cols) in subsets.iter().enumerate() {
                let (j0, j1) = (cols[0], cols[1]);
                out.data[r * size + c] = a[(i0, j0)] * a[(i1, j1)] - a[(i0, j1)] * a[(i1, j0)];
            }
        }
        return Ok(out);
    }
    let mut minor = Matrix::zeros(k, k);
    for (r, rows) in subsets.iter().enumerate() {
        for (c, cols) in subsets.iter().enumerate() {
            for (mi, &i) in rows.iter().enumerate() {
                for (mj, &j) in cols.iter().enumerate() {
                    minor.data[mi * k + mj] = a[(i, j)];
                }
            }
            out.data[r * size + c] = minor.determinant();
        }
    }
    Ok(out)
}

/// Index tables for building every compound of a `dim × dim` matrix at
/// once by Laplace expansion along the first row of each minor.
#[derive(Debug, Clone)]
pub struct CompoundTables {
    dim: usize,
    /// `subsets[k]`: k-subsets in lexicographic order (`subsets[0] = [[]]`).
    subsets: Vec<Vec<Vec<usize>>>,
    /// `drop[k][s][p]`: index in level `k − 1` of `subsets[k][s]` without
    /// its `p`-th element.
    drop: Vec<Vec<Vec<usize>>>,
}

impl CompoundTables {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::domain(format!("dimension {dim} outside 1..={MAX_DIM}")));
        }
        let mut subsets = vec![vec![Vec::new()]];
        subsets.extend((1..=dim).map(|k| k_subsets(dim, k)));
        let mut drop = vec![Vec::new()];
        for k in 1..=dim {
            let lower = &subsets[k - 1];
            let level = subsets[k]
                .iter()
                .map(|set| {
                    (0..k)
                        .map(|p| {
                            let rest: Vec<usize> =
                                set.iter().enumerate().filter(|&(q, _)| q != p).map(|(_, &v)| v).collect();
                            lower.binary_search(&rest).expect("lexicographic order")
                        })
                        .collect()
                })
                .collect();
            drop.push(level);
        }
        Ok(CompoundTables { dim, subsets, drop })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `[∧^1 A, …, ∧^dim A]`.
    pub fn all_compounds(&self, a: &Matrix) -> Vec<Matrix> {
        assert!(a.rows == self.dim && a.cols == self.dim, "matrix does not match compound tables");
        let mut out: Vec<Matrix> = Vec::with_capacity(self.dim);
        let mut prev = Matrix::identity(1);
        for k in 1..=self.dim {
            let sets = &self.subsets[k];
            let size = sets.len();
            let psize = prev.cols;
            let mut cur = Matrix::zeros(size, size);
            for (r, rows) in sets.iter().enumerate() {
                let i0 = rows[0];
                let prow = self.drop[k][r][0] * psize;
                for (c, cols) in sets.iter().enumerate() {
                    let drops = &self.drop[k][c];
                    let mut acc = 0.0;
                    for (q, &j) in cols.iter().enumerate() {
                        let term = a.data[i0 * self.dim + j] * prev.data[prow + drops[q]];
                        if q % 2 == 0 {
                            acc += term;
                        } else {
                            acc -= term;
                        }
                    }
                    cur.data[r * size + c] = acc;
                }
            }
            out.push(cur.clone());
            prev = cur;
        }
        out
    }
}

/// `‖∧^k A‖`, the top singular value of the k-th compound.
pub fn wedge_norm(a: &Matrix, k: usize) -> Result<f64> {
    let c = compound_matrix(a, k)?;
    Ok(singular_values(&c).largest())
}
