//! Dense double-precision linear algebra: a row-major [`Matrix`], a cyclic
//! Jacobi symmetric eigensolver, Gram-Schmidt orthonormalization, the
//! lower-triangular mask used by the Hebbian update and principal angles
//! between subspaces.

use std::fmt::Write as _;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Off-diagonal Frobenius norm (relative to `‖A‖_F`) at which Jacobi stops.
pub const JACOBI_TOLERANCE: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Residual norm below which a Gram-Schmidt column is considered dependent.
pub const GRAM_SCHMIDT_DEAD: f64 = 1e-10;

/// Row-major dense matrix with finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entries"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim("ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn from_columns<C: AsRef<[f64]>>(columns: &[C]) -> Result<Self> {
        Ok(Self::from_rows(columns)?.transpose())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

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

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        for (i, &v) in values.iter().enumerate() {
            self[(i, j)] = v;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::dim("row counts differ in Aᵀ·B"));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn mat_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::dim("matrix-vector length"));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `selfᵀ · v`.
    pub fn t_mat_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::dim("transposed matrix-vector length"));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            axpy(vi, self.row(i), &mut out);
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::dim("element-wise operands differ in shape"));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest `|a_ij − a_ji|`; infinite for non-square matrices.
    pub fn asymmetry(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// Scales row `i` by `s[i]`.
    pub fn scale_rows(&self, s: &[f64]) -> Matrix {
        let mut out = self.clone();
        for (i, &si) in s.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|v| *v *= si);
        }
        out
    }

    /// Text form: `rows cols` on the first line, then one row per line with
    /// 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.rows, self.cols);
        for i in 0..self.rows {
            let line: Vec<String> = self.row(i).iter().map(|v| format_f64(*v)).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Matrix> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let (rows, cols) = parse_header(lines.next())?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let line = lines.next().ok_or_else(|| Error::Parse("missing matrix row".into()))?;
            data.extend(parse_floats(line)?);
        }
        Matrix::new(rows, cols, data)
    }

    /// Reads a matrix from a line iterator, consuming exactly `rows + 1` lines.
    pub(crate) fn read_lines<'a>(lines: &mut impl Iterator<Item = &'a str>) -> Result<Matrix> {
        let (rows, cols) = parse_header(lines.next())?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let line = lines.next().ok_or_else(|| Error::Parse("missing matrix row".into()))?;
            data.extend(parse_floats(line)?);
        }
        Matrix::new(rows, cols, data)
    }
}

fn parse_header(line: Option<&str>) -> Result<(usize, usize)> {
    let line = line.ok_or_else(|| Error::Parse("missing matrix header".into()))?;
    let mut it = line.split_whitespace().map(str::parse::<usize>);
    match (it.next(), it.next(), it.next()) {
        (Some(Ok(r)), Some(Ok(c)), None) => Ok((r, c)),
        _ => Err(Error::Parse(format!("bad matrix header {line:?}"))),
    }
}

pub(crate) fn parse_floats(line: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("{t:?}: {e}"))))
        .collect()
}

/// 17 significant digits; parses back to the identical `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `m += w · v vᵀ`
pub fn add_outer(m: &mut Matrix, w: f64, v: &[f64]) {
    let n = v.len();
    for i in 0..n {
        let wi = w * v[i];
        let row = m.row_mut(i);
        for j in 0..n {
            row[j] += wi * v[j];
        }
    }
}

/// Eigenvalues sorted non-increasing with matching orthonormal eigenvector
/// columns.
#[derive(Clone, Debug)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl EigenDecomposition {
    /// `V diag(λ) Vᵀ`
    pub fn reconstruct(&self) -> Matrix {
        let v = &self.eigenvectors;
        let vl = v.scale_cols(&self.eigenvalues);
        vl.matmul(&v.transpose()).expect("square factors")
    }

    /// First `k` eigenvector columns.
    pub fn top(&self, k: usize) -> Matrix {
        self.eigenvectors.first_columns(k)
    }
}

impl Matrix {
    pub fn scale_cols(&self, s: &[f64]) -> Matrix {
        let mut out = self.clone();
        for i in 0..out.rows {
            for (v, &sj) in out.row_mut(i).iter_mut().zip(s) {
                *v *= sj;
            }
        }
        out
    }

    pub fn first_columns(&self, k: usize) -> Matrix {
        let k = k.min(self.cols);
        let mut out = Matrix::zeros(self.rows, k);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[..k]);
        }
        out
    }
}

/// Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Eigenvalues come back sorted non-increasing (stable, so equal eigenvalues
/// keep their original diagonal order) and every eigenvector is signed so
/// that its first component of largest magnitude is non-negative.
pub fn sym_eigen(a: &Matrix) -> Result<EigenDecomposition> {
    if !a.is_square() {
        return Err(Error::dim(format!("eigen input is {}x{}", a.rows, a.cols)));
    }
    let asym = a.asymmetry();
    if asym > 1e-12 * a.max_abs().max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    let n = a.rows;
    let mut w = a.clone();
    // symmetrize exactly so rotations see a consistent matrix
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (w[(i, j)] + w[(j, i)]);
            w[(i, j)] = m;
            w[(j, i)] = m;
        }
    }
    let mut v = Matrix::identity(n);
    let threshold = JACOBI_TOLERANCE * a.frobenius_norm();

    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_diagonal_norm(&w) <= threshold {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = w[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = w[(p, p)];
                let aqq = w[(q, q)];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                rotate(&mut w, &mut v, p, q, c, s, t, apq);
                rotated = true;
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag = w.diagonal();
    order.sort_by(|&i, &j| diag[j].total_cmp(&diag[i]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = v.column(src);
        fix_sign(&mut col);
        vectors.set_column(dst, &col);
    }
    Ok(EigenDecomposition { eigenvalues, eigenvectors: vectors })
}

fn off_diagonal_norm(m: &Matrix) -> f64 {
    let mut s = 0.0;
    for i in 0..m.rows {
        for j in 0..m.cols {
            if i != j {
                s += m[(i, j)] * m[(i, j)];
            }
        }
    }
    s.sqrt()
}

#[allow(clippy::too_many_arguments)]
fn rotate(w: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64, t: f64, apq: f64) {
    let n = w.rows;
    w[(p, p)] -= t * apq;
    w[(q, q)] += t * apq;
    w[(p, q)] = 0.0;
    w[(q, p)] = 0.0;
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = w[(k, p)];
        let akq = w[(k, q)];
        let new_kp = c * akp - s * akq;
        let new_kq = s * akp + c * akq;
        w[(k, p)] = new_kp;
        w[(p, k)] = new_kp;
        w[(k, q)] = new_kq;
        w[(q, k)] = new_kq;
    }
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

fn fix_sign(col: &mut [f64]) {
    let mut best = 0usize;
    for (i, x) in col.iter().enumerate() {
        if x.abs() > col[best].abs() {
            best = i;
        }
    }
    if col.get(best).is_some_and(|&x| x < 0.0) {
        col.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Pseudo-inverse of a symmetric matrix through its eigendecomposition.
/// Eigenvalues with magnitude at most `rel_cutoff · max|λ|` are treated as
/// zero. Returns the pseudo-inverse and the retained rank.
pub fn sym_pinv(a: &Matrix, rel_cutoff: f64) -> Result<(Matrix, usize)> {
    let e = sym_eigen(a)?;
    let top = e.eigenvalues.iter().fold(0.0f64, |m, l| m.max(l.abs()));
    let cutoff = rel_cutoff * top;
    let mut rank = 0;
    let inv: Vec<f64> = e
        .eigenvalues
        .iter()
        .map(|&l| {
            if top > 0.0 && l.abs() > cutoff {
                rank += 1;
                1.0 / l
            } else {
                0.0
            }
        })
        .collect();
    let v = &e.eigenvectors;
    Ok((v.scale_cols(&inv).matmul(&v.transpose())?, rank))
}

/// Output of [`gram_schmidt`].
#[derive(Clone, Debug)]
pub struct Orthonormalized {
    pub q: Matrix,
    /// Indices of input columns whose residual fell below
    /// [`GRAM_SCHMIDT_DEAD`]; those output columns are zero.
    pub dead: Vec<usize>,
}

/// Modified Gram-Schmidt with one re-orthogonalization pass per column.
pub fn gram_schmidt(columns: &Matrix) -> Orthonormalized {
    let (n, k) = columns.shape();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut dead = Vec::new();
    for j in 0..k {
        let mut col = columns.column(j);
        for _ in 0..2 {
            for b in &basis {
                let proj = dot(b, &col);
                axpy(-proj, b, &mut col);
            }
        }
        let r = norm(&col);
        if r < GRAM_SCHMIDT_DEAD || n == 0 {
            dead.push(j);
            basis.push(vec![0.0; n]);
        } else {
            col.iter_mut().for_each(|x| *x /= r);
            basis.push(col);
        }
    }
    let mut q = Matrix::zeros(n, k);
    for (j, b) in basis.iter().enumerate() {
        q.set_column(j, b);
    }
    Orthonormalized { q, dead }
}

/// Zeroes every entry above the diagonal.
pub fn lower_triangular(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::dim("lower_triangular needs a square matrix"));
    }
    let mut out = a.clone();
    for i in 0..a.rows {
        for j in (i + 1)..a.cols {
            out[(i, j)] = 0.0;
        }
    }
    Ok(out)
}

/// Largest deviation of `UᵀU` from the identity.
pub fn orthonormality_defect(u: &Matrix) -> f64 {
    let g = u.t_matmul(u).expect("same rows");
    g.sub(&Matrix::identity(u.cols)).expect("square").max_abs()
}

/// Singular values (descending) from the eigenvalues of the smaller Gram matrix.
pub fn singular_values(a: &Matrix) -> Vec<f64> {
    let gram = if a.rows >= a.cols {
        a.t_matmul(a).expect("gram")
    } else {
        a.matmul(&a.transpose()).expect("gram")
    };
    sym_eigen(&gram)
        .expect("gram matrices are symmetric")
        .eigenvalues
        .into_iter()
        .map(|l| l.max(0.0).sqrt())
        .collect()
}

/// Principal angles (radians, ascending) between the column spans of `u`
/// and `v`, both with orthonormal columns.
///
/// Cosines are the singular values of `uᵀv`, clamped to `[−1, 1]`; sines come
/// from the residual of the smaller basis projected off the larger one, and
/// each angle is `atan2(sin, cos)` so that tiny angles stay accurate.
pub fn principal_angles(u: &Matrix, v: &Matrix) -> Result<Vec<f64>> {
    if u.rows != v.rows {
        return Err(Error::dim("subspaces live in different ambient dimensions"));
    }
    for (name, m) in [("u", u), ("v", v)] {
        let defect = orthonormality_defect(m);
        if defect > 1e-8 {
            return Err(Error::pre(format!("{name} columns not orthonormal (defect {defect:e})")));
        }
    }
    let (big, small) = if u.cols >= v.cols { (u, v) } else { (v, u) };
    let m = small.cols;
    if m == 0 {
        return Ok(Vec::new());
    }
    let c = big.t_matmul(small)?;
    let cosines: Vec<f64> = singular_values(&c).into_iter().take(m).map(|x| x.clamp(-1.0, 1.0)).collect();
    let residual = small.sub(&big.matmul(&c)?)?;
    let mut sines: Vec<f64> = singular_values(&residual).into_iter().take(m).collect();
    sines.reverse();
    let mut angles: Vec<f64> = cosines.iter().zip(&sines).map(|(&cs, &sn)| sn.atan2(cs)).collect();
    angles.sort_by(f64::total_cmp);
    Ok(angles)
}
