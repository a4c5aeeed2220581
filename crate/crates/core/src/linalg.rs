//! Dense kernels: products, Cholesky, and Householder QR with column pivoting.
//!
//! Summation order inside every kernel is fixed so results are bit-for-bit
//! reproducible for identical inputs.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("matrix has estimated rank {rank} < {cols} columns; use a ridge parameter > 0")]
    RankDeficient { rank: usize, cols: usize },
    #[error("empty system: {rows} rows, {cols} columns")]
    Empty { rows: usize, cols: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Which branch of the least-squares procedure produced a solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolvePath {
    Qr,
    Ridge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub estimated_rank: usize,
    pub threshold_used: f64,
    pub path_taken: SolvePath,
}

/// `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols(), b.rows(), "matmul inner dimension");
    let (n, p, q) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(n, q);
    let bs = b.as_slice();
    let os = out.as_mut_slice();
    for i in 0..n {
        let arow = a.row(i);
        let orow = &mut os[i * q..(i + 1) * q];
        for (k, &aik) in arow.iter().enumerate().take(p) {
            if aik == 0.0 {
                continue;
            }
            let brow = &bs[k * q..(k + 1) * q];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    out
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows(), b.rows(), "matmul_tn row mismatch");
    let (p, q) = (a.cols(), b.cols());
    let mut out = Tensor::zeros(p, q);
    let os = out.as_mut_slice();
    for r in 0..a.rows() {
        let arow = a.row(r);
        let brow = b.row(r);
        for (i, &ari) in arow.iter().enumerate() {
            if ari == 0.0 {
                continue;
            }
            let orow = &mut os[i * q..(i + 1) * q];
            for (o, &brj) in orow.iter_mut().zip(brow) {
                *o += ari * brj;
            }
        }
    }
    out
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols(), b.cols(), "matmul_nt column mismatch");
    let (n, q) = (a.rows(), b.rows());
    let mut out = Tensor::zeros(n, q);
    for i in 0..n {
        let arow = a.row(i);
        for j in 0..q {
            out.set(i, j, dot(arow, b.row(j)));
        }
    }
    out
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `fᵀ f`, accumulated as row outer products over the upper triangle.
pub fn gram(f: &Tensor) -> Tensor {
    let m = f.cols();
    let mut g = vec![0.0; m * m];
    for r in 0..f.rows() {
        let row = f.row(r);
        for i in 0..m {
            let fi = row[i];
            if fi == 0.0 {
                continue;
            }
            let out = &mut g[i * m + i..(i + 1) * m];
            for (o, &fj) in out.iter_mut().zip(&row[i..]) {
                *o += fi * fj;
            }
        }
    }
    for i in 0..m {
        for j in 0..i {
            g[i * m + j] = g[j * m + i];
        }
    }
    Tensor::from_vec(m, m, g).expect("square")
}

/// `fᵀ y` for a column vector `y`.
pub fn at_vec(f: &Tensor, y: &[f64]) -> Vec<f64> {
    assert_eq!(f.rows(), y.len());
    let m = f.cols();
    let mut out = vec![0.0; m];
    for (r, &yr) in y.iter().enumerate() {
        if yr == 0.0 {
            continue;
        }
        for (o, &v) in out.iter_mut().zip(f.row(r)) {
            *o += v * yr;
        }
    }
    out
}

/// `f x` for a vector `x`.
pub fn mat_vec(f: &Tensor, x: &[f64]) -> Vec<f64> {
    assert_eq!(f.cols(), x.len());
    (0..f.rows()).map(|r| dot(f.row(r), x)).collect()
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    pub fn new(a: &Tensor) -> Result<Self, LinalgError> {
        let n = a.rows();
        if a.cols() != n {
            return Err(LinalgError::Dimension(format!(
                "cholesky needs a square matrix, got {}x{}",
                n,
                a.cols()
            )));
        }
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let lj = &l[j * n..j * n + j];
            let mut diag = a.get(j, j) - dot(lj, lj);
            if diag <= 0.0 || !diag.is_finite() {
                return Err(LinalgError::NotPositiveDefinite {
                    pivot: j,
                    value: diag,
                });
            }
            diag = diag.sqrt();
            l[j * n + j] = diag;
            for i in j + 1..n {
                let s = a.get(i, j) - dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
                l[i * n + j] = s / diag;
            }
        }
        Ok(Self { n, l })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = b.to_vec();
        for i in 0..n {
            let s = x[i] - dot(&self.l[i * n..i * n + i], &x[..i]);
            x[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * x[k];
            }
            x[i] = s / self.l[i * n + i];
        }
        x
    }
}

/// Householder QR with column pivoting, `F P = Q R`.
#[derive(Debug, Clone)]
pub struct PivotedQr {
    rows: usize,
    cols: usize,
    /// column-major; R in the upper triangle, Householder vectors below it
    qr: Vec<f64>,
    tau: Vec<f64>,
    perm: Vec<usize>,
}

impl PivotedQr {
    pub fn new(f: &Tensor) -> Self {
        let (n, m) = (f.rows(), f.cols());
        let mut a = vec![0.0; n * m];
        for r in 0..n {
            for (c, &v) in f.row(r).iter().enumerate() {
                a[c * n + r] = v;
            }
        }
        let steps = n.min(m);
        let mut perm: Vec<usize> = (0..m).collect();
        let mut norms: Vec<f64> = (0..m).map(|c| sq_norm(&a[c * n..(c + 1) * n])).collect();
        let mut reference = norms.clone();
        let mut tau = vec![0.0; steps];

        for k in 0..steps {
            let mut p = k;
            for j in k + 1..m {
                if norms[j] > norms[p] {
                    p = j;
                }
            }
            if p != k {
                for r in 0..n {
                    a.swap(k * n + r, p * n + r);
                }
                norms.swap(k, p);
                reference.swap(k, p);
                perm.swap(k, p);
            }

            let col = &mut a[k * n..(k + 1) * n];
            let x = &mut col[k..];
            let xnorm = sq_norm(x).sqrt();
            if xnorm == 0.0 {
                tau[k] = 0.0;
                continue;
            }
            let head = x[0];
            let beta = if head >= 0.0 { -xnorm } else { xnorm };
            let scale = 1.0 / (head - beta);
            for v in x[1..].iter_mut() {
                *v *= scale;
            }
            x[0] = beta;
            tau[k] = (beta - head) / beta;

            let (left, right) = a.split_at_mut((k + 1) * n);
            let v_tail = &left[k * n + k + 1..(k + 1) * n];
            for j in k + 1..m {
                let cj = &mut right[(j - k - 1) * n..(j - k) * n];
                let s = tau[k] * (cj[k] + dot(v_tail, &cj[k + 1..]));
                cj[k] -= s;
                for (c, &v) in cj[k + 1..].iter_mut().zip(v_tail) {
                    *c -= s * v;
                }
                let rkj = cj[k];
                norms[j] -= rkj * rkj;
                // Downdating loses accuracy once most of the norm is gone.
                if norms[j] <= 1e-6 * reference[j] {
                    norms[j] = sq_norm(&cj[k + 1..]);
                    reference[j] = norms[j];
                }
            }
        }
        Self {
            rows: n,
            cols: m,
            qr: a,
            tau,
            perm,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Column permutation: position `j` of `R` holds original column `perm[j]`.
    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn r_diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols))
            .map(|k| self.qr[k * self.rows + k])
            .collect()
    }

    /// Number of `|R_ii| > tol · max |R_ii|`.
    pub fn rank(&self, relative_tol: f64) -> usize {
        let diag = self.r_diagonal();
        let max = diag.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if max == 0.0 {
            return 0;
        }
        diag.iter().filter(|v| v.abs() > relative_tol * max).count()
    }

    #[inline]
    fn r(&self, i: usize, j: usize) -> f64 {
        self.qr[j * self.rows + i]
    }

    fn apply_qt(&self, y: &mut [f64]) {
        let n = self.rows;
        for (k, &t) in self.tau.iter().enumerate() {
            if t == 0.0 {
                continue;
            }
            let v_tail = &self.qr[k * n + k + 1..(k + 1) * n];
            let s = t * (y[k] + dot(v_tail, &y[k + 1..]));
            y[k] -= s;
            for (yi, &v) in y[k + 1..].iter_mut().zip(v_tail) {
                *yi -= s * v;
            }
        }
    }

    fn back_substitute(&self, z: &mut [f64]) {
        let m = self.cols;
        for i in (0..m).rev() {
            let mut s = z[i];
            for j in i + 1..m {
                s -= self.r(i, j) * z[j];
            }
            z[i] = s / self.r(i, i);
        }
    }

    fn forward_substitute_transposed(&self, z: &mut [f64]) {
        let m = self.cols;
        for i in 0..m {
            let mut s = z[i];
            for j in 0..i {
                s -= self.r(j, i) * z[j];
            }
            z[i] = s / self.r(i, i);
        }
    }

    /// Least-squares solution of `F w ≈ y`. Requires full column rank.
    pub fn solve_least_squares(&self, y: &[f64]) -> Vec<f64> {
        assert!(self.rows >= self.cols);
        let mut b = y.to_vec();
        self.apply_qt(&mut b);
        let mut z = b[..self.cols].to_vec();
        self.back_substitute(&mut z);
        self.unpermute(&z)
    }

    /// Solves `(FᵀF) x = v` through `Rᵀ R`. Requires full column rank.
    pub fn solve_normal(&self, v: &[f64]) -> Vec<f64> {
        let mut z: Vec<f64> = self.perm.iter().map(|&p| v[p]).collect();
        self.forward_substitute_transposed(&mut z);
        self.back_substitute(&mut z);
        self.unpermute(&z)
    }

    fn unpermute(&self, z: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.cols];
        for (j, &p) in self.perm.iter().enumerate() {
            x[p] = z[j];
        }
        x
    }
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// How `min ‖F w − y‖²` is to be solved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolvePolicy {
    /// Rank check first: QR when `F` has full column rank, otherwise the ridge
    /// system `(FᵀF + ridge·I) w = Fᵀ y`.
    Auto { ridge: f64, rank_tol: f64 },
    /// Always `(FᵀF + lambda·I) w = Fᵀ y`; `lambda = 0` goes through QR and
    /// fails on rank-deficient input.
    Fixed { lambda: f64, rank_tol: f64 },
}

/// Factorization of the system matrix `FᵀF + λI`, kept for the adjoint solve.
#[derive(Debug, Clone)]
pub enum SystemFactor {
    Qr(PivotedQr),
    Cholesky(Cholesky),
}

impl SystemFactor {
    /// Solves `(FᵀF + λI) x = v` with the stored factor.
    pub fn solve(&self, v: &[f64]) -> Vec<f64> {
        match self {
            SystemFactor::Qr(qr) => qr.solve_normal(v),
            SystemFactor::Cholesky(ch) => ch.solve(v),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LeastSquares {
    pub w: Vec<f64>,
    pub lambda: f64,
    pub report: Option<RankReport>,
    pub factor: SystemFactor,
}

pub fn least_squares(f: &Tensor, y: &[f64], policy: SolvePolicy) -> Result<LeastSquares, LinalgError> {
    let (n, m) = (f.rows(), f.cols());
    if n == 0 || m == 0 {
        return Err(LinalgError::Empty { rows: n, cols: m });
    }
    if y.len() != n {
        return Err(LinalgError::Dimension(format!(
            "target has {} entries, matrix has {} rows",
            y.len(),
            n
        )));
    }
    let (ridge, rank_tol, auto) = match policy {
        SolvePolicy::Auto { ridge, rank_tol } => (ridge, rank_tol, true),
        SolvePolicy::Fixed { lambda, rank_tol } => (lambda, rank_tol, false),
    };
    if auto || ridge == 0.0 {
        let qr = PivotedQr::new(f);
        let rank = qr.rank(rank_tol);
        if rank == m {
            let w = qr.solve_least_squares(y);
            return Ok(LeastSquares {
                w,
                lambda: 0.0,
                report: Some(RankReport {
                    estimated_rank: rank,
                    threshold_used: rank_tol,
                    path_taken: SolvePath::Qr,
                }),
                factor: SystemFactor::Qr(qr),
            });
        }
        if !auto || ridge <= 0.0 {
            return Err(LinalgError::RankDeficient { rank, cols: m });
        }
        let (w, ch) = ridge_solve(f, y, ridge)?;
        return Ok(LeastSquares {
            w,
            lambda: ridge,
            report: Some(RankReport {
                estimated_rank: rank,
                threshold_used: rank_tol,
                path_taken: SolvePath::Ridge,
            }),
            factor: SystemFactor::Cholesky(ch),
        });
    }
    let (w, ch) = ridge_solve(f, y, ridge)?;
    Ok(LeastSquares {
        w,
        lambda: ridge,
        report: None,
        factor: SystemFactor::Cholesky(ch),
    })
}

fn ridge_solve(f: &Tensor, y: &[f64], lambda: f64) -> Result<(Vec<f64>, Cholesky), LinalgError> {
    let mut a = gram(f);
    for i in 0..a.rows() {
        let v = a.get(i, i) + lambda;
        a.set(i, i, v);
    }
    let ch = Cholesky::new(&a)?;
    let rhs = at_vec(f, y);
    Ok((ch.solve(&rhs), ch))
}
