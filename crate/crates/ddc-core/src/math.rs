//! Scalar math and small dense linear algebra.
//!
//! All transcendental functions go through `libm` so the crate stays `no_std`
//! and produces identical bits on every platform.

use alloc::vec;
use alloc::vec::Vec;

pub const LN_2PI: f64 = 1.8378770664093453;

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

#[inline]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

#[inline]
pub fn floor(x: f64) -> f64 {
    libm::floor(x)
}

#[inline]
pub fn round(x: f64) -> f64 {
    libm::round(x)
}

#[inline]
pub fn hypot(x: f64, y: f64) -> f64 {
    libm::hypot(x, y)
}

#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

#[inline]
pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}

#[inline]
pub fn clamp(x: f64, lo: f64, hi: f64) -> f64 {
    if x < lo {
        lo
    } else if x > hi {
        hi
    } else {
        x
    }
}

/// Numerically stable `ln(1 + exp(x))`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        exp(x)
    } else {
        libm::log1p(exp(x))
    }
}

/// Logistic function, stable on both tails.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn norm2(a: &[f64]) -> f64 {
    sqrt(dot(a, a))
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, sqrt(var))
}

/// Dense row-major matrix. Sizes here are small (latent and action
/// dimensions), so naive loops are the right tool.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        let mut y = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            y[r] = dot(row, x);
        }
        y
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(r, k);
                if a == 0.0 {
                    continue;
                }
                for c in 0..other.cols {
                    out.data[r * other.cols + c] += a * other.at(k, c);
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                *out.at_mut(c, r) = self.at(r, c);
            }
        }
        out
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Mat {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| a * s).collect(),
        }
    }

    pub fn symmetrize(&self) -> Mat {
        assert_eq!(self.rows, self.cols);
        let mut out = self.clone();
        for r in 0..self.rows {
            for c in 0..self.cols {
                let v = 0.5 * (self.at(r, c) + self.at(c, r));
                *out.at_mut(r, c) = v;
            }
        }
        out
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        for r in 0..self.rows {
            for c in (r + 1)..self.cols {
                if abs(self.at(r, c) - self.at(c, r)) > tol {
                    return false;
                }
            }
        }
        true
    }

    /// Solve `A x = b` by LU with partial pivoting. `None` if singular to
    /// working precision.
    pub fn solve(&self, b: &[f64]) -> Option<Vec<f64>> {
        assert_eq!(self.rows, self.cols);
        assert_eq!(b.len(), self.rows);
        let n = self.rows;
        let mut a = self.data.clone();
        let mut x: Vec<f64> = b.to_vec();
        for col in 0..n {
            let mut pivot = col;
            let mut best = abs(a[col * n + col]);
            for r in (col + 1)..n {
                let v = abs(a[r * n + col]);
                if v > best {
                    best = v;
                    pivot = r;
                }
            }
            if best < 1e-300 {
                return None;
            }
            if pivot != col {
                for c in 0..n {
                    a.swap(col * n + c, pivot * n + c);
                }
                x.swap(col, pivot);
            }
            let d = a[col * n + col];
            for r in (col + 1)..n {
                let f = a[r * n + col] / d;
                if f == 0.0 {
                    continue;
                }
                for c in col..n {
                    a[r * n + c] -= f * a[col * n + c];
                }
                x[r] -= f * x[col];
            }
        }
        for col in (0..n).rev() {
            let mut s = x[col];
            for c in (col + 1)..n {
                s -= a[col * n + c] * x[c];
            }
            x[col] = s / a[col * n + col];
        }
        Some(x)
    }

    pub fn determinant(&self) -> f64 {
        assert_eq!(self.rows, self.cols);
        let n = self.rows;
        let mut a = self.data.clone();
        let mut det = 1.0;
        for col in 0..n {
            let mut pivot = col;
            let mut best = abs(a[col * n + col]);
            for r in (col + 1)..n {
                let v = abs(a[r * n + col]);
                if v > best {
                    best = v;
                    pivot = r;
                }
            }
            if best == 0.0 {
                return 0.0;
            }
            if pivot != col {
                for c in 0..n {
                    a.swap(col * n + c, pivot * n + c);
                }
                det = -det;
            }
            det *= a[col * n + col];
            let d = a[col * n + col];
            for r in (col + 1)..n {
                let f = a[r * n + col] / d;
                for c in col..n {
                    a[r * n + c] -= f * a[col * n + c];
                }
            }
        }
        det
    }

    /// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
    /// Returns `(eigenvalues, eigenvectors)` with eigenvectors in columns,
    /// sorted by descending eigenvalue.
    pub fn sym_eigen(&self) -> (Vec<f64>, Mat) {
        assert!(self.is_symmetric(1e-9), "sym_eigen needs a symmetric matrix");
        let n = self.rows;
        let mut a = self.clone();
        let mut v = Mat::identity(n);
        for _sweep in 0..64 {
            let mut off = 0.0;
            for r in 0..n {
                for c in (r + 1)..n {
                    off += a.at(r, c) * a.at(r, c);
                }
            }
            if off < 1e-28 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a.at(p, q);
                    if abs(apq) < 1e-300 {
                        continue;
                    }
                    let app = a.at(p, p);
                    let aqq = a.at(q, q);
                    let theta = 0.5 * (aqq - app) / apq;
                    let t = if theta >= 0.0 {
                        1.0 / (theta + sqrt(1.0 + theta * theta))
                    } else {
                        -1.0 / (-theta + sqrt(1.0 + theta * theta))
                    };
                    let c = 1.0 / sqrt(1.0 + t * t);
                    let s = t * c;
                    for k in 0..n {
                        let akp = a.at(k, p);
                        let akq = a.at(k, q);
                        *a.at_mut(k, p) = c * akp - s * akq;
                        *a.at_mut(k, q) = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a.at(p, k);
                        let aqk = a.at(q, k);
                        *a.at_mut(p, k) = c * apk - s * aqk;
                        *a.at_mut(q, k) = s * apk + c * aqk;
                    }
                    for k in 0..n {
                        let vkp = v.at(k, p);
                        let vkq = v.at(k, q);
                        *v.at_mut(k, p) = c * vkp - s * vkq;
                        *v.at_mut(k, q) = s * vkp + c * vkq;
                    }
                }
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| a.at(j, j).partial_cmp(&a.at(i, i)).unwrap());
        let vals: Vec<f64> = order.iter().map(|&i| a.at(i, i)).collect();
        let mut vecs = Mat::zeros(n, n);
        for (new_c, &old_c) in order.iter().enumerate() {
            for r in 0..n {
                *vecs.at_mut(r, new_c) = v.at(r, old_c);
            }
        }
        (vals, vecs)
    }

    /// Smallest eigenvalue of a symmetric matrix.
    pub fn min_eigenvalue(&self) -> f64 {
        let (vals, _) = self.sym_eigen();
        vals.last().copied().unwrap_or(0.0)
    }

    /// SVD `A = U S Vᵀ` via the eigen-decomposition of `AᵀA`. Adequate for
    /// the small, well-scaled matrices used here (Procrustes, conditioning).
    pub fn svd(&self) -> (Mat, Vec<f64>, Mat) {
        let ata = self.transpose().matmul(self);
        let (mut vals, v) = ata.symmetrize().sym_eigen();
        for val in vals.iter_mut() {
            *val = sqrt(val.max(0.0));
        }
        let n = self.rows;
        let m = self.cols;
        let mut u = Mat::zeros(n, m.min(n));
        for j in 0..m.min(n) {
            let vj: Vec<f64> = (0..m).map(|r| v.at(r, j)).collect();
            let avj = self.matvec(&vj);
            let s = vals[j];
            if s > 1e-300 {
                for r in 0..n {
                    *u.at_mut(r, j) = avj[r] / s;
                }
            } else {
                // Degenerate direction: any unit vector orthogonal to the
                // previous columns works; fall back to a canonical basis pick.
                *u.at_mut(j.min(n - 1), j) = 1.0;
            }
        }
        (u, vals, v)
    }

    /// 2-norm condition number estimate from the SVD.
    pub fn condition_estimate(&self) -> f64 {
        let (_, s, _) = self.svd();
        let smax = s.first().copied().unwrap_or(0.0);
        let smin = s.last().copied().unwrap_or(0.0);
        if smin <= 0.0 {
            f64::INFINITY
        } else {
            smax / smin
        }
    }

    /// Cholesky factor of a symmetric positive definite matrix, `None` when
    /// the matrix is not PD to within `tol` on the diagonal.
    pub fn cholesky(&self, tol: f64) -> Option<Mat> {
        assert_eq!(self.rows, self.cols);
        let n = self.rows;
        let mut l = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = self.at(i, j);
                for k in 0..j {
                    s -= l.at(i, k) * l.at(j, k);
                }
                if i == j {
                    if s <= tol {
                        return None;
                    }
                    *l.at_mut(i, j) = sqrt(s);
                } else {
                    *l.at_mut(i, j) = s / l.at(j, j);
                }
            }
        }
        Some(l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!(abs(a - b) <= tol, "{} vs {} (tol {})", a, b, tol);
    }

    #[test]
    fn softplus_is_stable_and_positive() {
        assert_close(softplus(0.0), ln(2.0), 1e-12);
        assert_close(softplus(100.0), 100.0, 1e-9);
        assert!(softplus(-100.0) > 0.0);
        assert!(softplus(-100.0) < 1e-40);
    }

    #[test]
    fn sigmoid_matches_definition() {
        for &x in &[-20.0, -1.0, 0.0, 0.5, 20.0] {
            assert_close(sigmoid(x), 1.0 / (1.0 + exp(-x)), 1e-15);
        }
    }

    #[test]
    fn solve_recovers_known_solution() {
        let a = Mat::from_rows(3, 3, vec![4.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 2.0]);
        let x_true = [1.0, -2.0, 3.0];
        let b = a.matvec(&x_true);
        let x = a.solve(&b).unwrap();
        for i in 0..3 {
            assert_close(x[i], x_true[i], 1e-12);
        }
    }

    #[test]
    fn solve_detects_singular() {
        let a = Mat::from_rows(2, 2, vec![1.0, 2.0, 2.0, 4.0]);
        assert!(a.solve(&[1.0, 1.0]).is_none());
    }

    #[test]
    fn determinant_matches_cofactor_expansion() {
        let a = Mat::from_rows(2, 2, vec![3.0, 1.0, -2.0, 4.0]);
        assert_close(a.determinant(), 3.0 * 4.0 - 1.0 * (-2.0), 1e-12);
        let b = Mat::from_rows(3, 3, vec![2.0, 0.0, 1.0, 1.0, 3.0, 0.0, 0.0, 1.0, 4.0]);
        // 2*(12-0) - 0 + 1*(1-0)
        assert_close(b.determinant(), 25.0, 1e-12);
    }

    #[test]
    fn jacobi_eigen_diagonalizes() {
        let a = Mat::from_rows(3, 3, vec![4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let (vals, vecs) = a.sym_eigen();
        for j in 0..3 {
            let vj: Vec<f64> = (0..3).map(|r| vecs.at(r, j)).collect();
            let av = a.matvec(&vj);
            for r in 0..3 {
                assert_close(av[r], vals[j] * vj[r], 1e-9);
            }
        }
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
    }

    #[test]
    fn svd_reconstructs_matrix() {
        let a = Mat::from_rows(2, 2, vec![1.0, 2.0, -0.5, 0.7]);
        let (u, s, v) = a.svd();
        let mut smat = Mat::zeros(2, 2);
        for i in 0..2 {
            *smat.at_mut(i, i) = s[i];
        }
        let recon = u.matmul(&smat).matmul(&v.transpose());
        for i in 0..4 {
            assert_close(recon.data[i], a.data[i], 1e-9);
        }
    }

    #[test]
    fn cholesky_accepts_pd_rejects_indefinite() {
        let pd = Mat::from_rows(2, 2, vec![2.0, 0.5, 0.5, 1.0]);
        let l = pd.cholesky(0.0).unwrap();
        let recon = l.matmul(&l.transpose());
        for i in 0..4 {
            assert_close(recon.data[i], pd.data[i], 1e-12);
        }
        let indef = Mat::from_rows(2, 2, vec![1.0, 2.0, 2.0, 1.0]);
        assert!(indef.cholesky(0.0).is_none());
    }
}
