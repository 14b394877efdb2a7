//! Minimal dense linear algebra, generic over [`Scalar`].
//!
//! nalgebra covers the plain `f64` paths, but the acquisition gradient
//! needs Cholesky factorizations and inverses of matrices of dual numbers,
//! so the handful of operations used by the EP code live here.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major dense matrix.
#[derive(Debug, Clone)]
pub struct Mat<S> {
    pub nrows: usize,
    pub ncols: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Mat<S> {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Mat {
            nrows,
            ncols,
            data: vec![S::zero(); nrows * ncols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = S::one();
        }
        m
    }

    pub fn from_fn(nrows: usize, ncols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(nrows * ncols);
        for i in 0..nrows {
            for j in 0..ncols {
                data.push(f(i, j));
            }
        }
        Mat { nrows, ncols, data }
    }

    /// Lifts an `f64` matrix into any scalar type (constants).
    pub fn lift(src: &Mat<f64>) -> Self {
        Mat {
            nrows: src.nrows,
            ncols: src.ncols,
            data: src.data.iter().map(|&x| S::from_f64(x)).collect(),
        }
    }

    pub fn matvec(&self, v: &[S]) -> Vec<S> {
        debug_assert_eq!(self.ncols, v.len());
        let mut out = vec![S::zero(); self.nrows];
        for i in 0..self.nrows {
            let row = &self.data[i * self.ncols..(i + 1) * self.ncols];
            let mut acc = S::zero();
            for (a, b) in row.iter().zip(v.iter()) {
                acc += *a * *b;
            }
            out[i] = acc;
        }
        out
    }

    pub fn matmul(&self, other: &Mat<S>) -> Mat<S> {
        debug_assert_eq!(self.ncols, other.nrows);
        let mut out = Mat::zeros(self.nrows, other.ncols);
        for i in 0..self.nrows {
            for k in 0..self.ncols {
                let a = self[(i, k)];
                for j in 0..other.ncols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    /// Makes the matrix exactly symmetric by averaging with its transpose.
    pub fn symmetrize(&mut self) {
        debug_assert_eq!(self.nrows, self.ncols);
        let half = S::from_f64(0.5);
        for i in 0..self.nrows {
            for j in (i + 1)..self.ncols {
                let v = (self[(i, j)] + self[(j, i)]) * half;
                self[(i, j)] = v;
                self[(j, i)] = v;
            }
        }
    }

    /// Lower-triangular Cholesky factor of a symmetric PD matrix. Fails if a
    /// pivot is non-positive (checked on the value part for dual scalars).
    pub fn cholesky(&self) -> Result<Chol<S>> {
        debug_assert_eq!(self.nrows, self.ncols);
        let n = self.nrows;
        let mut l = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut sum = self[(i, j)];
                for k in 0..j {
                    sum -= l[(i, k)] * l[(j, k)];
                }
                if i == j {
                    if sum.re() <= 0.0 || !sum.re().is_finite() {
                        return Err(Error::NotPositiveDefinite);
                    }
                    l[(i, j)] = sum.sqrt();
                } else {
                    l[(i, j)] = sum / l[(j, j)];
                }
            }
        }
        Ok(Chol { l })
    }

    /// Cholesky with an escalating diagonal jitter ladder. Returns the
    /// factorization and the jitter that was applied.
    pub fn cholesky_jittered(&self, start: f64, max: f64) -> Result<(Chol<S>, f64)> {
        if let Ok(c) = self.cholesky() {
            return Ok((c, 0.0));
        }
        let mut jitter = start;
        while jitter <= max {
            let mut a = self.clone();
            for i in 0..a.nrows {
                a[(i, i)] += S::from_f64(jitter);
            }
            if let Ok(c) = a.cholesky() {
                return Ok((c, jitter));
            }
            jitter *= 10.0;
        }
        Err(Error::NotPositiveDefinite)
    }
}

impl<S: Scalar> std::ops::Index<(usize, usize)> for Mat<S> {
    type Output = S;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &S {
        &self.data[i * self.ncols + j]
    }
}

impl<S: Scalar> std::ops::IndexMut<(usize, usize)> for Mat<S> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut S {
        &mut self.data[i * self.ncols + j]
    }
}

/// Cholesky factorization (lower triangular).
#[derive(Debug, Clone)]
pub struct Chol<S> {
    pub l: Mat<S>,
}

impl<S: Scalar> Chol<S> {
    pub fn n(&self) -> usize {
        self.l.nrows
    }

    /// log determinant of the factored matrix.
    pub fn logdet(&self) -> S {
        let mut acc = S::zero();
        for i in 0..self.n() {
            acc += self.l[(i, i)].ln();
        }
        acc + acc
    }

    /// Solves A x = b.
    pub fn solve_vec(&self, b: &[S]) -> Vec<S> {
        let n = self.n();
        debug_assert_eq!(b.len(), n);
        let mut y = b.to_vec();
        // forward substitution L y = b
        for i in 0..n {
            let mut v = y[i];
            for k in 0..i {
                v -= self.l[(i, k)] * y[k];
            }
            y[i] = v / self.l[(i, i)];
        }
        // back substitution L^T x = y
        for i in (0..n).rev() {
            let mut v = y[i];
            for k in (i + 1)..n {
                v -= self.l[(k, i)] * y[k];
            }
            y[i] = v / self.l[(i, i)];
        }
        y
    }

    /// Inverse of the factored matrix.
    pub fn inverse(&self) -> Mat<S> {
        let n = self.n();
        let mut inv = Mat::zeros(n, n);
        let mut e = vec![S::zero(); n];
        for j in 0..n {
            e[j] = S::one();
            let col = self.solve_vec(&e);
            e[j] = S::zero();
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        inv.symmetrize();
        inv
    }
}

/// 2x2 symmetric inverse; errors if not PD on the value part.
pub fn inv2<S: Scalar>(a: [[S; 2]; 2]) -> Result<[[S; 2]; 2]> {
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    if det.re() <= 0.0 || a[0][0].re() <= 0.0 || !det.re().is_finite() {
        return Err(Error::NotPositiveDefinite);
    }
    let inv_det = S::one() / det;
    Ok([
        [a[1][1] * inv_det, -a[0][1] * inv_det],
        [-a[1][0] * inv_det, a[0][0] * inv_det],
    ])
}

/// 2x2 matrix-vector product.
pub fn matvec2<S: Scalar>(a: [[S; 2]; 2], v: [S; 2]) -> [S; 2] {
    [
        a[0][0] * v[0] + a[0][1] * v[1],
        a[1][0] * v[0] + a[1][1] * v[1],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut impl Rng) -> Mat<f64> {
        let b = Mat::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let mut a = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += b[(i, k)] * b[(j, k)];
                }
                a[(i, j)] = s + if i == j { n as f64 * 0.1 } else { 0.0 };
            }
        }
        a
    }

    #[test]
    fn cholesky_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_spd(7, &mut rng);
        let c = a.cholesky().unwrap();
        for i in 0..7 {
            for j in 0..7 {
                let mut s = 0.0;
                for k in 0..7 {
                    s += c.l[(i, k)] * c.l[(j, k)];
                }
                assert_relative_eq!(s, a[(i, j)], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn solve_and_inverse_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_spd(6, &mut rng);
        let c = a.cholesky().unwrap();
        let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = c.solve_vec(&b);
        let ax = a.matvec(&x);
        for i in 0..6 {
            assert_relative_eq!(ax[i], b[i], epsilon = 1e-9);
        }
        let inv = c.inverse();
        let x2 = inv.matvec(&b);
        for i in 0..6 {
            assert_relative_eq!(x[i], x2[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn logdet_matches_nalgebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_spd(5, &mut rng);
        let na = nalgebra::DMatrix::from_fn(5, 5, |i, j| a[(i, j)]);
        let expected = na.cholesky().unwrap().l().diagonal().iter().map(|x| 2.0 * x.ln()).sum::<f64>();
        assert_relative_eq!(a.cholesky().unwrap().logdet(), expected, epsilon = 1e-10);
    }

    #[test]
    fn non_pd_detected_and_jitter_recovers() {
        let mut a = Mat::zeros(2, 2);
        a[(0, 0)] = 1.0;
        a[(1, 1)] = -0.5;
        assert!(a.cholesky().is_err());
        assert!(a.cholesky_jittered(1e-10, 1e-4).is_err());
        let mut b = Mat::zeros(2, 2);
        b[(0, 0)] = 1.0;
        b[(0, 1)] = 1.0;
        b[(1, 0)] = 1.0;
        b[(1, 1)] = 1.0; // singular, small jitter fixes it
        let (_, jitter) = b.cholesky_jittered(1e-10, 1e-4).unwrap();
        assert!(jitter > 0.0);
    }

    #[test]
    fn inv2_matches_direct() {
        let a = [[2.0, 0.3], [0.3, 1.5]];
        let inv = inv2(a).unwrap();
        let prod = [
            [
                a[0][0] * inv[0][0] + a[0][1] * inv[1][0],
                a[0][0] * inv[0][1] + a[0][1] * inv[1][1],
            ],
            [
                a[1][0] * inv[0][0] + a[1][1] * inv[1][0],
                a[1][0] * inv[0][1] + a[1][1] * inv[1][1],
            ],
        ];
        assert_relative_eq!(prod[0][0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(prod[1][1], 1.0, epsilon = 1e-12);
        assert_relative_eq!(prod[0][1], 0.0, epsilon = 1e-12);
    }
}
