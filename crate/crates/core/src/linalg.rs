//! Dense row-major matrices and the Cholesky factorization used for GP sampling.

use crate::error::{MinoError, Result};
use crate::scalar::Scalar;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(MinoError::shape(
                "Matrix::from_vec",
                rows * cols,
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(MinoError::shape(
                "matmul",
                format!("inner dimension {}", self.cols),
                other.rows,
            ));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        T::gemm(
            self.rows,
            self.cols,
            other.cols,
            T::one(),
            &self.data,
            (self.cols as isize, 1),
            &other.data,
            (other.cols as isize, 1),
            T::zero(),
            &mut out.data,
            (other.cols as isize, 1),
        );
        Ok(out)
    }

    /// `self * other^T`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(MinoError::shape(
                "matmul_nt",
                format!("inner dimension {}", self.cols),
                other.cols,
            ));
        }
        let mut out = Self::zeros(self.rows, other.rows);
        T::gemm(
            self.rows,
            self.cols,
            other.rows,
            T::one(),
            &self.data,
            (self.cols as isize, 1),
            &other.data,
            (1, other.cols as isize),
            T::zero(),
            &mut out.data,
            (other.rows as isize, 1),
        );
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn max_abs_diag(&self) -> T {
        (0..self.rows.min(self.cols))
            .map(|i| self.get(i, i).abs())
            .fold(T::zero(), T::max)
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }
}

/// Lower Cholesky factor together with the diagonal regularizer it needed.
#[derive(Clone, Debug)]
pub struct CholFactor<T> {
    pub lower: Matrix<T>,
    pub jitter_used: T,
}

const CHOLESKY_BLOCK: usize = 96;

/// In-place blocked Cholesky of the lower triangle of `a`.
///
/// On success `a` holds `L` in its lower triangle and zeros above. Returns
/// `false` if a non-positive pivot is met.
fn cholesky_in_place<T: Scalar>(a: &mut Matrix<T>) -> bool {
    let n = a.rows();
    let mut kb = 0;
    while kb < n {
        let b = CHOLESKY_BLOCK.min(n - kb);
        // Diagonal block, unblocked (Cholesky-Crout on rows).
        for i in kb..kb + b {
            for j in kb..=i {
                let mut s = a.get(i, j);
                for k in kb..j {
                    s -= a.get(i, k) * a.get(j, k);
                }
                if i == j {
                    if !(s > T::zero()) || !s.is_finite() {
                        return false;
                    }
                    a.set(i, i, s.sqrt());
                } else {
                    let d = a.get(j, j);
                    a.set(i, j, s / d);
                }
            }
        }
        // Panel below the diagonal block: solve X * L11^T = A21 row by row.
        for i in kb + b..n {
            for j in kb..kb + b {
                let mut s = a.get(i, j);
                for k in kb..j {
                    s -= a.get(i, k) * a.get(j, k);
                }
                let d = a.get(j, j);
                a.set(i, j, s / d);
            }
        }
        // Trailing update A22 -= L21 * L21^T on the lower triangle.
        let start = kb + b;
        if start < n {
            let m = n - start;
            let stride = n as isize;
            let panel: Vec<T> = (start..n)
                .flat_map(|i| a.row(i)[kb..kb + b].to_vec())
                .collect();
            // Process row strips so only the lower triangle is touched.
            let mut r0 = 0;
            while r0 < m {
                let rb = CHOLESKY_BLOCK.min(m - r0);
                let cols = r0 + rb;
                let offset = (start + r0) * n + start;
                T::gemm(
                    rb,
                    b,
                    cols,
                    -T::one(),
                    &panel[r0 * b..],
                    (b as isize, 1),
                    &panel,
                    (1, b as isize),
                    T::one(),
                    &mut a.as_mut_slice()[offset..],
                    (stride, 1),
                );
                r0 += rb;
            }
        }
        kb += b;
    }
    for i in 0..n {
        for j in i + 1..n {
            a.set(i, j, T::zero());
        }
    }
    true
}

/// Cholesky factor of `cov + j*I`, escalating `j` by 10x until it succeeds.
///
/// The first attempt uses `initial_jitter` as given (zero included). Later
/// attempts start at `max(initial_jitter, 1e-10)` and stop once the jitter
/// would exceed `1e-2 * max(diag)`; the cap itself is always tried last.
pub fn cholesky_with_jitter<T: Scalar>(cov: &Matrix<T>, initial_jitter: T) -> Result<CholFactor<T>> {
    let (rows, cols) = cov.shape();
    if rows != cols {
        return Err(MinoError::shape("cholesky_with_jitter", "square matrix", format!("{rows}x{cols}")));
    }
    if initial_jitter < T::zero() || !initial_jitter.is_finite() {
        return Err(MinoError::invalid("jitter must be finite and non-negative"));
    }
    let cap = T::from_f64_lossy(1e-2) * cov.max_abs_diag();
    let mut schedule = vec![initial_jitter];
    let mut j = initial_jitter.max(T::from_f64_lossy(1e-10));
    if j == initial_jitter {
        j = j * T::from_f64_lossy(10.0);
    }
    while j < cap {
        schedule.push(j);
        j = j * T::from_f64_lossy(10.0);
    }
    if cap > initial_jitter {
        schedule.push(cap);
    }

    let mut last = initial_jitter;
    for jitter in schedule {
        last = jitter;
        let mut a = cov.clone();
        for i in 0..rows {
            let d = a.get(i, i);
            a.set(i, i, d + jitter);
        }
        if cholesky_in_place(&mut a) {
            if jitter > T::zero() {
                log::debug!("cholesky needed jitter {:e}", jitter.to_f64().unwrap_or(f64::NAN));
            }
            return Ok(CholFactor {
                lower: a,
                jitter_used: jitter,
            });
        }
    }
    Err(MinoError::NotPositiveDefinite {
        jitter: last.to_f64().unwrap_or(f64::NAN),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn relative_reconstruction_error(c: &Matrix<f64>, f: &CholFactor<f64>) -> f64 {
        let llt = f.lower.matmul_nt(&f.lower).unwrap();
        let mut target = c.clone();
        for i in 0..c.rows() {
            target.set(i, i, c.get(i, i) + f.jitter_used);
        }
        let mut diff = 0.0;
        for (a, b) in llt.as_slice().iter().zip(target.as_slice()) {
            diff += (a - b) * (a - b);
        }
        diff.sqrt() / target.frobenius_norm()
    }

    fn random_spd(n: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let mut c = a.matmul_nt(&a).unwrap();
        for i in 0..n {
            let d = c.get(i, i);
            c.set(i, i, d + 0.1);
        }
        c
    }

    #[test]
    fn identity_factor_needs_no_jitter() {
        let f = cholesky_with_jitter(&Matrix::<f64>::identity(4), 0.0).unwrap();
        assert_eq!(f.jitter_used, 0.0);
        assert_eq!(f.lower, Matrix::identity(4));
    }

    #[test]
    fn rank_deficient_matrix_forces_jitter() {
        let c = Matrix::from_vec(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let f = cholesky_with_jitter(&c, 0.0).unwrap();
        assert!(f.jitter_used > 0.0);
        assert!(relative_reconstruction_error(&c, &f) < 1e-8);
    }

    #[test]
    fn random_spd_reconstructs() {
        let c = random_spd(10, 7);
        let f = cholesky_with_jitter(&c, 0.0).unwrap();
        assert!(relative_reconstruction_error(&c, &f) < 1e-10);
        for i in 0..10 {
            for j in i + 1..10 {
                assert_eq!(f.lower.get(i, j), 0.0);
            }
        }
    }

    #[test]
    fn blocked_path_matches_definition_on_large_matrix() {
        // Larger than one block so the panel and trailing updates run.
        let c = random_spd(250, 3);
        let f = cholesky_with_jitter(&c, 0.0).unwrap();
        assert_eq!(f.jitter_used, 0.0);
        assert!(relative_reconstruction_error(&c, &f) < 1e-12);
    }

    #[test]
    fn negative_definite_fails_naming_final_jitter() {
        let c = Matrix::from_vec(2, 2, vec![-1.0, 0.0, 0.0, -1.0]).unwrap();
        match cholesky_with_jitter(&c, 0.0) {
            Err(MinoError::NotPositiveDefinite { jitter }) => assert!((jitter - 1e-2).abs() < 1e-15),
            other => panic!("unexpected {other:?}"),
        }
    }
}
