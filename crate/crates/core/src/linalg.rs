//! Small dense linear-algebra helpers and reproducible summation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const BLOCK: usize = 8;

/// Pairwise accumulation of `n` contributions of a fixed width.
///
/// Items are summed left to right in blocks of eight; block sums are merged
/// like a binary counter, so the order of floating-point additions depends
/// only on `n`.
pub struct PairwiseSum<T> {
    width: usize,
    stack: Vec<(u32, Vec<T>)>,
    pool: Vec<Vec<T>>,
    block: Vec<T>,
    in_block: usize,
}

impl<T: Scalar> PairwiseSum<T> {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            stack: Vec::new(),
            pool: Vec::new(),
            block: vec![T::zero(); width],
            in_block: 0,
        }
    }

    /// Adds one contribution.
    pub fn push(&mut self, item: &[T]) {
        debug_assert_eq!(item.len(), self.width);
        for (acc, v) in self.block.iter_mut().zip(item) {
            *acc += *v;
        }
        self.in_block += 1;
        if self.in_block == BLOCK {
            self.flush_block();
        }
    }

    fn flush_block(&mut self) {
        let mut fresh = self.pool.pop().unwrap_or_else(|| vec![T::zero(); self.width]);
        fresh.iter_mut().for_each(|v| *v = T::zero());
        let mut cur = std::mem::replace(&mut self.block, fresh);
        self.in_block = 0;
        let mut level = 0u32;
        while let Some((top_level, _)) = self.stack.last() {
            if *top_level != level {
                break;
            }
            let (_, mut left) = self.stack.pop().unwrap();
            for (l, r) in left.iter_mut().zip(&cur) {
                *l += *r;
            }
            self.pool.push(cur);
            cur = left;
            level += 1;
        }
        self.stack.push((level, cur));
    }

    /// Total of every pushed contribution.
    pub fn finish(mut self) -> Vec<T> {
        let mut acc = std::mem::take(&mut self.block);
        while let Some((_, mut left)) = self.stack.pop() {
            for (l, r) in left.iter_mut().zip(&acc) {
                *l += *r;
            }
            acc = left;
        }
        acc
    }
}

/// Mean over `n` items of the vectors written by `item(i, out)`.
///
/// `item` must overwrite every entry of `out`. An `Err` from `item` aborts.
pub fn pairwise_mean<T, F, E>(n: usize, width: usize, mut item: F) -> std::result::Result<Vec<T>, E>
where
    T: Scalar,
    F: FnMut(usize, &mut [T]) -> std::result::Result<(), E>,
{
    let mut acc = PairwiseSum::new(width);
    let mut buf = vec![T::zero(); width];
    for i in 0..n {
        item(i, &mut buf)?;
        acc.push(&buf);
    }
    let inv_n = T::one() / T::from_usize_lossy(n.max(1));
    let mut total = acc.finish();
    total.iter_mut().for_each(|v| *v *= inv_n);
    Ok(total)
}

/// `(m + mᵗ) / 2`.
pub fn symmetrize<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    let half = T::lit(0.5);
    (m + m.transpose()) * half
}

pub fn is_symmetric<T: Scalar>(m: &DMatrix<T>, rel_tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.norm();
    (m - m.transpose()).norm() <= T::lit(rel_tol) * scale
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn eigen_range<T: Scalar>(m: &DMatrix<T>) -> (T, T) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut lo = T::max_finite();
    let mut hi = -T::max_finite();
    for v in eig.eigenvalues.iter() {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    (lo, hi)
}

pub fn min_eigenvalue<T: Scalar>(m: &DMatrix<T>) -> T {
    eigen_range(m).0
}

/// Result of inverting a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct SpdInverse<T: Scalar> {
    pub inverse: DMatrix<T>,
    pub min_eigenvalue: T,
    pub condition: T,
}

/// Failure details for [`try_spd_inverse`].
#[derive(Debug, Clone, Copy)]
pub struct NotPositiveDefinite {
    pub min_eigenvalue: f64,
    pub condition: f64,
}

/// Inverts a symmetric positive definite matrix through its eigendecomposition.
///
/// Fails when the smallest eigenvalue is not positive, an entry is not finite,
/// or the condition number exceeds `cond_cap`.
pub fn try_spd_inverse<T: Scalar>(
    m: &DMatrix<T>,
    cond_cap: f64,
) -> std::result::Result<SpdInverse<T>, NotPositiveDefinite> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(NotPositiveDefinite {
            min_eigenvalue: f64::NAN,
            condition: f64::INFINITY,
        });
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let (mut lo, mut hi) = (T::max_finite(), -T::max_finite());
    for v in eig.eigenvalues.iter() {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    let condition = if lo > T::zero() { hi / lo } else { T::infinity() };
    if lo <= T::zero() || condition > T::lit(cond_cap) {
        return Err(NotPositiveDefinite {
            min_eigenvalue: lo.as_f64(),
            condition: condition.as_f64(),
        });
    }
    let q = &eig.eigenvectors;
    let inv_vals = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|v| T::one() / *v));
    let inverse = symmetrize(&(q * DMatrix::from_diagonal(&inv_vals) * q.transpose()));
    Ok(SpdInverse {
        inverse,
        min_eigenvalue: lo,
        condition,
    })
}

/// [`try_spd_inverse`] for a named input matrix; failures become [`Error::Matrix`].
pub fn spd_inverse<T: Scalar>(m: &DMatrix<T>, cond_cap: f64, name: &'static str) -> Result<SpdInverse<T>> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "{name} is {}x{}, expected square",
            m.nrows(),
            m.ncols()
        )));
    }
    try_spd_inverse(m, cond_cap).map_err(|f| Error::Matrix {
        name,
        problem: format!(
            "not positive definite or ill-conditioned (min eigenvalue {:e}, condition {:e})",
            f.min_eigenvalue, f.condition
        ),
    })
}

/// Rank of `m` by singular values relative to the largest one.
pub fn numerical_rank<T: Scalar>(m: &DMatrix<T>) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let top = sv.iter().fold(T::zero(), |a, b| a.max(*b));
    if top <= T::zero() {
        return 0;
    }
    let dim = T::from_usize_lossy(m.nrows().max(m.ncols()));
    let tol = top * dim * T::eps();
    sv.iter().filter(|s| **s > tol).count()
}
