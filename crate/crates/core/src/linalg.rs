//! Small dense symmetric positive-definite routines for covariance work.

use ndarray::Array2;

use crate::scalar::Scalar;

/// Lower-triangular Cholesky factor `L` with `A = L·Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    lower: Array2<T>,
}

/// Returned when a pivot is not positive; carries a condition estimate from
/// the squared ratio of extreme pivots seen so far.
#[derive(Debug, Clone, Copy)]
pub struct NotPositiveDefinite {
    pub condition: f64,
}

impl<T: Scalar> Cholesky<T> {
    pub fn factor(a: &Array2<T>) -> Result<Self, NotPositiveDefinite> {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "square matrix required");
        let mut l = Array2::<T>::zeros((n, n));
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for j in 0..n {
            let mut d = a[[j, j]];
            for k in 0..j {
                d -= l[[j, k]] * l[[j, k]];
            }
            if !(d > T::zero()) || !d.is_finite() {
                let condition = if lo.is_finite() && lo > 0.0 { hi / lo } else { f64::INFINITY };
                return Err(NotPositiveDefinite {
                    condition: if d > T::zero() { condition } else { f64::INFINITY },
                });
            }
            let pivot = d.sqrt();
            lo = lo.min(d.as_f64());
            hi = hi.max(d.as_f64());
            l[[j, j]] = pivot;
            for i in j + 1..n {
                let mut s = a[[i, j]];
                for k in 0..j {
                    s -= l[[i, k]] * l[[j, k]];
                }
                l[[i, j]] = s / pivot;
            }
        }
        Ok(Self { lower: l })
    }

    pub fn lower(&self) -> &Array2<T> {
        &self.lower
    }

    /// Solves `A·x = b` in place.
    pub fn solve_in_place(&self, b: &mut [T]) {
        let l = &self.lower;
        let n = l.nrows();
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= l[[i, k]] * b[k];
            }
            b[i] = s / l[[i, i]];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n {
                s -= l[[k, i]] * b[k];
            }
            b[i] = s / l[[i, i]];
        }
    }

    /// `A⁻¹`, symmetrized.
    pub fn inverse(&self) -> Array2<T> {
        let n = self.lower.nrows();
        let mut inv = Array2::<T>::zeros((n, n));
        let mut col = vec![T::zero(); n];
        for j in 0..n {
            col.iter_mut().for_each(|v| *v = T::zero());
            col[j] = T::one();
            self.solve_in_place(&mut col);
            for i in 0..n {
                inv[[i, j]] = col[i];
            }
        }
        let half = T::of(0.5);
        for i in 0..n {
            for j in i + 1..n {
                let m = (inv[[i, j]] + inv[[j, i]]) * half;
                inv[[i, j]] = m;
                inv[[j, i]] = m;
            }
        }
        inv
    }
}
