//! Dense LU factorization with partial pivoting.

use crate::error::{CgsError, Result};
use crate::tensor::Tensor;

/// Pivots smaller than this (relative to the largest entry of the matrix) are
/// treated as singular.
const SINGULAR_EPS: f64 = 1e-13;

/// In-place LU factors `P·A = L·U`, packed row-major.
#[derive(Debug, Clone)]
pub struct LuFactors {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl LuFactors {
    pub fn factor(a: &Tensor) -> Result<Self> {
        let n = a.rows();
        if a.shape().len() != 2 || a.cols() != n {
            return Err(CgsError::dim("lu", a.shape(), &[n, n]));
        }
        let mut lu = a.data().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = a.max_abs().max(f64::MIN_POSITIVE);
        for k in 0..n {
            let (mut piv, mut best) = (k, lu[k * n + k].abs());
            for r in k + 1..n {
                let v = lu[r * n + k].abs();
                if v > best {
                    best = v;
                    piv = r;
                }
            }
            if best <= SINGULAR_EPS * scale {
                return Err(CgsError::Solver(format!(
                    "matrix is numerically singular at column {k}"
                )));
            }
            if piv != k {
                for c in 0..n {
                    lu.swap(k * n + c, piv * n + c);
                }
                perm.swap(k, piv);
            }
            let pivot = lu[k * n + k];
            let (head, tail) = lu.split_at_mut((k + 1) * n);
            let krow = &head[k * n..(k + 1) * n];
            for row in tail.chunks_exact_mut(n) {
                let f = row[k] / pivot;
                row[k] = f;
                if f != 0.0 {
                    for c in k + 1..n {
                        row[c] -= f * krow[c];
                    }
                }
            }
        }
        Ok(LuFactors { n, lu, perm })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A x = b` for a single right-hand side.
    pub fn solve_vec(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.n;
        if b.len() != n {
            return Err(CgsError::dim("lu_solve", &[n], &[b.len()]));
        }
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let row = &self.lu[i * n..i * n + i];
            let s: f64 = row.iter().zip(&x[..i]).map(|(l, v)| l * v).sum();
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let row = &self.lu[i * n + i + 1..(i + 1) * n];
            let s: f64 = row.iter().zip(&x[i + 1..]).map(|(u, v)| u * v).sum();
            x[i] = (x[i] - s) / self.lu[i * n + i];
        }
        Ok(x)
    }
}

/// Convenience wrapper: factor and solve once.
pub fn solve(a: &Tensor, b: &[f64]) -> Result<Vec<f64>> {
    LuFactors::factor(a)?.solve_vec(b)
}
