//! Banded storage and a direct LU factorization with partial pivoting.
//!
//! Finite-volume operators on the supported meshes are banded once unknowns
//! are ordered cell-major (all species of cell 0, then cell 1, ...). In 1D the
//! half-bandwidth is `2n - 1`; on an `nx x ny` rectangle it is `n * nx + n - 1`.

use crate::error::SolverError;

/// Square band matrix with `kl` sub- and `ku` super-diagonals.
///
/// Each row keeps `2 * kl + ku + 1` slots starting at column `i - kl`, which
/// leaves room for the fill-in created by row interchanges.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let width = 2 * kl + ku + 1;
        Self {
            n,
            kl,
            ku,
            width,
            data: vec![0.0; n * width],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn lower_bandwidth(&self) -> usize {
        self.kl
    }

    pub fn upper_bandwidth(&self) -> usize {
        self.ku
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.kl >= i && j <= i + self.ku + self.kl);
        i * self.width + (j + self.kl - i)
    }

    /// Entry `(i, j)`; zero outside the band.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j + self.kl < i || j > i + self.ku {
            return 0.0;
        }
        self.data[self.slot(i, j)]
    }

    /// Adds `value` to entry `(i, j)`. Panics if `(i, j)` lies outside the band.
    pub fn add(&mut self, i: usize, j: usize, value: f64) {
        assert!(
            j + self.kl >= i && j <= i + self.ku,
            "entry ({i}, {j}) outside band (kl={}, ku={})",
            self.kl,
            self.ku
        );
        let s = self.slot(i, j);
        self.data[s] += value;
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        assert!(j + self.kl >= i && j <= i + self.ku);
        let s = self.slot(i, j);
        self.data[s] = value;
    }

    /// `y = A x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        (0..self.n)
            .map(|i| {
                let lo = i.saturating_sub(self.kl);
                let hi = (i + self.ku).min(self.n - 1);
                (lo..=hi).map(|j| self.get(i, j) * x[j]).sum()
            })
            .collect()
    }

    /// Right-multiplies by `diag(d)`, i.e. scales column `j` by `d[j]`.
    pub fn scale_columns(&mut self, d: &[f64]) {
        assert_eq!(d.len(), self.n);
        for i in 0..self.n {
            let lo = i.saturating_sub(self.kl);
            let hi = (i + self.ku).min(self.n - 1);
            for (j, dj) in d.iter().enumerate().take(hi + 1).skip(lo) {
                let s = self.slot(i, j);
                self.data[s] *= dj;
            }
        }
    }

    /// Dense row-major copy, for tests and small diagnostics.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.get(i, j)).collect())
            .collect()
    }

    /// LU factorization with partial pivoting (consumes the matrix).
    pub fn factor(mut self) -> Result<BandLu, SolverError> {
        let n = self.n;
        let (kl, ku) = (self.kl, self.ku);
        let mut pivots = vec![0usize; n];
        let scale = self
            .data
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = self.data[self.slot(k, k)].abs();
            for r in k + 1..=last_row {
                let v = self.data[self.slot(r, k)].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if !(best > 1e-300 * scale) || !best.is_finite() {
                return Err(SolverError::SingularMatrix { pivot: k });
            }
            pivots[k] = p;
            let last_col = (k + ku + kl).min(n - 1);
            if p != k {
                for j in k..=last_col {
                    let a = self.slot(k, j);
                    let b = self.slot(p, j);
                    self.data.swap(a, b);
                }
            }
            let pivot = self.data[self.slot(k, k)];
            for r in k + 1..=last_row {
                let srk = self.slot(r, k);
                let l = self.data[srk] / pivot;
                self.data[srk] = l;
                if l != 0.0 {
                    for j in k + 1..=last_col {
                        let skj = self.data[self.slot(k, j)];
                        let srj = self.slot(r, j);
                        self.data[srj] -= l * skj;
                    }
                }
            }
        }
        Ok(BandLu { lu: self, pivots })
    }

    /// Convenience: factor a copy and solve `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, SolverError> {
        Ok(self.clone().factor()?.solve(b))
    }
}

/// Result of [`BandMatrix::factor`].
#[derive(Debug, Clone)]
pub struct BandLu {
    lu: BandMatrix,
    pivots: Vec<usize>,
}

impl BandLu {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let a = &self.lu;
        let n = a.n;
        assert_eq!(b.len(), n);
        let mut x = b.to_vec();
        for k in 0..n {
            let p = self.pivots[k];
            if p != k {
                x.swap(k, p);
            }
            let xk = x[k];
            if xk != 0.0 {
                for r in k + 1..=(k + a.kl).min(n - 1) {
                    x[r] -= a.data[a.slot(r, k)] * xk;
                }
            }
        }
        for k in (0..n).rev() {
            let last_col = (k + a.ku + a.kl).min(n - 1);
            let mut s = x[k];
            for j in k + 1..=last_col {
                s -= a.data[a.slot(k, j)] * x[j];
            }
            x[k] = s / a.data[a.slot(k, k)];
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
    }

    #[test]
    fn matches_dense_solve_with_pivoting() {
        let mut seed = 17;
        for &(n, kl, ku) in &[(1, 0, 0), (5, 1, 1), (12, 3, 2), (30, 5, 5), (9, 8, 8)] {
            let mut a = BandMatrix::zeros(n, kl, ku);
            let mut dense = DMatrix::<f64>::zeros(n, n);
            for i in 0..n {
                for j in i.saturating_sub(kl)..=(i + ku).min(n - 1) {
                    // small diagonal forces row interchanges
                    let v = if i == j {
                        1e-3 * lcg(&mut seed)
                    } else {
                        lcg(&mut seed)
                    };
                    a.set(i, j, v);
                    dense[(i, j)] = v;
                }
            }
            let b: Vec<f64> = (0..n).map(|_| lcg(&mut seed)).collect();
            let x = a.solve(&b).unwrap();
            let xd = dense.lu().solve(&DVector::from_vec(b.clone())).unwrap();
            for i in 0..n {
                assert!(
                    (x[i] - xd[i]).abs() <= 1e-9 * (1.0 + xd[i].abs()),
                    "n={n} i={i}"
                );
            }
            let r = a.mul_vec(&x);
            for i in 0..n {
                assert!((r[i] - b[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn singular_matrix_is_reported() {
        let a = BandMatrix::zeros(3, 1, 1);
        assert!(matches!(
            a.factor(),
            Err(SolverError::SingularMatrix { .. })
        ));
    }
}
