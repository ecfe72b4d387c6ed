//! Masked Cholesky parameterization of the random-effects covariance.
//!
//! `Sigma = L L'` with `L` lower triangular. The free entries of `L` are
//! listed in column-major lower-triangular order, skipping structural zeros;
//! their values form the vector `lambda`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Which lower-triangular entries of `L` are free. Diagonal entries are always free.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LStructure {
    d: usize,
    /// Free `(row, col)` positions, zero-based, column-major order.
    free: Vec<(usize, usize)>,
}

impl LStructure {
    /// Full lower triangle.
    pub fn full(d: usize) -> Self {
        let mut free = Vec::new();
        for c in 0..d {
            for r in c..d {
                free.push((r, c));
            }
        }
        Self { d, free }
    }

    /// Diagonal only (uncorrelated random effects).
    pub fn diagonal(d: usize) -> Self {
        Self { d, free: (0..d).map(|i| (i, i)).collect() }
    }

    /// Builds a structure from free zero-based positions. Diagonal entries
    /// are added if missing.
    pub fn from_free(d: usize, positions: &[(usize, usize)]) -> Result<Self> {
        let mut mask = vec![false; d * d];
        for &(r, c) in positions {
            if r >= d || c >= d {
                return Err(Error::Spec(format!("L entry ({}, {}) outside a {d}x{d} matrix", r + 1, c + 1)));
            }
            if c > r {
                return Err(Error::Spec(format!("L entry ({}, {}) is above the diagonal", r + 1, c + 1)));
            }
            mask[c * d + r] = true;
        }
        for i in 0..d {
            mask[i * d + i] = true;
        }
        let mut free = Vec::new();
        for c in 0..d {
            for r in c..d {
                if mask[c * d + r] {
                    free.push((r, c));
                }
            }
        }
        Ok(Self { d, free })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Number of free entries, i.e. the length of `lambda`.
    pub fn len(&self) -> usize {
        self.free.len()
    }

    pub fn is_empty(&self) -> bool {
        self.free.is_empty()
    }

    pub fn free_positions(&self) -> &[(usize, usize)] {
        &self.free
    }

    pub fn is_free(&self, row: usize, col: usize) -> bool {
        self.free.contains(&(row, col))
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.free.len() {
            return Err(Error::Contract(format!(
                "lambda has length {len} but the L structure has {} free entries",
                self.free.len()
            )));
        }
        Ok(())
    }

    /// Lower-triangular `L` with free entries filled from `lambda`.
    pub fn lambda_to_l(&self, lambda: &[f64]) -> Result<DMatrix<f64>> {
        self.check_len(lambda.len())?;
        let mut l = DMatrix::zeros(self.d, self.d);
        for (&(r, c), &v) in self.free.iter().zip(lambda) {
            l[(r, c)] = v;
        }
        Ok(l)
    }

    /// Inverse of [`lambda_to_l`](Self::lambda_to_l) on the free entries.
    pub fn l_to_lambda(&self, l: &DMatrix<f64>) -> Vec<f64> {
        self.free.iter().map(|&(r, c)| l[(r, c)]).collect()
    }

    /// Random-effects covariance `L L'`.
    pub fn sigma(&self, lambda: &[f64]) -> Result<DMatrix<f64>> {
        let l = self.lambda_to_l(lambda)?;
        Ok(&l * l.transpose())
    }

    /// Row `v` with `v . lambda = (r' L) zeta` for every `lambda`.
    ///
    /// The entry for the free position `(a, b)` is `r_a * zeta_b`.
    pub fn lambda_covariate_row(&self, zeta: &[f64], r: &[f64]) -> Result<Vec<f64>> {
        if zeta.len() != self.d || r.len() != self.d {
            return Err(Error::Contract(format!(
                "zeta has length {} and r has length {}, expected {}",
                zeta.len(),
                r.len(),
                self.d
            )));
        }
        Ok(self.free.iter().map(|&(a, b)| r[a] * zeta[b]).collect())
    }

    /// Indices into `lambda` of the entries in column `col` of `L`.
    pub fn column_indices(&self, col: usize) -> Vec<usize> {
        self.free
            .iter()
            .enumerate()
            .filter(|(_, &(_, c))| c == col)
            .map(|(i, _)| i)
            .collect()
    }

    /// Flips the sign of every column of `L` with a negative diagonal.
    ///
    /// Returns the per-entry sign applied to `lambda`; `Sigma` is unchanged.
    pub fn normalize_signs(&self, lambda: &mut [f64]) -> Vec<f64> {
        let mut signs = vec![1.0; lambda.len()];
        for col in 0..self.d {
            let idx = self.column_indices(col);
            let diag = idx.iter().copied().find(|&i| self.free[i] == (col, col));
            if let Some(di) = diag {
                if lambda[di] < 0.0 {
                    for &i in &idx {
                        lambda[i] = -lambda[i];
                        signs[i] = -1.0;
                    }
                }
            }
        }
        signs
    }

    /// Labels `L11`, `L21`, ... in `lambda` order (one-based indices).
    pub fn labels(&self) -> Vec<String> {
        self.free
            .iter()
            .map(|&(r, c)| {
                if self.d < 10 {
                    format!("L{}{}", r + 1, c + 1)
                } else {
                    format!("L{},{}", r + 1, c + 1)
                }
            })
            .collect()
    }
}

/// Standard deviations and correlation matrix of a covariance matrix.
pub fn correlation(sigma: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let d = sigma.nrows();
    let sd = DVector::from_fn(d, |i, _| sigma[(i, i)].max(0.0).sqrt());
    let corr = DMatrix::from_fn(d, d, |i, j| {
        let denom = sd[i] * sd[j];
        if denom > 0.0 {
            sigma[(i, j)] / denom
        } else if i == j {
            1.0
        } else {
            0.0
        }
    });
    (sd, corr)
}
