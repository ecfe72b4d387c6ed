//! Lag-distributed transfer-function covariates on a low-order polynomial basis.
//!
//! With `L` lags and `K` basis functions, `H[l-1][k-1] = h_k(l / (L + 1))` and
//! the lagged covariates are `X_t^(k) = sum_l H_k(l) I_{t-l}`. A coefficient
//! vector `beta` on these columns implies lag weights `omega = H beta`.
//! Inputs before the first observation are taken as zero.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Highest supported basis order.
pub const MAX_BASIS: usize = 4;

/// `h_1(v) = v`, `h_2(v) = v(1 - v)`, `h_3 = (1 - 2v) h_2`,
/// `h_4 = (1 - 14v/3 + 14v^2/3) h_2`.
pub fn basis_function(k: usize, v: f64) -> Result<f64> {
    let h2 = v * (1.0 - v);
    match k {
        1 => Ok(v),
        2 => Ok(h2),
        3 => Ok((1.0 - 2.0 * v) * h2),
        4 => Ok((1.0 - 14.0 / 3.0 * v + 14.0 / 3.0 * v * v) * h2),
        _ => Err(Error::Spec(format!("basis function h_{k} is not available (1..={MAX_BASIS})"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LagBasis {
    /// `lags x K`.
    pub h: DMatrix<f64>,
}

impl LagBasis {
    pub fn k(&self) -> usize {
        self.h.ncols()
    }

    pub fn lags(&self) -> usize {
        self.h.nrows()
    }
}

pub fn basis_matrix(k: usize, lags: usize) -> Result<LagBasis> {
    if k == 0 || k > MAX_BASIS {
        return Err(Error::Spec(format!("basis size K = {k} outside 1..={MAX_BASIS}")));
    }
    if lags < k {
        return Err(Error::Spec(format!("{lags} lags cannot support {k} basis functions")));
    }
    let denom = (lags + 1) as f64;
    let mut h = DMatrix::zeros(lags, k);
    for l in 1..=lags {
        for c in 1..=k {
            h[(l - 1, c - 1)] = basis_function(c, l as f64 / denom)?;
        }
    }
    Ok(LagBasis { h })
}

/// Lagged covariates `n x K` for an input series of length `n`.
pub fn lag_covariates(input: &[f64], basis: &LagBasis) -> DMatrix<f64> {
    let n = input.len();
    let mut out = DMatrix::zeros(n, basis.k());
    for t in 0..n {
        for l in 1..=basis.lags().min(t) {
            let v = input[t - l];
            for k in 0..basis.k() {
                out[(t, k)] += basis.h[(l - 1, k)] * v;
            }
        }
    }
    out
}

/// Lag weights `omega = H beta`.
pub fn implied_lag_coefs(beta: &[f64], basis: &LagBasis) -> Result<DVector<f64>> {
    if beta.len() != basis.k() {
        return Err(Error::Contract(format!("{} coefficients for {} basis functions", beta.len(), basis.k())));
    }
    Ok(&basis.h * DVector::from_column_slice(beta))
}
