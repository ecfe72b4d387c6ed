//! Gauss-Hermite quadrature for the `exp(-x^2)` kernel and its adaptive
//! tensor-product form.
//!
//! For an exponent `F` on `R^d`, the adapted estimate of
//! `(2 pi)^{-d/2} \int exp(F(zeta)) d zeta` is
//!
//! ```text
//! det(K) / pi^{d/2} * sum_I exp(F(mode + sqrt(2) K z_I)) * exp(|z_I|^2) * prod_k w_{i_k}
//! ```
//!
//! which is exact whenever `F` is quadratic with maximum at `mode` and
//! `K K'` equal to the inverse of its negated Hessian.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub const MAX_POINTS_PER_DIM: usize = 50;
pub const MAX_GRID_SIZE: usize = 1_000_000;

/// One-dimensional Gauss-Hermite rule.
#[derive(Debug, Clone, PartialEq)]
pub struct GhRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GhRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Orthonormal Hermite polynomials p_0..p_{n} at x for the weight exp(-x^2).
fn orthonormal_hermite(n: usize, x: f64) -> (f64, f64) {
    let mut prev = 0.0;
    let mut cur = PI.powf(-0.25);
    for k in 0..n {
        let next = x * (2.0 / (k + 1) as f64).sqrt() * cur - (k as f64 / (k + 1) as f64).sqrt() * prev;
        prev = cur;
        cur = next;
    }
    // (p_n(x), p_{n-1}(x))
    (cur, prev)
}

/// Gauss-Hermite nodes and weights with `q` points.
///
/// Nodes start from the Golub-Welsch eigenvalues and are polished by
/// Newton steps on the orthonormal recurrence; weights come from the
/// Christoffel sum, then the rule is symmetrized about zero.
pub fn gauss_hermite(q: usize) -> Result<GhRule> {
    if q == 0 || q > MAX_POINTS_PER_DIM {
        return Err(Error::Quadrature(format!(
            "number of points {q} outside 1..={MAX_POINTS_PER_DIM}"
        )));
    }
    let mut jacobi = DMatrix::<f64>::zeros(q, q);
    for i in 1..q {
        let b = (i as f64 / 2.0).sqrt();
        jacobi[(i, i - 1)] = b;
        jacobi[(i - 1, i)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut nodes: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    nodes.sort_by(|a, b| a.total_cmp(b));

    for x in nodes.iter_mut() {
        for _ in 0..3 {
            let (pn, pn1) = orthonormal_hermite(q, *x);
            let deriv = (2.0 * q as f64).sqrt() * pn1;
            if deriv == 0.0 {
                break;
            }
            *x -= pn / deriv;
        }
    }
    let mut weights: Vec<f64> = nodes
        .iter()
        .map(|&x| {
            let mut sum = 0.0;
            let mut prev = 0.0;
            let mut cur = PI.powf(-0.25);
            sum += cur * cur;
            for k in 0..q - 1 {
                let next = x * (2.0 / (k + 1) as f64).sqrt() * cur - (k as f64 / (k + 1) as f64).sqrt() * prev;
                prev = cur;
                cur = next;
                sum += cur * cur;
            }
            1.0 / sum
        })
        .collect();

    for i in 0..q / 2 {
        let j = q - 1 - i;
        let x = 0.5 * (nodes[j] - nodes[i]);
        nodes[i] = -x;
        nodes[j] = x;
        let w = 0.5 * (weights[i] + weights[j]);
        weights[i] = w;
        weights[j] = w;
    }
    if q % 2 == 1 {
        nodes[q / 2] = 0.0;
    }
    Ok(GhRule { nodes, weights })
}

/// Tensor-product grid of standardized points with kernel-compensated weights.
#[derive(Debug, Clone)]
pub struct TensorGrid {
    pub dim: usize,
    /// `Q^d x d`, one standardized point per row.
    pub points: DMatrix<f64>,
    /// `log W_I = |z_I|^2 + sum_k log w_{i_k}`.
    pub log_weights: Vec<f64>,
}

impl TensorGrid {
    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    /// `W_I = exp(|z_I|^2) prod_k w_{i_k}`.
    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|lw| lw.exp()).collect()
    }
}

/// All `Q^d` index combinations of a rule. With `d = 0` the grid holds a
/// single empty point with unit weight.
pub fn tensor_grid(rule: &GhRule, d: usize) -> Result<TensorGrid> {
    let q = rule.len();
    let size = (0..d).try_fold(1usize, |acc, _| acc.checked_mul(q).filter(|&s| s <= MAX_GRID_SIZE));
    let size = size.ok_or_else(|| {
        Error::Quadrature(format!("grid of {q}^{d} points exceeds the limit of {MAX_GRID_SIZE}"))
    })?;
    let log_w: Vec<f64> = rule.weights.iter().map(|w| w.ln()).collect();
    let mut points = DMatrix::zeros(size, d);
    let mut log_weights = vec![0.0; size];
    let mut idx = vec![0usize; d];
    for row in 0..size {
        let mut lw = 0.0;
        for k in 0..d {
            let z = rule.nodes[idx[k]];
            points[(row, k)] = z;
            lw += z * z + log_w[idx[k]];
        }
        log_weights[row] = lw;
        // Odometer increment, last index fastest.
        for k in (0..d).rev() {
            idx[k] += 1;
            if idx[k] < q {
                break;
            }
            idx[k] = 0;
        }
    }
    Ok(TensorGrid { dim: d, points, log_weights })
}

/// Grid recentred at a mode and rescaled by a lower Cholesky factor.
#[derive(Debug, Clone)]
pub struct AdaptedGrid {
    /// `mode + sqrt(2) K z_I`, one per row.
    pub points: DMatrix<f64>,
    pub log_weights: Vec<f64>,
    /// `log(det(K) / pi^{d/2})`.
    pub log_prefactor: f64,
}

impl AdaptedGrid {
    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn prefactor(&self) -> f64 {
        self.log_prefactor.exp()
    }

    pub fn point(&self, i: usize) -> Vec<f64> {
        self.points.row(i).iter().copied().collect()
    }

    /// `log(prefactor * sum_I exp(F_I) W_I)` for exponent values at the points.
    pub fn log_integral(&self, exponent: &[f64]) -> f64 {
        self.log_prefactor + log_sum_exp(exponent.iter().zip(&self.log_weights).map(|(f, w)| f + w))
    }

    /// Self-normalized weights `u_I = exp(F_I) W_I / sum_J exp(F_J) W_J`.
    pub fn normalized_weights(&self, exponent: &[f64]) -> Vec<f64> {
        let terms: Vec<f64> = exponent.iter().zip(&self.log_weights).map(|(f, w)| f + w).collect();
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let raw: Vec<f64> = terms.iter().map(|t| (t - max).exp()).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|r| r / total).collect()
    }
}

/// Affine image of a standardized grid.
pub fn adapt(grid: &TensorGrid, mode: &DVector<f64>, chol: &DMatrix<f64>) -> Result<AdaptedGrid> {
    let d = grid.dim;
    if mode.len() != d || chol.nrows() != d || chol.ncols() != d {
        return Err(Error::Contract(format!(
            "mode has length {} and scale is {}x{}, expected dimension {d}",
            mode.len(),
            chol.nrows(),
            chol.ncols()
        )));
    }
    let mut log_det = 0.0;
    for i in 0..d {
        let v = chol[(i, i)];
        if v.is_nan() || v <= 0.0 || !v.is_finite() {
            return Err(Error::Quadrature(format!("scale factor diagonal entry {i} is {v}")));
        }
        for j in (i + 1)..d {
            if chol[(i, j)] != 0.0 {
                return Err(Error::Quadrature("scale factor is not lower triangular".into()));
            }
        }
        log_det += v.ln();
    }
    let scaled = chol * SQRT_2;
    let mut points = DMatrix::zeros(grid.len(), d);
    for row in 0..grid.len() {
        for a in 0..d {
            let mut v = mode[a];
            for b in 0..=a {
                v += scaled[(a, b)] * grid.points[(row, b)];
            }
            points[(row, a)] = v;
        }
    }
    Ok(AdaptedGrid {
        points,
        log_weights: grid.log_weights.clone(),
        log_prefactor: log_det - 0.5 * d as f64 * PI.ln(),
    })
}

/// Numerically stable `log(sum_i exp(x_i))`.
pub fn log_sum_exp<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let values: Vec<f64> = values.into_iter().collect();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
