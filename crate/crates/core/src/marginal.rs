//! Marginal likelihood of the panel by adaptive Gauss-Hermite quadrature.
//!
//! For series `j` the random effect is integrated out of
//!
//! ```text
//! L_j(psi) = (2 pi)^{-d/2} int exp F_j(zeta) d zeta,
//! F_j(zeta) = l_j(psi | zeta) - zeta' zeta / 2,
//! ```
//!
//! where `l_j(psi | zeta)` is the exact conditional GLARMA log-likelihood,
//! normalizing constants included. The grid is centred at the mode of
//! `F_j` and scaled by the Cholesky factor of `(-d^2 F_j)^{-1}` there.
//! With one point per dimension the rule is the Laplace approximation.
//!
//! Derivatives in `psi` use the ratio-of-integrals identities evaluated on
//! the same adapted points, with the grid itself held fixed.

use std::time::Instant;

use log::debug;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::{filter, ArmaParams, Derivs, FilterInput};
use crate::model::{ModelSpec, PanelData, SeriesData};
use crate::quad::{adapt, gauss_hermite, tensor_grid, AdaptedGrid, TensorGrid};

/// Value, gradient and Hessian of an inner exponent in `zeta`.
#[derive(Debug, Clone)]
pub struct ExponentEval {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

/// A smooth concave-near-the-mode exponent `F(zeta)`.
pub trait Exponent {
    fn dim(&self) -> usize;

    /// Gradient and Hessian may be left empty when `derivs` does not ask for them.
    fn eval(&self, zeta: &[f64], derivs: Derivs) -> Result<ExponentEval>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerOptions {
    /// Convergence threshold on the max-norm of the gradient.
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for InnerOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 50, max_halvings: 10 }
    }
}

/// Mode of `F` with the curvature used to adapt the grid.
#[derive(Debug, Clone)]
pub struct InnerSolution {
    pub zeta_star: DVector<f64>,
    /// `(-d^2 F)^{-1}` at the mode.
    pub sigma_star: DMatrix<f64>,
    /// Lower Cholesky factor of `sigma_star`.
    pub k_star: DMatrix<f64>,
    pub f_at_mode: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl InnerSolution {
    /// `F(zeta*) + log det(Sigma*) / 2`.
    pub fn laplace(&self) -> f64 {
        self.f_at_mode + (0..self.k_star.nrows()).map(|i| self.k_star[(i, i)].ln()).sum::<f64>()
    }
}

fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc: f64, x| acc.max(x.abs()))
}

/// Cholesky factor of `-h + ridge I`, with the ridge escalated until it succeeds.
fn negated_cholesky(h: &DMatrix<f64>, start: f64, tries: usize) -> Option<(nalgebra::Cholesky<f64, nalgebra::Dyn>, f64)> {
    let neg = -h;
    if let Some(c) = neg.clone().cholesky() {
        return Some((c, 0.0));
    }
    let scale = neg.diagonal().iter().fold(1.0_f64, |a, v| a.max(v.abs()));
    let mut ridge = start * scale;
    for _ in 0..tries {
        let mut m = neg.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += ridge;
        }
        if let Some(c) = m.cholesky() {
            return Some((c, ridge));
        }
        ridge *= 10.0;
    }
    None
}

/// Newton-Raphson from `zeta = 0` with step-halving.
pub fn find_mode<E: Exponent + ?Sized>(exponent: &E, opts: &InnerOptions) -> Result<InnerSolution> {
    let d = exponent.dim();
    let mut zeta = DVector::<f64>::zeros(d);
    let mut cur = exponent.eval(zeta.as_slice(), Derivs::Hessian)?;
    if d == 0 {
        return Ok(InnerSolution {
            zeta_star: zeta,
            sigma_star: DMatrix::zeros(0, 0),
            k_star: DMatrix::zeros(0, 0),
            f_at_mode: cur.value,
            iterations: 0,
            grad_norm: 0.0,
        });
    }
    let mut iterations = 0;
    loop {
        let gnorm = max_abs(&cur.grad);
        if !cur.value.is_finite() || cur.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::InnerFailure(format!("non-finite exponent or gradient after {iterations} iterations")));
        }
        if gnorm <= opts.tol {
            break;
        }
        if iterations >= opts.max_iter {
            return Err(Error::InnerNonConvergence { iterations, grad_norm: gnorm });
        }
        let (chol, _) = negated_cholesky(&cur.hess, 1e-8, 12)
            .ok_or_else(|| Error::InnerFailure("negated Hessian is not positive definite".into()))?;
        let step = chol.solve(&cur.grad);
        let slack = 16.0 * f64::EPSILON * (1.0 + cur.value.abs());
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial = &zeta + &step * scale;
            match exponent.eval(trial.as_slice(), Derivs::Hessian) {
                Ok(ev) if ev.value.is_finite() && ev.value >= cur.value - slack => {
                    accepted = Some((trial, ev));
                    break;
                }
                Ok(_) | Err(Error::Divergence { .. }) => scale *= 0.5,
                Err(e) => return Err(e),
            }
        }
        iterations += 1;
        match accepted {
            Some((z, ev)) => {
                zeta = z;
                cur = ev;
            }
            None => {
                // No ascent is possible from here; accept only if already at the roundoff floor.
                if gnorm <= opts.tol.sqrt() {
                    break;
                }
                return Err(Error::InnerNonConvergence { iterations, grad_norm: gnorm });
            }
        }
    }
    let neg = -&cur.hess;
    let chol = neg
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InnerFailure("negated Hessian at the mode is not positive definite".into()))?;
    let sigma_star = chol.inverse();
    let k_star = sigma_star
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InnerFailure("mode curvature is numerically singular".into()))?
        .l();
    Ok(InnerSolution {
        zeta_star: zeta,
        sigma_star,
        k_star,
        f_at_mode: cur.value,
        iterations,
        grad_norm: max_abs(&cur.grad),
    })
}

/// Log of `(2 pi)^{-d/2} int exp F` on an adapted grid built from `sol`.
pub fn agq_log_integral<E: Exponent + ?Sized>(exponent: &E, sol: &InnerSolution, grid: &TensorGrid) -> Result<f64> {
    let adapted = adapt(grid, &sol.zeta_star, &sol.k_star)?;
    let mut values = Vec::with_capacity(adapted.len());
    for i in 0..adapted.len() {
        values.push(exponent.eval(&adapted.point(i), Derivs::None)?.value);
    }
    Ok(adapted.log_integral(&values))
}

/// Inner exponent of one series at fixed parameters.
///
/// The random-effect term enters as covariates `R L` with coefficients `zeta`,
/// and `X beta` as an offset.
pub struct SeriesExponent<'a> {
    series: &'a SeriesData,
    family: crate::expfam::Family,
    rl: DMatrix<f64>,
    offset: Vec<f64>,
    arma: ArmaParams,
}

impl<'a> SeriesExponent<'a> {
    pub fn new(spec: &ModelSpec, series: &'a SeriesData, j: usize, psi: &DVector<f64>) -> Result<Self> {
        let (beta, lambda, arma) = spec.series_params(j, psi);
        let l = spec.l_structure.lambda_to_l(&lambda)?;
        let rl = &series.r * l;
        let offset = (&series.x * DVector::from_vec(beta)).data.as_vec().clone();
        Ok(Self { series, family: spec.family, rl, offset, arma })
    }
}

impl Exponent for SeriesExponent<'_> {
    fn dim(&self) -> usize {
        self.rl.ncols()
    }

    fn eval(&self, zeta: &[f64], derivs: Derivs) -> Result<ExponentEval> {
        let input = FilterInput {
            y: &self.series.y,
            m: &self.series.m,
            covariates: &self.rl,
            coefs: zeta,
            offset: Some(&self.offset),
            arma: &self.arma,
        };
        let out = filter(&input, self.family, derivs)?;
        let z = DVector::from_column_slice(zeta);
        let d = zeta.len();
        Ok(ExponentEval {
            value: out.loglik - 0.5 * z.norm_squared(),
            grad: out.grad.map_or_else(|| DVector::zeros(0), |g| g.rows(0, d) - &z),
            hess: out.hess.map_or_else(|| DMatrix::zeros(0, 0), |h| h.view((0, 0), (d, d)) - DMatrix::identity(d, d)),
        })
    }
}

/// `F_j` at `zeta`, as evaluated on the inner problem.
pub fn inner_exponent(spec: &ModelSpec, data: &PanelData, j: usize, psi: &DVector<f64>, zeta: &[f64]) -> Result<ExponentEval> {
    let s = &data.series[j];
    SeriesExponent::new(spec, s, j, psi)
        .and_then(|e| e.eval(zeta, Derivs::Hessian))
        .map_err(|e| e.in_series(j, &s.id))
}

/// Inner mode of series `j`.
pub fn inner_mode(spec: &ModelSpec, data: &PanelData, j: usize, psi: &DVector<f64>, opts: &InnerOptions) -> Result<InnerSolution> {
    let s = &data.series[j];
    SeriesExponent::new(spec, s, j, psi)
        .and_then(|e| find_mode(&e, opts))
        .map_err(|e| e.in_series(j, &s.id))
}

/// Laplace approximation `l_j^(1)`.
pub fn laplace_loglik(spec: &ModelSpec, data: &PanelData, j: usize, psi: &DVector<f64>, opts: &InnerOptions) -> Result<f64> {
    Ok(inner_mode(spec, data, j, psi, opts)?.laplace())
}

/// AGQ estimate for one series.
#[derive(Debug, Clone)]
pub struct SeriesEval {
    pub loglik: f64,
    /// Indices into the full parameter vector covered by `grad` and `hess`.
    pub columns: Vec<usize>,
    pub grad: Option<DVector<f64>>,
    pub hess: Option<DMatrix<f64>>,
    /// Posterior mean of the standardized random effect.
    pub zeta_mean: DVector<f64>,
    pub inner_iterations: usize,
    /// Conceptual integrals: one for the likelihood, one per gradient
    /// entry, and `S(S+1)` for the Hessian.
    pub integrals: usize,
    pub seconds: f64,
}

fn series_agq(
    spec: &ModelSpec,
    series: &SeriesData,
    j: usize,
    psi: &DVector<f64>,
    grid: &TensorGrid,
    derivs: Derivs,
    opts: &InnerOptions,
) -> Result<SeriesEval> {
    let start = Instant::now();
    let exponent = SeriesExponent::new(spec, series, j, psi)?;
    let sol = find_mode(&exponent, opts)?;
    let adapted: AdaptedGrid = adapt(grid, &sol.zeta_star, &sol.k_star)?;

    let map = spec.series_map(j);
    let b = spec.constraints.fixed_count();
    let sl = spec.l_structure.len();
    let d = spec.random_dim();
    let n = series.len();
    let (beta, lambda, arma) = spec.series_params(j, psi);
    let coefs: Vec<f64> = beta.iter().chain(&lambda).copied().collect();
    let mut cov = DMatrix::<f64>::zeros(n, b + sl);
    cov.columns_mut(0, b).copy_from(&series.x);

    let npts = adapted.len();
    let mut f_vals = Vec::with_capacity(npts);
    let mut grads = Vec::new();
    let mut hesses = Vec::new();
    let mut r_row = vec![0.0; d];
    for i in 0..npts {
        let point = adapted.point(i);
        for t in 0..n {
            for (a, slot) in r_row.iter_mut().enumerate() {
                *slot = series.r[(t, a)];
            }
            let row = spec.l_structure.lambda_covariate_row(&point, &r_row)?;
            for (c, v) in row.into_iter().enumerate() {
                cov[(t, b + c)] = v;
            }
        }
        let input = FilterInput { y: &series.y, m: &series.m, covariates: &cov, coefs: &coefs, offset: None, arma: &arma };
        let out = filter(&input, spec.family, derivs)?;
        let zz: f64 = point.iter().map(|z| z * z).sum();
        f_vals.push(out.loglik - 0.5 * zz);
        if let Some(g) = out.grad {
            grads.push(map.a.tr_mul(&g));
        }
        if let Some(h) = out.hess {
            hesses.push(map.a.tr_mul(&h) * &map.a);
        }
    }
    let loglik = adapted.log_integral(&f_vals);
    let u = adapted.normalized_weights(&f_vals);
    let mut zeta_mean = DVector::zeros(d);
    for (i, &w) in u.iter().enumerate() {
        for a in 0..d {
            zeta_mean[a] += w * adapted.points[(i, a)];
        }
    }

    let s = map.len();
    let grad = (derivs >= Derivs::Gradient).then(|| {
        let mut g = DVector::zeros(s);
        for (w, gi) in u.iter().zip(&grads) {
            g.axpy(*w, gi, 1.0);
        }
        g
    });
    let hess = (derivs == Derivs::Hessian).then(|| {
        let g = grad.as_ref().expect("gradient accompanies Hessian");
        let mut h = DMatrix::zeros(s, s);
        for ((w, gi), hi) in u.iter().zip(&grads).zip(&hesses) {
            h += (hi + gi * gi.transpose()) * *w;
        }
        h -= g * g.transpose();
        (&h + h.transpose()) * 0.5
    });
    let integrals = match derivs {
        Derivs::None => 1,
        Derivs::Gradient => 1 + s,
        Derivs::Hessian => (s + 1) * (s + 1),
    };
    Ok(SeriesEval {
        loglik,
        columns: map.columns.clone(),
        grad,
        hess,
        zeta_mean,
        inner_iterations: sol.iterations,
        integrals,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Panel log-likelihood with optional derivatives in the full parameter vector.
#[derive(Debug, Clone)]
pub struct PanelEval {
    pub loglik: f64,
    pub grad: Option<DVector<f64>>,
    pub hess: Option<DMatrix<f64>>,
    pub series: Vec<SeriesEval>,
    pub integrals: usize,
    pub max_inner_iterations: usize,
    pub seconds: f64,
}

/// Evaluates the panel likelihood on a fixed worker pool.
///
/// Series are processed in parallel and reduced in series order, so results
/// do not depend on the number of workers.
pub struct Evaluator<'a> {
    data: &'a PanelData,
    spec: &'a ModelSpec,
    pool: rayon::ThreadPool,
    inner: InnerOptions,
}

impl<'a> Evaluator<'a> {
    /// `workers = 0` uses one worker per available core.
    pub fn new(data: &'a PanelData, spec: &'a ModelSpec, workers: usize) -> Result<Self> {
        spec.validate(data)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
        Ok(Self { data, spec, pool, inner: InnerOptions::default() })
    }

    pub fn with_inner(mut self, inner: InnerOptions) -> Self {
        self.inner = inner;
        self
    }

    pub fn data(&self) -> &PanelData {
        self.data
    }

    pub fn spec(&self) -> &ModelSpec {
        self.spec
    }

    pub fn inner_options(&self) -> &InnerOptions {
        &self.inner
    }

    pub fn workers(&self) -> usize {
        self.pool.current_num_threads()
    }

    /// AGQ estimate for series `j` alone.
    pub fn series(&self, j: usize, psi: &DVector<f64>, q: usize, derivs: Derivs) -> Result<SeriesEval> {
        let grid = tensor_grid(&gauss_hermite(q)?, self.spec.random_dim())?;
        let s = &self.data.series[j];
        series_agq(self.spec, s, j, psi, &grid, derivs, &self.inner).map_err(|e| e.in_series(j, &s.id))
    }

    pub fn panel(&self, psi: &DVector<f64>, q: usize, derivs: Derivs) -> Result<PanelEval> {
        if psi.len() != self.spec.param_len() {
            return Err(Error::Contract(format!(
                "parameter vector has length {}, expected {}",
                psi.len(),
                self.spec.param_len()
            )));
        }
        let start = Instant::now();
        let grid = tensor_grid(&gauss_hermite(q)?, self.spec.random_dim())?;
        let results: Vec<Result<SeriesEval>> = self.pool.install(|| {
            self.data
                .series
                .par_iter()
                .enumerate()
                .map(|(j, s)| {
                    series_agq(self.spec, s, j, psi, &grid, derivs, &self.inner).map_err(|e| e.in_series(j, &s.id))
                })
                .collect()
        });
        let series: Vec<SeriesEval> = results.into_iter().collect::<Result<_>>()?;

        let np = self.spec.param_len();
        let mut loglik = 0.0;
        let mut grad = (derivs >= Derivs::Gradient).then(|| DVector::zeros(np));
        let mut hess = (derivs == Derivs::Hessian).then(|| DMatrix::zeros(np, np));
        let mut integrals = 0;
        let mut max_inner = 0;
        for ev in &series {
            loglik += ev.loglik;
            integrals += ev.integrals;
            max_inner = max_inner.max(ev.inner_iterations);
            if let (Some(g), Some(sg)) = (grad.as_mut(), ev.grad.as_ref()) {
                for (a, &c) in ev.columns.iter().enumerate() {
                    g[c] += sg[a];
                }
            }
            if let (Some(h), Some(sh)) = (hess.as_mut(), ev.hess.as_ref()) {
                for (a, &ca) in ev.columns.iter().enumerate() {
                    for (b, &cb) in ev.columns.iter().enumerate() {
                        h[(ca, cb)] += sh[(a, b)];
                    }
                }
            }
        }
        let seconds = start.elapsed().as_secs_f64();
        debug!("panel loglik {loglik:.10} at Q = {q} in {seconds:.3}s");
        Ok(PanelEval { loglik, grad, hess, series, integrals, max_inner_iterations: max_inner, seconds })
    }
}
