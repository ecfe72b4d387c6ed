//! Outer maximization of the quadrature log-likelihood.
//!
//! Newton-Raphson with a Levenberg shift when the negated Hessian is not
//! positive definite, step-halving on every step, and a schedule of
//! increasing quadrature sizes. Convergence is only declared at the last
//! stage of the schedule.

use std::time::Instant;

use log::{info, warn};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::kernel::{filter, ArmaParams, Derivs, FilterInput};
use crate::marginal::Evaluator;
use crate::model::{Component, ModelSpec, PanelData};

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// `(Q, max_iterations)` per stage; `Q` must be nondecreasing.
    pub q_schedule: Vec<(usize, usize)>,
    /// Gradient tolerance, scaled by `1 + |l|`.
    pub grad_tol: f64,
    /// Tolerance on `max_i |step_i| / (1 + |psi_i|)`.
    pub param_tol: f64,
    pub max_halvings: usize,
    /// First Levenberg shift tried when the negated Hessian is not positive definite.
    pub ridge: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { q_schedule: vec![(3, 20), (5, 50)], grad_tol: 1e-6, param_tol: 1e-8, max_halvings: 10, ridge: 1e-4 }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.q_schedule.is_empty() {
            return Err(Error::Config("quadrature schedule is empty".into()));
        }
        let mut last = 0;
        for &(q, _) in &self.q_schedule {
            if q == 0 || q < last {
                return Err(Error::Config(format!(
                    "quadrature schedule must hold positive, nondecreasing Q values (got {:?})",
                    self.q_schedule
                )));
            }
            last = q;
        }
        if !(self.grad_tol > 0.0 && self.param_tol > 0.0 && self.ridge > 0.0) {
            return Err(Error::Config("optimizer tolerances and ridge must be positive".into()));
        }
        Ok(())
    }

    /// Replaces the schedule by a single stage at `q`, keeping the total iteration budget.
    pub fn with_single_q(mut self, q: usize) -> Self {
        let iters = self.q_schedule.iter().map(|s| s.1).sum::<usize>().max(1);
        self.q_schedule = vec![(q, iters)];
        self
    }
}

/// Value, gradient and Hessian of the objective at one point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

/// One accepted iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub stage: usize,
    pub q: usize,
    pub iteration: usize,
    pub loglik: f64,
    pub grad_norm: f64,
    pub step_norm: f64,
    pub halvings: usize,
    pub ridge: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct Maximum {
    pub x: DVector<f64>,
    pub eval: Evaluation,
    pub q: usize,
    pub converged: bool,
    pub iterations: usize,
    pub trace: Vec<TraceRow>,
    pub diagnostics: Vec<String>,
}

fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc: f64, x| acc.max(x.abs()))
}

/// Solves `(-H + ridge I) step = g`, escalating the ridge by 10 until the system is positive definite.
pub fn newton_step(hess: &DMatrix<f64>, grad: &DVector<f64>, ridge_start: f64) -> Option<(DVector<f64>, f64)> {
    let neg = -hess;
    if let Some(c) = neg.clone().cholesky() {
        return Some((c.solve(grad), 0.0));
    }
    let mut ridge = ridge_start;
    for _ in 0..40 {
        let mut m = neg.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += ridge;
        }
        if let Some(c) = m.cholesky() {
            return Some((c.solve(grad), ridge));
        }
        ridge *= 10.0;
    }
    None
}

/// Maximizes `objective(x, q)` over the stages of `opts.q_schedule`.
///
/// Errors at the starting point of a stage abort; errors at trial points
/// count as a failure to increase and trigger a halving.
pub fn maximize<F>(mut objective: F, x0: DVector<f64>, opts: &FitOptions) -> Result<Maximum>
where
    F: FnMut(&DVector<f64>, usize) -> Result<Evaluation>,
{
    opts.validate()?;
    let mut x = x0;
    let mut trace = Vec::new();
    let mut diagnostics = Vec::new();
    let mut converged = false;
    let mut total_iterations = 0;
    let last_stage = opts.q_schedule.len() - 1;
    let mut cur = None;
    let mut q_used = opts.q_schedule[0].0;

    for (stage, &(q, max_iter)) in opts.q_schedule.iter().enumerate() {
        q_used = q;
        let t0 = Instant::now();
        let mut ev = objective(&x, q)?;
        if !ev.value.is_finite() {
            return Err(Error::Divergence { t: 0, detail: format!("log-likelihood is {} at the stage start", ev.value) });
        }
        trace.push(TraceRow {
            stage,
            q,
            iteration: 0,
            loglik: ev.value,
            grad_norm: max_abs(&ev.grad),
            step_norm: 0.0,
            halvings: 0,
            ridge: 0.0,
            seconds: t0.elapsed().as_secs_f64(),
        });
        let mut stage_converged = false;
        let mut iteration = 0;
        loop {
            let gnorm = max_abs(&ev.grad);
            let grad_ok = gnorm <= opts.grad_tol * (1.0 + ev.value.abs());
            let Some((step, ridge)) = newton_step(&ev.hess, &ev.grad, opts.ridge) else {
                diagnostics.push(format!("stage {stage} (Q = {q}): Newton system could not be regularized"));
                break;
            };
            let rel = step
                .iter()
                .zip(x.iter())
                .fold(0.0_f64, |acc, (s, xi)| acc.max(s.abs() / (1.0 + xi.abs())));
            if grad_ok && rel <= opts.param_tol {
                stage_converged = true;
                break;
            }
            if iteration >= max_iter {
                diagnostics.push(format!(
                    "stage {stage} (Q = {q}): iteration limit {max_iter} reached with gradient norm {gnorm:e}"
                ));
                break;
            }
            let t0 = Instant::now();
            let mut scale = 1.0;
            let mut accepted = None;
            for halvings in 0..=opts.max_halvings {
                let trial = &x + &step * scale;
                match objective(&trial, q) {
                    Ok(next) if next.value.is_finite() && next.value >= ev.value => {
                        accepted = Some((trial, next, halvings));
                        break;
                    }
                    Ok(_) => {}
                    Err(e) => log::debug!("trial point rejected: {e}"),
                }
                scale *= 0.5;
            }
            iteration += 1;
            total_iterations += 1;
            match accepted {
                Some((trial, next, halvings)) => {
                    let step_norm = max_abs(&(&trial - &x));
                    x = trial;
                    ev = next;
                    trace.push(TraceRow {
                        stage,
                        q,
                        iteration,
                        loglik: ev.value,
                        grad_norm: max_abs(&ev.grad),
                        step_norm,
                        halvings,
                        ridge,
                        seconds: t0.elapsed().as_secs_f64(),
                    });
                }
                None => {
                    if grad_ok {
                        stage_converged = true;
                    } else {
                        diagnostics.push(format!(
                            "stage {stage} (Q = {q}): step-halving failed to increase the log-likelihood \
                             (gradient norm {gnorm:e})"
                        ));
                    }
                    break;
                }
            }
        }
        if stage == last_stage {
            converged = stage_converged;
        }
        info!("stage {stage} (Q = {q}) ended at loglik {:.8} after {iteration} iterations", ev.value);
        cur = Some(ev);
    }
    Ok(Maximum {
        x,
        eval: cur.expect("schedule is not empty"),
        q: q_used,
        converged,
        iterations: total_iterations,
        trace,
        diagnostics,
    })
}

/// Posterior summary of one series' random effect.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMean {
    pub id: String,
    /// `E[zeta | y]`.
    pub zeta_mean: DVector<f64>,
    /// `L E[zeta | y]`.
    pub u_hat: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub psi: DVector<f64>,
    pub names: Vec<String>,
    pub components: Vec<Component>,
    /// Standard errors; NaN when the information matrix is singular.
    pub se: DVector<f64>,
    pub vcov: DMatrix<f64>,
    pub loglik: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
    pub q: usize,
    pub converged: bool,
    pub iterations: usize,
    pub trace: Vec<TraceRow>,
    pub diagnostics: Vec<String>,
    pub posterior: Vec<PosteriorMean>,
    /// Largest inner Newton iteration count seen over all evaluations.
    pub max_inner_iterations: usize,
}

/// Fits the model, starting from [`initialize`] unless `start` is given.
pub fn fit(eval: &Evaluator<'_>, start: Option<DVector<f64>>, opts: &FitOptions) -> Result<FitResult> {
    let spec = eval.spec();
    let x0 = match start {
        Some(x) => x,
        None => {
            let mut x = initialize(eval.data(), spec)?;
            let q0 = opts.q_schedule[0].0;
            if let Err(e) = eval.panel(&x, q0, Derivs::None) {
                warn!("initial values failed ({e}); restarting without serial dependence");
                let c = &spec.constraints;
                x.rows_mut(c.beta_len(), c.tau_len()).fill(0.0);
            }
            x
        }
    };
    let mut max_inner = 0;
    let max = maximize(
        |x, q| {
            let pe = eval.panel(x, q, Derivs::Hessian)?;
            max_inner = max_inner.max(pe.max_inner_iterations);
            Ok(Evaluation { value: pe.loglik, grad: pe.grad.unwrap(), hess: pe.hess.unwrap() })
        },
        x0,
        opts,
    )?;
    let Maximum { mut x, eval: ev, q, converged, iterations, trace, mut diagnostics } = max;

    let range = spec.lambda_range();
    let signs = spec.l_structure.normalize_signs(&mut x.as_mut_slice()[range.clone()]);
    let mut flip = DVector::from_element(x.len(), 1.0);
    for (i, s) in signs.into_iter().enumerate() {
        flip[range.start + i] = s;
    }
    let grad = ev.grad.component_mul(&flip);
    let hess = DMatrix::from_fn(x.len(), x.len(), |a, b| ev.hess[(a, b)] * flip[a] * flip[b]);

    let names = spec.param_names();
    let (se, vcov) = match standard_errors(&hess, &names) {
        Ok(v) => v,
        Err(e) => {
            warn!("{e}");
            diagnostics.push(e.to_string());
            let np = x.len();
            (DVector::from_element(np, f64::NAN), DMatrix::from_element(np, np, f64::NAN))
        }
    };
    if !converged {
        warn!("fit did not converge: {}", diagnostics.join("; "));
    }
    let posterior = posterior_means(eval, &x, q)?;
    Ok(FitResult {
        psi: x,
        names,
        components: spec.components(),
        se,
        vcov,
        loglik: ev.value,
        grad,
        hess,
        q,
        converged,
        iterations,
        trace,
        diagnostics,
        posterior,
        max_inner_iterations: max_inner,
    })
}

/// Posterior means of the random effects of every series at `psi`.
pub fn posterior_means(eval: &Evaluator<'_>, psi: &DVector<f64>, q: usize) -> Result<Vec<PosteriorMean>> {
    let spec = eval.spec();
    let pe = eval.panel(psi, q, Derivs::None)?;
    let l = spec.l_structure.lambda_to_l(spec.lambda(psi))?;
    Ok(pe
        .series
        .into_iter()
        .zip(&eval.data().series)
        .map(|(s, data)| PosteriorMean { id: data.id.clone(), u_hat: &l * &s.zeta_mean, zeta_mean: s.zeta_mean })
        .collect())
}

/// Posterior mean of series `j` at `psi`.
pub fn posterior_mean_re(eval: &Evaluator<'_>, j: usize, psi: &DVector<f64>, q: usize) -> Result<PosteriorMean> {
    let spec = eval.spec();
    let s = eval.series(j, psi, q, Derivs::None)?;
    let l = spec.l_structure.lambda_to_l(spec.lambda(psi))?;
    Ok(PosteriorMean { id: eval.data().series[j].id.clone(), u_hat: &l * &s.zeta_mean, zeta_mean: s.zeta_mean })
}

/// Standard errors and covariance from the observed information `-H`.
pub fn standard_errors(hess: &DMatrix<f64>, names: &[String]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = hess.nrows();
    let info = -(hess + hess.transpose()) * 0.5;
    if n == 0 {
        return Ok((DVector::zeros(0), DMatrix::zeros(0, 0)));
    }
    if info.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularInformation { null_directions: vec!["non-finite Hessian".into()] });
    }
    let eig = SymmetricEigen::new(info);
    let top = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let floor = 1e-10 * top.max(f64::MIN_POSITIVE);
    let mut null_directions = Vec::new();
    for (k, &val) in eig.eigenvalues.iter().enumerate() {
        if val <= floor {
            let v = eig.eigenvectors.column(k);
            let mut loads: Vec<(usize, f64)> = (0..n).filter(|&i| v[i].abs() >= 0.1).map(|i| (i, v[i])).collect();
            loads.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()));
            let desc: Vec<String> = loads
                .iter()
                .map(|&(i, w)| format!("{} ({w:.3})", names.get(i).map_or("?", String::as_str)))
                .collect();
            null_directions.push(format!("eigenvalue {val:.3e}: {}", desc.join(", ")));
        }
    }
    if !null_directions.is_empty() {
        return Err(Error::SingularInformation { null_directions });
    }
    let inv_vals = eig.eigenvalues.map(|v| 1.0 / v);
    let vcov = &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
    let vcov = (&vcov + vcov.transpose()) * 0.5;
    let se = DVector::from_fn(n, |i, _| vcov[(i, i)].sqrt());
    Ok((se, vcov))
}

/// Fixed-effects GLARMA fit of one series, returning `(beta, phi.., theta..)`.
pub fn fit_series_fixed(
    family: crate::expfam::Family,
    y: &[u64],
    m: &[u64],
    x: &DMatrix<f64>,
    p: usize,
    q: usize,
) -> Result<Maximum> {
    let b = x.ncols();
    let opts = FitOptions { q_schedule: vec![(1, 100)], ..FitOptions::default() };
    maximize(
        |theta, _| {
            let arma = ArmaParams::from_slice(&theta.as_slice()[b..], p, q);
            let input = FilterInput { y, m, covariates: x, coefs: &theta.as_slice()[..b], offset: None, arma: &arma };
            let out = filter(&input, family, Derivs::Hessian)?;
            Ok(Evaluation { value: out.loglik, grad: out.grad.unwrap(), hess: out.hess.unwrap() })
        },
        DVector::zeros(b + p + q),
        &opts,
    )
}

fn least_squares(a: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    if a.ncols() == 0 {
        return DVector::zeros(0);
    }
    a.clone().svd(true, true).solve(rhs, 1e-12).unwrap_or_else(|_| DVector::zeros(a.ncols()))
}

/// Starting values from per-series fixed-effects fits.
///
/// Shared coefficients are least-squares projections of the per-series
/// estimates. Each diagonal entry of `L` is the between-series standard
/// deviation of the estimates of the fixed covariate with the same name,
/// floored at 0.1; off-diagonal entries start at zero.
pub fn initialize(data: &PanelData, spec: &ModelSpec) -> Result<DVector<f64>> {
    spec.validate(data)?;
    let c = &spec.constraints;
    let b = c.fixed_count();
    let mut beta = DVector::zeros(c.a_beta().nrows());
    let mut tau = DVector::zeros(c.a_tau().nrows());
    let mut per_series: Vec<Option<Vec<f64>>> = Vec::with_capacity(data.len());
    for (j, s) in data.series.iter().enumerate() {
        let (p, q) = c.orders()[j];
        match fit_series_fixed(spec.family, &s.y, &s.m, &s.x, p, q) {
            Ok(mx) if mx.x.iter().all(|v| v.is_finite()) => {
                for (k, row) in c.beta_rows(j).enumerate() {
                    beta[row] = mx.x[k];
                }
                for (k, row) in c.tau_rows(j).enumerate() {
                    tau[row] = mx.x[b + k];
                }
                per_series.push(Some(mx.x.as_slice()[..b].to_vec()));
            }
            Ok(_) => {
                warn!("series {} ({}): starting fit produced non-finite values; using zeros", j, s.id);
                per_series.push(None);
            }
            Err(e) => {
                warn!("series {} ({}): starting fit failed ({e}); using zeros", j, s.id);
                per_series.push(None);
            }
        }
    }
    let psi_beta = least_squares(c.a_beta(), &beta);
    let psi_tau = least_squares(c.a_tau(), &tau);

    let structure = &spec.l_structure;
    let mut lambda = vec![0.0; structure.len()];
    for (a, name) in spec.random_names.iter().enumerate() {
        let k = spec.fixed_names.iter().position(|f| f == name);
        let values: Vec<f64> = match k {
            Some(k) => per_series.iter().flatten().map(|v| v[k]).collect(),
            None => Vec::new(),
        };
        let sd = if values.len() >= 2 {
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        let idx = structure
            .free_positions()
            .iter()
            .position(|&pos| pos == (a, a))
            .expect("diagonal entries are always free");
        lambda[idx] = sd.max(0.1);
    }
    spec.assemble(psi_beta.as_slice(), psi_tau.as_slice(), &lambda)
}
