//! Acceptance run: one PASS/FAIL line per criterion.

mod common;

use std::time::Instant;

use common::{max_abs, max_abs_mat, oracle_exponent_d1, simpson_d1, Fixture, PanelBuilder};
use glarma_mixed::benchmark::benchmark_q;
use glarma_mixed::expfam::Family;
use glarma_mixed::fit::{fit, FitOptions};
use glarma_mixed::kernel::{filter, ArmaParams, Derivs, FilterInput};
use glarma_mixed::marginal::{agq_log_integral, find_mode, laplace_loglik, Evaluator, Exponent, ExponentEval, InnerOptions};
use glarma_mixed::quad::{gauss_hermite, tensor_grid};
use glarma_mixed::ranef::{correlation, LStructure};
use glarma_mixed::Result;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

/// Largest inner iteration count seen on any fixture evaluation.
static INNER_MAX: std::sync::atomic::AtomicUsize = std::sync::atomic::AtomicUsize::new(0);

fn record_inner(k: usize) {
    INNER_MAX.fetch_max(k, std::sync::atomic::Ordering::Relaxed);
}

fn oracle_fixture() -> Fixture {
    let b = PanelBuilder::new(Family::Binary, 2, 50, 11).covariate("x");
    b.simulate(&DVector::from_vec(vec![-0.2, 0.7, 0.4, 0.9]))
}

fn derivative_fixture() -> Fixture {
    let mut b = PanelBuilder::new(Family::Binary, 4, 100, 23).covariate("x");
    b.orders = (1, 1);
    b.simulate(&DVector::from_vec(vec![0.1, -0.6, 0.5, -0.2, 0.8]))
}

fn paper_scale_fixture() -> Fixture {
    let mut b = PanelBuilder::new(Family::Binary, 8, 150, 31).covariate("x").covariate("z");
    b.random = vec![0, 1];
    b.groups = vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]];
    // intercept, x, z, phi[g1..g4], lambda (L11, L21, L22)
    b.simulate(&DVector::from_vec(vec![-0.4, 0.6, 0.3, 0.2, 0.4, 0.5, 0.3, 0.8, 0.3, 0.5]))
}

fn recovery_builder(seed: u64) -> PanelBuilder {
    let mut b = PanelBuilder::new(Family::Binary, 20, 200, seed).covariate("x");
    b.groups = vec![(0..10).collect(), (10..20).collect()];
    b
}

fn recovery_truth() -> DVector<f64> {
    DVector::from_vec(vec![-0.3, 0.8, 0.3, 0.6, 0.7])
}

fn laplace_identity(fixtures: &[&Fixture]) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    let inner = InnerOptions::default();
    for fx in fixtures {
        let eval = Evaluator::new(&fx.data, &fx.spec, 1)?;
        for j in 0..fx.data.len() {
            let lap = laplace_loglik(&fx.spec, &fx.data, j, &fx.psi, &inner)?;
            let agq = eval.series(j, &fx.psi, 1, Derivs::None)?;
            record_inner(agq.inner_iterations);
            worst = worst.max((lap - agq.loglik).abs() / lap.abs().max(1.0));
        }
    }
    Ok(Outcome::new(worst <= 1e-12, format!("max scaled |l_laplace - l_Q1| = {worst:.2e}")))
}

struct Quadratic {
    c: f64,
    mu: DVector<f64>,
    p: DMatrix<f64>,
}

impl Exponent for Quadratic {
    fn dim(&self) -> usize {
        self.mu.len()
    }

    fn eval(&self, zeta: &[f64], _derivs: Derivs) -> Result<ExponentEval> {
        let r = DVector::from_column_slice(zeta) - &self.mu;
        let pr = &self.p * &r;
        Ok(ExponentEval { value: self.c - 0.5 * r.dot(&pr), grad: -pr, hess: -self.p.clone() })
    }
}

fn gaussian_exactness() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for d in 1..=3 {
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let p = &a * a.transpose() + DMatrix::identity(d, d) * 0.7;
        let mu = DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
        let f = Quadratic { c: -3.25, mu, p: p.clone() };
        let exact = f.c - 0.5 * p.determinant().ln();
        let sol = find_mode(&f, &InnerOptions::default())?;
        for q in 1..=7 {
            let grid = tensor_grid(&gauss_hermite(q)?, d)?;
            let v = agq_log_integral(&f, &sol, &grid)?;
            worst = worst.max((v - exact).abs());
        }
    }
    Ok(Outcome::new(worst <= 1e-10, format!("max |AGQ - closed form| = {worst:.2e}")))
}

fn brute_force(fx: &Fixture) -> Result<Outcome> {
    let eval = Evaluator::new(&fx.data, &fx.spec, 1)?;
    let mut worst_l: f64 = 0.0;
    let mut worst_m: f64 = 0.0;
    let mut total_agq = 0.0;
    let mut total_ref = 0.0;
    for j in 0..fx.data.len() {
        let ev = eval.series(j, &fx.psi, 20, Derivs::None)?;
        record_inner(ev.inner_iterations);
        let (l_ref, mean_ref) = simpson_d1(oracle_exponent_d1(fx, j, &fx.psi), 100_000);
        worst_l = worst_l.max((ev.loglik - l_ref).abs() / l_ref.abs());
        worst_m = worst_m.max((ev.zeta_mean[0] - mean_ref).abs());
        total_agq += ev.loglik;
        total_ref += l_ref;
    }
    let rel_total = (total_agq - total_ref).abs() / total_ref.abs();
    Ok(Outcome::new(
        worst_l <= 1e-8 && rel_total <= 1e-8 && worst_m <= 1e-6,
        format!("max rel loglik err {worst_l:.2e} (panel {rel_total:.2e}), max posterior mean err {worst_m:.2e}"),
    ))
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Family, Vec<u64>, Vec<u64>, DMatrix<f64>, Vec<f64>, usize, usize) {
    let family = match rng.random_range(0..3) {
        0 => Family::Binary,
        1 => Family::Binomial,
        _ => Family::Poisson,
    };
    let n = rng.random_range(5..=60);
    let k = rng.random_range(1..=3);
    let p = rng.random_range(0..=2);
    let q = rng.random_range(0..=2);
    let x = DMatrix::from_fn(n, k, |_, c| if c == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
    let mut coefs: Vec<f64> = (0..k).map(|_| rng.random_range(-0.5..0.5)).collect();
    coefs.extend((0..p + q).map(|_| rng.random_range(-0.3..0.3)));
    let m: Vec<u64> = (0..n).map(|_| if family == Family::Binomial { rng.random_range(1..=8) } else { 1 }).collect();
    let y: Vec<u64> = m
        .iter()
        .map(|&mt| match family {
            Family::Poisson => rng.random_range(0..=4),
            _ => rng.random_range(0..=mt),
        })
        .collect();
    (family, y, m, x, coefs, p, q)
}

fn kernel_eval(
    family: Family,
    y: &[u64],
    m: &[u64],
    x: &DMatrix<f64>,
    coefs: &[f64],
    p: usize,
    q: usize,
    derivs: Derivs,
) -> Result<(f64, Option<DVector<f64>>, Option<DMatrix<f64>>)> {
    let k = x.ncols();
    let arma = ArmaParams::from_slice(&coefs[k..], p, q);
    let input = FilterInput { y, m, covariates: x, coefs: &coefs[..k], offset: None, arma: &arma };
    let out = filter(&input, family, derivs)?;
    Ok((out.loglik, out.grad, out.hess))
}

/// Worst relative FD error over 100 random instances, and the number of
/// explosive draws that were replaced.
fn kernel_fd() -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut redrawn = 0;
    while checked < 100 {
        let (family, y, m, x, coefs, p, q) = random_instance(&mut rng);
        let (_, g, h) = match kernel_eval(family, &y, &m, &x, &coefs, p, q, Derivs::Hessian) {
            Err(glarma_mixed::Error::Divergence { .. }) => {
                redrawn += 1;
                continue;
            }
            other => other?,
        };
        checked += 1;
        let (g, h) = (g.unwrap(), h.unwrap());
        let np = coefs.len();
        let step = 1e-5;
        let mut fd_g = DVector::zeros(np);
        let mut fd_h = DMatrix::zeros(np, np);
        for i in 0..np {
            let mut up = coefs.clone();
            let mut dn = coefs.clone();
            up[i] += step;
            dn[i] -= step;
            let (lu, gu, _) = kernel_eval(family, &y, &m, &x, &up, p, q, Derivs::Gradient)?;
            let (ld, gd, _) = kernel_eval(family, &y, &m, &x, &dn, p, q, Derivs::Gradient)?;
            fd_g[i] = (lu - ld) / (2.0 * step);
            fd_h.set_column(i, &((gu.unwrap() - gd.unwrap()) / (2.0 * step)));
        }
        worst = worst.max(max_abs(&(fd_g - &g)) / max_abs(&g).max(1.0));
        worst = worst.max(max_abs_mat(&(fd_h - &h)) / max_abs_mat(&h).max(1.0));
    }
    Ok((worst, redrawn))
}

fn derivative_fidelity(fx: &Fixture) -> Result<Outcome> {
    let (kernel_err, redrawn) = kernel_fd()?;
    let eval = Evaluator::new(&fx.data, &fx.spec, 0)?;
    let q = 10;
    let base = eval.panel(&fx.psi, q, Derivs::Hessian)?;
    record_inner(base.max_inner_iterations);
    let g = base.grad.unwrap();
    let h = base.hess.unwrap();
    let np = fx.psi.len();
    let step = 1e-5;
    let mut fd_g = DVector::zeros(np);
    let mut fd_h = DMatrix::zeros(np, np);
    for i in 0..np {
        let mut up = fx.psi.clone();
        let mut dn = fx.psi.clone();
        up[i] += step;
        dn[i] -= step;
        let eu = eval.panel(&up, q, Derivs::Gradient)?;
        let ed = eval.panel(&dn, q, Derivs::Gradient)?;
        fd_g[i] = (eu.loglik - ed.loglik) / (2.0 * step);
        fd_h.set_column(i, &((eu.grad.unwrap() - ed.grad.unwrap()) / (2.0 * step)));
    }
    let g_err = max_abs(&(&fd_g - &g));
    let g_tol = 1e-4 * (1.0 + max_abs(&g));
    let h_err = max_abs_mat(&(&fd_h - &h));
    let h_tol = 1e-3 * (1.0 + max_abs_mat(&h));
    Ok(Outcome::new(
        kernel_err <= 1e-5 && g_err <= g_tol && h_err <= h_tol,
        format!(
            "kernel rel err {kernel_err:.2e} ({redrawn} explosive draws replaced); AGQ gradient err {g_err:.2e} (tol {g_tol:.2e}); Hessian err {h_err:.2e} (tol {h_tol:.2e})"
        ),
    ))
}

fn stabilization(fx: &Fixture) -> Result<Outcome> {
    let eval = Evaluator::new(&fx.data, &fx.spec, 0)?;
    let start = fit(&eval, None, &FitOptions::default())?;
    record_inner(start.max_inner_iterations);
    let rows = benchmark_q(&eval, &start.psi, &[2, 3, 4, 5, 6, 7], 3)?;
    for r in &rows {
        record_inner(r.max_inner_iterations);
    }
    let dl: Vec<f64> = rows.windows(2).map(|w| (w[1].loglik - w[0].loglik).abs()).collect();
    // dl[i] is the change from Q = i + 2 to Q = i + 3
    let monotone = dl[1..].windows(2).all(|w| w[1] <= w[0]);
    let by_six = dl[3];
    let se_change = rows[4].se_change_pct;
    let d = fx.spec.random_dim() as i32;
    let t2 = rows[0].seconds;
    let growth_ok = rows.iter().all(|r| r.seconds <= 2.0 * t2 * (r.q as f64 / 2.0).powi(d));
    let timing: Vec<String> = rows.iter().map(|r| format!("Q{}:{:.4}s", r.q, r.seconds)).collect();
    Ok(Outcome::new(
        monotone && by_six <= 1e-2 && se_change <= 0.5 && growth_ok,
        format!(
            "|dlogL| {:?}; Q5->6 {by_six:.2e}; SE change Q5->6 {se_change:.3}%; times {}",
            dl.iter().map(|v| format!("{v:.1e}")).collect::<Vec<_>>(),
            timing.join(" ")
        ),
    ))
}

fn recovery() -> Result<Outcome> {
    let truth = recovery_truth();
    let names = recovery_builder(0).spec().param_names();
    let np = truth.len();
    let replicates = 20;
    let mut within = 0;
    let mut total = 0;
    let mut sum_est = DVector::zeros(np);
    let mut sum_se = DVector::zeros(np);
    let mut failures = 0;
    for rep in 0..replicates {
        let fx = recovery_builder(1000 + rep).simulate(&truth);
        let eval = Evaluator::new(&fx.data, &fx.spec, 0)?;
        let res = fit(&eval, None, &FitOptions::default())?;
        record_inner(res.max_inner_iterations);
        if !res.converged {
            failures += 1;
        }
        for i in 0..np {
            total += 1;
            if (res.psi[i] - truth[i]).abs() <= 3.0 * res.se[i] {
                within += 1;
            }
        }
        sum_est += &res.psi;
        sum_se += &res.se;
    }
    let n = replicates as f64;
    let coverage = within as f64 / total as f64;
    let fixed = recovery_builder(0).spec().constraints.beta_len();
    let mut bias_ok = true;
    let mut bias_text = Vec::new();
    for i in 0..fixed {
        let bias = sum_est[i] / n - truth[i];
        let bound = sum_se[i] / n / n.sqrt();
        bias_ok &= bias.abs() <= bound;
        bias_text.push(format!("{} bias {bias:+.4} (bound {bound:.4})", names[i]));
    }
    Ok(Outcome::new(
        coverage >= 0.9 && bias_ok && failures == 0,
        format!("{:.0}% within 3 SE; {}; {failures} unconverged", 100.0 * coverage, bias_text.join(", ")),
    ))
}

fn table_arithmetic() -> Result<Outcome> {
    let ls = LStructure::from_free(3, &[(0, 0), (1, 1), (2, 2), (2, 0)])?;
    let value = |pos: (usize, usize)| match pos {
        (0, 0) => 0.863,
        (1, 1) => 1.442,
        (2, 2) => 2.379,
        (2, 0) => 1.519,
        _ => unreachable!(),
    };
    let lambda: Vec<f64> = ls.free_positions().iter().map(|&p| value(p)).collect();
    let sigma = ls.sigma(&lambda)?;
    let (sd, corr) = correlation(&sigma);
    let var = [sigma[(0, 0)], sigma[(1, 1)], sigma[(2, 2)]];
    let ok = (var[0] - 0.74).abs() <= 0.01
        && (var[1] - 2.08).abs() <= 0.01
        && (var[2] - 7.97).abs() <= 0.01
        && (corr[(2, 0)] - 0.54).abs() <= 0.01
        && sd.iter().all(|s| s.is_finite());
    Ok(Outcome::new(
        ok,
        format!("variances {:.3} {:.3} {:.3}, corr(1,3) {:.3}", var[0], var[1], var[2], corr[(2, 0)]),
    ))
}

fn integral_accounting(fx: &Fixture) -> Result<Outcome> {
    let eval = Evaluator::new(&fx.data, &fx.spec, 0)?;
    let pe = eval.panel(&fx.psi, 5, Derivs::Hessian)?;
    record_inner(pe.max_inner_iterations);
    let s = fx.spec.param_len();
    let expected = fx.data.len() * (s + 1) * (s + 1);
    Ok(Outcome::new(pe.integrals == expected, format!("reported {} integrals, J(S+1)^2 = {expected}", pe.integrals)))
}

fn determinism(fx: &Fixture) -> Result<Outcome> {
    let mut bits = Vec::new();
    for workers in [1, 2, 8] {
        let eval = Evaluator::new(&fx.data, &fx.spec, workers)?;
        let pe = eval.panel(&fx.psi, 5, Derivs::Hessian)?;
        record_inner(pe.max_inner_iterations);
        let mut v = vec![pe.loglik.to_bits()];
        v.extend(pe.grad.unwrap().iter().map(|x| x.to_bits()));
        v.extend(pe.hess.unwrap().iter().map(|x| x.to_bits()));
        bits.push(v);
    }
    let same = bits.windows(2).all(|w| w[0] == w[1]);
    Ok(Outcome::new(same, format!("loglik bits {:#018x} for workers 1, 2, 8", bits[0][0])))
}

fn report(index: usize, name: &str, limit_secs: Option<f64>, run: impl FnOnce() -> Result<Outcome>) -> bool {
    let start = Instant::now();
    let outcome = run();
    let secs = start.elapsed().as_secs_f64();
    let (pass, detail) = match outcome {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    let in_time = limit_secs.is_none_or(|l| secs < l);
    let pass = pass && in_time;
    let limit = limit_secs.map(|l| format!(", limit {l}s")).unwrap_or_default();
    println!(
        "{} criterion {index:>2} {name}: {detail} [{secs:.2}s{limit}]",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

fn main() {
    let oracle = oracle_fixture();
    let deriv = derivative_fixture();
    let scale = paper_scale_fixture();
    let recovery_first = recovery_builder(1000).simulate(&recovery_truth());

    let mut results = Vec::new();
    results.push(report(1, "Laplace/AGQ identity", Some(1.0), || {
        laplace_identity(&[&oracle, &deriv, &scale, &recovery_first])
    }));
    results.push(report(2, "Gaussian exactness", Some(1.0), gaussian_exactness));
    results.push(report(3, "brute-force oracle", Some(30.0), || brute_force(&oracle)));
    results.push(report(4, "derivative fidelity", Some(120.0), || derivative_fidelity(&deriv)));
    results.push(report(5, "quadrature stabilization", Some(600.0), || stabilization(&scale)));
    results.push(report(6, "parameter recovery", Some(1200.0), recovery));
    results.push(report(7, "covariance arithmetic", Some(1.0), table_arithmetic));
    results.push(report(9, "integral accounting", None, || integral_accounting(&deriv)));
    results.push(report(10, "reduction determinism", None, || determinism(&scale)));
    let inner = INNER_MAX.load(std::sync::atomic::Ordering::Relaxed);
    results.push(report(8, "inner robustness", None, || {
        Ok(Outcome::new(inner <= 25, format!("max inner Newton iterations {inner}")))
    }));

    let passed = results.iter().filter(|&&p| p).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
