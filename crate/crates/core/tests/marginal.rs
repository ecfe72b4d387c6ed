mod common;

use common::{max_abs, max_abs_mat, oracle_exponent_d1, oracle_loglik, simpson_d1, PanelBuilder};
use glarma_mixed::expfam::Family;
use glarma_mixed::kernel::Derivs;
use glarma_mixed::marginal::{laplace_loglik, Evaluator, InnerOptions};
use glarma_mixed::model::PanelData;
use nalgebra::{DMatrix, DVector};

fn fd_check(eval: &Evaluator<'_>, psi: &DVector<f64>, q: usize) {
    let base = eval.panel(psi, q, Derivs::Hessian).unwrap();
    let g = base.grad.unwrap();
    let h = base.hess.unwrap();
    let step = 1e-5;
    let np = psi.len();
    let mut fd_g = DVector::zeros(np);
    let mut fd_h = DMatrix::zeros(np, np);
    for i in 0..np {
        let mut up = psi.clone();
        let mut dn = psi.clone();
        up[i] += step;
        dn[i] -= step;
        let eu = eval.panel(&up, q, Derivs::Gradient).unwrap();
        let ed = eval.panel(&dn, q, Derivs::Gradient).unwrap();
        fd_g[i] = (eu.loglik - ed.loglik) / (2.0 * step);
        fd_h.set_column(i, &((eu.grad.unwrap() - ed.grad.unwrap()) / (2.0 * step)));
    }
    assert!(max_abs(&(&fd_g - &g)) <= 1e-4 * (1.0 + max_abs(&g)), "gradient {g} vs {fd_g}");
    assert!(max_abs_mat(&(&fd_h - &h)) <= 1e-3 * (1.0 + max_abs_mat(&h)), "hessian {h} vs {fd_h}");
    assert_eq!(h, h.transpose());
}

#[test]
fn zero_loadings_reduce_to_fixed_effects_glarma() {
    let b = PanelBuilder::new(Family::Poisson, 3, 40, 3).covariate("x");
    let mut fx = b.simulate(&DVector::from_vec(vec![0.5, 0.3, 0.2, 0.6]));
    fx.psi[3] = 0.0;
    let eval = Evaluator::new(&fx.data, &fx.spec, 1).unwrap();
    let total = eval.panel(&fx.psi, 4, Derivs::None).unwrap().loglik;
    let mut expected = 0.0;
    for s in &fx.data.series {
        let eta: Vec<f64> = (0..s.len()).map(|t| 0.5 * s.x[(t, 0)] + 0.3 * s.x[(t, 1)]).collect();
        expected += oracle_loglik(Family::Poisson, &s.y, &s.m, &eta, &[0.2], &[]);
    }
    assert!((total - expected).abs() < 1e-9 * expected.abs());
}

#[test]
fn agq_converges_to_simpson_for_poisson() {
    let mut b = PanelBuilder::new(Family::Poisson, 2, 30, 8);
    b.orders = (1, 1);
    let fx = b.simulate(&DVector::from_vec(vec![0.2, 0.3, 0.2, 0.5]));
    let eval = Evaluator::new(&fx.data, &fx.spec, 1).unwrap();
    for j in 0..2 {
        let (l_ref, mean_ref) = simpson_d1(oracle_exponent_d1(&fx, j, &fx.psi), 20_000);
        let ev = eval.series(j, &fx.psi, 15, Derivs::None).unwrap();
        assert!((ev.loglik - l_ref).abs() < 1e-8 * l_ref.abs(), "{} vs {l_ref}", ev.loglik);
        assert!((ev.zeta_mean[0] - mean_ref).abs() < 1e-6);
    }
}

#[test]
fn agq_derivatives_match_finite_differences_with_constraints() {
    let mut b = PanelBuilder::new(Family::Binomial, 4, 40, 17).covariate("x");
    b.trials = 5;
    b.shared = false;
    b.random = vec![0, 1];
    b.groups = vec![vec![0, 2], vec![1, 3]];
    let spec = b.spec();
    // intercept[s01..s04], x[s01..s04], phi1[g1], phi1[g2], L11, L21, L22
    assert_eq!(spec.param_len(), 13);
    let psi = DVector::from_vec(vec![-0.2, 0.1, 0.0, -0.3, 0.4, 0.5, 0.3, 0.6, 0.3, -0.2, 0.5, 0.2, 0.4]);
    let fx = b.simulate(&psi);
    let eval = Evaluator::new(&fx.data, &fx.spec, 2).unwrap();
    for j in 0..4 {
        assert_eq!(spec.series_map(j).len(), 2 + 1 + 3);
    }
    fd_check(&eval, &fx.psi, 8);
}

#[test]
fn agq_derivatives_with_masked_l() {
    let mut b = PanelBuilder::new(Family::Poisson, 3, 35, 29).covariate("x").covariate("z");
    b.random = vec![0, 1, 2];
    b.l_structure = Some(glarma_mixed::LStructure::from_free(3, &[(2, 0)]).unwrap());
    b.orders = (0, 1);
    // intercept, x, z, theta1, L11, L31, L22, L33
    let psi = DVector::from_vec(vec![0.3, 0.2, -0.2, 0.25, 0.3, 0.1, 0.2, 0.25]);
    let fx = b.simulate(&psi);
    let eval = Evaluator::new(&fx.data, &fx.spec, 0).unwrap();
    fd_check(&eval, &fx.psi, 9);
}

#[test]
fn laplace_is_one_point_agq_across_families() {
    for (family, trials) in [(Family::Poisson, 1), (Family::Binomial, 4), (Family::Binary, 1)] {
        let mut b = PanelBuilder::new(family, 3, 30, 41).covariate("x");
        b.trials = trials;
        b.random = vec![0, 1];
        let fx = b.simulate(&DVector::from_vec(vec![0.1, 0.2, 0.3, 0.5, 0.1, 0.3]));
        let eval = Evaluator::new(&fx.data, &fx.spec, 1).unwrap();
        for j in 0..3 {
            let lap = laplace_loglik(&fx.spec, &fx.data, j, &fx.psi, &InnerOptions::default()).unwrap();
            let agq = eval.series(j, &fx.psi, 1, Derivs::None).unwrap().loglik;
            assert!((lap - agq).abs() <= 1e-12 * lap.abs().max(1.0));
        }
    }
}

#[test]
fn series_order_does_not_change_the_panel_value() {
    let mut b = PanelBuilder::new(Family::Binary, 5, 30, 2).covariate("x");
    b.shared = true;
    let fx = b.simulate(&DVector::from_vec(vec![0.2, 0.5, 0.3, 0.8]));
    let eval = Evaluator::new(&fx.data, &fx.spec, 1).unwrap();
    let a = eval.panel(&fx.psi, 5, Derivs::Gradient).unwrap();
    let mut series = fx.data.series.clone();
    series.reverse();
    let reversed = PanelData::new(series);
    let eval_r = Evaluator::new(&reversed, &fx.spec, 1).unwrap();
    let r = eval_r.panel(&fx.psi, 5, Derivs::Gradient).unwrap();
    assert!((a.loglik - r.loglik).abs() < 1e-10);
    assert!(max_abs(&(a.grad.unwrap() - r.grad.unwrap())) < 1e-9);
}

#[test]
fn posterior_means_are_small_when_loadings_vanish() {
    let b = PanelBuilder::new(Family::Poisson, 2, 20, 6);
    let mut fx = b.simulate(&DVector::from_vec(vec![0.4, 0.3, 0.5]));
    fx.psi[2] = 1e-8;
    let eval = Evaluator::new(&fx.data, &fx.spec, 1).unwrap();
    for j in 0..2 {
        let ev = eval.series(j, &fx.psi, 6, Derivs::None).unwrap();
        assert!(ev.zeta_mean[0].abs() < 1e-6);
    }
}

#[test]
fn evaluation_rejects_wrong_length() {
    let fx = PanelBuilder::new(Family::Binary, 2, 10, 1).simulate(&DVector::from_vec(vec![0.0, 0.1, 0.5]));
    let eval = Evaluator::new(&fx.data, &fx.spec, 1).unwrap();
    assert!(eval.panel(&DVector::zeros(2), 3, Derivs::None).is_err());
}
