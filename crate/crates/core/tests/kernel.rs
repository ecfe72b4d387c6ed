mod common;

use common::oracle_loglik;
use glarma_mixed::expfam::Family;
use glarma_mixed::kernel::{filter, ArmaParams, Derivs, FilterInput};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn family_strategy() -> impl Strategy<Value = Family> {
    prop_oneof![Just(Family::Binary), Just(Family::Binomial), Just(Family::Poisson)]
}

fn eta_of(x: &DMatrix<f64>, beta: &[f64]) -> Vec<f64> {
    (0..x.nrows()).map(|t| (0..x.ncols()).map(|k| x[(t, k)] * beta[k]).sum()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn recursion_matches_direct_oracle(
        family in family_strategy(),
        n in 1usize..40,
        seed in any::<u64>(),
        phi in prop::collection::vec(-0.4f64..0.4, 0..3),
        theta in prop::collection::vec(-0.4f64..0.4, 0..3),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 2, |_, c| if c == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
        let beta = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let m: Vec<u64> = (0..n).map(|_| if family == Family::Binomial { rng.random_range(1..6) } else { 1 }).collect();
        let y: Vec<u64> = m.iter().map(|&mt| if family == Family::Poisson { rng.random_range(0..6) } else { rng.random_range(0..=mt) }).collect();
        let arma = ArmaParams::new(phi.clone(), theta.clone());
        let out = filter(&FilterInput { y: &y, m: &m, covariates: &x, coefs: &beta, offset: None, arma: &arma }, family, Derivs::None).unwrap();
        let expected = oracle_loglik(family, &y, &m, &eta_of(&x, &beta), &phi, &theta);
        prop_assert!((out.loglik - expected).abs() <= 1e-10 * expected.abs().max(1.0));
    }
}

#[test]
fn zero_arma_is_a_glm() {
    let n = 30;
    let x = DMatrix::from_fn(n, 2, |t, c| if c == 0 { 1.0 } else { (t as f64 * 0.37).sin() });
    let beta = [0.3, -0.8];
    let y: Vec<u64> = (0..n as u64).map(|t| (t * 7) % 5).collect();
    let m = vec![1; n];
    let out = filter(
        &FilterInput { y: &y, m: &m, covariates: &x, coefs: &beta, offset: None, arma: &ArmaParams::none() },
        Family::Poisson,
        Derivs::Hessian,
    )
    .unwrap();
    let mut l = 0.0;
    let mut g = [0.0; 2];
    let mut h = [[0.0; 2]; 2];
    for t in 0..n {
        let w = beta[0] * x[(t, 0)] + beta[1] * x[(t, 1)];
        let mu = w.exp();
        l += y[t] as f64 * w - mu - statrs::function::gamma::ln_gamma(y[t] as f64 + 1.0);
        for a in 0..2 {
            g[a] += (y[t] as f64 - mu) * x[(t, a)];
            for b in 0..2 {
                h[a][b] -= mu * x[(t, a)] * x[(t, b)];
            }
        }
    }
    assert!((out.loglik - l).abs() < 1e-10);
    let og = out.grad.unwrap();
    let oh = out.hess.unwrap();
    for a in 0..2 {
        assert!((og[a] - g[a]).abs() < 1e-10);
        for b in 0..2 {
            assert!((oh[(a, b)] - h[a][b]).abs() < 1e-10);
        }
    }
}

#[test]
fn offset_equals_extra_covariate() {
    let n = 25;
    let x = DMatrix::from_fn(n, 1, |t, _| (t as f64 * 0.2).cos());
    let shift: Vec<f64> = (0..n).map(|t| 0.1 * (t % 4) as f64 - 0.15).collect();
    let mut x2 = DMatrix::zeros(n, 2);
    x2.set_column(0, &x.column(0));
    for t in 0..n {
        x2[(t, 1)] = shift[t];
    }
    let y: Vec<u64> = (0..n).map(|t| (t % 2) as u64).collect();
    let m = vec![1; n];
    let arma = ArmaParams::new(vec![0.3], vec![0.2]);
    let a = filter(
        &FilterInput { y: &y, m: &m, covariates: &x, coefs: &[0.4], offset: Some(&shift), arma: &arma },
        Family::Binary,
        Derivs::Gradient,
    )
    .unwrap();
    let b = filter(
        &FilterInput { y: &y, m: &m, covariates: &x2, coefs: &[0.4, 1.0], offset: None, arma: &arma },
        Family::Binary,
        Derivs::Gradient,
    )
    .unwrap();
    assert!((a.loglik - b.loglik).abs() < 1e-12);
    for t in 0..n {
        assert!((a.w[t] - b.w[t]).abs() < 1e-12);
    }
    let (ga, gb) = (a.grad.unwrap(), b.grad.unwrap());
    assert!((ga[0] - gb[0]).abs() < 1e-10);
    assert!((ga[1] - gb[2]).abs() < 1e-10);
    assert!((ga[2] - gb[3]).abs() < 1e-10);
}

#[test]
fn residuals_are_pearson_residuals() {
    let n = 20;
    let x = DMatrix::from_element(n, 1, 1.0);
    let y: Vec<u64> = (0..n).map(|t| ((t * 3) % 7) as u64).collect();
    let m = vec![6; n];
    let arma = ArmaParams::new(vec![0.5, -0.2], vec![0.1]);
    let out = filter(
        &FilterInput { y: &y, m: &m, covariates: &x, coefs: &[-0.2], offset: None, arma: &arma },
        Family::Binomial,
        Derivs::None,
    )
    .unwrap();
    for t in 0..n {
        let r = Family::Binomial.pearson_residual(y[t], out.w[t], m[t]).unwrap();
        assert!((out.e[t] - r.e).abs() < 1e-14);
        assert!((out.w[t] - (-0.2 + out.alpha[t])).abs() < 1e-14);
    }
    assert_eq!(out.alpha[0], 0.0);
}
