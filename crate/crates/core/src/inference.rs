//! Wald and likelihood-ratio tests based on asymptotic normality.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::model::ModelSpec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Likelihood-ratio test outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    /// The reduced model removes random-effect variances, so the null value
    /// lies on the boundary and the chi-squared reference is not exact.
    pub boundary: bool,
}

fn chi2_upper(stat: f64, df: usize) -> f64 {
    if df == 0 {
        return 1.0;
    }
    if stat <= 0.0 {
        return 1.0;
    }
    ChiSquared::new(df as f64).map_or(f64::NAN, |c| c.sf(stat))
}

fn rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let top = sv.iter().fold(0.0_f64, |a, v| a.max(*v));
    let tol = top * 1e-10 * m.nrows().max(m.ncols()) as f64;
    sv.iter().filter(|&&v| v > tol).count()
}

/// Wald statistic `(C psi - c0)' (C V C')^{-1} (C psi - c0)`.
pub fn wald_test(psi: &DVector<f64>, vcov: &DMatrix<f64>, c: &DMatrix<f64>, c0: &DVector<f64>) -> Result<TestResult> {
    if c.ncols() != psi.len() || c0.len() != c.nrows() || vcov.shape() != (psi.len(), psi.len()) {
        return Err(Error::Contract(format!(
            "contrast is {}x{}, target has length {}, parameter vector has length {}",
            c.nrows(),
            c.ncols(),
            c0.len(),
            psi.len()
        )));
    }
    let df = rank(c);
    if df < c.nrows() {
        return Err(Error::Spec(format!("contrast rows are dependent (rank {df} of {})", c.nrows())));
    }
    let diff = c * psi - c0;
    let middle = c * vcov * c.transpose();
    let chol = middle
        .cholesky()
        .ok_or_else(|| Error::SingularInformation { null_directions: vec!["contrast covariance C V C'".into()] })?;
    let statistic = diff.dot(&chol.solve(&diff));
    Ok(TestResult { statistic, df, p_value: chi2_upper(statistic, df) })
}

/// A fitted model as seen by the likelihood-ratio test.
#[derive(Debug, Clone, Copy)]
pub struct Fitted<'a> {
    pub spec: &'a ModelSpec,
    pub loglik: f64,
}

/// Embeds the reduced model's parameter space in the full model's `theta` coordinates.
fn check_nested(full: &ModelSpec, reduced: &ModelSpec) -> Result<bool> {
    let (cf, cr) = (&full.constraints, &reduced.constraints);
    if cf.series_count() != cr.series_count() {
        return Err(Error::Spec("models describe different numbers of series".into()));
    }
    if full.family != reduced.family {
        return Err(Error::Spec("models use different response families".into()));
    }
    let j_count = cf.series_count();
    let bf = cf.fixed_count();

    let mut cov_map = Vec::new();
    for name in &reduced.fixed_names {
        let k = full
            .fixed_names
            .iter()
            .position(|f| f == name)
            .ok_or_else(|| Error::Spec(format!("reduced covariate '{name}' is absent from the full model")))?;
        cov_map.push(k);
    }
    let mut emb_beta = DMatrix::zeros(cf.a_beta().nrows(), cr.beta_len());
    for j in 0..j_count {
        for (kr, &kf) in cov_map.iter().enumerate() {
            let src = cr.beta_rows(j).start + kr;
            let dst = j * bf + kf;
            emb_beta.row_mut(dst).copy_from(&cr.a_beta().row(src));
        }
    }

    let mut emb_tau = DMatrix::zeros(cf.a_tau().nrows(), cr.tau_len());
    for j in 0..j_count {
        let (pf, qf) = cf.orders()[j];
        let (pr, qr) = cr.orders()[j];
        if pr > pf || qr > qf {
            return Err(Error::Spec(format!("series {j}: reduced ARMA orders ({pr}, {qr}) exceed ({pf}, {qf})")));
        }
        let (fs, rs) = (cf.tau_rows(j).start, cr.tau_rows(j).start);
        for l in 0..pr {
            emb_tau.row_mut(fs + l).copy_from(&cr.a_tau().row(rs + l));
        }
        for l in 0..qr {
            emb_tau.row_mut(fs + pf + l).copy_from(&cr.a_tau().row(rs + pr + l));
        }
    }

    for (a, emb) in [(cf.a_beta(), &emb_beta), (cf.a_tau(), &emb_tau)] {
        if emb.ncols() == 0 {
            continue;
        }
        let joined = DMatrix::from_fn(a.nrows(), a.ncols() + emb.ncols(), |r, c| {
            if c < a.ncols() {
                a[(r, c)]
            } else {
                emb[(r, c - a.ncols())]
            }
        });
        if rank(&joined) != rank(a) {
            return Err(Error::Spec("reduced constraints are not contained in the full model".into()));
        }
    }

    let mut re_map = Vec::new();
    for name in &reduced.random_names {
        let a = full
            .random_names
            .iter()
            .position(|f| f == name)
            .ok_or_else(|| Error::Spec(format!("reduced random effect '{name}' is absent from the full model")))?;
        re_map.push(a);
    }
    for &(r, c) in reduced.l_structure.free_positions() {
        let (fr, fc) = (re_map[r], re_map[c]);
        let pos = (fr.max(fc), fr.min(fc));
        if !full.l_structure.is_free(pos.0, pos.1) {
            return Err(Error::Spec(format!(
                "reduced L entry ({}, {}) is structurally zero in the full model",
                r + 1,
                c + 1
            )));
        }
    }
    Ok(reduced.random_dim() < full.random_dim())
}

/// `G^2 = 2 (l_full - l_reduced)` on the parameter-count difference.
pub fn lr_test(full: Fitted<'_>, reduced: Fitted<'_>) -> Result<LrResult> {
    let boundary = check_nested(full.spec, reduced.spec)?;
    let (nf, nr) = (full.spec.param_len(), reduced.spec.param_len());
    if nr > nf {
        return Err(Error::Spec(format!("reduced model has more parameters ({nr}) than the full model ({nf})")));
    }
    let df = nf - nr;
    let statistic = 2.0 * (full.loglik - reduced.loglik);
    Ok(LrResult { statistic, df, p_value: chi2_upper(statistic, df), boundary })
}
