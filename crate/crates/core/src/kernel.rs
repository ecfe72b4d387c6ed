//! Single-series GLARMA filter with exact derivative recursions.
//!
//! For a series of length `n` the state is
//!
//! ```text
//! W_t     = c_t' delta + offset_t + alpha_t
//! alpha_t = sum_l phi_l (alpha_{t-l} + e_{t-l}) + sum_l theta_l e_{t-l}
//! e_t     = (y_t - mu_t) / sigma_t
//! ```
//!
//! with `alpha_t = e_t = 0` before the first observation. The filter
//! returns the conditional log-likelihood and, on request, its gradient
//! and Hessian with respect to `(delta, phi_1..phi_p, theta_1..theta_q)`
//! in that order. Every caller relies on this layout.
//!
//! Derivatives are propagated through the recursion exactly; the second
//! derivative of the Pearson residual enters through
//! [`PearsonResidual::d2e_dw2`](crate::expfam::PearsonResidual).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expfam::Family;

/// Autoregressive and moving-average coefficients of one series.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArmaParams {
    pub phi: Vec<f64>,
    pub theta: Vec<f64>,
}

impl ArmaParams {
    pub fn new(phi: Vec<f64>, theta: Vec<f64>) -> Self {
        Self { phi, theta }
    }

    pub fn none() -> Self {
        Self::default()
    }

    pub fn p(&self) -> usize {
        self.phi.len()
    }

    pub fn q(&self) -> usize {
        self.theta.len()
    }

    pub fn len(&self) -> usize {
        self.phi.len() + self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Splits a `(phi.., theta..)` slice according to the orders `(p, q)`.
    pub fn from_slice(values: &[f64], p: usize, q: usize) -> Self {
        debug_assert_eq!(values.len(), p + q);
        Self {
            phi: values[..p].to_vec(),
            theta: values[p..p + q].to_vec(),
        }
    }

    /// True when every root of `1 - sum phi_l z^l` lies outside the unit circle.
    pub fn is_stationary(&self) -> bool {
        let p = self.phi.len();
        if p == 0 {
            return true;
        }
        let mut companion = DMatrix::<f64>::zeros(p, p);
        for (l, &phi) in self.phi.iter().enumerate() {
            companion[(0, l)] = phi;
        }
        for i in 1..p {
            companion[(i, i - 1)] = 1.0;
        }
        companion
            .complex_eigenvalues()
            .iter()
            .all(|z| z.norm() < 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Derivs {
    None,
    Gradient,
    Hessian,
}

/// Inputs for one filter pass. `covariates` is `n x k` and pairs with `coefs`.
#[derive(Debug, Clone, Copy)]
pub struct FilterInput<'a> {
    pub y: &'a [u64],
    pub m: &'a [u64],
    pub covariates: &'a DMatrix<f64>,
    pub coefs: &'a [f64],
    pub offset: Option<&'a [f64]>,
    pub arma: &'a ArmaParams,
}

#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub w: Vec<f64>,
    pub alpha: Vec<f64>,
    pub e: Vec<f64>,
    pub loglik: f64,
    /// Present when at least the gradient was requested.
    pub grad: Option<DVector<f64>>,
    /// Present when the Hessian was requested.
    pub hess: Option<DMatrix<f64>>,
}

impl FilterInput<'_> {
    fn validate(&self, family: Family) -> Result<()> {
        let n = self.y.len();
        if n == 0 {
            return Err(Error::Contract("series has no observations".into()));
        }
        if self.m.len() != n {
            return Err(Error::Contract(format!("m has length {} but y has {n}", self.m.len())));
        }
        if self.covariates.nrows() != n {
            return Err(Error::Contract(format!(
                "covariates have {} rows but y has {n}",
                self.covariates.nrows()
            )));
        }
        if self.covariates.ncols() != self.coefs.len() {
            return Err(Error::Contract(format!(
                "{} covariate columns but {} coefficients",
                self.covariates.ncols(),
                self.coefs.len()
            )));
        }
        if let Some(off) = self.offset {
            if off.len() != n {
                return Err(Error::Contract(format!("offset has length {} but y has {n}", off.len())));
            }
        }
        for t in 0..n {
            family.check_support(self.y[t], self.m[t])?;
        }
        Ok(())
    }
}

/// Runs the GLARMA recursion over one series.
pub fn filter(input: &FilterInput<'_>, family: Family, derivs: Derivs) -> Result<FilterOutput> {
    input.validate(family)?;
    let n = input.y.len();
    let k = input.coefs.len();
    let p = input.arma.p();
    let q = input.arma.q();
    let np = k + p + q;
    let ring = p.max(q) + 1;
    let want_grad = derivs >= Derivs::Gradient;
    let want_hess = derivs == Derivs::Hessian;

    let mut w_out = vec![0.0; n];
    let mut alpha_out = vec![0.0; n];
    let mut e_out = vec![0.0; n];
    let mut loglik = 0.0;

    // Ring buffers indexed by t % ring: d alpha, d e, and their second derivatives (upper triangle).
    let mut da = if want_grad { vec![0.0; ring * np] } else { Vec::new() };
    let mut de = if want_grad { vec![0.0; ring * np] } else { Vec::new() };
    let mut d2a = if want_hess { vec![0.0; ring * np * np] } else { Vec::new() };
    let mut d2e = if want_hess { vec![0.0; ring * np * np] } else { Vec::new() };
    let mut dw = vec![0.0; if want_grad { np } else { 0 }];
    let mut h = vec![0.0; if want_hess { np * np } else { 0 }];
    let mut grad = DVector::<f64>::zeros(if want_grad { np } else { 0 });
    let mut hess = DMatrix::<f64>::zeros(if want_hess { np } else { 0 }, if want_hess { np } else { 0 });

    let phi = &input.arma.phi;
    let theta = &input.arma.theta;

    for t in 0..n {
        let slot = t % ring;

        let mut alpha = 0.0;
        for l in 1..=p.min(t) {
            alpha += phi[l - 1] * (alpha_out[t - l] + e_out[t - l]);
        }
        for l in 1..=q.min(t) {
            alpha += theta[l - 1] * e_out[t - l];
        }
        let mut lin = 0.0;
        for i in 0..k {
            lin += input.covariates[(t, i)] * input.coefs[i];
        }
        let w = lin + input.offset.map_or(0.0, |o| o[t]) + alpha;
        if !w.is_finite() {
            return Err(Error::Divergence {
                t,
                detail: format!(
                    "W = {w} (linear part {lin}, alpha {alpha}, phi {phi:?}, theta {theta:?})"
                ),
            });
        }

        let (y, m) = (input.y[t], input.m[t]);
        let res = family.pearson_residual(y, w, m).map_err(|err| match err {
            Error::DegenerateVariance { w } => Error::Divergence {
                t,
                detail: format!("degenerate conditional variance at W = {w}"),
            },
            other => other,
        })?;
        if !res.e.is_finite() {
            return Err(Error::Divergence { t, detail: format!("non-finite residual at W = {w}") });
        }
        let mf = m as f64;
        let mu = mf * family.cumulant(w, 1)?;
        let sigma2 = mf * family.cumulant(w, 2)?;
        let wc = w.clamp(-crate::expfam::W_CLAMP, crate::expfam::W_CLAMP);
        loglik += y as f64 * wc - mf * family.cumulant(w, 0)? + family.log_normalizer(y, m);
        let resid = y as f64 - mu;

        w_out[t] = w;
        alpha_out[t] = alpha;
        e_out[t] = res.e;

        if !want_grad {
            continue;
        }

        // First derivatives of alpha_t, written straight into the current slot.
        let cur = slot * np;
        for i in 0..np {
            let mut ga = 0.0;
            for l in 1..=p.min(t) {
                let s = ((t - l) % ring) * np;
                ga += phi[l - 1] * (da[s + i] + de[s + i]);
            }
            for l in 1..=q.min(t) {
                let s = ((t - l) % ring) * np;
                ga += theta[l - 1] * de[s + i];
            }
            da[cur + i] = ga;
        }
        for l in 1..=p.min(t) {
            da[cur + k + l - 1] += alpha_out[t - l] + e_out[t - l];
        }
        for l in 1..=q.min(t) {
            da[cur + k + p + l - 1] += e_out[t - l];
        }
        for i in 0..np {
            dw[i] = da[cur + i] + if i < k { input.covariates[(t, i)] } else { 0.0 };
            de[cur + i] = res.de_dw * dw[i];
            grad[i] += resid * dw[i];
        }

        if !want_hess {
            continue;
        }

        let cur2 = slot * np * np;
        for i in 0..np {
            for j in i..np {
                let mut acc = 0.0;
                for l in 1..=p.min(t) {
                    let s = ((t - l) % ring) * np * np;
                    acc += phi[l - 1] * (d2a[s + i * np + j] + d2e[s + i * np + j]);
                }
                for l in 1..=q.min(t) {
                    let s = ((t - l) % ring) * np * np;
                    acc += theta[l - 1] * d2e[s + i * np + j];
                }
                h[i * np + j] = acc;
            }
        }
        // Terms from differentiating the explicit phi_l and theta_l factors.
        for l in 1..=p.min(t) {
            let s = ((t - l) % ring) * np;
            let a = k + l - 1;
            for j in 0..np {
                let v = da[s + j] + de[s + j];
                let (r, c) = if a <= j { (a, j) } else { (j, a) };
                h[r * np + c] += if j == a { 2.0 * v } else { v };
            }
        }
        for l in 1..=q.min(t) {
            let s = ((t - l) % ring) * np;
            let b = k + p + l - 1;
            for j in 0..np {
                let v = de[s + j];
                let (r, c) = if b <= j { (b, j) } else { (j, b) };
                h[r * np + c] += if j == b { 2.0 * v } else { v };
            }
        }
        for i in 0..np {
            for j in i..np {
                let hij = h[i * np + j];
                d2a[cur2 + i * np + j] = hij;
                d2e[cur2 + i * np + j] = res.d2e_dw2 * dw[i] * dw[j] + res.de_dw * hij;
                hess[(i, j)] += resid * hij - sigma2 * dw[i] * dw[j];
            }
        }
    }

    if want_hess {
        for i in 0..np {
            for j in 0..i {
                hess[(i, j)] = hess[(j, i)];
            }
        }
    }
    if !loglik.is_finite() {
        return Err(Error::Divergence { t: n - 1, detail: format!("log-likelihood {loglik}") });
    }
    if !grad.iter().chain(hess.iter()).all(|v| v.is_finite()) {
        return Err(Error::Divergence { t: n - 1, detail: "derivatives overflowed".into() });
    }

    Ok(FilterOutput {
        w: w_out,
        alpha: alpha_out,
        e: e_out,
        loglik,
        grad: want_grad.then_some(grad),
        hess: want_hess.then_some(hess),
    })
}
