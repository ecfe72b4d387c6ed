//! Forward simulation of panels from the GLARMA mixed model.
//!
//! Series `j` draws from its own ChaCha stream `(seed, j)`, so output depends
//! only on the seed and never on scheduling.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ModelSpec, PanelData, SeriesData};

/// Stream offset for covariate draws, kept apart from the response streams.
const COVARIATE_STREAM: u64 = 1 << 32;

/// Generator for one covariate column.
#[derive(Debug, Clone, PartialEq)]
pub enum CovariateGen {
    Constant(f64),
    WhiteNoise { mean: f64, sd: f64 },
    Values(Vec<f64>),
}

impl CovariateGen {
    pub fn generate<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<f64>> {
        match self {
            CovariateGen::Constant(c) => Ok(vec![*c; n]),
            CovariateGen::WhiteNoise { mean, sd } => Ok((0..n)
                .map(|_| mean + sd * rng.sample::<f64, _>(StandardNormal))
                .collect()),
            CovariateGen::Values(v) => {
                if v.len() < n {
                    return Err(Error::Spec(format!("supplied covariate has {} values, need {n}", v.len())));
                }
                Ok(v[..n].to_vec())
            }
        }
    }
}

/// Random stream dedicated to covariate generation for series `j`.
pub fn covariate_rng(seed: u64, j: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(COVARIATE_STREAM + j as u64);
    rng
}

/// Builds an `n x k` matrix from one generator per column.
pub fn generate_matrix<R: Rng + ?Sized>(gens: &[CovariateGen], n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(n, gens.len());
    for (c, g) in gens.iter().enumerate() {
        let col = g.generate(n, rng)?;
        out.column_mut(c).copy_from_slice(&col);
    }
    Ok(out)
}

/// Everything needed to simulate a panel.
#[derive(Debug, Clone)]
pub struct SimSpec<'a> {
    pub model: &'a ModelSpec,
    pub psi: DVector<f64>,
    pub ids: Vec<String>,
    /// Fixed covariates per series, `n_j x b`.
    pub x: Vec<DMatrix<f64>>,
    /// Random-effect covariates per series, `n_j x d`.
    pub r: Vec<DMatrix<f64>>,
    /// Trial counts per series.
    pub m: Vec<Vec<u64>>,
    pub seed: u64,
}

/// Latent quantities of one simulated series.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesLatents {
    pub zeta: DVector<f64>,
    pub u: DVector<f64>,
    pub w: Vec<f64>,
    pub alpha: Vec<f64>,
    pub e: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Simulated {
    pub data: PanelData,
    pub latents: Vec<SeriesLatents>,
}

fn simulate_series(spec: &SimSpec<'_>, j: usize) -> Result<(SeriesData, SeriesLatents)> {
    let model = spec.model;
    let family = model.family;
    let x = &spec.x[j];
    let r = &spec.r[j];
    let m = &spec.m[j];
    let n = x.nrows();
    if r.nrows() != n || m.len() != n {
        return Err(Error::Contract(format!("X has {n} rows, R has {} and m has {}", r.nrows(), m.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(j as u64);

    let d = model.random_dim();
    let (beta, lambda, arma) = model.series_params(j, &spec.psi);
    let l = model.l_structure.lambda_to_l(&lambda)?;
    let zeta = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let u = &l * &zeta;
    let fixed = x * DVector::from_vec(beta);
    let random = r * &u;

    let (p, q) = (arma.p(), arma.q());
    let mut y = vec![0; n];
    let mut w = vec![0.0; n];
    let mut alpha = vec![0.0; n];
    let mut e = vec![0.0; n];
    for t in 0..n {
        let mut a = 0.0;
        for k in 1..=p.min(t) {
            a += arma.phi[k - 1] * (alpha[t - k] + e[t - k]);
        }
        for k in 1..=q.min(t) {
            a += arma.theta[k - 1] * e[t - k];
        }
        let wt = fixed[t] + random[t] + a;
        if !wt.is_finite() {
            return Err(Error::Divergence { t, detail: format!("simulated state W = {wt}") });
        }
        y[t] = family.sample(wt, m[t], &mut rng)?;
        let res = family.pearson_residual(y[t], wt, m[t]).map_err(|err| match err {
            Error::DegenerateVariance { w } => Error::Divergence { t, detail: format!("degenerate variance at W = {w}") },
            other => other,
        })?;
        w[t] = wt;
        alpha[t] = a;
        e[t] = res.e;
    }
    let data = SeriesData { id: spec.ids[j].clone(), y, m: m.clone(), x: x.clone(), r: r.clone() };
    Ok((data, SeriesLatents { zeta, u, w, alpha, e }))
}

/// Simulates every series of the panel.
pub fn simulate_panel(spec: &SimSpec<'_>) -> Result<Simulated> {
    let j_count = spec.model.series_count();
    if spec.ids.len() != j_count || spec.x.len() != j_count || spec.r.len() != j_count || spec.m.len() != j_count {
        return Err(Error::Contract(format!(
            "simulation inputs cover {} ids, {} X, {} R and {} m for {j_count} series",
            spec.ids.len(),
            spec.x.len(),
            spec.r.len(),
            spec.m.len()
        )));
    }
    if spec.psi.len() != spec.model.param_len() {
        return Err(Error::Contract(format!(
            "parameter vector has length {}, expected {}",
            spec.psi.len(),
            spec.model.param_len()
        )));
    }
    let out: Vec<Result<(SeriesData, SeriesLatents)>> = (0..j_count)
        .into_par_iter()
        .map(|j| simulate_series(spec, j).map_err(|e| e.in_series(j, &spec.ids[j])))
        .collect();
    let mut series = Vec::with_capacity(j_count);
    let mut latents = Vec::with_capacity(j_count);
    for item in out {
        let (s, l) = item?;
        series.push(s);
        latents.push(l);
    }
    Ok(Simulated { data: PanelData::new(series), latents })
}
