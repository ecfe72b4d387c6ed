//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use glarma_mixed::expfam::Family;
use glarma_mixed::model::{ConstraintMap, ModelSpec, PanelData, SerialGroup};
use glarma_mixed::ranef::LStructure;
use glarma_mixed::sim::{covariate_rng, generate_matrix, simulate_panel, CovariateGen, SeriesLatents, SimSpec};
use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

pub struct Fixture {
    pub data: PanelData,
    pub spec: ModelSpec,
    pub psi: DVector<f64>,
    pub latents: Vec<SeriesLatents>,
}

pub fn ids(j: usize) -> Vec<String> {
    (1..=j).map(|i| format!("s{i:02}")).collect()
}

/// Builds and simulates a panel.
///
/// `fixed` lists covariate generators (the first is usually the intercept),
/// `random` lists the indices of fixed covariates that also carry random
/// effects, and `groups` assigns series to serial groups of order `(1, 0)`.
pub struct PanelBuilder {
    pub family: Family,
    pub j: usize,
    pub n: usize,
    pub trials: u64,
    pub fixed: Vec<(String, CovariateGen)>,
    pub shared: bool,
    pub random: Vec<usize>,
    pub l_structure: Option<LStructure>,
    pub groups: Vec<Vec<usize>>,
    pub orders: (usize, usize),
    pub seed: u64,
}

impl PanelBuilder {
    pub fn new(family: Family, j: usize, n: usize, seed: u64) -> Self {
        Self {
            family,
            j,
            n,
            trials: 1,
            fixed: vec![("intercept".into(), CovariateGen::Constant(1.0))],
            shared: true,
            random: vec![0],
            l_structure: None,
            groups: vec![(0..j).collect()],
            orders: (1, 0),
            seed,
        }
    }

    pub fn covariate(mut self, name: &str) -> Self {
        self.fixed.push((name.into(), CovariateGen::WhiteNoise { mean: 0.0, sd: 1.0 }));
        self
    }

    pub fn spec(&self) -> ModelSpec {
        let ids = ids(self.j);
        let names: Vec<String> = self.fixed.iter().map(|(n, _)| n.clone()).collect();
        let labels: Vec<Vec<String>> = names
            .iter()
            .map(|_| if self.shared { vec![String::new(); self.j] } else { ids.clone() })
            .collect();
        let serial: Vec<SerialGroup> = self
            .groups
            .iter()
            .enumerate()
            .map(|(g, members)| SerialGroup {
                label: if self.groups.len() == 1 { String::new() } else { format!("g{}", g + 1) },
                p: self.orders.0,
                q: self.orders.1,
                members: members.clone(),
                shared: true,
            })
            .collect();
        let c = ConstraintMap::from_groups(&ids, &names, &labels, &serial).unwrap();
        let random_names: Vec<String> = self.random.iter().map(|&k| names[k].clone()).collect();
        let d = random_names.len();
        let ls = self.l_structure.clone().unwrap_or_else(|| LStructure::full(d));
        ModelSpec::new(self.family, names, random_names, c, ls).unwrap()
    }

    pub fn simulate(&self, psi: &DVector<f64>) -> Fixture {
        let spec = self.spec();
        assert_eq!(psi.len(), spec.param_len(), "truth for {:?}", spec.param_names());
        let gens: Vec<CovariateGen> = self.fixed.iter().map(|(_, g)| g.clone()).collect();
        let x: Vec<DMatrix<f64>> =
            (0..self.j).map(|j| generate_matrix(&gens, self.n, &mut covariate_rng(self.seed, j)).unwrap()).collect();
        let r: Vec<DMatrix<f64>> = x.iter().map(|xj| xj.select_columns(&self.random)).collect();
        let sim = SimSpec {
            model: &spec,
            psi: psi.clone(),
            ids: ids(self.j),
            x,
            r,
            m: vec![vec![self.trials; self.n]; self.j],
            seed: self.seed,
        };
        let out = simulate_panel(&sim).unwrap();
        Fixture { data: out.data, spec, psi: psi.clone(), latents: out.latents }
    }
}

/// Straightforward GLARMA log-likelihood for one series, written without
/// the library's recursion code.
pub fn oracle_loglik(
    family: Family,
    y: &[u64],
    m: &[u64],
    eta: &[f64],
    phi: &[f64],
    theta: &[f64],
) -> f64 {
    let n = y.len();
    let mut alpha = vec![0.0; n];
    let mut e = vec![0.0; n];
    let mut total = 0.0;
    for t in 0..n {
        let mut a = 0.0;
        for (l, ph) in phi.iter().enumerate() {
            if t > l {
                a += ph * (alpha[t - l - 1] + e[t - l - 1]);
            }
        }
        for (l, th) in theta.iter().enumerate() {
            if t > l {
                a += th * e[t - l - 1];
            }
        }
        alpha[t] = a;
        let w = (eta[t] + a).clamp(-700.0, 700.0);
        let (yt, mt) = (y[t] as f64, m[t] as f64);
        let (mu, var, logf) = match family {
            Family::Binary | Family::Binomial => {
                let softplus = w.max(0.0) + (-w.abs()).exp().ln_1p();
                let p = (w - softplus).exp();
                let pq = (w - 2.0 * softplus).exp();
                let lf = yt * w - mt * softplus
                    + ln_gamma(mt + 1.0)
                    - ln_gamma(yt + 1.0)
                    - ln_gamma(mt - yt + 1.0);
                (mt * p, mt * pq, lf)
            }
            Family::Poisson => {
                let mu = w.exp();
                (mu, mu, yt * w - mu - ln_gamma(yt + 1.0))
            }
        };
        e[t] = (yt - mu) / var.sqrt();
        total += logf;
    }
    total
}

/// Log of `(2 pi)^{-1/2} int exp F(z) dz` and the posterior mean of `z`, by
/// composite Simpson on `[-10, 10]` with `panels` panels, for a scalar random
/// intercept entering as `eta_t + u * z`.
pub fn simpson_d1(f: impl Fn(f64) -> f64, panels: usize) -> (f64, f64) {
    let a = -10.0;
    let h = 20.0 / panels as f64;
    let vals: Vec<f64> = (0..=panels).map(|i| f(a + i as f64 * h)).collect();
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    let mut sz = 0.0;
    for (i, v) in vals.iter().enumerate() {
        let c = if i == 0 || i == panels { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        let w = c * (v - max).exp();
        s += w;
        sz += w * (a + i as f64 * h);
    }
    let log_int = max + (s * h / 3.0).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    (log_int, sz / s)
}

/// Exponent `F_j(z)` for a scalar random effect, built from the oracle likelihood.
pub fn oracle_exponent_d1<'a>(fx: &'a Fixture, j: usize, psi: &DVector<f64>) -> impl Fn(f64) -> f64 + 'a {
    let spec = &fx.spec;
    let s = &fx.data.series[j];
    let (beta, lambda, arma) = spec.series_params(j, psi);
    let l = spec.l_structure.lambda_to_l(&lambda).unwrap();
    assert_eq!(l.nrows(), 1);
    let base: Vec<f64> = (0..s.len())
        .map(|t| (0..beta.len()).map(|k| s.x[(t, k)] * beta[k]).sum::<f64>())
        .collect();
    let l11 = l[(0, 0)];
    move |z: f64| {
        let eta: Vec<f64> = (0..s.len()).map(|t| base[t] + s.r[(t, 0)] * l11 * z).collect();
        oracle_loglik(spec.family, &s.y, &s.m, &eta, &arma.phi, &arma.theta) - 0.5 * z * z
    }
}

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |a: f64, x| a.max(x.abs()))
}

pub fn max_abs_mat(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a: f64, x| a.max(x.abs()))
}
