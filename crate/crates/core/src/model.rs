//! Panel data, parameter sharing and the map from the reduced parameter
//! vector to each series' parameters.
//!
//! The full parameter vector is laid out as `[psi_beta | psi_tau | lambda]`.
//! Series `j` uses `theta_j = (beta_j, lambda, phi_j, theta_ma_j)`, which is
//! the order the GLARMA filter expects once the random-effect rows are
//! appended to the fixed covariates. `theta_j` is a linear image `A_j psi`
//! of the parameters it depends on.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expfam::Family;
use crate::kernel::ArmaParams;
use crate::ranef::LStructure;

/// One observed series.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesData {
    pub id: String,
    pub y: Vec<u64>,
    pub m: Vec<u64>,
    /// Fixed-effect covariates, `n x b`.
    pub x: DMatrix<f64>,
    /// Random-effect covariates, `n x d`.
    pub r: DMatrix<f64>,
}

impl SeriesData {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Independent series sharing one model.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    pub series: Vec<SeriesData>,
}

impl PanelData {
    pub fn new(series: Vec<SeriesData>) -> Self {
        Self { series }
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn total_observations(&self) -> usize {
        self.series.iter().map(SeriesData::len).sum()
    }
}

/// Which component of the model a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Fixed,
    Serial,
    Random,
}

impl Component {
    pub fn name(self) -> &'static str {
        match self {
            Component::Fixed => "fixed",
            Component::Serial => "serial",
            Component::Random => "random",
        }
    }
}

/// Serial-dependence group: every member shares the orders, and the
/// coefficients too when `shared` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct SerialGroup {
    pub label: String,
    pub p: usize,
    pub q: usize,
    pub members: Vec<usize>,
    pub shared: bool,
}

/// Linear maps `beta = A_beta psi_beta` and `tau = A_tau psi_tau`.
///
/// `beta` stacks `b` coefficients per series; `tau` stacks
/// `(phi_1..phi_p, theta_1..theta_q)` per series.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintMap {
    a_beta: DMatrix<f64>,
    a_tau: DMatrix<f64>,
    b: usize,
    orders: Vec<(usize, usize)>,
    tau_offsets: Vec<usize>,
    beta_names: Vec<String>,
    tau_names: Vec<String>,
}

impl ConstraintMap {
    pub fn new(
        b: usize,
        orders: Vec<(usize, usize)>,
        a_beta: DMatrix<f64>,
        a_tau: DMatrix<f64>,
        beta_names: Vec<String>,
        tau_names: Vec<String>,
    ) -> Result<Self> {
        let j = orders.len();
        if a_beta.nrows() != j * b {
            return Err(Error::Spec(format!(
                "A_beta has {} rows, expected {} ({j} series x {b} covariates)",
                a_beta.nrows(),
                j * b
            )));
        }
        let mut tau_offsets = Vec::with_capacity(j + 1);
        let mut acc = 0;
        for &(p, q) in &orders {
            tau_offsets.push(acc);
            acc += p + q;
        }
        tau_offsets.push(acc);
        if a_tau.nrows() != acc {
            return Err(Error::Spec(format!("A_tau has {} rows, expected {acc}", a_tau.nrows())));
        }
        if beta_names.len() != a_beta.ncols() || tau_names.len() != a_tau.ncols() {
            return Err(Error::Spec("parameter names do not match constraint columns".into()));
        }
        for (name, col) in beta_names.iter().zip(a_beta.column_iter()) {
            if col.iter().all(|&v| v == 0.0) {
                return Err(Error::Spec(format!("parameter '{name}' is not used by any series")));
            }
        }
        for (name, col) in tau_names.iter().zip(a_tau.column_iter()) {
            if col.iter().all(|&v| v == 0.0) {
                return Err(Error::Spec(format!("parameter '{name}' is not used by any series")));
            }
        }
        Ok(Self { a_beta, a_tau, b, orders, tau_offsets, beta_names, tau_names })
    }

    /// Separate coefficients for every series.
    pub fn identity(series_ids: &[String], fixed_names: &[String], orders: Vec<(usize, usize)>) -> Result<Self> {
        let labels: Vec<Vec<String>> =
            fixed_names.iter().map(|_| series_ids.to_vec()).collect();
        let groups = series_ids
            .iter()
            .zip(&orders)
            .enumerate()
            .map(|(j, (id, &(p, q)))| SerialGroup { label: id.clone(), p, q, members: vec![j], shared: true })
            .collect::<Vec<_>>();
        Self::from_groups(series_ids, fixed_names, &labels, &groups)
    }

    /// One coefficient per covariate and one ARMA block for the whole panel.
    pub fn shared(series_ids: &[String], fixed_names: &[String], p: usize, q: usize) -> Result<Self> {
        let labels: Vec<Vec<String>> =
            fixed_names.iter().map(|_| vec![String::new(); series_ids.len()]).collect();
        let groups = vec![SerialGroup {
            label: String::new(),
            p,
            q,
            members: (0..series_ids.len()).collect(),
            shared: true,
        }];
        Self::from_groups(series_ids, fixed_names, &labels, &groups)
    }

    /// Builds the maps from group labels.
    ///
    /// `beta_labels[k][j]` names the group of series `j` for covariate `k`;
    /// series with equal labels share a coefficient. An empty label yields the
    /// bare covariate name, any other label `name[label]`. Serial groups must
    /// cover every series exactly once.
    pub fn from_groups(
        series_ids: &[String],
        fixed_names: &[String],
        beta_labels: &[Vec<String>],
        serial: &[SerialGroup],
    ) -> Result<Self> {
        let j_count = series_ids.len();
        let b = fixed_names.len();
        if beta_labels.len() != b {
            return Err(Error::Spec(format!("{} sharing rules for {b} covariates", beta_labels.len())));
        }
        let mut beta_names = Vec::new();
        let mut entries = Vec::new();
        for (k, (name, labels)) in fixed_names.iter().zip(beta_labels).enumerate() {
            if labels.len() != j_count {
                return Err(Error::Spec(format!("covariate '{name}' has {} group labels for {j_count} series", labels.len())));
            }
            let mut seen: Vec<&String> = Vec::new();
            for (j, label) in labels.iter().enumerate() {
                let pos = match seen.iter().position(|l| *l == label) {
                    Some(pos) => pos,
                    None => {
                        seen.push(label);
                        beta_names.push(if label.is_empty() { name.clone() } else { format!("{name}[{label}]") });
                        seen.len() - 1
                    }
                };
                let col = beta_names.len() - seen.len() + pos;
                entries.push((j * b + k, col));
            }
        }
        let mut a_beta = DMatrix::zeros(j_count * b, beta_names.len());
        for (row, col) in entries {
            a_beta[(row, col)] = 1.0;
        }

        let mut orders = vec![None; j_count];
        for g in serial {
            for &j in &g.members {
                if j >= j_count {
                    return Err(Error::Spec(format!("serial group '{}' names series {j} of {j_count}", g.label)));
                }
                if orders[j].is_some() {
                    return Err(Error::Spec(format!("series '{}' belongs to more than one serial group", series_ids[j])));
                }
                orders[j] = Some((g.p, g.q));
            }
        }
        let orders: Vec<(usize, usize)> = orders
            .into_iter()
            .enumerate()
            .map(|(j, o)| o.ok_or_else(|| Error::Spec(format!("series '{}' has no serial group", series_ids[j]))))
            .collect::<Result<_>>()?;
        let mut tau_offsets = vec![0];
        for &(p, q) in &orders {
            tau_offsets.push(tau_offsets.last().unwrap() + p + q);
        }
        let mut tau_names = Vec::new();
        let mut entries = Vec::new();
        let name_for = |base: String, label: &str| if label.is_empty() { base } else { format!("{base}[{label}]") };
        for g in serial {
            let coef_names: Vec<String> = (1..=g.p)
                .map(|l| format!("phi{l}"))
                .chain((1..=g.q).map(|l| format!("theta{l}")))
                .collect();
            if g.shared {
                let start = tau_names.len();
                tau_names.extend(coef_names.iter().map(|c| name_for(c.clone(), &g.label)));
                for &j in &g.members {
                    for i in 0..coef_names.len() {
                        entries.push((tau_offsets[j] + i, start + i));
                    }
                }
            } else {
                for &j in &g.members {
                    let start = tau_names.len();
                    tau_names.extend(coef_names.iter().map(|c| name_for(c.clone(), &series_ids[j])));
                    for i in 0..coef_names.len() {
                        entries.push((tau_offsets[j] + i, start + i));
                    }
                }
            }
        }
        let mut a_tau = DMatrix::zeros(*tau_offsets.last().unwrap(), tau_names.len());
        for (row, col) in entries {
            a_tau[(row, col)] = 1.0;
        }
        Self::new(b, orders, a_beta, a_tau, beta_names, tau_names)
    }

    pub fn a_beta(&self) -> &DMatrix<f64> {
        &self.a_beta
    }

    pub fn a_tau(&self) -> &DMatrix<f64> {
        &self.a_tau
    }

    pub fn series_count(&self) -> usize {
        self.orders.len()
    }

    pub fn fixed_count(&self) -> usize {
        self.b
    }

    pub fn orders(&self) -> &[(usize, usize)] {
        &self.orders
    }

    pub fn beta_len(&self) -> usize {
        self.a_beta.ncols()
    }

    pub fn tau_len(&self) -> usize {
        self.a_tau.ncols()
    }

    pub fn beta_names(&self) -> &[String] {
        &self.beta_names
    }

    pub fn tau_names(&self) -> &[String] {
        &self.tau_names
    }

    /// Rows of `A_beta` belonging to series `j`.
    pub fn beta_rows(&self, j: usize) -> std::ops::Range<usize> {
        j * self.b..(j + 1) * self.b
    }

    /// Rows of `A_tau` belonging to series `j`.
    pub fn tau_rows(&self, j: usize) -> std::ops::Range<usize> {
        self.tau_offsets[j]..self.tau_offsets[j + 1]
    }
}

/// Per-series slice of the parameter map.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesMap {
    /// Indices into the full parameter vector that series `j` depends on.
    pub columns: Vec<usize>,
    /// `theta_j = a * psi[columns]`.
    pub a: DMatrix<f64>,
    pub p: usize,
    pub q: usize,
}

impl SeriesMap {
    /// Number of parameters the series depends on.
    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    /// Evaluates `theta_j` from the full parameter vector.
    pub fn theta(&self, psi: &DVector<f64>) -> DVector<f64> {
        let sub = DVector::from_iterator(self.columns.len(), self.columns.iter().map(|&c| psi[c]));
        &self.a * sub
    }
}

/// Complete model: family, sharing constraints and random-effect structure.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub family: Family,
    pub fixed_names: Vec<String>,
    pub random_names: Vec<String>,
    pub constraints: ConstraintMap,
    pub l_structure: LStructure,
    maps: Vec<SeriesMap>,
}

impl ModelSpec {
    pub fn new(
        family: Family,
        fixed_names: Vec<String>,
        random_names: Vec<String>,
        constraints: ConstraintMap,
        l_structure: LStructure,
    ) -> Result<Self> {
        if fixed_names.len() != constraints.fixed_count() {
            return Err(Error::Spec(format!(
                "{} fixed covariates named but constraints expect {}",
                fixed_names.len(),
                constraints.fixed_count()
            )));
        }
        if random_names.len() != l_structure.dim() {
            return Err(Error::Spec(format!(
                "{} random covariates named but L is {}x{}",
                random_names.len(),
                l_structure.dim(),
                l_structure.dim()
            )));
        }
        let b = constraints.fixed_count();
        let pb = constraints.beta_len();
        let pt = constraints.tau_len();
        let sl = l_structure.len();
        let total = pb + pt + sl;
        let mut maps = Vec::with_capacity(constraints.series_count());
        for j in 0..constraints.series_count() {
            let (p, q) = constraints.orders()[j];
            let rows = b + sl + p + q;
            let mut full = DMatrix::zeros(rows, total);
            for (r, src) in constraints.beta_rows(j).enumerate() {
                for c in 0..pb {
                    full[(r, c)] = constraints.a_beta()[(src, c)];
                }
            }
            for i in 0..sl {
                full[(b + i, pb + pt + i)] = 1.0;
            }
            for (r, src) in constraints.tau_rows(j).enumerate() {
                for c in 0..pt {
                    full[(b + sl + r, pb + c)] = constraints.a_tau()[(src, c)];
                }
            }
            let columns: Vec<usize> =
                (0..total).filter(|&c| full.column(c).iter().any(|&v| v != 0.0)).collect();
            let a = full.select_columns(&columns);
            maps.push(SeriesMap { columns, a, p, q });
        }
        Ok(Self { family, fixed_names, random_names, constraints, l_structure, maps })
    }

    pub fn series_count(&self) -> usize {
        self.maps.len()
    }

    /// Length of the full parameter vector.
    pub fn param_len(&self) -> usize {
        self.constraints.beta_len() + self.constraints.tau_len() + self.l_structure.len()
    }

    pub fn random_dim(&self) -> usize {
        self.l_structure.dim()
    }

    pub fn series_map(&self, j: usize) -> &SeriesMap {
        &self.maps[j]
    }

    /// Index range of `lambda` within the full parameter vector.
    pub fn lambda_range(&self) -> std::ops::Range<usize> {
        let start = self.constraints.beta_len() + self.constraints.tau_len();
        start..start + self.l_structure.len()
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = self.constraints.beta_names().to_vec();
        names.extend_from_slice(self.constraints.tau_names());
        names.extend(self.l_structure.labels());
        names
    }

    pub fn components(&self) -> Vec<Component> {
        let mut out = vec![Component::Fixed; self.constraints.beta_len()];
        out.extend(std::iter::repeat_n(Component::Serial, self.constraints.tau_len()));
        out.extend(std::iter::repeat_n(Component::Random, self.l_structure.len()));
        out
    }

    /// Assembles a full parameter vector from its three blocks.
    pub fn assemble(&self, psi_beta: &[f64], psi_tau: &[f64], lambda: &[f64]) -> Result<DVector<f64>> {
        if psi_beta.len() != self.constraints.beta_len()
            || psi_tau.len() != self.constraints.tau_len()
            || lambda.len() != self.l_structure.len()
        {
            return Err(Error::Contract(format!(
                "parameter blocks have lengths ({}, {}, {}), expected ({}, {}, {})",
                psi_beta.len(),
                psi_tau.len(),
                lambda.len(),
                self.constraints.beta_len(),
                self.constraints.tau_len(),
                self.l_structure.len()
            )));
        }
        Ok(DVector::from_iterator(
            self.param_len(),
            psi_beta.iter().chain(psi_tau).chain(lambda).copied(),
        ))
    }

    pub fn lambda<'a>(&self, psi: &'a DVector<f64>) -> &'a [f64] {
        &psi.as_slice()[self.lambda_range()]
    }

    /// Splits `theta_j` into `(beta_j, lambda, arma_j)`.
    pub fn series_params(&self, j: usize, psi: &DVector<f64>) -> (Vec<f64>, Vec<f64>, ArmaParams) {
        let map = &self.maps[j];
        let theta = map.theta(psi);
        let b = self.constraints.fixed_count();
        let sl = self.l_structure.len();
        let beta = theta.as_slice()[..b].to_vec();
        let lambda = theta.as_slice()[b..b + sl].to_vec();
        let arma = ArmaParams::from_slice(&theta.as_slice()[b + sl..], map.p, map.q);
        (beta, lambda, arma)
    }

    /// Checks that the panel matches the model dimensions and family support.
    pub fn validate(&self, data: &PanelData) -> Result<()> {
        if data.len() != self.series_count() {
            return Err(Error::Spec(format!(
                "panel has {} series but the model describes {}",
                data.len(),
                self.series_count()
            )));
        }
        let b = self.constraints.fixed_count();
        let d = self.random_dim();
        for (j, s) in data.series.iter().enumerate() {
            let check = || -> Result<()> {
                let n = s.len();
                if n == 0 {
                    return Err(Error::Data("series has no observations".into()));
                }
                if s.m.len() != n || s.x.nrows() != n || s.r.nrows() != n {
                    return Err(Error::Contract("y, m, X and R lengths differ".into()));
                }
                if s.x.ncols() != b || s.r.ncols() != d {
                    return Err(Error::Contract(format!(
                        "X is n x {} and R is n x {}, expected n x {b} and n x {d}",
                        s.x.ncols(),
                        s.r.ncols()
                    )));
                }
                if s.x.iter().chain(s.r.iter()).any(|v| !v.is_finite()) {
                    return Err(Error::Data("non-finite covariate value".into()));
                }
                for t in 0..n {
                    self.family
                        .check_support(s.y[t], s.m[t])
                        .map_err(|e| Error::Data(format!("t = {}: {e}", t + 1)))?;
                }
                Ok(())
            };
            check().map_err(|e| e.in_series(j, &s.id))?;
        }
        Ok(())
    }
}
