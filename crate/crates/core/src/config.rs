//! Model configuration files.
//!
//! Configurations are TOML documents with `version = 1`. Unknown keys are
//! rejected. The same document drives fitting and, with its `[simulation]`
//! and `[truth]` tables, simulation:
//!
//! ```toml
//! version = 1
//! family = "binary"
//!
//! [columns]
//! series = "id"
//! time = "t"
//! y = "y"
//!
//! [[fixed_effects]]
//! name = "intercept"
//! sharing = "common"
//!
//! [[serial]]
//! p = 1
//!
//! [random_effects]
//! covariates = ["intercept"]
//! ```

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use nalgebra::DMatrix;
use serde::Deserialize;

use crate::design::{basis_matrix, lag_covariates, LagBasis};
use crate::error::{Error, Result};
use crate::expfam::Family;
use crate::fit::FitOptions;
use crate::marginal::InnerOptions;
use crate::model::{ConstraintMap, ModelSpec, SerialGroup};
use crate::ranef::LStructure;
use crate::sim::CovariateGen;

pub const SCHEMA_VERSION: u32 = 1;

/// Covariate name that denotes the constant column.
pub const INTERCEPT: &str = "intercept";

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Columns {
    pub series: String,
    pub time: String,
    pub y: String,
    /// Trial counts; required for binomial responses.
    pub m: Option<String>,
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "lowercase")]
pub enum Sharing {
    Common,
    #[default]
    Individual,
    Groups,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FixedEffect {
    pub name: String,
    #[serde(default)]
    pub sharing: Sharing,
    /// Group label to member series, for `sharing = "groups"`.
    #[serde(default)]
    pub groups: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SerialConfig {
    #[serde(default)]
    pub label: String,
    #[serde(default)]
    pub p: usize,
    #[serde(default)]
    pub q: usize,
    /// Member series; at most one group may omit this and take the rest.
    pub members: Option<Vec<String>>,
    #[serde(default = "default_true")]
    pub shared: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RandomEffects {
    pub covariates: Vec<String>,
    /// Free below-diagonal entries of `L` as one-based `(row, col)` pairs.
    /// Omitted means the full lower triangle; empty means diagonal.
    pub free: Option<Vec<(usize, usize)>>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LagBasisConfig {
    pub input: String,
    pub k: usize,
    pub lags: usize,
    #[serde(default = "common")]
    pub sharing: Sharing,
}

fn common() -> Sharing {
    Sharing::Common
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct QuadratureConfig {
    /// `[[Q, max_iterations], ...]`.
    pub schedule: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub grad_tol: Option<f64>,
    pub param_tol: Option<f64>,
    pub max_halvings: Option<usize>,
    pub ridge: Option<f64>,
    pub inner_tol: Option<f64>,
    pub inner_max_iter: Option<usize>,
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum CovariateKind {
    Constant,
    WhiteNoise,
    Values,
}

/// Generator for one simulated covariate: `constant` uses `value`,
/// `white_noise` uses `mean` and `sd` (defaults 0 and 1), `values` uses `values`.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SimCovariate {
    pub name: String,
    pub kind: CovariateKind,
    pub value: Option<f64>,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub values: Option<Vec<f64>>,
}

impl SimCovariate {
    fn generator(&self) -> Result<CovariateGen> {
        let stray = |ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("covariate '{}' has keys that do not apply to its kind", self.name)))
            }
        };
        match self.kind {
            CovariateKind::Constant => {
                stray(self.mean.is_none() && self.sd.is_none() && self.values.is_none())?;
                let v = self
                    .value
                    .ok_or_else(|| Error::Config(format!("constant covariate '{}' needs a value", self.name)))?;
                Ok(CovariateGen::Constant(v))
            }
            CovariateKind::WhiteNoise => {
                stray(self.value.is_none() && self.values.is_none())?;
                Ok(CovariateGen::WhiteNoise { mean: self.mean.unwrap_or(0.0), sd: self.sd.unwrap_or(1.0) })
            }
            CovariateKind::Values => {
                stray(self.value.is_none() && self.mean.is_none() && self.sd.is_none())?;
                let v = self
                    .values
                    .clone()
                    .ok_or_else(|| Error::Config(format!("covariate '{}' needs values", self.name)))?;
                Ok(CovariateGen::Values(v))
            }
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub series: usize,
    pub length: usize,
    #[serde(default = "one")]
    pub trials: u64,
    #[serde(default)]
    pub covariates: Vec<SimCovariate>,
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub version: u32,
    pub family: Family,
    pub columns: Columns,
    pub fixed_effects: Vec<FixedEffect>,
    #[serde(default)]
    pub serial: Vec<SerialConfig>,
    pub random_effects: Option<RandomEffects>,
    pub lag_basis: Option<LagBasisConfig>,
    pub quadrature: Option<QuadratureConfig>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub seed: u64,
    pub simulation: Option<SimulationConfig>,
    /// True parameter values by name, for simulation.
    pub truth: Option<BTreeMap<String, f64>>,
}

impl ModelConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    fn check(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {SCHEMA_VERSION})",
                self.version
            )));
        }
        if self.family.uses_trials() && self.columns.m.is_none() && self.simulation.is_none() {
            return Err(Error::Config("binomial responses need a trial-count column (columns.m)".into()));
        }
        let names = self.fixed_names();
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Config(format!("fixed effect '{n}' listed twice")));
            }
        }
        for fe in &self.fixed_effects {
            if fe.sharing != Sharing::Groups && !fe.groups.is_empty() {
                return Err(Error::Config(format!("fixed effect '{}' has groups but sharing is not \"groups\"", fe.name)));
            }
        }
        if let Some(re) = &self.random_effects {
            for (i, n) in re.covariates.iter().enumerate() {
                if re.covariates[..i].contains(n) {
                    return Err(Error::Config(format!("random effect '{n}' listed twice")));
                }
            }
        }
        if self.serial.iter().filter(|s| s.members.is_none()).count() > 1 {
            return Err(Error::Config("at most one serial group may omit its members".into()));
        }
        self.fit_options()?;
        if let Some(lb) = &self.lag_basis {
            basis_matrix(lb.k, lb.lags)?;
        }
        Ok(())
    }

    /// Names of generated lag columns, `{input}_h{k}`.
    pub fn lag_names(&self) -> Vec<String> {
        match &self.lag_basis {
            Some(lb) => (1..=lb.k).map(|k| format!("{}_h{k}", lb.input)).collect(),
            None => Vec::new(),
        }
    }

    /// Fixed covariates: the listed effects followed by any unlisted lag columns.
    pub fn fixed_effects_all(&self) -> Vec<FixedEffect> {
        let mut out = self.fixed_effects.clone();
        if let Some(lb) = &self.lag_basis {
            for name in self.lag_names() {
                if !out.iter().any(|f| f.name == name) {
                    out.push(FixedEffect { name, sharing: lb.sharing, groups: BTreeMap::new() });
                }
            }
        }
        out
    }

    pub fn fixed_names(&self) -> Vec<String> {
        self.fixed_effects_all().into_iter().map(|f| f.name).collect()
    }

    pub fn random_names(&self) -> Vec<String> {
        self.random_effects.as_ref().map_or_else(Vec::new, |r| r.covariates.clone())
    }

    /// Data columns the design needs, excluding the intercept and generated columns.
    pub fn input_columns(&self) -> Vec<String> {
        let generated = self.lag_names();
        let mut out: Vec<String> = Vec::new();
        let wanted = self
            .fixed_names()
            .into_iter()
            .chain(self.random_names())
            .chain(self.lag_basis.as_ref().map(|l| l.input.clone()));
        for name in wanted {
            if name != INTERCEPT && !generated.contains(&name) && !out.contains(&name) {
                out.push(name);
            }
        }
        out
    }

    pub fn l_structure(&self) -> Result<LStructure> {
        let d = self.random_names().len();
        match self.random_effects.as_ref().and_then(|r| r.free.as_ref()) {
            None => Ok(LStructure::full(d)),
            Some(pairs) => {
                let mut zero_based = Vec::with_capacity(pairs.len());
                for &(r, c) in pairs {
                    if r == 0 || c == 0 {
                        return Err(Error::Config(format!("L entries are one-based; got ({r}, {c})")));
                    }
                    zero_based.push((r - 1, c - 1));
                }
                LStructure::from_free(d, &zero_based)
            }
        }
    }

    pub fn fit_options(&self) -> Result<FitOptions> {
        let mut opts = FitOptions::default();
        if let Some(q) = &self.quadrature {
            opts.q_schedule = q.schedule.clone();
        }
        let o = &self.optimizer;
        if let Some(v) = o.grad_tol {
            opts.grad_tol = v;
        }
        if let Some(v) = o.param_tol {
            opts.param_tol = v;
        }
        if let Some(v) = o.max_halvings {
            opts.max_halvings = v;
        }
        if let Some(v) = o.ridge {
            opts.ridge = v;
        }
        opts.validate()?;
        Ok(opts)
    }

    pub fn inner_options(&self) -> InnerOptions {
        let mut inner = InnerOptions::default();
        if let Some(v) = self.optimizer.inner_tol {
            inner.tol = v;
        }
        if let Some(v) = self.optimizer.inner_max_iter {
            inner.max_iter = v;
        }
        inner
    }

    pub fn lag_basis(&self) -> Result<Option<LagBasis>> {
        self.lag_basis.as_ref().map(|lb| basis_matrix(lb.k, lb.lags)).transpose()
    }

    /// Constraint maps and random-effect structure for the given series.
    pub fn build_spec(&self, ids: &[String]) -> Result<ModelSpec> {
        let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(j, id)| (id.as_str(), j)).collect();
        let lookup = |id: &str, what: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| Error::Config(format!("{what} refers to unknown series '{id}'")))
        };

        let fixed = self.fixed_effects_all();
        let mut labels = Vec::with_capacity(fixed.len());
        for fe in &fixed {
            let row = match fe.sharing {
                Sharing::Common => vec![String::new(); ids.len()],
                Sharing::Individual => ids.to_vec(),
                Sharing::Groups => {
                    let mut row: Vec<Option<String>> = vec![None; ids.len()];
                    for (label, members) in &fe.groups {
                        for id in members {
                            let j = lookup(id, &format!("fixed effect '{}'", fe.name))?;
                            if row[j].is_some() {
                                return Err(Error::Config(format!(
                                    "series '{id}' appears in two groups of fixed effect '{}'",
                                    fe.name
                                )));
                            }
                            row[j] = Some(label.clone());
                        }
                    }
                    row.into_iter()
                        .enumerate()
                        .map(|(j, l)| {
                            l.ok_or_else(|| {
                                Error::Config(format!("series '{}' has no group for fixed effect '{}'", ids[j], fe.name))
                            })
                        })
                        .collect::<Result<_>>()?
                }
            };
            labels.push(row);
        }

        let serial_cfg = if self.serial.is_empty() {
            vec![SerialConfig { label: String::new(), p: 0, q: 0, members: None, shared: true }]
        } else {
            self.serial.clone()
        };
        let mut taken = vec![false; ids.len()];
        let mut groups = Vec::with_capacity(serial_cfg.len());
        for g in &serial_cfg {
            let mut members = Vec::new();
            if let Some(list) = &g.members {
                for id in list {
                    let j = lookup(id, &format!("serial group '{}'", g.label))?;
                    if taken[j] {
                        return Err(Error::Config(format!("series '{id}' belongs to more than one serial group")));
                    }
                    taken[j] = true;
                    members.push(j);
                }
            }
            groups.push(SerialGroup { label: g.label.clone(), p: g.p, q: g.q, members, shared: g.shared });
        }
        if let Some(pos) = serial_cfg.iter().position(|g| g.members.is_none()) {
            groups[pos].members = (0..ids.len()).filter(|&j| !taken[j]).collect();
        }
        let constraints = ConstraintMap::from_groups(ids, &self.fixed_names(), &labels, &groups)?;
        ModelSpec::new(self.family, self.fixed_names(), self.random_names(), constraints, self.l_structure()?)
    }

    /// Design matrices `(X, R)` of one series from its named input columns.
    pub fn design(&self, columns: &HashMap<String, Vec<f64>>, n: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let mut all: HashMap<String, Vec<f64>> = HashMap::new();
        if let (Some(lb), Some(basis)) = (&self.lag_basis, self.lag_basis()?) {
            let input = columns
                .get(&lb.input)
                .ok_or_else(|| Error::Data(format!("lag input column '{}' missing", lb.input)))?;
            let lagged = lag_covariates(input, &basis);
            for (k, name) in self.lag_names().into_iter().enumerate() {
                all.insert(name, lagged.column(k).iter().copied().collect());
            }
        }
        let get = |name: &str| -> Result<Vec<f64>> {
            if name == INTERCEPT {
                return Ok(vec![1.0; n]);
            }
            all.get(name)
                .or_else(|| columns.get(name))
                .cloned()
                .ok_or_else(|| Error::Data(format!("covariate column '{name}' missing")))
        };
        let fixed = self.fixed_names();
        let random = self.random_names();
        let mut x = DMatrix::zeros(n, fixed.len());
        for (c, name) in fixed.iter().enumerate() {
            x.column_mut(c).copy_from_slice(&get(name)?);
        }
        let mut r = DMatrix::zeros(n, random.len());
        for (c, name) in random.iter().enumerate() {
            r.column_mut(c).copy_from_slice(&get(name)?);
        }
        Ok((x, r))
    }

    /// Series identifiers used for simulated panels: `s01`, `s02`, ...
    pub fn simulated_ids(&self) -> Result<Vec<String>> {
        let sim = self.simulation.as_ref().ok_or_else(|| Error::Config("missing [simulation] table".into()))?;
        let width = sim.series.to_string().len();
        Ok((1..=sim.series).map(|j| format!("s{j:0width$}")).collect())
    }

    /// Covariate generators by name, for simulation.
    pub fn covariate_generators(&self) -> Result<Vec<(String, CovariateGen)>> {
        let sim = self.simulation.as_ref().ok_or_else(|| Error::Config("missing [simulation] table".into()))?;
        let mut out = Vec::new();
        for c in &sim.covariates {
            out.push((c.name.clone(), c.generator()?));
        }
        for name in self.input_columns() {
            if !out.iter().any(|(n, _)| *n == name) {
                return Err(Error::Config(format!("simulation has no generator for covariate '{name}'")));
            }
        }
        Ok(out)
    }

    /// Parameter vector from the `[truth]` table, which must name every parameter.
    pub fn truth_vector(&self, spec: &ModelSpec) -> Result<nalgebra::DVector<f64>> {
        let truth = self.truth.as_ref().ok_or_else(|| Error::Config("missing [truth] table".into()))?;
        let names = spec.param_names();
        for key in truth.keys() {
            if !names.contains(key) {
                return Err(Error::Config(format!("[truth] names unknown parameter '{key}' (known: {})", names.join(", "))));
            }
        }
        let values = names
            .iter()
            .map(|n| truth.get(n).copied().ok_or_else(|| Error::Config(format!("[truth] lacks parameter '{n}'"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(nalgebra::DVector::from_vec(values))
    }
}
