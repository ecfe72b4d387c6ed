//! Long-format CSV input and report output.
//!
//! Input has one row per `(series, time)`, with each series in one
//! contiguous block and times running `1, 2, ..., n_j`. Numbers are written
//! with 17 significant digits.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::benchmark::BenchRow;
use crate::config::ModelConfig;
use crate::design::LagBasis;
use crate::error::{Error, Result};
use crate::fit::{FitResult, PosteriorMean, TraceRow};
use crate::model::{ModelSpec, PanelData, SeriesData};
use crate::sim::SeriesLatents;

/// Formats a number with 17 significant digits.
pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

fn data_err(line: u64, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("line {line}: {msg}"))
}

fn parse_count(s: &str, what: &str, line: u64) -> Result<u64> {
    let t = s.trim();
    if let Ok(v) = t.parse::<u64>() {
        return Ok(v);
    }
    match t.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.fract() == 0.0 && v <= u64::MAX as f64 => Ok(v as u64),
        _ => Err(data_err(line, format!("{what} '{s}' is not a nonnegative integer"))),
    }
}

/// Reads a panel and builds its model from a configuration.
pub fn read_panel<R: std::io::Read>(reader: R, cfg: &ModelConfig) -> Result<(PanelData, ModelSpec)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("column '{name}' not found in header")))
    };
    let c_series = find(&cfg.columns.series)?;
    let c_time = find(&cfg.columns.time)?;
    let c_y = find(&cfg.columns.y)?;
    let c_m = cfg.columns.m.as_deref().map(find).transpose()?;
    let inputs = cfg.input_columns();
    let c_inputs: Vec<usize> = inputs.iter().map(|n| find(n)).collect::<Result<_>>()?;

    struct Block {
        id: String,
        y: Vec<u64>,
        m: Vec<u64>,
        cols: Vec<Vec<f64>>,
    }
    let mut blocks: Vec<Block> = Vec::new();
    let mut seen: HashMap<String, u64> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = rec.get(c_series).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(data_err(line, "empty series identifier"));
        }
        let t = parse_count(rec.get(c_time).unwrap_or(""), "time", line)?;
        let new_block = blocks.last().is_none_or(|b| b.id != id);
        if new_block {
            if let Some(first) = seen.get(&id) {
                return Err(data_err(
                    line,
                    format!("series '{id}' resumes after another series (first block starts at line {first}); sort by series then time"),
                ));
            }
            seen.insert(id.clone(), line);
            blocks.push(Block { id: id.clone(), y: Vec::new(), m: Vec::new(), cols: vec![Vec::new(); inputs.len()] });
        }
        let block = blocks.last_mut().unwrap();
        let expected = block.y.len() as u64 + 1;
        if t != expected {
            return Err(data_err(
                line,
                format!("series '{id}' has time {t} where {expected} was expected (times must run 1..n without gaps or repeats)"),
            ));
        }
        let y = parse_count(rec.get(c_y).unwrap_or(""), "response", line)?;
        let m = match c_m {
            Some(c) => parse_count(rec.get(c).unwrap_or(""), "trial count", line)?,
            None => 1,
        };
        if m == 0 {
            return Err(data_err(line, "trial count must be at least 1"));
        }
        cfg.family.check_support(y, m).map_err(|e| data_err(line, e))?;
        for (k, &c) in c_inputs.iter().enumerate() {
            let raw = rec.get(c).unwrap_or("");
            let v: f64 = raw
                .trim()
                .parse()
                .map_err(|_| data_err(line, format!("covariate '{}' value '{raw}' is not a number", inputs[k])))?;
            if !v.is_finite() {
                return Err(data_err(line, format!("covariate '{}' is not finite", inputs[k])));
            }
            block.cols[k].push(v);
        }
        block.y.push(y);
        block.m.push(m);
    }
    if blocks.is_empty() {
        return Err(Error::Data("no data rows".into()));
    }
    let mut series = Vec::with_capacity(blocks.len());
    for b in blocks {
        let n = b.y.len();
        let cols: HashMap<String, Vec<f64>> = inputs.iter().cloned().zip(b.cols).collect();
        let (x, r) = cfg.design(&cols, n)?;
        series.push(SeriesData { id: b.id, y: b.y, m: b.m, x, r });
    }
    let ids: Vec<String> = series.iter().map(|s| s.id.clone()).collect();
    let spec = cfg.build_spec(&ids)?;
    let data = PanelData::new(series);
    spec.validate(&data)?;
    Ok((data, spec))
}

pub fn read_panel_file(path: &Path, cfg: &ModelConfig) -> Result<(PanelData, ModelSpec)> {
    let f = File::open(path).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    read_panel(f, cfg)
}

/// Reads a parameter vector from a CSV with `parameter` and `estimate` columns.
pub fn read_params(path: &Path, spec: &ModelSpec) -> Result<DVector<f64>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let pos = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("{}: column '{name}' not found", path.display())))
    };
    let (cp, ce) = (pos("parameter")?, pos("estimate")?);
    let mut values: HashMap<String, f64> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let name = rec.get(cp).unwrap_or("").to_string();
        let v: f64 = rec
            .get(ce)
            .unwrap_or("")
            .parse()
            .map_err(|_| data_err(line, format!("estimate for '{name}' is not a number")))?;
        if values.insert(name.clone(), v).is_some() {
            return Err(data_err(line, format!("parameter '{name}' repeated")));
        }
    }
    let names = spec.param_names();
    for k in values.keys() {
        if !names.contains(k) {
            return Err(Error::Data(format!("{}: unknown parameter '{k}'", path.display())));
        }
    }
    let v = names
        .iter()
        .map(|n| values.get(n).copied().ok_or_else(|| Error::Data(format!("{}: missing parameter '{n}'", path.display()))))
        .collect::<Result<Vec<_>>>()?;
    Ok(DVector::from_vec(v))
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    Ok(csv::Writer::from_path(path)?)
}

/// `component,parameter,estimate,se`.
pub fn write_estimates(path: &Path, fit: &FitResult) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["component", "parameter", "estimate", "se"])?;
    for i in 0..fit.psi.len() {
        w.write_record([fit.components[i].name(), &fit.names[i], &num(fit.psi[i]), &num(fit.se[i])])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_matrix(path: &Path, names: &[String], m: &DMatrix<f64>) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["parameter".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (i, name) in names.iter().enumerate() {
        let mut row = vec![name.clone()];
        row.extend((0..m.ncols()).map(|j| num(m[(i, j)])));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Deterministic columns of the iteration trace.
pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["stage", "q", "iteration", "loglik", "grad_norm", "step_norm", "halvings", "ridge"])?;
    for r in trace {
        w.write_record([
            r.stage.to_string(),
            r.q.to_string(),
            r.iteration.to_string(),
            num(r.loglik),
            num(r.grad_norm),
            num(r.step_norm),
            r.halvings.to_string(),
            num(r.ridge),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Wall time per iteration, kept apart from the trace so reports stay reproducible.
pub fn write_timing(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["stage", "q", "iteration", "seconds", "minutes"])?;
    for r in trace {
        w.write_record([r.stage.to_string(), r.q.to_string(), r.iteration.to_string(), num(r.seconds), num(r.seconds / 60.0)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_posterior(path: &Path, random_names: &[String], posterior: &[PosteriorMean]) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["series".to_string()];
    header.extend(random_names.iter().map(|n| format!("zeta_{n}")));
    header.extend(random_names.iter().map(|n| format!("u_{n}")));
    w.write_record(&header)?;
    for p in posterior {
        let mut row = vec![p.id.clone()];
        row.extend(p.zeta_mean.iter().map(|v| num(*v)));
        row.extend(p.u_hat.iter().map(|v| num(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Basis matrix `lag,h1..hK`.
pub fn write_basis(path: &Path, basis: &LagBasis) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["lag".to_string()];
    header.extend((1..=basis.k()).map(|k| format!("h{k}")));
    w.write_record(&header)?;
    for l in 0..basis.lags() {
        let mut row = vec![(l + 1).to_string()];
        row.extend(basis.h.row(l).iter().map(|v| num(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Implied lag weights per series: fixed part `H beta_j` and posterior part `H (beta_j + U_hat_j)`.
pub fn write_transfer(
    path: &Path,
    cfg: &ModelConfig,
    spec: &ModelSpec,
    psi: &DVector<f64>,
    posterior: &[PosteriorMean],
) -> Result<()> {
    let Some(basis) = cfg.lag_basis()? else {
        return Ok(());
    };
    let lag_names = cfg.lag_names();
    let fixed_idx: Vec<usize> = lag_names
        .iter()
        .map(|n| spec.fixed_names.iter().position(|f| f == n).expect("lag columns are fixed effects"))
        .collect();
    let random_idx: Vec<Option<usize>> =
        lag_names.iter().map(|n| spec.random_names.iter().position(|f| f == n)).collect();
    let mut w = writer(path)?;
    w.write_record(["series", "lag", "omega_fixed", "omega_posterior"])?;
    for (j, p) in posterior.iter().enumerate() {
        let (beta, _, _) = spec.series_params(j, psi);
        let fixed: Vec<f64> = fixed_idx.iter().map(|&k| beta[k]).collect();
        let post: Vec<f64> = fixed
            .iter()
            .zip(&random_idx)
            .map(|(b, r)| b + r.map_or(0.0, |a| p.u_hat[a]))
            .collect();
        let of = crate::design::implied_lag_coefs(&fixed, &basis)?;
        let op = crate::design::implied_lag_coefs(&post, &basis)?;
        for l in 0..basis.lags() {
            w.write_record([p.id.clone(), (l + 1).to_string(), num(of[l]), num(op[l])])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_gradient(path: &Path, names: &[String], psi: &DVector<f64>, grad: &DVector<f64>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["parameter", "estimate", "gradient"])?;
    for (i, n) in names.iter().enumerate() {
        w.write_record([n.clone(), num(psi[i]), num(grad[i])])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_benchmark(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "q",
        "grid_points",
        "seconds",
        "minutes",
        "loglik",
        "param_change_pct",
        "se_change_pct",
        "integrals",
        "max_inner_iterations",
    ])?;
    for r in rows {
        w.write_record([
            r.q.to_string(),
            r.grid_points.to_string(),
            num(r.seconds),
            num(r.minutes()),
            num(r.loglik),
            num(r.param_change_pct),
            num(r.se_change_pct),
            r.integrals.to_string(),
            r.max_inner_iterations.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Long-format panel with the configured column names.
pub fn write_panel(path: &Path, cfg: &ModelConfig, data: &PanelData, inputs: &[(String, Vec<Vec<f64>>)]) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec![cfg.columns.series.clone(), cfg.columns.time.clone(), cfg.columns.y.clone()];
    if let Some(m) = &cfg.columns.m {
        header.push(m.clone());
    }
    header.extend(inputs.iter().map(|(n, _)| n.clone()));
    w.write_record(&header)?;
    for (j, s) in data.series.iter().enumerate() {
        for t in 0..s.len() {
            let mut row = vec![s.id.clone(), (t + 1).to_string(), s.y[t].to_string()];
            if cfg.columns.m.is_some() {
                row.push(s.m[t].to_string());
            }
            row.extend(inputs.iter().map(|(_, cols)| num(cols[j][t])));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `series,time,w,alpha,e` for every simulated observation.
pub fn write_latents(path: &Path, data: &PanelData, latents: &[SeriesLatents]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["series", "time", "w", "alpha", "e"])?;
    for (s, l) in data.series.iter().zip(latents) {
        for t in 0..s.len() {
            w.write_record([s.id.clone(), (t + 1).to_string(), num(l.w[t]), num(l.alpha[t]), num(l.e[t])])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Simulated random effects: `series,zeta_*,u_*`.
pub fn write_random_effects(path: &Path, random_names: &[String], data: &PanelData, latents: &[SeriesLatents]) -> Result<()> {
    let posterior: Vec<PosteriorMean> = data
        .series
        .iter()
        .zip(latents)
        .map(|(s, l)| PosteriorMean { id: s.id.clone(), zeta_mean: l.zeta.clone(), u_hat: l.u.clone() })
        .collect();
    write_posterior(path, random_names, &posterior)
}

/// Writes a short plain-text summary.
pub fn write_summary(path: &Path, fit: &FitResult) -> Result<()> {
    let mut f = File::create(path)?;
    writeln!(f, "loglik {}", num(fit.loglik))?;
    writeln!(f, "converged {}", fit.converged)?;
    writeln!(f, "iterations {}", fit.iterations)?;
    writeln!(f, "q {}", fit.q)?;
    for d in &fit.diagnostics {
        writeln!(f, "diagnostic {d}")?;
    }
    Ok(())
}
